#include <benchmark/benchmark.h>

#include "boundless/autodiff.hpp"
#include "boundless/bdas.hpp"
#include "boundless/intervene.hpp"
#include "boundless/random.hpp"

namespace bdas = boundless::bdas;
namespace iv = boundless::intervene;
namespace net = boundless::net;
namespace causal = boundless::causal;
using boundless::num::Tensor;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  boundless::Rng rng(seed);
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor(n, n, 1);
  const Tensor b = random_tensor(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(boundless::num::matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_Cayley(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  iv::RotationParams p = iv::RotationParams::identity(d);
  boundless::Rng rng(3);
  for (double& v : p.skew) v = rng.uniform(-0.5, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(iv::materialize_rotation(p));
}
BENCHMARK(BM_Cayley)->Arg(16)->Arg(64);

void BM_CayleyBackward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const Tensor skew = random_tensor(1, d * (d - 1) / 2, 4);
  for (auto _ : state) {
    boundless::num::Tape tape;
    auto leaf = tape.leaf(skew);
    tape.backward(boundless::num::sum(iv::cayley(leaf, d)));
    benchmark::DoNotOptimize(leaf.grad());
  }
}
BENCHMARK(BM_CayleyBackward)->Arg(16)->Arg(64);

// One optimizer-sized step of the alignment objective on a planted net.
void BM_SoftDiiStep(benchmark::State& state) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto n = net::build_planted_net(model, 16, 0);
  const auto examples = bdas::gen_counterfactual_dataset(model, 64, 1);
  const auto batch = bdas::prepare_batch(*n, {1, 0}, examples, 1);
  const Tensor skew = random_tensor(1, 16 * 15 / 2, 5);
  for (auto _ : state) {
    boundless::num::Tape tape;
    auto s = tape.leaf(skew);
    auto raw = tape.leaf(Tensor(1, 1, 0.0));
    auto loss = bdas::alignment_objective(tape, *n, batch, s, raw, 1.0);
    tape.backward(loss);
    benchmark::DoNotOptimize(s.grad());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 64));
}
BENCHMARK(BM_SoftDiiStep);

void BM_SeqNetForward(benchmark::State& state) {
  const net::SeqNet n({.layers = 4, .width = 64, .heads = 4, .mlp_ratio = 4}, 0);
  const auto batch = boundless::task::encode_all(boundless::task::gen_task_dataset(64, 2));
  for (auto _ : state) benchmark::DoNotOptimize(n.forward(batch));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 64));
}
BENCHMARK(BM_SeqNetForward);

}  // namespace

BENCHMARK_MAIN();
