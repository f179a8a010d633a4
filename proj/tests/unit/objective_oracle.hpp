#pragma once

#include <cmath>
#include <vector>

#include "boundless/autodiff.hpp"
#include "boundless/bdas.hpp"
#include "boundless/random.hpp"
#include "oracles.hpp"

namespace oracle {

namespace bdas = boundless::bdas;
namespace causal = boundless::causal;
namespace iv = boundless::intervene;
namespace net = boundless::net;
namespace task = boundless::task;

// Loss of the soft intervention evaluated without the tape.
inline double objective_oracle(const net::Network& n, const net::ActivationSite& site,
                               const std::vector<bdas::CounterfactualExample>& batch, const std::vector<double>& x,
                               std::size_t k, double beta) {
  const std::size_t d = n.width();
  const std::size_t np = d * (d - 1) / 2;
  const std::vector<double> skew(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(np));
  const auto r = oracle::cayley(skew, d);
  boundless::num::Tensor rot(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) rot(i, j) = r[i][j];
  }
  const double scale = (static_cast<double>(d) / (2.0 * static_cast<double>(k))) / std::log(2.0);
  std::vector<double> bounds{0.0};
  for (std::size_t j = 0; j < k; ++j) {
    bounds.push_back(std::min(bounds.back() + scale * oracle::softplus(x[np + j]), static_cast<double>(d)));
  }
  iv::MaskSet masks;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> m(d);
    for (std::size_t i = 0; i < d; ++i) m[i] = oracle::interval_mask(bounds[j], bounds[j + 1], beta, i);
    masks.masks.push_back(m);
  }
  std::vector<net::EncodedInput> base;
  iv::SlotSources sources(k);
  for (const auto& ex : batch) {
    base.push_back(task::encode(ex.base));
    // One shared source per example, matching the training batches.
    const task::TaskInstance* src = &ex.base;
    for (const auto& s : ex.sources) {
      if (s) src = &*s;
    }
    for (std::size_t j = 0; j < k; ++j) sources[j].push_back(task::encode(ex.sources[j] ? *src : ex.base));
  }
  const boundless::num::Tensor logits = iv::soft_dii(n, site, rot, masks, base, sources);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss += oracle::cross_entropy({logits(i, 0), logits(i, 1)}, boundless::label_index(batch[i].label));
  }
  return loss / static_cast<double>(batch.size());
}

struct GradientCheck {
  double relative_error = 0.0;
  double value_gap = 0.0;
};

inline GradientCheck objective_gradient_check(const net::Network& n, const net::ActivationSite& site,
                                              const causal::CausalModel& model, std::uint64_t seed) {
  const std::size_t d = n.width();
  const std::size_t k = model.alignable().size();
  const auto batch = bdas::gen_counterfactual_dataset(model, 24, seed);
  boundless::Rng rng(seed);
  std::vector<double> x(d * (d - 1) / 2 + k);
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  const double beta = 0.8;

  const auto prepared = bdas::prepare_batch(n, site, batch, k);
  boundless::num::Tape tape;
  auto skew = tape.leaf(boundless::num::Tensor(1, d * (d - 1) / 2, std::vector<double>(x.begin(), x.end() - static_cast<std::ptrdiff_t>(k))));
  auto raw = tape.leaf(boundless::num::Tensor(1, k, std::vector<double>(x.end() - static_cast<std::ptrdiff_t>(k), x.end())));
  const auto loss = bdas::alignment_objective(tape, n, prepared, skew, raw, beta);
  const double gap = std::abs(loss.value().item() - objective_oracle(n, site, batch, x, k, beta));
  tape.backward(loss);
  std::vector<double> analytic = skew.grad().values();
  for (double g : raw.grad().values()) analytic.push_back(g);
  const auto numeric = oracle::central_gradient(
      [&](const std::vector<double>& p) { return objective_oracle(n, site, batch, p, k, beta); }, x, 1e-6);
  return {oracle::relative_error(analytic, numeric), gap};
}

}  // namespace oracle
