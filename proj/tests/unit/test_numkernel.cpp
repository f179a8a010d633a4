#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "boundless/autodiff.hpp"
#include "boundless/errors.hpp"
#include "boundless/optim.hpp"
#include "boundless/random.hpp"
#include "boundless/tensor.hpp"
#include "oracles.hpp"

namespace {

using boundless::Rng;
using boundless::num::Tape;
using boundless::num::Tensor;
using boundless::num::Var;

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-scale, scale);
  return t;
}

// Analytic gradient of f at x through the tape, and the central-difference
// gradient of the same function evaluated value-only.
double gradient_error(const std::function<Var(Tape&, Var)>& f, const Tensor& x) {
  Tape tape;
  Var leaf = tape.leaf(x);
  tape.backward(f(tape, leaf));
  const std::vector<double> analytic = leaf.grad().values();
  auto value = [&](const std::vector<double>& v) {
    Tape t;
    return f(t, t.constant(Tensor(x.rows(), x.cols(), v))).value().item();
  };
  return oracle::relative_error(analytic, oracle::central_gradient(value, x.values()));
}

}  // namespace

TEST(Tensor, RejectsMismatchedPayload) {
  EXPECT_THROW(Tensor(2, 3, std::vector<double>(5)), boundless::DimensionError);
  EXPECT_THROW((Tensor{{1.0, 2.0}, {3.0}}), boundless::DimensionError);
}

TEST(Tensor, MatmulMatchesNaiveOracleOnRandomShapes) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(9);
    const std::size_t k = 1 + rng.below(9);
    const std::size_t m = 1 + rng.below(9);
    const Tensor a = random_tensor(n, k, rng);
    const Tensor b = random_tensor(k, m, rng);
    const Tensor c = boundless::num::matmul(a, b);
    EXPECT_LT(oracle::max_abs(oracle::to_matrix(c), oracle::matmul(oracle::to_matrix(a), oracle::to_matrix(b))),
              1e-12);
    const Tensor bt = b.transposed();
    EXPECT_LT(boundless::num::max_abs_diff(boundless::num::matmul_transposed_b(a, bt), c), 1e-12);
  }
}

TEST(Tensor, MatmulRejectsInnerMismatch) {
  EXPECT_THROW(boundless::num::matmul(Tensor(2, 3), Tensor(2, 3)), boundless::DimensionError);
}

TEST(Tensor, MatmulReportsNonFinite) {
  Tensor a(1, 1, std::vector<double>{std::nan("")});
  EXPECT_THROW(boundless::num::matmul(a, Tensor(1, 1, 1.0)), boundless::NumericError);
}

TEST(Tensor, ItemNeedsScalar) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor(1, 2).item(), boundless::DimensionError);
}

TEST(Autodiff, TapeReplaysOnce) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(1.0));
  Var y = boundless::num::sum(x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), boundless::Error);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor::scalar(3.0));
  Var x = tape.leaf(Tensor::scalar(2.0));
  tape.backward(boundless::num::sum(boundless::num::mul(c, x)));
  EXPECT_DOUBLE_EQ(x.grad().item(), 3.0);
  EXPECT_FALSE(tape.requires_grad(c.id));
}

struct OpCase {
  const char* name;
  std::size_t rows;
  std::size_t cols;
  std::function<Var(Tape&, Var)> f;
};

class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  namespace nd = boundless::num;
  Rng rng(42);
  const Tensor w = random_tensor(4, 3, rng);
  const Tensor row = random_tensor(1, 3, rng);
  const Tensor col = random_tensor(4, 1, rng);
  const Tensor mix = random_tensor(4, 4, rng);
  const std::vector<std::size_t> targets{0, 1, 1, 0};
  const std::vector<std::size_t> gather{2, 0, 2};
  auto c = [](Tape& t, const Tensor& v) { return t.constant(v); };
  const std::vector<OpCase> cases = {
      {"matmul", 3, 4, [&](Tape& t, Var x) { return nd::sum(nd::matmul(x, c(t, w))); }},
      {"matmul_bt", 3, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::matmul_bt(x, c(t, w)), nd::matmul_bt(x, c(t, w)))); }},
      {"transpose", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::matmul(nd::transpose(x), c(t, w))); }},
      {"sigmoid", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::sigmoid(x), c(t, w))); }},
      {"softplus", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::softplus(x), c(t, w))); }},
      {"add_sub", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::sub(nd::add(x, x), c(t, w)), x)); }},
      {"affine", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::affine(x, -2.0, 0.5), x)); }},
      {"add_row", 1, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::add_row(c(t, w), x), c(t, w))); }},
      {"mul_row", 1, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul_row(c(t, w), nd::mul(x, x))); }},
      {"mul_col", 4, 1, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::mul_col(c(t, w), x), c(t, w))); }},
      {"sum_cols", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::sum_cols(nd::mul(x, x)), c(t, col))); }},
      {"sum_rows", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::sum_rows(nd::mul(x, x)), c(t, row))); }},
      {"slice_concat", 4, 3, [&](Tape& t, Var x) {
         const std::vector<Var> parts{nd::slice_cols(x, 2, 1), nd::slice_cols(x, 0, 2)};
         return nd::sum(nd::mul(nd::concat_cols(parts), c(t, w)));
       }},
      {"slice_rows", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::slice_rows(x, 1, 2), nd::slice_rows(c(t, w), 0, 2))); }},
      {"gather", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::gather_rows(x, gather), nd::slice_rows(c(t, w), 0, 3))); }},
      {"scatter", 2, 3, [&](Tape& t, Var x) {
         const std::vector<std::size_t> idx{3, 1};
         return nd::sum(nd::mul(nd::scatter_rows(w, x, idx), nd::add(c(t, w), c(t, w))));
       }},
      {"rms_norm", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::rms_norm_rows(x), c(t, w))); }},
      {"minimum", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::minimum(x, c(t, w))); }},
      {"abs", 4, 3, [&](Tape&, Var x) { return nd::sum(nd::mul(nd::abs(x), x)); }},
      {"relu", 4, 3, [&](Tape& t, Var x) { return nd::sum(nd::mul(nd::relu(x), c(t, w))); }},
      {"cross_entropy", 4, 2, [&](Tape&, Var x) { return nd::cross_entropy(x, targets); }},
      {"attention", 4, 4, [&](Tape& t, Var x) {
         Var q = nd::affine(x, 0.7, 0.1);
         Var k = nd::mul(x, x);
         return nd::sum(nd::mul(nd::causal_attention(q, k, x, 2, 2), c(t, mix)));
       }},
  };
  const OpCase& op = cases.at(static_cast<std::size_t>(GetParam()));
  Rng xr(7 + GetParam());
  Tensor x = random_tensor(op.rows, op.cols, xr);
  // Keep kinked ops away from their kinks.
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < 0.05) x[i] += 0.1;
  }
  if (std::string(op.name) == "minimum") {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(x[i] - w[i]) < 0.05) x[i] += 0.1;
    }
  }
  EXPECT_LT(gradient_error(op.f, x), 1e-6) << op.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 22));

TEST(Autodiff, CrossEntropyMatchesOracle) {
  const Tensor logits{{2.0, -1.0}, {0.5, 0.25}};
  const std::vector<std::size_t> targets{1, 0};
  Tape tape;
  const double got = boundless::num::cross_entropy(tape.constant(logits), targets).value().item();
  const double want = (oracle::cross_entropy({2.0, -1.0}, 1) + oracle::cross_entropy({0.5, 0.25}, 0)) / 2.0;
  EXPECT_NEAR(got, want, 1e-14);
}

TEST(Autodiff, CausalAttentionIgnoresFuture) {
  namespace nd = boundless::num;
  Rng rng(5);
  Tensor x = random_tensor(3, 4, rng);
  Tensor y = x;
  for (std::size_t c = 0; c < 4; ++c) y(2, c) += 1.0;
  Tape t;
  const Tensor a = nd::causal_attention(t.constant(x), t.constant(x), t.constant(x), 3, 2).value();
  const Tensor b = nd::causal_attention(t.constant(y), t.constant(y), t.constant(y), 3, 2).value();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(a(r, c), b(r, c));
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  boundless::num::Adam opt({.lr = 0.01});
  Tensor p{{1.0, -2.0, 0.0}};
  const Tensor g{{0.5, -3.0, 0.0}};
  opt.step({&p}, {&g});
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(p(0, 0), 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p(0, 1), -2.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_DOUBLE_EQ(p(0, 2), 0.0);
}

TEST(Adam, SecondStepMatchesHandComputedMoments) {
  boundless::num::Adam opt({.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8});
  Tensor p{{0.0}};
  const Tensor g1{{1.0}};
  const Tensor g2{{-2.0}};
  opt.step({&p}, {&g1});
  opt.step({&p}, {&g2});
  double m = 0.1 * 1.0;
  double v = 0.001 * 1.0;
  double want = -0.1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  m = 0.9 * m + 0.1 * -2.0;
  v = 0.999 * v + 0.001 * 4.0;
  want -= 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p(0, 0), want, 1e-12);
}
