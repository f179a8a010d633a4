#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "boundless/tensor.hpp"

namespace boundless::num {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Ordered record of primitive operations for reverse-mode accumulation.
///
/// A tape is single-threaded and single-use: build the graph, call
/// `backward` once, read leaf gradients.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; receives a gradient on backward.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Records an op result. `inputs` are the nodes it reads; `fn` pushes the
  /// node's gradient into them.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator of node `id`, allocated on first use.
  Tensor& grad_accumulator(std::size_t id);

  /// Seeds d(output)/d(output) = 1 and replays the tape in reverse.
  void backward(Var scalar_output);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Primitive ops. Every op checks its output for non-finite values.

Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_bt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// alpha * a + beta, elementwise.
Var affine(Var a, double alpha, double beta);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
/// Multiplies every row of a by the 1 x n row elementwise.
Var mul_row(Var a, Var row);
/// Scales row i of a by column vector s (rows x 1).
Var mul_col(Var a, Var s);

Var sigmoid(Var x);
Var softplus(Var x);
Var relu(Var x);
Var abs(Var x);
Var minimum(Var a, Var b);

Var sum(Var a);
/// rows x 1 column of row sums.
Var sum_cols(Var a);
/// 1 x cols row of column sums.
Var sum_rows(Var a);

Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> index);
/// Copy of `base` with rows `index[i]` replaced by row i of `rows`.
Var scatter_rows(const Tensor& base, Var rows, std::span<const std::size_t> index);

/// Row-wise x / sqrt(mean(x^2) + eps).
Var rms_norm_rows(Var x, double eps = 1e-5);

/// Multi-head causal self-attention over `batch` sequences of `seq_len`
/// rows each. q, k, v are (batch*seq_len) x width; width % heads == 0.
Var causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads);

/// Mean over rows of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
/// Single-row convenience form.
Var cross_entropy(Var logits, std::size_t target);

/// Result of a gradient check.
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Max over parameters of |analytic - central| / (|central| + 1e-12).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& params, double eps = 1e-5);

/// Softmax of a single row of logits; plain helper.
std::vector<double> softmax(std::span<const double> logits);

}  // namespace boundless::num
