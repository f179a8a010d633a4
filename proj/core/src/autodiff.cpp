#include "boundless/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "boundless/errors.hpp"

namespace boundless::num {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                         static_cast<Eigen::Index>(t.cols())}; }
MutMap view(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                 static_cast<Eigen::Index>(t.cols())}; }

Tape& tape_of(Var a) {
  if (a.tape == nullptr) {
    throw Error("operation on a detached Var");
  }
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) {
    throw Error("operands recorded on different tapes");
  }
  return tape_of(a);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Unary elementwise op: forward f, derivative df evaluated at the input value.
template <typename F, typename DF>
Var elementwise(Var x, F f, DF df, const char* name) {
  Tape& tape = tape_of(x);
  const Tensor& in = x.value();
  Tensor out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = f(in[i]);
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, df](Tape& t, std::size_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_accumulator(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * df(xv[i], y[i]);
    }
  }, name);
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node n;
  n.value = std::move(value);
  n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
  require_finite(value, op);
  bool needs = false;
  for (std::size_t i : inputs) {
    needs = needs || nodes_[i].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  n.inputs = std::move(inputs);
  if (needs) {
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) {
    // Untouched nodes have a zero gradient; materialize lazily.
    auto& mutable_node = const_cast<Node&>(n);
    mutable_node.grad = Tensor::zeros(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

Tensor& Tape::grad_accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    n.grad = Tensor::zeros(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::backward(Var scalar_output) {
  if (scalar_output.tape != this) {
    throw Error("backward on a Var from another tape");
  }
  if (consumed_) {
    throw Error("tape already replayed; record a fresh tape per evaluation");
  }
  if (value(scalar_output.id).size() != 1) {
    throw DimensionError("backward requires a scalar output, got " +
                         shape_string(value(scalar_output.id)));
  }
  consumed_ = true;
  grad_accumulator(scalar_output.id)[0] = 1.0;
  for (std::size_t i = scalar_output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) {
      n.backward(*this, i);
    }
  }
  for (Node& n : nodes_) {
    if (!n.grad.empty()) {
      require_finite(n.grad, "backward");
    }
  }
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      view(t.grad_accumulator(ai)).noalias() += view(g) * view(t.value(bi)).transpose();
    }
    if (t.requires_grad(bi)) {
      view(t.grad_accumulator(bi)).noalias() += view(t.value(ai)).transpose() * view(g);
    }
  }, "matmul");
}

Var matmul_bt(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  Tensor out = matmul_transposed_b(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      view(t.grad_accumulator(ai)).noalias() += view(g) * view(t.value(bi));
    }
    if (t.requires_grad(bi)) {
      view(t.grad_accumulator(bi)).noalias() += view(g).transpose() * view(t.value(ai));
    }
  }, "matmul_bt");
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().transposed();
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)) += view(t.grad(self)).transpose();
  }, "transpose");
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  view(out) += view(b.value());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    if (t.requires_grad(ai)) view(t.grad_accumulator(ai)) += view(t.grad(self));
    if (t.requires_grad(bi)) view(t.grad_accumulator(bi)) += view(t.grad(self));
  }, "add");
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  view(out) -= view(b.value());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    if (t.requires_grad(ai)) view(t.grad_accumulator(ai)) += view(t.grad(self));
    if (t.requires_grad(bi)) view(t.grad_accumulator(bi)) -= view(t.grad(self));
  }, "sub");
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  view(out).array() *= view(b.value()).array();
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai))
      view(t.grad_accumulator(ai)).array() += view(g).array() * view(t.value(bi)).array();
    if (t.requires_grad(bi))
      view(t.grad_accumulator(bi)).array() += view(g).array() * view(t.value(ai)).array();
  }, "mul");
}

Var affine(Var a, double alpha, double beta) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  view(out).array() = view(out).array() * alpha + beta;
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai, alpha](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)) += alpha * view(t.grad(self));
  }, "affine");
}

Var add_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row expects 1 x " + std::to_string(av.cols()) + " row, got " +
                         shape_string(rv));
  }
  Tensor out = av;
  view(out).rowwise() += view(rv).row(0);
  const std::size_t ai = a.id, ri = row.id;
  return tape.record(std::move(out), {ai, ri}, [ai, ri](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) view(t.grad_accumulator(ai)) += view(g);
    if (t.requires_grad(ri)) view(t.grad_accumulator(ri)).row(0) += view(g).colwise().sum();
  }, "add_row");
}

Var mul_row(Var a, Var row) {
  Tape& tape = tape_of(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("mul_row expects 1 x " + std::to_string(av.cols()) + " row, got " +
                         shape_string(rv));
  }
  Tensor out = av;
  view(out).array().rowwise() *= view(rv).array().row(0);
  const std::size_t ai = a.id, ri = row.id;
  return tape.record(std::move(out), {ai, ri}, [ai, ri](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      view(t.grad_accumulator(ai)).array() +=
          view(g).array().rowwise() * view(t.value(ri)).array().row(0);
    }
    if (t.requires_grad(ri)) {
      view(t.grad_accumulator(ri)).row(0) +=
          (view(g).array() * view(t.value(ai)).array()).matrix().colwise().sum();
    }
  }, "mul_row");
}

Var mul_col(Var a, Var s) {
  Tape& tape = tape_of(a, s);
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != av.rows()) {
    throw DimensionError("mul_col expects " + std::to_string(av.rows()) + " x 1 column, got " +
                         shape_string(sv));
  }
  Tensor out = av;
  view(out).array().colwise() *= view(sv).array().col(0);
  const std::size_t ai = a.id, si = s.id;
  return tape.record(std::move(out), {ai, si}, [ai, si](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      view(t.grad_accumulator(ai)).array() +=
          view(g).array().colwise() * view(t.value(si)).array().col(0);
    }
    if (t.requires_grad(si)) {
      view(t.grad_accumulator(si)).col(0) +=
          (view(g).array() * view(t.value(ai)).array()).matrix().rowwise().sum();
    }
  }, "mul_col");
}

Var sigmoid(Var x) {
  return elementwise(
      x, [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var softplus(Var x) {
  return elementwise(
      x, [](double v) { return stable_softplus(v); },
      [](double v, double) { return stable_sigmoid(v); }, "softplus");
}

Var relu(Var x) {
  return elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

Var abs(Var x) {
  return elementwise(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }, "abs");
}

Var minimum(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "minimum");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::min(av[i], bv[i]);
  }
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ai);
    const Tensor& y = t.value(bi);
    // Ties route the gradient to the first operand.
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_accumulator(ai);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] <= y[i]) ga[i] += g[i];
      }
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_accumulator(bi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > y[i]) gb[i] += g[i];
      }
    }
  }, "minimum");
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ai = a.id;
  return tape.record(Tensor::scalar(s), {ai}, [ai](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)).array() += t.grad(self)[0];
  }, "sum");
}

Var sum_cols(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows(), 1);
  view(out).col(0) = view(av).rowwise().sum();
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)).colwise() += view(t.grad(self)).col(0);
  }, "sum_cols");
}

Var sum_rows(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(1, av.cols());
  view(out).row(0) = view(av).colwise().sum();
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)).rowwise() += view(t.grad(self)).row(0);
  }, "sum_rows");
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (start + count > av.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " + shape_string(av));
  }
  Tensor out(av.rows(), count);
  view(out) = view(av).middleCols(static_cast<Eigen::Index>(start),
                                  static_cast<Eigen::Index>(count));
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai, start, count](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)).middleCols(static_cast<Eigen::Index>(start),
                                            static_cast<Eigen::Index>(count)) +=
        view(t.grad(self));
  }, "slice_cols");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  if (start + count > av.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " + shape_string(av));
  }
  Tensor out(count, av.cols());
  view(out) = view(av).middleRows(static_cast<Eigen::Index>(start),
                                  static_cast<Eigen::Index>(count));
  const std::size_t ai = a.id;
  return tape.record(std::move(out), {ai}, [ai, start, count](Tape& t, std::size_t self) {
    view(t.grad_accumulator(ai)).middleRows(static_cast<Eigen::Index>(start),
                                            static_cast<Eigen::Index>(count)) +=
        view(t.grad(self));
  }, "slice_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw DimensionError("concat_cols of zero parts");
  }
  Tape& tape = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols row mismatch");
    }
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.value().cols();
  }
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    view(out).middleCols(static_cast<Eigen::Index>(offsets[k]),
                         static_cast<Eigen::Index>(pv.cols())) = view(pv);
  }
  auto inputs = ids;
  return tape.record(std::move(out), std::move(inputs),
                     [ids, offsets](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gk = t.grad_accumulator(ids[k]);
      view(gk) += view(g).middleCols(static_cast<Eigen::Index>(offsets[k]),
                                     static_cast<Eigen::Index>(gk.cols()));
    }
  }, "concat_cols");
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(index.size(), av.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= av.rows()) {
      throw DimensionError("gather_rows index " + std::to_string(index[r]) +
                           " out of range for " + shape_string(av));
    }
    std::copy_n(av.row_span(index[r]).begin(), av.cols(), out.row_span(r).begin());
  }
  const std::size_t ai = a.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return tape.record(std::move(out), {ai}, [ai, idx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_accumulator(ai);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = ga.row_span(idx[r]);
      auto src = g.row_span(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  }, "gather_rows");
}

Var scatter_rows(const Tensor& base, Var rows, std::span<const std::size_t> index) {
  Tape& tape = tape_of(rows);
  const Tensor& rv = rows.value();
  if (rv.rows() != index.size() || rv.cols() != base.cols()) {
    throw DimensionError("scatter_rows shape mismatch: " + shape_string(rv) + " into " +
                         shape_string(base));
  }
  Tensor out = base;
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= base.rows()) {
      throw DimensionError("scatter_rows index out of range");
    }
    std::copy_n(rv.row_span(r).begin(), rv.cols(), out.row_span(index[r]).begin());
  }
  const std::size_t ri = rows.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return tape.record(std::move(out), {ri}, [ri, idx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gr = t.grad_accumulator(ri);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = gr.row_span(r);
      auto src = g.row_span(idx[r]);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  }, "scatter_rows");
}

Var rms_norm_rows(Var x, double eps) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor out(xv.rows(), n);
  std::vector<double> inv(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double ms = 0.0;
    for (double v : xv.row_span(r)) ms += v * v;
    ms /= static_cast<double>(n);
    inv[r] = 1.0 / std::sqrt(ms + eps);
    auto o = out.row_span(r);
    auto in = xv.row_span(r);
    for (std::size_t c = 0; c < n; ++c) o[c] = in[c] * inv[r];
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(out), {xi}, [xi, inv, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_accumulator(xi);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row_span(r);
      auto yr = y.row_span(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += gr[c] * yr[c];
      dot /= static_cast<double>(n);
      auto dst = gx.row_span(r);
      for (std::size_t c = 0; c < n; ++c) dst[c] += inv[r] * (gr[c] - yr[c] * dot);
    }
  }, "rms_norm_rows");
}

Var causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads) {
  Tape& tape = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_same_shape(qv, kv, "causal_attention");
  require_same_shape(qv, vv, "causal_attention");
  const std::size_t width = qv.cols();
  if (heads == 0 || width % heads != 0 || seq_len == 0 || qv.rows() % seq_len != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(width) +
                         " / heads " + std::to_string(heads) + " / seq_len " +
                         std::to_string(seq_len) + " incompatible with " + shape_string(qv));
  }
  const std::size_t batch = qv.rows() / seq_len;
  const std::size_t hd = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[(b*heads + h)*T*T + i*T + j]
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq_len * seq_len, 0.0);
  Tensor out(qv.rows(), width);
  std::vector<double> row(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const std::size_t qi = b * seq_len + i;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const std::size_t kj = b * seq_len + j;
          double s = 0.0;
          for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) s += qv(qi, c) * kv(kj, c);
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq_len + j] = row[j] / z;
          const std::size_t vj = b * seq_len + j;
          for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
            out(qi, c) += p[i * seq_len + j] * vv(vj, c);
          }
        }
      }
    }
  }
  const std::size_t qi_id = q.id, ki_id = k.id, vi_id = v.id;
  return tape.record(std::move(out), {qi_id, ki_id, vi_id},
                     [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& Q = t.value(qi_id);
    const Tensor& K = t.value(ki_id);
    const Tensor& V = t.value(vi_id);
    Tensor& gq = t.grad_accumulator(qi_id);
    Tensor& gk = t.grad_accumulator(ki_id);
    Tensor& gv = t.grad_accumulator(vi_id);
    std::vector<double> dp(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          const std::size_t qi = b * seq_len + i;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t vj = b * seq_len + j;
            double s = 0.0;
            for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
              s += g(qi, c) * V(vj, c);
              gv(vj, c) += p[i * seq_len + j] * g(qi, c);
            }
            dp[j] = s;
            dot += s * p[i * seq_len + j];
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = p[i * seq_len + j] * (dp[j] - dot) * scale;
            const std::size_t kj = b * seq_len + j;
            for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
              gq(qi, c) += ds * K(kj, c);
              gk(kj, c) += ds * Q(qi, c);
            }
          }
        }
      }
    }
  }, "causal_attention");
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Tape& tape = tape_of(logits);
  const Tensor& lv = logits.value();
  if (targets.size() != lv.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(lv));
  }
  for (std::size_t tgt : targets) {
    if (tgt >= lv.cols()) {
      throw LabelError("cross_entropy target index " + std::to_string(tgt) +
                       " out of range for " + std::to_string(lv.cols()) + " labels");
    }
  }
  require_finite(lv, "cross_entropy input");
  const std::size_t rows = lv.rows();
  Tensor probs(rows, lv.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = lv.row_span(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    loss += lse - in[targets[r]];
    auto p = probs.row_span(r);
    for (std::size_t c = 0; c < in.size(); ++c) p[c] = std::exp(in[c] - lse);
  }
  loss /= static_cast<double>(rows);
  const std::size_t li = logits.id;
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return tape.record(Tensor::scalar(loss), {li},
                     [li, tg, probs = std::move(probs)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(tg.size());
    Tensor& gl = t.grad_accumulator(li);
    for (std::size_t r = 0; r < tg.size(); ++r) {
      auto dst = gl.row_span(r);
      auto p = probs.row_span(r);
      for (std::size_t c = 0; c < dst.size(); ++c) {
        dst[c] += g * (p[c] - (c == tg[r] ? 1.0 : 0.0));
      }
    }
  }, "cross_entropy");
}

Var cross_entropy(Var logits, std::size_t target) {
  const std::size_t t[1] = {target};
  return cross_entropy(logits, std::span<const std::size_t>(t, 1));
}

GradCheckResult grad_check(const ScalarFn& f, const Tensor& params, double eps) {
  Tensor analytic;
  {
    Tape tape;
    Var p = tape.leaf(params);
    Var out = f(tape, p);
    tape.backward(out);
    analytic = tape.grad(p.id);
  }
  auto eval_at = [&](const Tensor& at) {
    Tape tape;
    Var p = tape.constant(at);
    const double v = f(tape, p).value().item();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite function value");
    }
    return v;
  };
  GradCheckResult result;
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + eps;
    const double up = eval_at(probe);
    probe[i] = params[i] - eps;
    const double down = eval_at(probe);
    probe[i] = params[i];
    const double central = (up - down) / (2.0 * eps);
    const double rel = std::abs(analytic[i] - central) / (std::abs(central) + 1e-12);
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

}  // namespace boundless::num
