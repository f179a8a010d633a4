#include "boundless/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <sstream>

#include "boundless/errors.hpp"

namespace boundless::num {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    std::ostringstream msg;
    msg << "tensor data length " << data_.size() << " does not match shape [" << rows_
        << ", " << cols_ << "]";
    throw DimensionError(msg.str());
  }
}

Tensor::Tensor(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw DimensionError("ragged initializer for tensor");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    t(i, i) = 1.0;
  }
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return {1, n, std::move(values)};
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(*this));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

Tensor Tensor::transposed() const {
  Tensor t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) {
      t(c, r) = (*this)(r, c);
    }
  }
  return t;
}

std::string shape_string(const Tensor& t) {
  std::ostringstream s;
  s << '[' << t.rows() << ", " << t.cols() << ']';
  return s.str();
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a) + " x " +
                         shape_string(b));
  }
  Tensor out(a.rows(), b.cols());
  if (out.size() == 0) {
    return out;
  }
  MutMap o(out.data().data(), out.rows(), out.cols());
  if (a.cols() == 0) {
    return out;
  }
  o.noalias() = ConstMap(a.data().data(), a.rows(), a.cols()) *
                ConstMap(b.data().data(), b.rows(), b.cols());
  require_finite(out, "matmul");
  return out;
}

Tensor matmul_transposed_b(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt inner dimensions disagree: " + shape_string(a) +
                         " x " + shape_string(b) + "^T");
  }
  Tensor out(a.rows(), b.rows());
  if (out.size() == 0 || a.cols() == 0) {
    return out;
  }
  MutMap o(out.data().data(), out.rows(), out.cols());
  o.noalias() = ConstMap(a.data().data(), a.rows(), a.cols()) *
                ConstMap(b.data().data(), b.rows(), b.cols()).transpose();
  require_finite(out, "matmul_bt");
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace boundless::num
