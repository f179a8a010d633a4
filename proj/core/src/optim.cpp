#include "boundless/optim.hpp"

#include <cmath>

#include "boundless/errors.hpp"

namespace boundless::num {

void Adam::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size()) throw DimensionError("Adam: params/grads count mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (g.size() != p.size() || m_[i].size() != p.size()) {
      throw DimensionError("Adam: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g[j];
      v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g[j] * g[j];
      p[j] -= opt_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + opt_.eps);
    }
  }
}

}  // namespace boundless::num
