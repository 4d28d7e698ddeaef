#include "mindloop/optim.hpp"

#include <cmath>

namespace mindloop {

Adam::Adam(NamedTensors params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.second.size(), 0.0);
    v_.emplace_back(p.second.size(), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].second;
    const auto g = p.grad();
    auto w = p.values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void set_trainable(const NamedTensors& params, bool on) {
  for (const auto& p : params) Tensor(p.second).set_requires_grad(on);
}

}  // namespace mindloop
