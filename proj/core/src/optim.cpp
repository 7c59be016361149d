#include "pibnas/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pibnas {

Sgd::Sgd(std::vector<Tensor> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
}

void Sgd::step(Real lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto w = p.data();
    auto& v = velocity_[i];
    const bool has = p.has_grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const Real g = (has ? p.grad()[k] : 0.0) + cfg_.weight_decay * w[k];
      v[k] = cfg_.momentum * v[k] + g;
      w[k] -= lr * v[k];
    }
    quantize(w);
    quantize(v);
  }
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Tensor& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(t_));
  const Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto w = p.data();
    const bool has = p.has_grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const Real g = (has ? p.grad()[k] : 0.0) + cfg_.weight_decay * w[k];
      m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
      v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
      const Real mhat = m_[i][k] / bc1;
      const Real vhat = v_[i][k] / bc2;
      w[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    quantize(w);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

Real clip_grad_norm(std::span<Tensor> params, Real max_norm) {
  Real sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += g * g;
  }
  const Real norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Real s = max_norm / (norm + 1e-6);
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (Real& g : p.grad()) g *= s;
      quantize(p.grad());
    }
  }
  return norm;
}

Real cosine_lr(Real t, Real total, Real eta0, Real eta_min) {
  if (total <= 0.0) throw std::invalid_argument("cosine_lr: total epochs must be positive");
  if (t < 0.0 || t > total) throw std::invalid_argument("cosine_lr: t outside [0, T]");
  return eta_min + 0.5 * (eta0 - eta_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

}  // namespace pibnas
