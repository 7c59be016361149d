#pragma once

#include <stdexcept>
#include <vector>

#include "pibnas/tensor.hpp"

namespace pibnas {

/// A training or search loss became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SgdConfig {
  Real lr = 0.0025;
  Real momentum = 0.9;
  Real weight_decay = 3e-4;
};

/// SGD with momentum and coupled weight decay:
///   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdConfig cfg);

  /// Applies one update using each parameter's current gradient (missing
  /// gradients read as zero) at learning rate `lr`.
  void step(Real lr);
  void zero_grad();

  const SgdConfig& config() const { return cfg_; }
  const std::vector<std::vector<Real>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  SgdConfig cfg_;
  std::vector<std::vector<Real>> velocity_;
};

struct AdamConfig {
  Real lr = 3e-4;
  Real beta1 = 0.5;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 1e-3;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  void step();
  void zero_grad();
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  long t_ = 0;
};

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
Real clip_grad_norm(std::span<Tensor> params, Real max_norm);

/// eta_min + (eta0 - eta_min) * (1 + cos(pi * t / T)) / 2
Real cosine_lr(Real t, Real total, Real eta0, Real eta_min);

}  // namespace pibnas
