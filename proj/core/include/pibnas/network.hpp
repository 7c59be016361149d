#pragma once

// Evaluation network built from a discrete genotype: stem -> stacked cells ->
// global average pool -> linear classifier, with an optional auxiliary head
// after the cell at 2/3 depth.

#include <memory>
#include <optional>
#include <vector>

#include "pibnas/blocks.hpp"
#include "pibnas/genotype.hpp"
#include "pibnas/rng.hpp"

namespace pibnas {

inline constexpr int kStemMultiplier = 3;
inline constexpr int kAuxMinHw = 8;

struct NetworkOptions {
  /// Activation, norm, ratio and reduce variant for every block. `channels`,
  /// `kernel` and `stride` are ignored.
  BlockConfig block;
};

struct ForwardResult {
  Tensor logits;
  /// Defined only in train mode when the plan has an auxiliary head.
  Tensor aux_logits;
  /// Output of the final cell, before pooling.
  Tensor features;
};

/// Zeroes each sample with probability p and scales survivors by 1 / (1 - p).
/// Identity when not training or p == 0.
Tensor drop_path(const Tensor& x, Real p, Rng& rng, bool training);

class EvalNetwork {
 public:
  EvalNetwork(const Genotype& genotype, const NetworkPlan& plan, const NetworkOptions& options,
              Rng& rng);
  ~EvalNetwork();
  EvalNetwork(EvalNetwork&&) noexcept;
  EvalNetwork& operator=(EvalNetwork&&) noexcept;

  /// `droppath` is required when training with `drop_prob` > 0.
  ForwardResult forward(const Tensor& x, Mode mode, Real drop_prob = 0.0, Rng* droppath = nullptr);

  NamedTensors parameters();
  /// Norm running statistics.
  NamedTensors buffers();
  /// Parameters followed by buffers; the checkpoint payload.
  NamedTensors state();

  WeightCount count_weights() const;
  const NetworkPlan& plan() const { return plan_; }
  const Genotype& genotype() const { return genotype_; }
  bool has_aux() const;

 private:
  struct Impl;
  void collect(NamedTensors* params, NamedTensors* buffers);

  Genotype genotype_;
  NetworkPlan plan_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pibnas
