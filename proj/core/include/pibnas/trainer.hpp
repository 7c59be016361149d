#pragma once

// Evaluation-phase training: cosine-annealed SGD on CE_main + w_aux * CE_aux,
// drop-path ramp, train-time augmentation and per-epoch metrics.

#include <functional>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "pibnas/data.hpp"
#include "pibnas/network.hpp"
#include "pibnas/optim.hpp"

namespace pibnas {

struct TrainConfig {
  int epochs = 600;
  int batch = 96;
  SgdConfig sgd{};
  Real lr_min = 0.0;
  Real grad_clip = 5.0;
  Real drop_path_prob = 0.2;
  Real aux_weight = 0.4;
  bool augment_enabled = true;
  AugmentConfig augment{};
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  Real lr = 0.0;
  Real train_loss = 0.0;
  Real train_acc = 0.0;
  Real test_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  Real best_test_acc = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "epoch,lr,train_loss,train_acc,test_acc";
void write_metrics_row(std::ostream& out, const EpochMetrics& m);

/// Trains `net` in place. Throws DivergenceError on a non-finite loss.
TrainResult train_eval(EvalNetwork& net, const Dataset& train, const Dataset& test,
                       const TrainConfig& cfg,
                       const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Top-1 accuracy in eval mode. Requires initialized norm statistics.
Real evaluate(EvalNetwork& net, const Dataset& d, int batch = 256);

/// Indices of the largest logit per row of a [N, K] tensor.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace pibnas
