#pragma once

// Bilevel architecture search: first- and second-order steps over an abstract
// problem, genotype derivation and architecture-weight trajectory logging.

#include <functional>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "pibnas/data.hpp"
#include "pibnas/genotype.hpp"
#include "pibnas/optim.hpp"
#include "pibnas/supernet.hpp"

namespace pibnas {

/// Upper level: arch() minimizes val_loss; lower level: weights() minimize
/// train_loss. Losses are built on the active tape and must be scalar.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;
  virtual std::vector<Tensor> weights() = 0;
  virtual std::vector<Tensor> arch() = 0;
  virtual Tensor train_loss() = 0;
  virtual Tensor val_loss() = 0;
};

using FlatGrads = std::vector<std::vector<Real>>;

struct LossGrads {
  Real loss = 0.0;
  FlatGrads weights;
  FlatGrads arch;
};

/// Evaluates one loss on a fresh tape and returns it with gradients for both
/// parameter groups. Leaves the gradients of weights() and arch() cleared.
LossGrads loss_and_grads(BilevelProblem& p, bool validation);

/// Central difference (grad_arch L_train(w + eps v) - grad_arch L_train(w - eps v)) / (2 eps),
/// an estimate of the mixed second derivative applied to v. Restores w exactly.
FlatGrads mixed_partial_fd(BilevelProblem& p, const FlatGrads& v, Real eps);

struct StepResult {
  Real train_loss = 0.0;
  Real val_loss = 0.0;
  /// Second order only: the validation gradient at the virtual step was zero.
  bool correction_skipped = false;
};

class BilevelOptimizer {
 public:
  BilevelOptimizer(BilevelProblem& problem, SgdConfig weight_cfg, AdamConfig arch_cfg,
                   Real grad_clip = 5.0);

  /// arch step on grad_arch L_val(w, alpha), then weight step at learning rate `lr`.
  StepResult step_first_order(Real lr);
  /// arch gradient grad_arch L_val(w', alpha) - xi * mixed_partial_fd at w' = w - xi grad_w L_train,
  /// with eps = 0.01 / |grad_w' L_val|; then the weight step.
  StepResult step_second_order(Real lr, Real xi);

  Sgd& weight_optimizer() { return sgd_; }
  Adam& arch_optimizer() { return adam_; }

 private:
  void apply_arch(const FlatGrads& g);
  Real weight_step(Real lr);

  BilevelProblem& problem_;
  Sgd sgd_;
  Adam adam_;
  Real grad_clip_;
};

/// Per derived node: rank incoming edges by their largest non-`none` softmax
/// weight, keep the best two (ties to the lower edge index), each labelled
/// with its best non-`none` op (ties to the earlier op). Edges are listed in
/// rank order.
Genotype derive_genotype(const ArchParams& alphas);

inline constexpr std::string_view kTrajectoryHeader = "epoch,cell_type,edge,op,weight";
/// One row per (cell type, edge, op); no header.
void log_arch_weights(int epoch, const ArchParams& alphas, std::ostream& sink);

struct SearchConfig {
  int epochs = 50;
  int batch = 64;
  int layers = 8;
  int c_init = 16;
  SgdConfig weights{};
  Real lr_min = 0.001;
  AdamConfig arch{};
  bool second_order = true;
  /// Virtual step size; negative means "current weight learning rate".
  Real xi = -1.0;
  Real grad_clip = 5.0;
  SupernetOptions supernet{};
  AugmentConfig augment{.crop_flip = true, .pad = 4, .cutout = 0};
  bool augment_enabled = true;
  std::uint64_t seed = 0;
};

struct SearchEpoch {
  int epoch = 0;
  Real lr = 0.0;
  Real train_loss = 0.0;
  Real val_loss = 0.0;
  Real val_acc = 0.0;
  int skipped_corrections = 0;
};

struct SearchResult {
  Genotype genotype;
  ArchParams alphas;
  Real best_val_acc = 0.0;
  std::vector<SearchEpoch> history;
};

/// Runs the search on a train/validation split. Architecture weights are
/// appended to `trajectory` (if given) after every epoch, epochs numbered from 1.
SearchResult run_search(const SearchConfig& cfg, const Dataset& train, const Dataset& val,
                        std::ostream* trajectory = nullptr,
                        const std::function<void(const SearchEpoch&)>& on_epoch = {});

/// First and second halves of `d`.
std::pair<Dataset, Dataset> split_half(const Dataset& d);

}  // namespace pibnas
