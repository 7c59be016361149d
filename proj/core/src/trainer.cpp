#include "pibnas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "pibnas/ops.hpp"

namespace pibnas {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (!(drop_path_prob >= 0.0 && drop_path_prob < 1.0)) {
    throw std::invalid_argument("drop_path_prob must be in [0, 1)");
  }
  if (!(aux_weight >= 0.0)) throw std::invalid_argument("aux_weight must be >= 0");
  if (!(sgd.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (augment.cutout < 0) throw std::invalid_argument("cutout length must be >= 0");
}

void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  out << fmt::format("{},{:.8g},{:.6f},{:.6f},{:.6f}\n", m.epoch, m.lr, m.train_loss, m.train_acc,
                     m.test_acc);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const auto n = static_cast<std::size_t>(logits.shape()[0]);
  const auto k = static_cast<std::size_t>(logits.shape()[1]);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Real evaluate(EvalNetwork& net, const Dataset& d, int batch) {
  if (d.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  std::size_t correct = 0;
  for (const auto& idx : epoch_batches(d.size(), batch, nullptr)) {
    Batch b = make_batch(d, idx);
    const auto pred = argmax_rows(net.forward(b.x, Mode::eval).logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  return static_cast<Real>(correct) / static_cast<Real>(d.size());
}

TrainResult train_eval(EvalNetwork& net, const Dataset& train, const Dataset& test,
                       const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (cfg.aux_weight > 0.0 && net.plan().layers < 3) {
    throw std::invalid_argument("aux_weight > 0 requires layers >= 3");
  }
  if (train.size() == 0) throw std::invalid_argument("train_eval: empty training set");
  if (train.hw != net.plan().input_hw || test.hw != net.plan().input_hw) {
    throw std::invalid_argument("train_eval: image size does not match the network plan");
  }

  Rng shuffle = Rng::stream(cfg.seed, "shuffle");
  Rng augment = Rng::stream(cfg.seed, "augment");
  Rng droppath = Rng::stream(cfg.seed, "droppath");

  std::vector<Tensor> params;
  for (auto& [name, t] : net.parameters()) params.push_back(t);
  Sgd sgd(params, cfg.sgd);
  const AugmentConfig* aug = cfg.augment_enabled ? &cfg.augment : nullptr;

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = cosine_lr(epoch, cfg.epochs, cfg.sgd.lr, cfg.lr_min);
    const Real drop = cfg.drop_path_prob * epoch / cfg.epochs;
    Real loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : epoch_batches(train.size(), cfg.batch, &shuffle)) {
      Batch b = make_batch(train, idx, aug, &augment);
      sgd.zero_grad();
      Tape tape;
      Tape::Scope scope(tape);
      ForwardResult out = net.forward(b.x, Mode::train, drop, &droppath);
      Tensor loss = softmax_cross_entropy(out.logits, b.labels);
      if (out.aux_logits.defined() && cfg.aux_weight > 0.0) {
        loss = add(loss, scale(softmax_cross_entropy(out.aux_logits, b.labels), cfg.aux_weight));
      }
      const Real lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError(fmt::format("training diverged at epoch {}: loss is {}", m.epoch, lv));
      }
      tape.backward(loss);
      clip_grad_norm(params, cfg.grad_clip);
      sgd.step(m.lr);
      loss_sum += lv * static_cast<Real>(idx.size());
      const auto pred = argmax_rows(out.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
    }
    m.train_loss = loss_sum / static_cast<Real>(train.size());
    m.train_acc = static_cast<Real>(correct) / static_cast<Real>(train.size());
    m.test_acc = test.size() ? evaluate(net, test, std::max(cfg.batch, 64)) : 0.0;
    result.best_test_acc = std::max(result.best_test_acc, m.test_acc);
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace pibnas
