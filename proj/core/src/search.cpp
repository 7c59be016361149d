#include "pibnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "pibnas/ops.hpp"

namespace pibnas {

namespace {

FlatGrads take_grads(std::vector<Tensor>& ts) {
  FlatGrads out;
  out.reserve(ts.size());
  for (Tensor& t : ts) {
    if (t.has_grad()) {
      out.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      out.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
    t.clear_grad();
  }
  return out;
}

void clear_grads(std::vector<Tensor>& ts) {
  for (Tensor& t : ts) t.clear_grad();
}

void set_grads(std::vector<Tensor>& ts, const FlatGrads& g) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto dst = ts[i].ensure_grad();
    std::copy(g[i].begin(), g[i].end(), dst.begin());
    quantize(dst);
  }
}

std::vector<std::vector<Real>> snapshot(const std::vector<Tensor>& ts) {
  std::vector<std::vector<Real>> out;
  for (const Tensor& t : ts) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore(std::vector<Tensor>& ts, const std::vector<std::vector<Real>>& saved) {
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i].copy_from(saved[i]);
}

/// ts = saved + scale * dir
void axpy_into(std::vector<Tensor>& ts, const std::vector<std::vector<Real>>& saved, Real scale,
               const FlatGrads& dir) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    std::vector<Real> v(saved[i]);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += scale * dir[i][k];
    ts[i].copy_from(v);
  }
}

Real global_norm(const FlatGrads& g) {
  Real s = 0.0;
  for (const auto& v : g) {
    for (Real x : v) s += x * x;
  }
  return std::sqrt(s);
}

}  // namespace

LossGrads loss_and_grads(BilevelProblem& p, bool validation) {
  auto w = p.weights();
  auto a = p.arch();
  clear_grads(w);
  clear_grads(a);
  LossGrads out;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = validation ? p.val_loss() : p.train_loss();
    out.loss = loss.item();
    tape.backward(loss);
  }
  out.weights = take_grads(w);
  out.arch = take_grads(a);
  return out;
}

FlatGrads mixed_partial_fd(BilevelProblem& p, const FlatGrads& v, Real eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("mixed_partial_fd: eps must be positive");
  auto w = p.weights();
  const auto saved = snapshot(w);
  axpy_into(w, saved, eps, v);
  FlatGrads plus = loss_and_grads(p, false).arch;
  axpy_into(w, saved, -eps, v);
  FlatGrads minus = loss_and_grads(p, false).arch;
  restore(w, saved);
  for (std::size_t i = 0; i < plus.size(); ++i) {
    for (std::size_t k = 0; k < plus[i].size(); ++k) plus[i][k] = (plus[i][k] - minus[i][k]) / (2 * eps);
  }
  return plus;
}

BilevelOptimizer::BilevelOptimizer(BilevelProblem& problem, SgdConfig weight_cfg,
                                   AdamConfig arch_cfg, Real grad_clip)
    : problem_(problem),
      sgd_(problem.weights(), weight_cfg),
      adam_(problem.arch(), arch_cfg),
      grad_clip_(grad_clip) {}

void BilevelOptimizer::apply_arch(const FlatGrads& g) {
  auto a = problem_.arch();
  set_grads(a, g);
  adam_.step();
  clear_grads(a);
}

Real BilevelOptimizer::weight_step(Real lr) {
  auto w = problem_.weights();
  LossGrads g = loss_and_grads(problem_, false);
  set_grads(w, g.weights);
  clip_grad_norm(w, grad_clip_);
  sgd_.step(lr);
  clear_grads(w);
  return g.loss;
}

StepResult BilevelOptimizer::step_first_order(Real lr) {
  StepResult r;
  LossGrads val = loss_and_grads(problem_, true);
  r.val_loss = val.loss;
  apply_arch(val.arch);
  r.train_loss = weight_step(lr);
  return r;
}

StepResult BilevelOptimizer::step_second_order(Real lr, Real xi) {
  if (xi < 0.0) throw std::invalid_argument("step_second_order: xi must be >= 0");
  StepResult r;
  auto w = problem_.weights();
  const auto saved = snapshot(w);

  LossGrads train = loss_and_grads(problem_, false);
  axpy_into(w, saved, -xi, train.weights);
  LossGrads val = loss_and_grads(problem_, true);
  r.val_loss = val.loss;
  restore(w, saved);

  FlatGrads arch_grad = std::move(val.arch);
  const Real vnorm = global_norm(val.weights);
  if (vnorm == 0.0 || !std::isfinite(vnorm)) {
    r.correction_skipped = true;
  } else {
    const FlatGrads implicit = mixed_partial_fd(problem_, val.weights, 0.01 / vnorm);
    for (std::size_t i = 0; i < arch_grad.size(); ++i) {
      for (std::size_t k = 0; k < arch_grad[i].size(); ++k) arch_grad[i][k] -= xi * implicit[i][k];
    }
  }
  apply_arch(arch_grad);
  r.train_loss = weight_step(lr);
  return r;
}

Genotype derive_genotype(const ArchParams& alphas) {
  std::ptrdiff_t none_index = -1;
  for (std::size_t o = 0; o < alphas.ops.size(); ++o) {
    if (alphas.ops[o] == OpKind::none) none_index = static_cast<std::ptrdiff_t>(o);
  }
  Genotype g;
  for (CellType t : {CellType::normal, CellType::reduce}) {
    CellSpec& cell = g.cell(t);
    for (int node = 0; node < kCellNodes; ++node) {
      struct Candidate {
        int source;
        Real score;
        OpKind op;
      };
      std::vector<Candidate> cands;
      for (int src = 0; src < node + 2; ++src) {
        const auto w = alphas.weights(t, edge_offset(node) + src);
        Candidate c{src, -1.0, OpKind::none};
        for (std::size_t o = 0; o < w.size(); ++o) {
          if (static_cast<std::ptrdiff_t>(o) == none_index) continue;
          if (w[o] > c.score) {
            c.score = w[o];
            c.op = alphas.ops[o];
          }
        }
        cands.push_back(c);
      }
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
      for (int k = 0; k < kEdgesPerNode; ++k) {
        cell.nodes[static_cast<std::size_t>(node)][static_cast<std::size_t>(k)] =
            Edge{cands[static_cast<std::size_t>(k)].op, cands[static_cast<std::size_t>(k)].source};
      }
    }
  }
  return g;
}

void log_arch_weights(int epoch, const ArchParams& alphas, std::ostream& sink) {
  for (CellType t : {CellType::normal, CellType::reduce}) {
    for (int e = 0; e < kCandidateEdges; ++e) {
      const auto w = alphas.weights(t, e);
      for (std::size_t o = 0; o < w.size(); ++o) {
        sink << fmt::format("{},{},{},{},{:.9g}\n", epoch, cell_type_name(t), e,
                            op_name(alphas.ops[o]), w[o]);
      }
    }
  }
  if (!sink) throw std::runtime_error("log_arch_weights: write failed");
}

std::pair<Dataset, Dataset> split_half(const Dataset& d) {
  if (d.size() < 2) throw std::invalid_argument("split_half: need at least two samples");
  const std::size_t mid = d.size() / 2;
  return {d.slice(0, mid), d.slice(mid, d.size())};
}

namespace {

class SupernetProblem final : public BilevelProblem {
 public:
  SupernetProblem(Supernet& net, ArchParams& alphas) : net_(net), alphas_(alphas) {
    for (auto& [name, t] : net_.weights()) weights_.push_back(t);
  }

  void set_batches(Batch train, Batch val) {
    train_ = std::move(train);
    val_ = std::move(val);
  }

  std::vector<Tensor> weights() override { return weights_; }
  std::vector<Tensor> arch() override { return {alphas_.normal, alphas_.reduce}; }
  Tensor train_loss() override {
    return softmax_cross_entropy(net_.forward(train_.x, alphas_, Mode::train), train_.labels);
  }
  Tensor val_loss() override {
    return softmax_cross_entropy(net_.forward(val_.x, alphas_, Mode::train), val_.labels);
  }

 private:
  Supernet& net_;
  ArchParams& alphas_;
  std::vector<Tensor> weights_;
  Batch train_;
  Batch val_;
};

std::pair<Real, Real> supernet_accuracy(Supernet& net, const ArchParams& alphas, const Dataset& d,
                                        int batch) {
  std::size_t correct = 0;
  Real loss_sum = 0.0;
  for (const auto& idx : epoch_batches(d.size(), batch, nullptr)) {
    Batch b = make_batch(d, idx);
    Tensor logits = net.forward(b.x, alphas, Mode::eval);
    loss_sum += softmax_cross_entropy(logits, b.labels).item() * static_cast<Real>(idx.size());
    const auto k = static_cast<std::size_t>(logits.shape()[1]);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const auto row = logits.data().subspan(n * k, k);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == b.labels[n]) ++correct;
    }
  }
  const auto n = static_cast<Real>(d.size());
  return {static_cast<Real>(correct) / n, loss_sum / n};
}

}  // namespace

SearchResult run_search(const SearchConfig& cfg, const Dataset& train, const Dataset& val,
                        std::ostream* trajectory,
                        const std::function<void(const SearchEpoch&)>& on_epoch) {
  if (cfg.epochs < 1) throw std::invalid_argument("search: epochs must be >= 1");
  if (cfg.batch < 1) throw std::invalid_argument("search: batch must be >= 1");
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("search: empty data split");
  if (train.hw != val.hw || train.classes != val.classes) {
    throw std::invalid_argument("search: train and validation splits disagree in shape");
  }

  Rng init = Rng::stream(cfg.seed, "init");
  Rng search = Rng::stream(cfg.seed, "search");
  Rng augment = Rng::stream(cfg.seed, "augment");

  const NetworkPlan plan = plan_network(cfg.layers, cfg.c_init, train.classes, train.hw, false);
  Supernet net(plan, cfg.supernet, init);
  SearchResult result;
  result.alphas = ArchParams::init(cfg.supernet.ops, search);
  SupernetProblem problem(net, result.alphas);
  BilevelOptimizer opt(problem, cfg.weights, cfg.arch, cfg.grad_clip);

  if (trajectory) *trajectory << kTrajectoryHeader << '\n';
  const AugmentConfig* aug = cfg.augment_enabled ? &cfg.augment : nullptr;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SearchEpoch rec;
    rec.epoch = epoch + 1;
    rec.lr = cosine_lr(epoch, cfg.epochs, cfg.weights.lr, cfg.lr_min);
    const Real xi = cfg.xi < 0.0 ? rec.lr : cfg.xi;
    const auto train_batches = epoch_batches(train.size(), cfg.batch, &search);
    const auto val_batches = epoch_batches(val.size(), cfg.batch, &search);
    Real loss_sum = 0.0;
    for (std::size_t s = 0; s < train_batches.size(); ++s) {
      problem.set_batches(make_batch(train, train_batches[s], aug, &augment),
                          make_batch(val, val_batches[s % val_batches.size()], aug, &augment));
      const StepResult r = cfg.second_order ? opt.step_second_order(rec.lr, xi)
                                            : opt.step_first_order(rec.lr);
      if (!std::isfinite(r.train_loss) || !std::isfinite(r.val_loss)) {
        throw DivergenceError(fmt::format("search diverged at epoch {}: non-finite loss", rec.epoch));
      }
      if (r.correction_skipped) ++rec.skipped_corrections;
      loss_sum += r.train_loss;
    }
    rec.train_loss = loss_sum / static_cast<Real>(train_batches.size());
    std::tie(rec.val_acc, rec.val_loss) = supernet_accuracy(net, result.alphas, val, cfg.batch);
    result.best_val_acc = std::max(result.best_val_acc, rec.val_acc);
    if (trajectory) log_arch_weights(rec.epoch, result.alphas, *trajectory);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.genotype = derive_genotype(result.alphas);
  return result;
}

}  // namespace pibnas
