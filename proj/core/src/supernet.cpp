#include "pibnas/supernet.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

#include <fmt/format.h>

namespace pibnas {

ArchParams ArchParams::init(std::vector<OpKind> ops, Rng& rng, Real scale) {
  ArchParams a = zeros(std::move(ops));
  for (Tensor* t : {&a.normal, &a.reduce}) {
    std::vector<Real> v(static_cast<std::size_t>(t->numel()));
    for (auto& x : v) x = scale * rng.normal();
    t->copy_from(v);
  }
  return a;
}

ArchParams ArchParams::zeros(std::vector<OpKind> ops) {
  if (ops.empty()) throw std::invalid_argument("ArchParams: empty operation set");
  ArchParams a;
  a.ops = std::move(ops);
  const auto n = static_cast<std::int64_t>(a.ops.size());
  a.normal = Tensor::zeros(Shape{kCandidateEdges, n}, true);
  a.reduce = Tensor::zeros(Shape{kCandidateEdges, n}, true);
  return a;
}

std::vector<Real> ArchParams::weights(CellType t, int edge) const {
  const auto row = of(t).data().subspan(static_cast<std::size_t>(edge) * ops.size(), ops.size());
  Real mx = row[0];
  for (Real v : row) mx = std::max(mx, v);
  std::vector<Real> w(row.size());
  Real total = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) total += w[i] = std::exp(row[i] - mx);
  for (auto& v : w) v /= total;
  return w;
}

MixedOp::MixedOp(std::span<const OpKind> ops, const BlockConfig& cfg, Rng& rng) {
  for (OpKind op : ops) blocks_.push_back(make_block(op, cfg, rng));
}

Tensor MixedOp::forward(const Tensor& x, const Tensor& weights, int row, Mode mode) {
  const auto n = static_cast<std::int64_t>(blocks_.size());
  if (weights.shape().rank() != 2 || weights.shape()[1] != n) {
    throw std::invalid_argument(fmt::format("MixedOp: alpha row length {} != {} ops",
                                            weights.shape()[1], n));
  }
  std::vector<Tensor> terms;
  for (std::int64_t o = 0; o < n; ++o) {
    Block& b = blocks_[static_cast<std::size_t>(o)];
    // Zero ops contribute nothing to the value or to any gradient.
    if (b.topology() == Block::Topology::zero) continue;
    terms.push_back(weighted(b.forward(x, mode), weights, row * n + o));
  }
  if (terms.empty()) return blocks_.front().forward(x, mode);
  return terms.size() == 1 ? terms.front() : add(terms);
}

void MixedOp::collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) {
  for (std::size_t o = 0; o < blocks_.size(); ++o) {
    blocks_[o].collect(fmt::format("{}{}.", prefix, op_name(blocks_[o].kind())), params, buffers);
  }
}

Tensor mixed_forward(MixedOp& op, const Tensor& x, const ArchParams& alphas, CellType t, int edge,
                     Mode mode) {
  return op.forward(x, softmax_rows(alphas.of(t)), edge, mode);
}

namespace {

struct SearchCell {
  bool reduction = false;
  std::optional<Block> pre0;
  std::optional<Block> pre1;
  std::vector<MixedOp> edges;
};

}  // namespace

struct Supernet::Impl {
  Sequential stem;
  std::vector<SearchCell> cells;
  Tensor classifier_w;
  Tensor classifier_b;
};

Supernet::Supernet(const NetworkPlan& plan, const SupernetOptions& options, Rng& rng)
    : plan_(plan), ops_(options.ops), impl_(std::make_unique<Impl>()) {
  if (ops_.empty()) throw std::invalid_argument("Supernet: empty operation set");
  BlockConfig base = options.block;
  base.stride = 1;
  const int c_stem = 3 * plan.c_init;
  impl_->stem.add(make_conv("conv", 3, c_stem, 3, 3, Conv2dOptions::square(1, 1), rng));
  impl_->stem.add(make_norm("norm", c_stem, base.norm, true));

  int c_pp = c_stem, c_p = c_stem;
  bool reduction_prev = false;
  for (int i = 0; i < plan.layers; ++i) {
    const bool reduction = plan.is_reduction(i);
    const int c = plan.channels[static_cast<std::size_t>(i)];
    SearchCell cell;
    cell.reduction = reduction;
    cell.pre0 = reduction_prev ? make_factorized_reduce(c_pp, c, base, rng)
                               : make_act_conv_norm(c_pp, c, base, rng);
    cell.pre1 = make_act_conv_norm(c_p, c, base, rng);
    for (int node = 0; node < kCellNodes; ++node) {
      for (int src = 0; src < node + 2; ++src) {
        BlockConfig cfg = base;
        cfg.channels = c;
        cfg.stride = reduction && src < 2 ? 2 : 1;
        cell.edges.emplace_back(ops_, cfg, rng);
      }
    }
    impl_->cells.push_back(std::move(cell));
    reduction_prev = reduction;
    c_pp = c_p;
    c_p = kCellNodes * c;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_p));
  std::vector<Real> w(static_cast<std::size_t>(c_p) * plan.num_classes), b(static_cast<std::size_t>(plan.num_classes));
  for (auto& v : w) v = rng.uniform(-bound, bound);
  for (auto& v : b) v = rng.uniform(-bound, bound);
  impl_->classifier_w = Tensor::from(Shape{plan.num_classes, c_p}, std::move(w), true);
  impl_->classifier_b = Tensor::from(Shape{plan.num_classes}, std::move(b), true);
}

Supernet::~Supernet() = default;
Supernet::Supernet(Supernet&&) noexcept = default;
Supernet& Supernet::operator=(Supernet&&) noexcept = default;

Tensor Supernet::forward(const Tensor& x, const ArchParams& alphas, Mode mode) {
  if (alphas.ops != ops_) throw std::invalid_argument("Supernet: alpha operation set differs");
  const Tensor w_normal = softmax_rows(alphas.normal);
  const Tensor w_reduce = softmax_rows(alphas.reduce);
  Tensor s0 = impl_->stem.forward(x, mode);
  Tensor s1 = s0;
  for (auto& cell : impl_->cells) {
    const Tensor& w = cell.reduction ? w_reduce : w_normal;
    std::vector<Tensor> states{cell.pre0->forward(s0, mode), cell.pre1->forward(s1, mode)};
    for (int node = 0; node < kCellNodes; ++node) {
      std::vector<Tensor> terms;
      for (int src = 0; src < node + 2; ++src) {
        const int e = edge_offset(node) + src;
        terms.push_back(cell.edges[static_cast<std::size_t>(e)].forward(
            states[static_cast<std::size_t>(src)], w, e, mode));
      }
      states.push_back(add(terms));
    }
    s0 = s1;
    s1 = concat_channels(std::span(states).subspan(2));
  }
  return linear(global_avg_pool(s1), impl_->classifier_w, impl_->classifier_b);
}

namespace {

void collect_supernet(Sequential& stem, std::vector<SearchCell>& cells, NamedTensors* params,
                      NamedTensors* buffers) {
  stem.collect("stem.", params, buffers);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string p = fmt::format("cells.{}.", i);
    cells[i].pre0->collect(p + "pre0.", params, buffers);
    cells[i].pre1->collect(p + "pre1.", params, buffers);
    for (std::size_t e = 0; e < cells[i].edges.size(); ++e) {
      cells[i].edges[e].collect(fmt::format("{}edge{}.", p, e), params, buffers);
    }
  }
}

}  // namespace

NamedTensors Supernet::weights() {
  NamedTensors out;
  collect_supernet(impl_->stem, impl_->cells, &out, nullptr);
  out.emplace_back("classifier.weight", impl_->classifier_w);
  out.emplace_back("classifier.bias", impl_->classifier_b);
  return out;
}

NamedTensors Supernet::buffers() {
  NamedTensors out;
  collect_supernet(impl_->stem, impl_->cells, nullptr, &out);
  return out;
}

}  // namespace pibnas
