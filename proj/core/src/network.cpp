#include "pibnas/network.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "pibnas/ops.hpp"

namespace pibnas {

Tensor drop_path(const Tensor& x, Real p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument(fmt::format("drop_path: p={} not in [0, 1)", p));
  if (!training || p == 0.0) return x;
  const Real keep = 1.0 - p;
  std::vector<Real> factors(static_cast<std::size_t>(x.shape().n()));
  for (auto& f : factors) f = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return per_sample_scale(x, factors);
}

namespace {

struct CellModule {
  bool reduction = false;
  std::optional<Block> pre0;
  std::optional<Block> pre1;
  std::vector<Block> ops;  // two per derived node, in genotype order
  std::vector<int> sources;
  std::vector<int> concat;
};

struct LinearLayer {
  Tensor weight;  // [classes, D]
  Tensor bias;
};

LinearLayer make_linear(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<Real> w(static_cast<std::size_t>(in) * out), b(static_cast<std::size_t>(out));
  for (auto& v : w) v = rng.uniform(-bound, bound);
  for (auto& v : b) v = rng.uniform(-bound, bound);
  return {Tensor::from(Shape{out, in}, std::move(w), true), Tensor::from(Shape{out}, std::move(b), true)};
}

int strided(int hw, int stride) { return (hw - 1) / stride + 1; }

}  // namespace

struct EvalNetwork::Impl {
  Sequential stem;
  std::vector<CellModule> cells;
  std::optional<Sequential> aux;
  std::optional<LinearLayer> aux_classifier;
  LinearLayer classifier;
};

EvalNetwork::EvalNetwork(const Genotype& genotype, const NetworkPlan& plan,
                         const NetworkOptions& options, Rng& rng)
    : genotype_(genotype), plan_(plan), impl_(std::make_unique<Impl>()) {
  if (auto v = validate_genotype(genotype); !v.empty()) throw GenotypeValidationError(std::move(v));
  if (static_cast<int>(plan.channels.size()) != plan.layers) {
    throw std::invalid_argument("EvalNetwork: plan channel schedule does not match layer count");
  }
  BlockConfig base = options.block;
  base.stride = 1;

  const int c_stem = kStemMultiplier * plan.c_init;
  auto& stem = impl_->stem;
  stem.add(make_conv("conv", 3, c_stem, 3, 3, Conv2dOptions::square(1, 1), rng));
  stem.add(make_norm("norm", c_stem, base.norm, true));

  int c_pp = c_stem, c_p = c_stem, hw = plan.input_hw;
  bool reduction_prev = false;
  for (int i = 0; i < plan.layers; ++i) {
    const bool reduction = plan.is_reduction(i);
    const int c = plan.channels[static_cast<std::size_t>(i)];
    const CellSpec& spec = genotype.cell(reduction ? CellType::reduce : CellType::normal);
    CellModule cell;
    cell.reduction = reduction;
    cell.pre0 = reduction_prev ? make_factorized_reduce(c_pp, c, base, rng)
                               : make_act_conv_norm(c_pp, c, base, rng);
    cell.pre1 = make_act_conv_norm(c_p, c, base, rng);
    for (const auto& node : spec.nodes) {
      for (const Edge& e : node) {
        BlockConfig cfg = base;
        cfg.channels = c;
        cfg.stride = reduction && e.source < 2 ? 2 : 1;
        cell.ops.push_back(make_block(e.op, cfg, rng));
        cell.sources.push_back(e.source);
      }
    }
    cell.concat.assign(spec.concat.begin(), spec.concat.end());
    impl_->cells.push_back(std::move(cell));
    if (reduction) hw = strided(hw, 2);
    reduction_prev = reduction;
    c_pp = c_p;
    c_p = static_cast<int>(spec.concat.size()) * c;

    if (plan.aux_index && *plan.aux_index == i) {
      if (hw < kAuxMinHw) {
        throw std::invalid_argument(fmt::format(
            "auxiliary head needs a feature map of at least {0}x{0}, got {1}x{1} at layer {2}",
            kAuxMinHw, hw, i));
      }
      Sequential aux;
      aux.add(ActLayer{base.activation});
      aux.add(PoolLayer{PoolKind::avg, 5, 3, 0});
      aux.add(make_conv("conv1", c_p, 128, 1, 1, {}, rng));
      aux.add(make_norm("norm1", 128, base.norm, true));
      aux.add(ActLayer{base.activation});
      aux.add(make_conv("conv2", 128, 768, 2, 2, {}, rng));
      aux.add(make_norm("norm2", 768, base.norm, true));
      aux.add(ActLayer{base.activation});
      impl_->aux = std::move(aux);
      impl_->aux_classifier = make_linear(768, plan.num_classes, rng);
    }
  }
  impl_->classifier = make_linear(c_p, plan.num_classes, rng);
}

EvalNetwork::~EvalNetwork() = default;
EvalNetwork::EvalNetwork(EvalNetwork&&) noexcept = default;
EvalNetwork& EvalNetwork::operator=(EvalNetwork&&) noexcept = default;

bool EvalNetwork::has_aux() const { return impl_->aux.has_value(); }

ForwardResult EvalNetwork::forward(const Tensor& x, Mode mode, Real drop_prob, Rng* droppath) {
  if (x.shape().rank() != 4 || x.shape().c() != 3) {
    throw std::invalid_argument("EvalNetwork: expected input (N, 3, H, W), got " + x.shape().to_string());
  }
  const bool training = mode == Mode::train;
  const bool dropping = training && drop_prob > 0.0;
  if (dropping && droppath == nullptr) throw std::invalid_argument("EvalNetwork: drop-path needs an rng");

  ForwardResult out;
  Tensor s0 = impl_->stem.forward(x, mode);
  Tensor s1 = s0;
  for (std::size_t i = 0; i < impl_->cells.size(); ++i) {
    CellModule& cell = impl_->cells[i];
    std::vector<Tensor> states{cell.pre0->forward(s0, mode), cell.pre1->forward(s1, mode)};
    for (int n = 0; n < kCellNodes; ++n) {
      Tensor h[2];
      for (int k = 0; k < 2; ++k) {
        const auto e = static_cast<std::size_t>(2 * n + k);
        Block& op = cell.ops[e];
        h[k] = op.forward(states[static_cast<std::size_t>(cell.sources[e])], mode);
        if (dropping && !op.is_identity()) h[k] = drop_path(h[k], drop_prob, *droppath, true);
      }
      states.push_back(add(h[0], h[1]));
    }
    std::vector<Tensor> picked;
    for (int idx : cell.concat) picked.push_back(states[static_cast<std::size_t>(idx)]);
    s0 = s1;
    s1 = concat_channels(picked);
    if (training && impl_->aux && plan_.aux_index && *plan_.aux_index == static_cast<int>(i)) {
      Tensor a = global_avg_pool(impl_->aux->forward(s1, mode));
      out.aux_logits = linear(a, impl_->aux_classifier->weight, impl_->aux_classifier->bias);
    }
  }
  out.features = s1;
  out.logits = linear(global_avg_pool(s1), impl_->classifier.weight, impl_->classifier.bias);
  return out;
}

void EvalNetwork::collect(NamedTensors* params, NamedTensors* buffers) {
  Impl& impl = *impl_;
  impl.stem.collect("stem.", params, buffers);
  for (std::size_t i = 0; i < impl.cells.size(); ++i) {
    CellModule& cell = impl.cells[i];
    const std::string p = fmt::format("cells.{}.", i);
    cell.pre0->collect(p + "pre0.", params, buffers);
    cell.pre1->collect(p + "pre1.", params, buffers);
    for (std::size_t e = 0; e < cell.ops.size(); ++e) {
      cell.ops[e].collect(fmt::format("{}node{}.{}.", p, e / 2 + 2, e % 2), params, buffers);
    }
  }
  if (impl.aux) {
    impl.aux->collect("aux.", params, buffers);
    if (params) {
      params->emplace_back("aux.classifier.weight", impl.aux_classifier->weight);
      params->emplace_back("aux.classifier.bias", impl.aux_classifier->bias);
    }
  }
  if (params) {
    params->emplace_back("classifier.weight", impl.classifier.weight);
    params->emplace_back("classifier.bias", impl.classifier.bias);
  }
}

namespace {

void append_linear(WeightCount& wc, const std::string& name, const Tensor& w, const Tensor& b) {
  wc.items.push_back({name, ParamCategory::linear, w.numel()});
  wc.items.push_back({name, ParamCategory::bias, b.numel()});
}

}  // namespace

NamedTensors EvalNetwork::parameters() {
  NamedTensors out;
  collect(&out, nullptr);
  return out;
}

NamedTensors EvalNetwork::buffers() {
  NamedTensors out;
  collect(nullptr, &out);
  return out;
}

NamedTensors EvalNetwork::state() {
  NamedTensors out = parameters();
  NamedTensors b = buffers();
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

WeightCount EvalNetwork::count_weights() const {
  WeightCount wc;
  wc.append(impl_->stem.count_weights(), "stem.");
  for (std::size_t i = 0; i < impl_->cells.size(); ++i) {
    const CellModule& cell = impl_->cells[i];
    const std::string p = fmt::format("cells.{}.", i);
    wc.append(cell.pre0->count_weights(), p + "pre0.");
    wc.append(cell.pre1->count_weights(), p + "pre1.");
    for (std::size_t e = 0; e < cell.ops.size(); ++e) {
      wc.append(cell.ops[e].count_weights(), fmt::format("{}node{}.{}.", p, e / 2 + 2, e % 2));
    }
  }
  if (impl_->aux) {
    wc.append(impl_->aux->count_weights(), "aux.");
    append_linear(wc, "aux.classifier", impl_->aux_classifier->weight, impl_->aux_classifier->bias);
  }
  append_linear(wc, "classifier", impl_->classifier.weight, impl_->classifier.bias);
  return wc;
}

}  // namespace pibnas
