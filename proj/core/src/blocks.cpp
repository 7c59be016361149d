#include "pibnas/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace pibnas {

std::string_view activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }
std::string_view norm_name(NormKind n) { return n == NormKind::batch ? "batch" : "layer"; }

int BlockConfig::expanded_channels() const {
  if (!(ratio >= 1.0)) throw std::invalid_argument(fmt::format("ratio F={} must be >= 1", ratio));
  const double fc = ratio * channels;
  const double rounded = std::round(fc);
  if (std::abs(fc - rounded) > 1e-9) {
    throw std::invalid_argument(fmt::format("F * C = {} * {} is not integral", ratio, channels));
  }
  return static_cast<int>(rounded);
}

std::int64_t WeightCount::of(ParamCategory c) const {
  std::int64_t n = 0;
  for (const auto& it : items) {
    if (it.category == c) n += it.count;
  }
  return n;
}

std::int64_t WeightCount::total() const {
  std::int64_t n = 0;
  for (const auto& it : items) n += it.count;
  return n;
}

void WeightCount::append(const WeightCount& other, const std::string& prefix) {
  for (const auto& it : other.items) items.push_back({prefix + it.layer, it.category, it.count});
}

namespace {

Tensor activate(const Tensor& x, Activation a) { return a == Activation::gelu ? gelu(x) : relu(x); }

void check_kernel(int k) {
  if (k < 1 || k % 2 == 0 || k > 7) {
    throw std::invalid_argument(fmt::format("invalid kernel size {} (odd, 1..7)", k));
  }
}

void check_stride(int s) {
  if (s != 1 && s != 2) throw std::invalid_argument(fmt::format("invalid stride {}", s));
}

Tensor norm_forward(NormLayer& n, const Tensor& x, Mode mode) {
  if (n.kind == NormKind::batch) return batch_norm(x, n.gamma, n.beta, n.state, mode);
  return layer_norm(x, n.gamma, n.beta);
}

}  // namespace

ConvLayer make_conv(const std::string& name, int c_in, int c_out, int kh, int kw,
                    const Conv2dOptions& opt, Rng& rng) {
  if (c_in % opt.groups != 0 || c_out % opt.groups != 0) {
    throw std::invalid_argument(fmt::format("{}: channels {}->{} not divisible by groups {}", name,
                                            c_in, c_out, opt.groups));
  }
  const int cig = c_in / opt.groups;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cig * kh * kw));
  std::vector<Real> w(static_cast<std::size_t>(c_out) * cig * kh * kw);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return {name, Tensor::from(Shape{c_out, cig, kh, kw}, std::move(w), true), opt};
}

NormLayer make_norm(const std::string& name, int channels, NormKind kind, bool affine) {
  NormLayer n{name, kind, {}, {}, {}};
  if (affine) {
    n.gamma = Tensor::full(Shape{channels}, 1.0, true);
    n.beta = Tensor::zeros(Shape{channels}, true);
  }
  if (kind == NormKind::batch) n.state = BatchNormState::make(channels);
  return n;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (Layer& layer : layers_) {
    h = std::visit(
        [&](auto& l) -> Tensor {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ActLayer>) {
            return activate(h, l.act);
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            return conv2d(h, l.weight, Tensor{}, l.opt);
          } else if constexpr (std::is_same_v<T, WindowConvLayer>) {
            return window_conv1x1(h, l.weight, l.starts);
          } else if constexpr (std::is_same_v<T, NormLayer>) {
            return norm_forward(l, h, mode);
          } else {
            return pool2d(h, l.kind, l.kernel, l.stride, l.pad);
          }
        },
        layer);
  }
  return h;
}

void Sequential::collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) {
  for (Layer& layer : layers_) {
    if (auto* c = std::get_if<ConvLayer>(&layer)) {
      if (params) params->emplace_back(prefix + c->name + ".weight", c->weight);
    } else if (auto* wc = std::get_if<WindowConvLayer>(&layer)) {
      if (params) params->emplace_back(prefix + wc->name + ".weight", wc->weight);
    } else if (auto* n = std::get_if<NormLayer>(&layer)) {
      if (params && n->gamma.defined()) {
        params->emplace_back(prefix + n->name + ".gamma", n->gamma);
        params->emplace_back(prefix + n->name + ".beta", n->beta);
      }
      if (buffers && n->kind == NormKind::batch) {
        buffers->emplace_back(prefix + n->name + ".running_mean", n->state.running_mean);
        buffers->emplace_back(prefix + n->name + ".running_var", n->state.running_var);
        buffers->emplace_back(prefix + n->name + ".tracked", n->state.tracked);
      }
    }
  }
}

WeightCount Sequential::count_weights() const {
  WeightCount out;
  for (const Layer& layer : layers_) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      out.items.push_back({c->name, ParamCategory::conv, c->weight.numel()});
    } else if (const auto* wc = std::get_if<WindowConvLayer>(&layer)) {
      out.items.push_back({wc->name, ParamCategory::conv, wc->weight.numel()});
    } else if (const auto* n = std::get_if<NormLayer>(&layer)) {
      if (n->gamma.defined()) {
        out.items.push_back({n->name, ParamCategory::norm, n->gamma.numel() + n->beta.numel()});
      }
    }
  }
  return out;
}

Tensor Block::forward(const Tensor& x, Mode mode) {
  if (x.shape().rank() != 4 || x.shape().c() != cfg_.channels) {
    if (topology_ != Topology::factorized_reduce || x.shape().rank() != 4) {
      throw std::invalid_argument(fmt::format("{} block expects {} channels, got input {}",
                                              op_name(kind_), cfg_.channels, x.shape().to_string()));
    }
  }
  switch (topology_) {
    case Topology::identity: return x;
    case Topology::zero: {
      const int s = cfg_.stride;
      const auto& xs = x.shape();
      const std::int64_t ho = (xs.h() - 1) / s + 1, wo = (xs.w() - 1) / s + 1;
      return Tensor::zeros(Shape{xs.n(), out_channels_, ho, wo});
    }
    case Topology::factorized_reduce: {
      auto& layers = body_.layers();
      const auto& xs = x.shape();
      if (xs.h() % 2 != 0 || xs.w() % 2 != 0) {
        throw std::invalid_argument("factorized reduce needs even spatial dims, got " +
                                    xs.to_string());
      }
      Tensor h = activate(x, std::get<ActLayer>(layers[0]).act);
      const auto& ca = std::get<ConvLayer>(layers[1]);
      const auto& cb = std::get<ConvLayer>(layers[2]);
      const Tensor parts[] = {conv2d(h, ca.weight, Tensor{}, ca.opt),
                              conv2d(crop_shift(h, 1), cb.weight, Tensor{}, cb.opt)};
      return norm_forward(std::get<NormLayer>(layers[3]), concat_channels(parts), mode);
    }
    case Topology::sequential: return body_.forward(x, mode);
  }
  return x;
}

void Block::collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers) {
  body_.collect(prefix, params, buffers);
}

Block make_sep_conv(const BlockConfig& cfg, Rng& rng) {
  check_kernel(cfg.kernel);
  check_stride(cfg.stride);
  const OpKind kind = cfg.kernel == 5 ? OpKind::sep_conv_5x5 : OpKind::sep_conv_3x3;
  if (cfg.kernel != 3 && cfg.kernel != 5) {
    throw std::invalid_argument(fmt::format("sep_conv supports K=3 or 5, got {}", cfg.kernel));
  }
  const int C = cfg.channels, K = cfg.kernel, pad = K / 2;
  Block b(kind, cfg, Block::Topology::sequential, C);
  auto& s = b.body_;
  for (int stage = 1; stage <= 2; ++stage) {
    const int stride = stage == 1 ? cfg.stride : 1;
    s.add(ActLayer{cfg.activation});
    s.add(make_conv(fmt::format("dw{}", stage), C, C, K, K, Conv2dOptions::square(stride, pad, 1, C), rng));
    s.add(make_conv(fmt::format("pw{}", stage), C, C, 1, 1, {}, rng));
    s.add(make_norm(fmt::format("norm{}", stage), C, cfg.norm, cfg.affine));
  }
  return b;
}

Block make_convnext_block(const BlockConfig& cfg, Rng& rng) {
  check_kernel(cfg.kernel);
  check_stride(cfg.stride);
  const int C = cfg.channels, K = cfg.kernel, FC = cfg.expanded_channels();
  Block b(OpKind::convnext_conv_7x7, cfg, Block::Topology::sequential, C);
  auto& s = b.body_;
  s.add(make_conv("dw", C, C, K, K, Conv2dOptions::square(cfg.stride, K / 2, 1, C), rng));
  s.add(make_norm("norm", C, cfg.norm, cfg.affine));
  s.add(make_conv("pw_expand", C, FC, 1, 1, {}, rng));
  s.add(ActLayer{cfg.activation});
  s.add(make_conv("pw_reduce", FC, C, 1, 1, {}, rng));
  return b;
}

Block make_pib_conv(const BlockConfig& cfg, Rng& rng) {
  check_kernel(cfg.kernel);
  check_stride(cfg.stride);
  const int C = cfg.channels, K = cfg.kernel, FC = cfg.expanded_channels();
  OpKind kind;
  switch (K) {
    case 3: kind = OpKind::pib_conv_3x3; break;
    case 5: kind = OpKind::pib_conv_5x5; break;
    case 7: kind = OpKind::pib_conv_7x7; break;
    default: throw std::invalid_argument(fmt::format("pib_conv supports K=3,5,7, got {}", K));
  }
  Block b(kind, cfg, Block::Topology::sequential, C);
  auto& s = b.body_;
  s.add(make_conv("dw1", C, C, K, K, Conv2dOptions::square(cfg.stride, K / 2, 1, C), rng));
  s.add(make_norm("norm1", C, cfg.norm, cfg.affine));
  s.add(make_conv("pw_expand", C, FC, 1, 1, {}, rng));
  s.add(ActLayer{cfg.activation});
  if (!cfg.grouped_reduce) {
    s.add(make_conv("pw_reduce", FC, C, 1, 1, {}, rng));
  } else if (FC % C == 0 && C % (FC / C) == 0) {
    const int groups = FC / C;
    s.add(make_conv("pw_reduce", FC, C, 1, 1, Conv2dOptions::square(1, 0, 1, groups), rng));
  } else {
    // Fractional (or non-dividing) F: same connectivity as a grouped conv,
    // expressed as one C-wide input window per output channel.
    const double bound = 1.0 / std::sqrt(static_cast<double>(C));
    std::vector<Real> w(static_cast<std::size_t>(C) * C);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    s.add(WindowConvLayer{"pw_reduce", Tensor::from(Shape{C, C}, std::move(w), true),
                          window_starts(FC, C, C)});
  }
  s.add(make_conv("dw2", C, C, K, K, Conv2dOptions::square(1, K / 2, 1, C), rng));
  s.add(make_norm("norm2", C, cfg.norm, cfg.affine));
  return b;
}

Block make_dil_conv(const BlockConfig& cfg, Rng& rng) {
  check_kernel(cfg.kernel);
  check_stride(cfg.stride);
  OpKind kind;
  if (cfg.kernel == 3) {
    kind = OpKind::dil_conv_3x3;
  } else if (cfg.kernel == 5) {
    kind = OpKind::dil_conv_5x5;
  } else {
    throw std::invalid_argument(fmt::format("dil_conv supports K=3 or 5, got {}", cfg.kernel));
  }
  const int C = cfg.channels, K = cfg.kernel;
  Block b(kind, cfg, Block::Topology::sequential, C);
  auto& s = b.body_;
  s.add(ActLayer{cfg.activation});
  s.add(make_conv("dw", C, C, K, K, Conv2dOptions::square(cfg.stride, K - 1, 2, C), rng));
  s.add(make_conv("pw", C, C, 1, 1, {}, rng));
  s.add(make_norm("norm", C, cfg.norm, cfg.affine));
  return b;
}

Block make_conv_7x1_1x7(const BlockConfig& cfg, Rng& rng) {
  check_stride(cfg.stride);
  const int C = cfg.channels, st = cfg.stride;
  BlockConfig c = cfg;
  c.kernel = 7;
  Block b(OpKind::conv_7x1_1x7, c, Block::Topology::sequential, C);
  auto& s = b.body_;
  s.add(ActLayer{cfg.activation});
  s.add(make_conv("conv_1x7", C, C, 1, 7, Conv2dOptions{1, st, 0, 3, 1, 1, 1}, rng));
  s.add(make_conv("conv_7x1", C, C, 7, 1, Conv2dOptions{st, 1, 3, 0, 1, 1, 1}, rng));
  s.add(make_norm("norm", C, cfg.norm, cfg.affine));
  return b;
}

Block make_pool(const BlockConfig& cfg, PoolKind kind) {
  check_stride(cfg.stride);
  const OpKind op = kind == PoolKind::max ? OpKind::max_pool_3x3 : OpKind::avg_pool_3x3;
  BlockConfig c = cfg;
  c.kernel = 3;
  Block b(op, c, Block::Topology::sequential, cfg.channels);
  b.body_.add(PoolLayer{kind, 3, cfg.stride, 1});
  b.body_.add(make_norm("norm", cfg.channels, cfg.norm, cfg.affine));
  return b;
}

Block make_skip(const BlockConfig& cfg, Rng& rng) {
  check_stride(cfg.stride);
  if (cfg.stride == 1) return Block(OpKind::skip_connect, cfg, Block::Topology::identity, cfg.channels);
  return make_factorized_reduce(cfg.channels, cfg.channels, cfg, rng);
}

Block make_zero(const BlockConfig& cfg) {
  check_stride(cfg.stride);
  return Block(OpKind::none, cfg, Block::Topology::zero, cfg.channels);
}

Block make_factorized_reduce(int c_in, int c_out, const BlockConfig& cfg, Rng& rng) {
  if (c_out % 2 != 0) {
    throw std::invalid_argument(fmt::format("factorized reduce needs even C_out, got {}", c_out));
  }
  BlockConfig c = cfg;
  c.channels = c_in;
  c.stride = 2;
  Block b(OpKind::skip_connect, c, Block::Topology::factorized_reduce, c_out);
  auto& s = b.body_;
  s.add(ActLayer{cfg.activation});
  s.add(make_conv("conv_a", c_in, c_out / 2, 1, 1, Conv2dOptions::square(2, 0), rng));
  s.add(make_conv("conv_b", c_in, c_out / 2, 1, 1, Conv2dOptions::square(2, 0), rng));
  s.add(make_norm("norm", c_out, cfg.norm, cfg.affine));
  return b;
}

Block make_act_conv_norm(int c_in, int c_out, const BlockConfig& cfg, Rng& rng) {
  BlockConfig c = cfg;
  c.channels = c_in;
  c.stride = 1;
  c.kernel = 1;
  Block b(OpKind::skip_connect, c, Block::Topology::sequential, c_out);
  auto& s = b.body_;
  s.add(ActLayer{cfg.activation});
  s.add(make_conv("conv", c_in, c_out, 1, 1, {}, rng));
  s.add(make_norm("norm", c_out, cfg.norm, cfg.affine));
  return b;
}

Block make_block(OpKind kind, const BlockConfig& cfg, Rng& rng) {
  BlockConfig c = cfg;
  if (op_kernel(kind) > 0) c.kernel = op_kernel(kind);
  switch (kind) {
    case OpKind::none: return make_zero(c);
    case OpKind::skip_connect: return make_skip(c, rng);
    case OpKind::pib_conv_3x3:
    case OpKind::pib_conv_5x5:
    case OpKind::pib_conv_7x7: return make_pib_conv(c, rng);
    case OpKind::dil_conv_3x3:
    case OpKind::dil_conv_5x5: return make_dil_conv(c, rng);
    case OpKind::conv_7x1_1x7: return make_conv_7x1_1x7(c, rng);
    case OpKind::max_pool_3x3: return make_pool(c, PoolKind::max);
    case OpKind::avg_pool_3x3: return make_pool(c, PoolKind::avg);
    case OpKind::sep_conv_3x3:
    case OpKind::sep_conv_5x5: return make_sep_conv(c, rng);
    case OpKind::convnext_conv_7x7:
      c.ratio = 4.0;
      return make_convnext_block(c, rng);
  }
  throw std::invalid_argument("make_block: unknown op kind");
}

WeightCount count_block_weights(const Block& b) { return b.count_weights(); }

}  // namespace pibnas
