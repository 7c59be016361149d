#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "pibnas/blocks.hpp"
#include "pibnas/ops.hpp"
#include "pibnas/rng.hpp"

namespace pibnas::testing {

GradCheck check_gradients(const std::string& name, std::vector<Tensor> leaves, const LossFn& loss, double h) {
  PrecisionScope f64(Precision::f64);
  for (auto& t : leaves) t.set_requires_grad(true);

  std::vector<std::vector<Real>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    for (auto& t : leaves) t.clear_grad();
    const Tensor l = loss();
    // A loss that never touched a leaf (the `none` block) has zero gradient.
    if (l.requires_grad()) tape.backward(l);
    for (auto& t : leaves) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      }
      t.clear_grad();
    }
  }

  GradCheck r{name, 0.0, 0};
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto d = leaves[l].data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Real saved = d[i];
      d[i] = saved + h;
      const Real up = loss().item();
      d[i] = saved - h;
      const Real down = loss().item();
      d[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      r.max_rel_err = std::max(r.max_rel_err, err);
      ++r.checked;
    }
  }
  return r;
}

Tensor random_leaf(const Shape& shape, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<Real> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(shape, std::move(v), true);
}

Tensor probe_loss(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Real> r(static_cast<std::size_t>(x.numel()));
  for (auto& v : r) v = rng.normal();
  return sum(mul(x, Tensor::from(x.shape(), std::move(r))));
}

namespace {

Tensor undefined() { return Tensor(); }

}  // namespace

std::vector<GradCheck> primitive_suite() {
  std::vector<GradCheck> out;
  const Shape img{2, 3, 5, 5};

  auto conv_case = [&](const std::string& name, const Shape& xs, const Shape& ws, Conv2dOptions opt, bool bias) {
    Tensor x = random_leaf(xs, 1), w = random_leaf(ws, 2, 0.5);
    Tensor b = bias ? random_leaf(Shape{ws[0]}, 3) : undefined();
    std::vector<Tensor> leaves{x, w};
    if (bias) leaves.push_back(b);
    out.push_back(check_gradients(name, leaves, [=] { return probe_loss(conv2d(x, w, b, opt), 4); }));
  };
  conv_case("conv2d 3x3", img, Shape{4, 3, 3, 3}, Conv2dOptions::square(1, 1), true);
  conv_case("conv2d 3x3 stride 2", img, Shape{4, 3, 3, 3}, Conv2dOptions::square(2, 1), false);
  conv_case("conv2d dilated", Shape{1, 2, 7, 7}, Shape{2, 2, 3, 3}, Conv2dOptions::square(1, 2, 2), false);
  conv_case("conv2d depthwise", Shape{2, 4, 5, 5}, Shape{4, 1, 3, 3}, Conv2dOptions::square(1, 1, 1, 4), false);
  conv_case("conv2d grouped", Shape{1, 4, 4, 4}, Shape{6, 2, 1, 1}, Conv2dOptions::square(1, 0, 1, 2), false);
  conv_case("conv2d 1x1 stride 2", Shape{2, 3, 6, 6}, Shape{2, 3, 1, 1}, Conv2dOptions::square(2, 0), false);
  conv_case("conv2d 1x7 stride (1,2)", Shape{1, 2, 9, 9}, Shape{2, 2, 1, 7}, {1, 2, 0, 3, 1, 1, 1}, false);
  conv_case("conv2d 7x1 stride (2,1)", Shape{1, 2, 9, 9}, Shape{2, 2, 7, 1}, {2, 1, 3, 0, 1, 1, 1}, false);

  {
    Tensor x = random_leaf(Shape{2, 6, 3, 3}, 5), w = random_leaf(Shape{4, 4}, 6);
    const auto starts = window_starts(6, 4, 4);
    out.push_back(check_gradients("window_conv1x1", {x, w},
                                  [=] { return probe_loss(window_conv1x1(x, w, starts), 7); }));
  }
  {
    Tensor x = random_leaf(img, 8);
    out.push_back(check_gradients("gelu", {x}, [=] { return probe_loss(gelu(x), 9); }));
    out.push_back(check_gradients("relu", {x}, [=] { return probe_loss(relu(x), 10); }));
  }
  {
    Tensor x = random_leaf(img, 11), g = random_leaf(Shape{3}, 12), b = random_leaf(Shape{3}, 13);
    auto st = std::make_shared<BatchNormState>(BatchNormState::make(3));
    out.push_back(check_gradients("batch_norm train affine", {x, g, b}, [=] {
      return probe_loss(batch_norm(x, g, b, *st, Mode::train), 14);
    }));
    out.push_back(check_gradients("batch_norm train plain", {x}, [=] {
      return probe_loss(batch_norm(x, undefined(), undefined(), *st, Mode::train), 15);
    }));
    out.push_back(check_gradients("batch_norm eval", {x, g, b}, [=] {
      return probe_loss(batch_norm(x, g, b, *st, Mode::eval), 16);
    }));
    out.push_back(check_gradients("layer_norm", {x, g, b}, [=] { return probe_loss(layer_norm(x, g, b), 17); }));
    out.push_back(check_gradients("layer_norm plain", {x},
                                  [=] { return probe_loss(layer_norm(x, undefined(), undefined()), 18); }));
  }
  {
    Tensor x = random_leaf(Shape{2, 2, 6, 6}, 19);
    out.push_back(check_gradients("max_pool 3x3", {x}, [=] { return probe_loss(pool3x3(x, PoolKind::max, 1), 20); }));
    out.push_back(check_gradients("max_pool 3x3 stride 2", {x},
                                  [=] { return probe_loss(pool3x3(x, PoolKind::max, 2), 21); }));
    out.push_back(check_gradients("avg_pool 3x3", {x}, [=] { return probe_loss(pool3x3(x, PoolKind::avg, 1), 22); }));
    out.push_back(check_gradients("avg_pool 3x3 stride 2", {x},
                                  [=] { return probe_loss(pool3x3(x, PoolKind::avg, 2), 23); }));
    out.push_back(check_gradients("avg_pool 5 stride 3", {x},
                                  [=] { return probe_loss(pool2d(x, PoolKind::avg, 5, 3, 0), 24); }));
    out.push_back(check_gradients("global_avg_pool", {x}, [=] { return probe_loss(global_avg_pool(x), 25); }));
    out.push_back(check_gradients("crop_shift", {x}, [=] { return probe_loss(crop_shift(x, 1), 26); }));
    out.push_back(check_gradients("reshape", {x}, [=] { return probe_loss(reshape(x, Shape{2, 72}), 27); }));
  }
  {
    Tensor x = random_leaf(Shape{3, 5}, 28), w = random_leaf(Shape{4, 5}, 29), b = random_leaf(Shape{4}, 30);
    out.push_back(check_gradients("linear", {x, w, b}, [=] { return probe_loss(linear(x, w, b), 31); }));
    out.push_back(check_gradients("softmax_rows", {x}, [=] { return probe_loss(softmax_rows(x), 32); }));
    const std::vector<int> labels{1, 4, 0};
    out.push_back(check_gradients("softmax_cross_entropy", {x},
                                  [=] { return softmax_cross_entropy(x, labels); }));
    out.push_back(check_gradients("sum", {x}, [=] { return sum(x); }));
    out.push_back(check_gradients("scale", {x}, [=] { return probe_loss(scale(x, -1.7), 33); }));
  }
  {
    Tensor a = random_leaf(img, 34), b = random_leaf(img, 35), c = random_leaf(Shape{2, 1, 5, 5}, 36);
    out.push_back(check_gradients("add", {a, b}, [=] { return probe_loss(add(a, b), 37); }));
    out.push_back(check_gradients("add n-ary", {a, b}, [=] {
      const std::vector<Tensor> xs{a, b, a};
      return probe_loss(add(xs), 38);
    }));
    out.push_back(check_gradients("mul", {a, b}, [=] { return probe_loss(mul(a, b), 39); }));
    out.push_back(check_gradients("concat_channels", {a, c}, [=] {
      const std::vector<Tensor> xs{a, c};
      return probe_loss(concat_channels(xs), 40);
    }));
    Tensor w = random_leaf(Shape{2, 3}, 41);
    out.push_back(check_gradients("weighted", {a, w}, [=] { return probe_loss(weighted(a, w, 4), 42); }));
    out.push_back(check_gradients("weighted softmax", {a, w},
                                  [=] { return probe_loss(weighted(a, softmax_rows(w), 2), 43); }));
    const std::vector<Real> factors{0.0, 1.25};
    out.push_back(check_gradients("per_sample_scale", {a},
                                  [=] { return probe_loss(per_sample_scale(a, factors), 44); }));
  }
  return out;
}

namespace {

GradCheck check_block(const std::string& name, const std::shared_ptr<Block>& block, int c, int hw,
                      std::uint64_t seed) {
  Tensor x = random_leaf(Shape{2, c, hw, hw}, seed);
  NamedTensors params;
  block->collect("", &params, nullptr);
  std::vector<Tensor> leaves{x};
  for (auto& [n, t] : params) leaves.push_back(t);
  return check_gradients(name, leaves, [=] { return probe_loss(block->forward(x, Mode::train), seed + 1); });
}

}  // namespace

std::vector<GradCheck> block_suite() {
  std::vector<GradCheck> out;
  constexpr int c = 4, hw = 6;
  std::uint64_t seed = 100;
  for (OpKind op : all_ops()) {
    for (int stride : {1, 2}) {
      BlockConfig cfg;
      cfg.channels = c;
      cfg.kernel = std::max(op_kernel(op), 1);
      cfg.stride = stride;
      Rng rng(seed);
      auto b = std::make_shared<Block>(make_block(op, cfg, rng));
      out.push_back(check_block(fmt::format("{} stride {}", op_name(op), stride), b, c, hw, seed += 2));
    }
  }
  struct Variant {
    const char* label;
    double ratio;
    bool grouped;
    NormKind norm;
    Activation act;
    bool affine;
  };
  const Variant variants[] = {
      {"grouped", 2.0, true, NormKind::batch, Activation::gelu, true},
      {"dense reduce", 2.0, false, NormKind::batch, Activation::gelu, true},
      {"windowed F=1.5", 1.5, true, NormKind::batch, Activation::gelu, true},
      {"layer norm relu", 3.0, true, NormKind::layer, Activation::relu, true},
      {"search (no affine)", 2.0, true, NormKind::batch, Activation::gelu, false},
  };
  for (const auto& v : variants) {
    for (int stride : {1, 2}) {
      BlockConfig cfg;
      cfg.channels = c;
      cfg.kernel = 3;
      cfg.stride = stride;
      cfg.ratio = v.ratio;
      cfg.grouped_reduce = v.grouped;
      cfg.norm = v.norm;
      cfg.activation = v.act;
      cfg.affine = v.affine;
      Rng rng(seed);
      auto b = std::make_shared<Block>(make_pib_conv(cfg, rng));
      out.push_back(check_block(fmt::format("pib_conv {} stride {}", v.label, stride), b, c, hw, seed += 2));
    }
  }
  {
    BlockConfig cfg;
    Rng rng(seed);
    auto fr = std::make_shared<Block>(make_factorized_reduce(c, 6, cfg, rng));
    out.push_back(check_block("factorized_reduce", fr, c, hw, seed += 2));
    auto acn = std::make_shared<Block>(make_act_conv_norm(c, 6, cfg, rng));
    out.push_back(check_block("act_conv_norm", acn, c, hw, seed += 2));
  }
  return out;
}

}  // namespace pibnas::testing
