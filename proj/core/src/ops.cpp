#include "pibnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

namespace pibnas {

namespace {

thread_local MacCounter* t_mac_counter = nullptr;

using Index = std::int64_t;
inline std::size_t sz(Index i) { return static_cast<std::size_t>(i); }

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw std::invalid_argument(fmt::format("{}: {}", op, msg));
}

Tensor make_output(const Shape& shape, bool grad) { return Tensor::zeros(shape, grad); }

void finish(Tensor& out) { quantize(out.data()); }

// Dot products with four partial sums; fixed order keeps results deterministic.
Real dot(const Real* a, const Real* b, Index n) {
  Real s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  Index i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

Real dot_strided(const Real* a, const Real* b, Index stride, Index n) {
  Real s0 = 0.0, s1 = 0.0;
  Index i = 0;
  for (; i + 2 <= n; i += 2) {
    s0 += a[i] * b[i * stride];
    s1 += a[i + 1] * b[(i + 1) * stride];
  }
  for (; i < n; ++i) s0 += a[i] * b[i * stride];
  return s0 + s1;
}

// Valid output-column range [lo, hi) for which ow * stride + off lies in [0, in).
std::pair<Index, Index> valid_range(Index out, Index in, Index stride, Index off) {
  Index lo = 0;
  if (off < 0) lo = (-off + stride - 1) / stride;
  Index hi = out;
  const Index last = in - 1 - off;  // need ow * stride <= last
  if (last < 0) {
    hi = 0;
  } else {
    hi = std::min(out, last / stride + 1);
  }
  return {lo, std::max(lo, hi)};
}

}  // namespace

MacCounter::MacCounter() : saved_(t_mac_counter) { t_mac_counter = this; }
MacCounter::~MacCounter() { t_mac_counter = saved_; }
void MacCounter::add(std::int64_t macs) {
  for (MacCounter* c = t_mac_counter; c != nullptr; c = c->saved_) c->count_ += macs;
}

int conv_out_size(int in, int kernel, int stride, int pad, int dilation) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dOptions& opt) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(xs.rank() == 4, "conv2d", "input must be rank 4, got " + xs.to_string());
  require(ws.rank() == 4, "conv2d", "weight must be rank 4, got " + ws.to_string());
  require(opt.groups >= 1 && opt.stride_h >= 1 && opt.stride_w >= 1 && opt.dil_h >= 1 &&
              opt.dil_w >= 1 && opt.pad_h >= 0 && opt.pad_w >= 0,
          "conv2d", "invalid options");
  const Index N = xs.n(), Cin = xs.c(), H = xs.h(), W = xs.w();
  const Index Cout = ws.n(), Kh = ws.h(), Kw = ws.w();
  const Index G = opt.groups;
  require(Cin % G == 0, "conv2d", fmt::format("C_in {} not divisible by groups {}", Cin, G));
  require(Cout % G == 0, "conv2d", fmt::format("C_out {} not divisible by groups {}", Cout, G));
  const Index cig = Cin / G, cog = Cout / G;
  require(ws.c() == cig, "conv2d",
          fmt::format("weight {} does not match input {} with groups {}", ws.to_string(),
                      xs.to_string(), G));
  if (b.defined()) require(b.numel() == Cout, "conv2d", "bias length != C_out");
  const Index Ho = conv_out_size(static_cast<int>(H), static_cast<int>(Kh), opt.stride_h,
                                 opt.pad_h, opt.dil_h);
  const Index Wo = conv_out_size(static_cast<int>(W), static_cast<int>(Kw), opt.stride_w,
                                 opt.pad_w, opt.dil_w);
  require(Ho >= 1 && Wo >= 1, "conv2d",
          fmt::format("zero-size output for input {} and kernel {}", xs.to_string(), ws.to_string()));

  const bool grad = needs_grad({&x, &w, &b});
  Tensor y = make_output(Shape{N, Cout, Ho, Wo}, grad);
  MacCounter::add(N * Cout * Ho * Wo * cig * Kh * Kw);

  const Index sh = opt.stride_h, sw = opt.stride_w, ph = opt.pad_h, pw = opt.pad_w;
  const Index dh = opt.dil_h, dw = opt.dil_w;
  const bool pointwise = Kh == 1 && Kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0;

  // Column ranges per kernel column, shared by forward and backward.
  std::vector<std::pair<Index, Index>> col_range(sz(Kw));
  for (Index kw = 0; kw < Kw; ++kw) col_range[sz(kw)] = valid_range(Wo, W, sw, kw * dw - pw);

  // Visits every (input plane, output plane, weight) triple with matching rows.
  // `body(xrow, yrow, wv_index, lo, hi, off)` handles one row segment.
  auto for_each_row = [=](auto&& body) {
    for (Index n = 0; n < N; ++n) {
      for (Index g = 0; g < G; ++g) {
        for (Index oc = g * cog; oc < (g + 1) * cog; ++oc) {
          const Index ybase = (n * Cout + oc) * Ho * Wo;
          for (Index ic = 0; ic < cig; ++ic) {
            const Index xbase = (n * Cin + g * cig + ic) * H * W;
            const Index wbase = (oc * cig + ic) * Kh * Kw;
            if (pointwise) {
              body(xbase, ybase, wbase, Index{0}, H * W, Index{0}, Index{1});
              continue;
            }
            for (Index kh = 0; kh < Kh; ++kh) {
              for (Index kw = 0; kw < Kw; ++kw) {
                const auto [lo, hi] = col_range[sz(kw)];
                if (lo >= hi) continue;
                const Index off = kw * dw - pw;
                for (Index oh = 0; oh < Ho; ++oh) {
                  const Index ih = oh * sh - ph + kh * dh;
                  if (ih < 0 || ih >= H) continue;
                  body(xbase + ih * W, ybase + oh * Wo, wbase + kh * Kw + kw, lo, hi, off, sw);
                }
              }
            }
          }
        }
      }
    }
  };

  {
    const Real* xd = x.data().data();
    const Real* wd = w.data().data();
    Real* yd = y.data().data();
    if (b.defined()) {
      const Real* bd = b.data().data();
      for (Index n = 0; n < N; ++n)
        for (Index oc = 0; oc < Cout; ++oc)
          std::fill_n(yd + (n * Cout + oc) * Ho * Wo, Ho * Wo, bd[oc]);
    }
    for_each_row([&](Index xr, Index yr, Index wi, Index lo, Index hi, Index off, Index stride) {
      const Real wv = wd[wi];
      const Real* xp = xd + xr + off;
      Real* yp = yd + yr;
      if (stride == 1) {
        for (Index o = lo; o < hi; ++o) yp[o] += wv * xp[o];
      } else {
        for (Index o = lo; o < hi; ++o) yp[o] += wv * xp[o * stride];
      }
    });
  }
  finish(y);

  if (grad) {
    Tensor xc = x, wc = w, bc = b, yc = y;
    Tape::active()->record({x, w, b}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      const Real* xd = xc.data().data();
      const Real* wd = wc.data().data();
      Real* gx = xc.requires_grad() ? xc.ensure_grad().data() : nullptr;
      Real* gw = wc.requires_grad() ? wc.ensure_grad().data() : nullptr;
      for_each_row([&](Index xr, Index yr, Index wi, Index lo, Index hi, Index off, Index stride) {
        const Real* gyp = gy + yr;
        if (gx != nullptr) {
          const Real wv = wd[wi];
          Real* gxp = gx + xr + off;
          if (stride == 1) {
            for (Index o = lo; o < hi; ++o) gxp[o] += wv * gyp[o];
          } else {
            for (Index o = lo; o < hi; ++o) gxp[o * stride] += wv * gyp[o];
          }
        }
        if (gw != nullptr) {
          const Real* xp = xd + xr + off;
          gw[wi] += stride == 1 ? dot(gyp + lo, xp + lo, hi - lo)
                                : dot_strided(gyp + lo, xp + lo * stride, stride, hi - lo);
        }
      });
      if (bc.defined() && bc.requires_grad()) {
        auto gb = bc.ensure_grad();
        for (Index n = 0; n < N; ++n)
          for (Index oc = 0; oc < Cout; ++oc) {
            const Real* p = gy + (n * Cout + oc) * Ho * Wo;
            Real acc = 0.0;
            for (Index i = 0; i < Ho * Wo; ++i) acc += p[i];
            gb[sz(oc)] += acc;
          }
      }
    });
  }
  return y;
}

std::vector<int> window_starts(int c_in, int c_out, int window) {
  if (window > c_in || c_out < 1 || window < 1) {
    throw std::invalid_argument("window_starts: invalid window geometry");
  }
  // Output j reads the window of group floor(j * c_in / (c_out * window)),
  // clamped to the last full window. For c_in = g * window with g dividing
  // c_out this is exactly a grouped conv with g groups.
  std::vector<int> starts(static_cast<std::size_t>(c_out), 0);
  const std::int64_t denom = static_cast<std::int64_t>(c_out) * window;
  for (int j = 0; j < c_out; ++j) {
    const std::int64_t group = static_cast<std::int64_t>(j) * c_in / denom;
    starts[static_cast<std::size_t>(j)] =
        static_cast<int>(std::min<std::int64_t>(group * window, c_in - window));
  }
  return starts;
}

Tensor window_conv1x1(const Tensor& x, const Tensor& w, std::span<const int> starts) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "window_conv1x1", "input must be rank 4");
  const Index N = xs.n(), Cin = xs.c(), HW = xs.h() * xs.w();
  const Index Cout = w.shape()[0], win = w.shape()[1];
  require(static_cast<Index>(starts.size()) == Cout, "window_conv1x1", "starts length != C_out");
  for (int s : starts) {
    require(s >= 0 && s + win <= Cin, "window_conv1x1", "window exceeds input channels");
  }
  const bool grad = needs_grad({&x, &w});
  Tensor y = make_output(Shape{N, Cout, xs.h(), xs.w()}, grad);
  MacCounter::add(N * Cout * HW * win);
  const std::vector<int> st(starts.begin(), starts.end());
  {
    const Real* xd = x.data().data();
    const Real* wd = w.data().data();
    Real* yd = y.data().data();
    for (Index n = 0; n < N; ++n)
      for (Index j = 0; j < Cout; ++j) {
        Real* yp = yd + (n * Cout + j) * HW;
        for (Index i = 0; i < win; ++i) {
          const Real wv = wd[j * win + i];
          const Real* xp = xd + (n * Cin + st[sz(j)] + i) * HW;
          for (Index p = 0; p < HW; ++p) yp[p] += wv * xp[p];
        }
      }
  }
  finish(y);
  if (grad) {
    Tensor xc = x, wc = w, yc = y;
    Tape::active()->record({x, w}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      const Real* xd = xc.data().data();
      const Real* wd = wc.data().data();
      Real* gx = xc.requires_grad() ? xc.ensure_grad().data() : nullptr;
      Real* gw = wc.requires_grad() ? wc.ensure_grad().data() : nullptr;
      for (Index n = 0; n < N; ++n)
        for (Index j = 0; j < Cout; ++j) {
          const Real* gyp = gy + (n * Cout + j) * HW;
          for (Index i = 0; i < win; ++i) {
            const Index xoff = (n * Cin + st[sz(j)] + i) * HW;
            if (gx != nullptr) {
              const Real wv = wd[j * win + i];
              for (Index p = 0; p < HW; ++p) gx[xoff + p] += wv * gyp[p];
            }
            if (gw != nullptr) {
              Real acc = 0.0;
              for (Index p = 0; p < HW; ++p) acc += gyp[p] * xd[xoff + p];
              gw[j * win + i] += acc;
            }
          }
        }
    });
  }
  return y;
}

namespace {

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const bool grad = needs_grad({&x});
  Tensor y = make_output(x.shape(), grad);
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = f(xd[i]);
  finish(y);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      auto gy = yc.grad();
      auto xv = xc.data();
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xv[i]);
    });
  }
  return y;
}

}  // namespace

Tensor gelu(const Tensor& x) {
  constexpr Real inv_sqrt2 = 0.70710678118654752440;
  constexpr Real inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      x, [](Real v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](Real v) {
        const Real cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Real v) { return v > 0.0 ? v : 0.0; }, [](Real v) { return v > 0.0 ? 1.0 : 0.0; });
}

BatchNormState BatchNormState::make(int channels) {
  BatchNormState s;
  s.running_mean = Tensor::zeros(Shape{channels});
  s.running_var = Tensor::full(Shape{channels}, 1.0);
  s.tracked = Tensor::zeros(Shape{1});
  return s;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "batch_norm", "input must be rank 4");
  const Index N = xs.n(), C = xs.c(), HW = xs.h() * xs.w();
  const Index M = N * HW;
  require(gamma.defined() == beta.defined(), "batch_norm", "gamma and beta must both be given");
  if (gamma.defined()) {
    require(gamma.numel() == C && beta.numel() == C, "batch_norm", "affine size != C");
  }
  require(state.running_mean.defined() && state.running_mean.numel() == C, "batch_norm",
          "running stats size != C");
  if (mode == Mode::eval && !state.initialized()) {
    throw std::logic_error("batch_norm: eval mode without initialized running statistics");
  }
  const bool grad = needs_grad({&x, &gamma, &beta});
  Tensor y = make_output(xs, grad);
  std::vector<Real> mean(sz(C)), inv_std(sz(C));
  const Real* xd = x.data().data();
  if (mode == Mode::train) {
    require(M > 0, "batch_norm", "empty batch");
    state.last_mean.assign(sz(C), 0.0);
    state.last_var.assign(sz(C), 0.0);
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (Index c = 0; c < C; ++c) {
      Real s = 0.0;
      for (Index n = 0; n < N; ++n) {
        const Real* p = xd + (n * C + c) * HW;
        for (Index i = 0; i < HW; ++i) s += p[i];
      }
      const Real mu = s / static_cast<Real>(M);
      Real v = 0.0;
      for (Index n = 0; n < N; ++n) {
        const Real* p = xd + (n * C + c) * HW;
        for (Index i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const Real var = v / static_cast<Real>(M);
      mean[sz(c)] = mu;
      inv_std[sz(c)] = 1.0 / std::sqrt(var + kBatchNormEps);
      state.last_mean[sz(c)] = mu;
      state.last_var[sz(c)] = var;
      const Real unbiased = M > 1 ? v / static_cast<Real>(M - 1) : var;
      rm[sz(c)] = (1.0 - kBatchNormMomentum) * rm[sz(c)] + kBatchNormMomentum * mu;
      rv[sz(c)] = (1.0 - kBatchNormMomentum) * rv[sz(c)] + kBatchNormMomentum * unbiased;
    }
    quantize(rm);
    quantize(rv);
    state.tracked.data()[0] += 1.0;
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (Index c = 0; c < C; ++c) {
      mean[sz(c)] = rm[sz(c)];
      inv_std[sz(c)] = 1.0 / std::sqrt(rv[sz(c)] + kBatchNormEps);
    }
  }
  // xhat is kept for the backward pass.
  std::vector<Real> xhat(sz(xs.numel()));
  {
    Real* yd = y.data().data();
    const Real* gd = gamma.defined() ? gamma.data().data() : nullptr;
    const Real* bd = beta.defined() ? beta.data().data() : nullptr;
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) {
        const Index base = (n * C + c) * HW;
        const Real g = gd ? gd[c] : 1.0;
        const Real bb = bd ? bd[c] : 0.0;
        for (Index i = 0; i < HW; ++i) {
          const Real h = (xd[base + i] - mean[sz(c)]) * inv_std[sz(c)];
          xhat[sz(base + i)] = h;
          yd[base + i] = g * h + bb;
        }
      }
  }
  finish(y);
  if (grad) {
    Tensor xc = x, gc = gamma, bc = beta, yc = y;
    const bool train = mode == Mode::train;
    Tape::active()->record({x, gamma, beta}, y, [=, xhat = std::move(xhat)]() mutable {
      const Real* gy = yc.grad().data();
      const Real* gd = gc.defined() ? gc.data().data() : nullptr;
      if (gc.defined() && gc.requires_grad()) {
        auto gg = gc.ensure_grad();
        auto gb = bc.ensure_grad();
        for (Index c = 0; c < C; ++c) {
          Real sg = 0.0, sb = 0.0;
          for (Index n = 0; n < N; ++n) {
            const Index base = (n * C + c) * HW;
            for (Index i = 0; i < HW; ++i) {
              sg += gy[base + i] * xhat[sz(base + i)];
              sb += gy[base + i];
            }
          }
          gg[sz(c)] += sg;
          gb[sz(c)] += sb;
        }
      }
      if (!xc.requires_grad()) return;
      Real* gx = xc.ensure_grad().data();
      for (Index c = 0; c < C; ++c) {
        const Real g = gd ? gd[c] : 1.0;
        if (!train) {
          for (Index n = 0; n < N; ++n) {
            const Index base = (n * C + c) * HW;
            for (Index i = 0; i < HW; ++i) gx[base + i] += gy[base + i] * g * inv_std[sz(c)];
          }
          continue;
        }
        Real s1 = 0.0, s2 = 0.0;
        for (Index n = 0; n < N; ++n) {
          const Index base = (n * C + c) * HW;
          for (Index i = 0; i < HW; ++i) {
            const Real d = gy[base + i] * g;
            s1 += d;
            s2 += d * xhat[sz(base + i)];
          }
        }
        const Real m = static_cast<Real>(M);
        const Real k = inv_std[sz(c)] / m;
        for (Index n = 0; n < N; ++n) {
          const Index base = (n * C + c) * HW;
          for (Index i = 0; i < HW; ++i) {
            const Real d = gy[base + i] * g;
            gx[base + i] += k * (m * d - s1 - xhat[sz(base + i)] * s2);
          }
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "layer_norm", "input must be rank 4");
  const Index N = xs.n(), C = xs.c(), HW = xs.h() * xs.w();
  const Index M = C * HW;
  require(gamma.defined() == beta.defined(), "layer_norm", "gamma and beta must both be given");
  if (gamma.defined()) {
    require(gamma.numel() == C && beta.numel() == C, "layer_norm", "affine size != C");
  }
  const bool grad = needs_grad({&x, &gamma, &beta});
  Tensor y = make_output(xs, grad);
  std::vector<Real> xhat(sz(xs.numel())), inv_std(sz(N));
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  const Real* gd = gamma.defined() ? gamma.data().data() : nullptr;
  const Real* bd = beta.defined() ? beta.data().data() : nullptr;
  for (Index n = 0; n < N; ++n) {
    const Real* p = xd + n * M;
    Real s = 0.0;
    for (Index i = 0; i < M; ++i) s += p[i];
    const Real mu = s / static_cast<Real>(M);
    Real v = 0.0;
    for (Index i = 0; i < M; ++i) v += (p[i] - mu) * (p[i] - mu);
    const Real is = 1.0 / std::sqrt(v / static_cast<Real>(M) + kLayerNormEps);
    inv_std[sz(n)] = is;
    for (Index c = 0; c < C; ++c) {
      const Real g = gd ? gd[c] : 1.0;
      const Real bb = bd ? bd[c] : 0.0;
      for (Index i = 0; i < HW; ++i) {
        const Index k = n * M + c * HW + i;
        const Real h = (xd[k] - mu) * is;
        xhat[sz(k)] = h;
        yd[k] = g * h + bb;
      }
    }
  }
  finish(y);
  if (grad) {
    Tensor xc = x, gc = gamma, bc = beta, yc = y;
    Tape::active()->record({x, gamma, beta}, y, [=, xhat = std::move(xhat)]() mutable {
      const Real* gy = yc.grad().data();
      const Real* gdd = gc.defined() ? gc.data().data() : nullptr;
      if (gc.defined() && gc.requires_grad()) {
        auto gg = gc.ensure_grad();
        auto gb = bc.ensure_grad();
        for (Index n = 0; n < N; ++n)
          for (Index c = 0; c < C; ++c)
            for (Index i = 0; i < HW; ++i) {
              const Index k = n * M + c * HW + i;
              gg[sz(c)] += gy[k] * xhat[sz(k)];
              gb[sz(c)] += gy[k];
            }
      }
      if (!xc.requires_grad()) return;
      Real* gx = xc.ensure_grad().data();
      const Real m = static_cast<Real>(M);
      for (Index n = 0; n < N; ++n) {
        Real s1 = 0.0, s2 = 0.0;
        for (Index c = 0; c < C; ++c) {
          const Real g = gdd ? gdd[c] : 1.0;
          for (Index i = 0; i < HW; ++i) {
            const Index k = n * M + c * HW + i;
            const Real d = gy[k] * g;
            s1 += d;
            s2 += d * xhat[sz(k)];
          }
        }
        const Real kf = inv_std[sz(n)] / m;
        for (Index c = 0; c < C; ++c) {
          const Real g = gdd ? gdd[c] : 1.0;
          for (Index i = 0; i < HW; ++i) {
            const Index k = n * M + c * HW + i;
            gx[k] += kf * (m * gy[k] * g - s1 - xhat[sz(k)] * s2);
          }
        }
      }
    });
  }
  return y;
}

Tensor pool2d(const Tensor& x, PoolKind kind, int kernel, int stride, int pad) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "pool2d", "input must be rank 4");
  require(kernel >= 1 && stride >= 1 && pad >= 0 && pad < kernel, "pool2d", "invalid geometry");
  const Index N = xs.n(), C = xs.c(), H = xs.h(), W = xs.w();
  const Index Ho = conv_out_size(static_cast<int>(H), kernel, stride, pad, 1);
  const Index Wo = conv_out_size(static_cast<int>(W), kernel, stride, pad, 1);
  require(Ho >= 1 && Wo >= 1, "pool2d", "zero-size output for input " + xs.to_string());
  const bool grad = needs_grad({&x});
  Tensor y = make_output(Shape{N, C, Ho, Wo}, grad);
  // For max: source index per output; for avg: window cell count.
  std::vector<Index> route(sz(N * C * Ho * Wo));
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  for (Index p = 0; p < N * C; ++p) {
    const Real* xp = xd + p * H * W;
    for (Index oh = 0; oh < Ho; ++oh)
      for (Index ow = 0; ow < Wo; ++ow) {
        const Index h0 = oh * stride - pad, w0 = ow * stride - pad;
        const Index h1 = std::min(h0 + kernel, H), w1 = std::min(w0 + kernel, W);
        const Index hs = std::max<Index>(h0, 0), ws = std::max<Index>(w0, 0);
        const Index o = (p * Ho + oh) * Wo + ow;
        if (kind == PoolKind::max) {
          Real best = -std::numeric_limits<Real>::infinity();
          Index arg = -1;
          for (Index ih = hs; ih < h1; ++ih)
            for (Index iw = ws; iw < w1; ++iw) {
              const Real v = xp[ih * W + iw];
              if (v > best || arg < 0) {
                best = v;
                arg = ih * W + iw;
              }
            }
          yd[o] = best;
          route[sz(o)] = p * H * W + arg;
        } else {
          Real s = 0.0;
          for (Index ih = hs; ih < h1; ++ih)
            for (Index iw = ws; iw < w1; ++iw) s += xp[ih * W + iw];
          const Index cnt = (h1 - hs) * (w1 - ws);
          yd[o] = s / static_cast<Real>(cnt);
          route[sz(o)] = cnt;
        }
      }
  }
  finish(y);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=, route = std::move(route)]() mutable {
      const Real* gy = yc.grad().data();
      Real* gx = xc.ensure_grad().data();
      for (Index p = 0; p < N * C; ++p)
        for (Index oh = 0; oh < Ho; ++oh)
          for (Index ow = 0; ow < Wo; ++ow) {
            const Index o = (p * Ho + oh) * Wo + ow;
            if (kind == PoolKind::max) {
              gx[route[sz(o)]] += gy[o];
              continue;
            }
            const Index h0 = oh * stride - pad, w0 = ow * stride - pad;
            const Index h1 = std::min(h0 + kernel, H), w1 = std::min(w0 + kernel, W);
            const Real share = gy[o] / static_cast<Real>(route[sz(o)]);
            for (Index ih = std::max<Index>(h0, 0); ih < h1; ++ih)
              for (Index iw = std::max<Index>(w0, 0); iw < w1; ++iw)
                gx[p * H * W + ih * W + iw] += share;
          }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Index N = x.shape()[0];
  const Index D = x.numel() / std::max<Index>(N, 1);
  require(w.shape().rank() == 2, "linear", "weight must be rank 2");
  const Index K = w.shape()[0];
  require(w.shape()[1] == D, "linear",
          fmt::format("input features {} != weight columns {}", D, w.shape()[1]));
  if (b.defined()) require(b.numel() == K, "linear", "bias length != out features");
  const bool grad = needs_grad({&x, &w, &b});
  Tensor y = make_output(Shape{N, K}, grad);
  MacCounter::add(N * D * K);
  const Real* xd = x.data().data();
  const Real* wd = w.data().data();
  Real* yd = y.data().data();
  for (Index n = 0; n < N; ++n)
    for (Index k = 0; k < K; ++k) {
      Real acc = b.defined() ? b.data()[sz(k)] : 0.0;
      for (Index d = 0; d < D; ++d) acc += wd[k * D + d] * xd[n * D + d];
      yd[n * K + k] = acc;
    }
  finish(y);
  if (grad) {
    Tensor xc = x, wc = w, bc = b, yc = y;
    Tape::active()->record({x, w, b}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      const Real* xv = xc.data().data();
      const Real* wv = wc.data().data();
      if (xc.requires_grad()) {
        Real* gx = xc.ensure_grad().data();
        for (Index n = 0; n < N; ++n)
          for (Index k = 0; k < K; ++k)
            for (Index d = 0; d < D; ++d) gx[n * D + d] += gy[n * K + k] * wv[k * D + d];
      }
      if (wc.requires_grad()) {
        Real* gw = wc.ensure_grad().data();
        for (Index n = 0; n < N; ++n)
          for (Index k = 0; k < K; ++k)
            for (Index d = 0; d < D; ++d) gw[k * D + d] += gy[n * K + k] * xv[n * D + d];
      }
      if (bc.defined() && bc.requires_grad()) {
        auto gb = bc.ensure_grad();
        for (Index n = 0; n < N; ++n)
          for (Index k = 0; k < K; ++k) gb[sz(k)] += gy[n * K + k];
      }
    });
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "global_avg_pool", "input must be rank 4");
  const Index N = xs.n(), C = xs.c(), HW = xs.h() * xs.w();
  const bool grad = needs_grad({&x});
  Tensor y = make_output(Shape{N, C}, grad);
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  for (Index p = 0; p < N * C; ++p) {
    Real s = 0.0;
    for (Index i = 0; i < HW; ++i) s += xd[p * HW + i];
    yd[p] = s / static_cast<Real>(HW);
  }
  finish(y);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      Real* gx = xc.ensure_grad().data();
      for (Index p = 0; p < N * C; ++p) {
        const Real share = gy[p] / static_cast<Real>(HW);
        for (Index i = 0; i < HW; ++i) gx[p * HW + i] += share;
      }
    });
  }
  return y;
}

Tensor concat_channels(std::span<const Tensor> xs) {
  require(!xs.empty(), "concat_channels", "no inputs");
  const Shape& s0 = xs[0].shape();
  require(s0.rank() == 4, "concat_channels", "inputs must be rank 4");
  Index Ctot = 0;
  bool grad = false;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    require(s.rank() == 4 && s.n() == s0.n() && s.h() == s0.h() && s.w() == s0.w(),
            "concat_channels", "mismatched shapes " + s0.to_string() + " vs " + s.to_string());
    Ctot += s.c();
    grad = grad || needs_grad({&t});
  }
  const Index N = s0.n(), HW = s0.h() * s0.w();
  Tensor y = make_output(Shape{N, Ctot, s0.h(), s0.w()}, grad);
  Real* yd = y.data().data();
  Index coff = 0;
  for (const Tensor& t : xs) {
    const Index C = t.shape().c();
    const Real* xd = t.data().data();
    for (Index n = 0; n < N; ++n)
      std::copy_n(xd + n * C * HW, C * HW, yd + (n * Ctot + coff) * HW);
    coff += C;
  }
  if (grad) {
    std::vector<Tensor> ins(xs.begin(), xs.end());
    Tensor yc = y;
    Tape::active()->record(ins, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      Index off = 0;
      for (Tensor& t : ins) {
        const Index C = t.shape().c();
        if (t.requires_grad()) {
          Real* gx = t.ensure_grad().data();
          for (Index n = 0; n < N; ++n)
            for (Index i = 0; i < C * HW; ++i) gx[n * C * HW + i] += gy[(n * Ctot + off) * HW + i];
        }
        off += C;
      }
    });
  }
  return y;
}

Tensor add(std::span<const Tensor> xs) {
  require(!xs.empty(), "add", "no inputs");
  bool grad = false;
  for (const Tensor& t : xs) {
    require(t.shape() == xs[0].shape(), "add",
            "mismatched shapes " + xs[0].shape().to_string() + " vs " + t.shape().to_string());
    grad = grad || needs_grad({&t});
  }
  Tensor y = make_output(xs[0].shape(), grad);
  auto yd = y.data();
  for (const Tensor& t : xs) {
    auto xd = t.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += xd[i];
  }
  finish(y);
  if (grad) {
    std::vector<Tensor> ins(xs.begin(), xs.end());
    Tensor yc = y;
    Tape::active()->record(ins, y, [=]() mutable {
      auto gy = yc.grad();
      for (Tensor& t : ins) {
        if (!t.requires_grad()) continue;
        auto gx = t.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor xs[] = {a, b};
  return add(std::span<const Tensor>(xs));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul", "mismatched shapes");
  const bool grad = needs_grad({&a, &b});
  Tensor y = make_output(a.shape(), grad);
  auto ad = a.data();
  auto bd = b.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] * bd[i];
  finish(y);
  if (grad) {
    Tensor ac = a, bc = b, yc = y;
    Tape::active()->record({a, b}, y, [=]() mutable {
      auto gy = yc.grad();
      if (ac.requires_grad()) {
        auto g = ac.ensure_grad();
        auto bv = bc.data();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv[i];
      }
      if (bc.requires_grad()) {
        auto g = bc.ensure_grad();
        auto av = ac.data();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, Real s) {
  return unary(x, [s](Real v) { return s * v; }, [s](Real) { return s; });
}

Tensor sum(const Tensor& x) {
  const bool grad = needs_grad({&x});
  Real s = 0.0;
  for (Real v : x.data()) s += v;
  Tensor y = Tensor::scalar(s, grad);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      const Real g = yc.grad()[0];
      for (Real& v : xc.ensure_grad()) v += g;
    });
  }
  return y;
}

Tensor softmax_rows(const Tensor& x) {
  require(x.shape().rank() == 2, "softmax_rows", "input must be rank 2");
  const Index R = x.shape()[0], K = x.shape()[1];
  const bool grad = needs_grad({&x});
  Tensor y = make_output(x.shape(), grad);
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  for (Index r = 0; r < R; ++r) {
    const Real* p = xd + r * K;
    const Real m = *std::max_element(p, p + K);
    Real s = 0.0;
    for (Index k = 0; k < K; ++k) s += (yd[r * K + k] = std::exp(p[k] - m));
    for (Index k = 0; k < K; ++k) yd[r * K + k] /= s;
  }
  finish(y);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      const Real* yv = yc.data().data();
      Real* gx = xc.ensure_grad().data();
      for (Index r = 0; r < R; ++r) {
        Real dot = 0.0;
        for (Index k = 0; k < K; ++k) dot += gy[r * K + k] * yv[r * K + k];
        for (Index k = 0; k < K; ++k) gx[r * K + k] += yv[r * K + k] * (gy[r * K + k] - dot);
      }
    });
  }
  return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.shape().rank() == 2, "softmax_cross_entropy", "logits must be rank 2");
  const Index N = logits.shape()[0], K = logits.shape()[1];
  require(static_cast<Index>(labels.size()) == N, "softmax_cross_entropy",
          "label count != batch size");
  require(N > 0, "softmax_cross_entropy", "empty batch");
  for (int l : labels) {
    require(l >= 0 && l < K, "softmax_cross_entropy", fmt::format("label {} out of range", l));
  }
  const bool grad = needs_grad({&logits});
  const Real* xd = logits.data().data();
  std::vector<Real> prob(sz(N * K));
  Real loss = 0.0;
  for (Index n = 0; n < N; ++n) {
    const Real* p = xd + n * K;
    const Real m = *std::max_element(p, p + K);
    Real s = 0.0;
    for (Index k = 0; k < K; ++k) s += (prob[sz(n * K + k)] = std::exp(p[k] - m));
    for (Index k = 0; k < K; ++k) prob[sz(n * K + k)] /= s;
    loss += (m + std::log(s)) - p[labels[sz(n)]];
  }
  Tensor y = Tensor::scalar(loss / static_cast<Real>(N), grad);
  if (grad) {
    Tensor xc = logits, yc = y;
    std::vector<int> lab(labels.begin(), labels.end());
    Tape::active()->record({logits}, y, [=, prob = std::move(prob)]() mutable {
      const Real g = yc.grad()[0] / static_cast<Real>(N);
      Real* gx = xc.ensure_grad().data();
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < K; ++k) {
          const Real t = (k == lab[sz(n)]) ? 1.0 : 0.0;
          gx[n * K + k] += g * (prob[sz(n * K + k)] - t);
        }
    });
  }
  return y;
}

Tensor weighted(const Tensor& x, const Tensor& weights, std::int64_t index) {
  require(index >= 0 && index < weights.numel(), "weighted", "weight index out of range");
  const bool grad = needs_grad({&x, &weights});
  const Real wv = weights.data()[sz(index)];
  Tensor y = make_output(x.shape(), grad);
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = wv * xd[i];
  finish(y);
  if (grad) {
    Tensor xc = x, wc = weights, yc = y;
    Tape::active()->record({x, weights}, y, [=]() mutable {
      auto gy = yc.grad();
      auto xv = xc.data();
      const Real w = wc.data()[sz(index)];
      if (xc.requires_grad()) {
        auto gx = xc.ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += w * gy[i];
      }
      if (wc.requires_grad()) {
        Real acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * xv[i];
        wc.ensure_grad()[sz(index)] += acc;
      }
    });
  }
  return y;
}

Tensor per_sample_scale(const Tensor& x, std::span<const Real> factors) {
  const Index N = x.shape()[0];
  require(static_cast<Index>(factors.size()) == N, "per_sample_scale", "factor count != N");
  const Index per = x.numel() / std::max<Index>(N, 1);
  const bool grad = needs_grad({&x});
  Tensor y = make_output(x.shape(), grad);
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  for (Index n = 0; n < N; ++n)
    for (Index i = 0; i < per; ++i) yd[n * per + i] = factors[sz(n)] * xd[n * per + i];
  finish(y);
  if (grad) {
    Tensor xc = x, yc = y;
    std::vector<Real> f(factors.begin(), factors.end());
    Tape::active()->record({x}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      Real* gx = xc.ensure_grad().data();
      for (Index n = 0; n < N; ++n)
        for (Index i = 0; i < per; ++i) gx[n * per + i] += f[sz(n)] * gy[n * per + i];
    });
  }
  return y;
}

Tensor crop_shift(const Tensor& x, int offset) {
  const Shape& xs = x.shape();
  require(xs.rank() == 4, "crop_shift", "input must be rank 4");
  require(offset >= 0 && offset < xs.h() && offset < xs.w(), "crop_shift", "offset too large");
  const Index N = xs.n(), C = xs.c(), H = xs.h(), W = xs.w();
  const Index Ho = H - offset, Wo = W - offset;
  const bool grad = needs_grad({&x});
  Tensor y = make_output(Shape{N, C, Ho, Wo}, grad);
  const Real* xd = x.data().data();
  Real* yd = y.data().data();
  for (Index p = 0; p < N * C; ++p)
    for (Index h = 0; h < Ho; ++h)
      std::copy_n(xd + p * H * W + (h + offset) * W + offset, Wo, yd + (p * Ho + h) * Wo);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      const Real* gy = yc.grad().data();
      Real* gx = xc.ensure_grad().data();
      for (Index p = 0; p < N * C; ++p)
        for (Index h = 0; h < Ho; ++h)
          for (Index w = 0; w < Wo; ++w)
            gx[p * H * W + (h + offset) * W + offset + w] += gy[(p * Ho + h) * Wo + w];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape.numel() == x.numel(), "reshape",
          x.shape().to_string() + " -> " + shape.to_string());
  const bool grad = needs_grad({&x});
  std::vector<Real> values(x.data().begin(), x.data().end());
  Tensor y = Tensor::from(shape, std::move(values), grad);
  if (grad) {
    Tensor xc = x, yc = y;
    Tape::active()->record({x}, y, [=]() mutable {
      auto gy = yc.grad();
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

}  // namespace pibnas
