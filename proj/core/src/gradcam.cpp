#include "pibnas/gradcam.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

#include "pibnas/ops.hpp"

namespace pibnas {

Heatmap cam_from_activations(std::span<const Real> a, std::span<const Real> g, int channels, int h, int w) {
  const auto plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  if (a.size() != plane * static_cast<std::size_t>(channels) || g.size() != a.size()) {
    throw std::invalid_argument("cam_from_activations: size mismatch");
  }
  Heatmap m;
  m.h = h;
  m.w = w;
  m.values.assign(plane, 0.0);
  for (int c = 0; c < channels; ++c) {
    const auto off = static_cast<std::size_t>(c) * plane;
    Real wc = 0.0;
    for (std::size_t k = 0; k < plane; ++k) wc += g[off + k];
    wc /= static_cast<Real>(plane);
    for (std::size_t k = 0; k < plane; ++k) m.values[k] += wc * a[off + k];
  }
  for (auto& v : m.values) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  const double mn = *lo, mx = *hi;
  if (mx > mn) {
    for (auto& v : m.values) v = (v - mn) / (mx - mn);
  } else {
    // Constant map: zero stays zero, any positive constant becomes 1.
    for (auto& v : m.values) v = mx > 0.0 ? 1.0 : 0.0;
  }
  return m;
}

Heatmap gradcam(const CamForward& forward, const Tensor& image, std::optional<int> target) {
  if (image.shape().rank() != 4 || image.shape().n() != 1) {
    throw std::invalid_argument("gradcam: expected a single image (1, C, H, W)");
  }
  Tape tape;
  Tape::Scope scope(tape);
  auto [logits, features] = forward(image);
  const auto k = static_cast<int>(logits.shape()[1]);
  int cls = target.value_or(-1);
  if (!target) {
    const auto row = logits.data();
    cls = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  } else if (cls < 0 || cls >= k) {
    throw std::out_of_range(fmt::format("gradcam: class {} out of range [0, {})", cls, k));
  }
  const auto& fs = features.shape();
  std::vector<Real> grad(static_cast<std::size_t>(features.numel()), 0.0);
  if (logits.requires_grad()) {
    std::vector<Real> onehot(static_cast<std::size_t>(k), 0.0);
    onehot[static_cast<std::size_t>(cls)] = 1.0;
    const Tensor selected = sum(mul(logits, Tensor::from(logits.shape(), std::move(onehot))));
    tape.backward(selected);
    if (features.has_grad()) std::copy(features.grad().begin(), features.grad().end(), grad.begin());
  }
  Heatmap m = cam_from_activations(features.data(), grad, static_cast<int>(fs.c()),
                                   static_cast<int>(fs.h()), static_cast<int>(fs.w()));
  m.target_class = cls;
  return m;
}

Heatmap gradcam(EvalNetwork& net, const Tensor& image, std::optional<int> target) {
  Heatmap m = gradcam(
      [&](const Tensor& x) {
        ForwardResult r = net.forward(x, Mode::eval);
        return std::pair{r.logits, r.features};
      },
      image, target);
  m.source = fmt::format("cells.{}", net.plan().layers - 1);
  return m;
}

std::vector<double> resize_bilinear(std::span<const double> src, int h, int w, int out_h, int out_w) {
  if (src.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w) || out_h < 1 || out_w < 1) {
    throw std::invalid_argument("resize_bilinear: bad dimensions");
  }
  std::vector<double> out(static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w));
  auto coord = [](int dst, int in, int outn, int& i0, int& i1, double& t) {
    double s = (dst + 0.5) * in / outn - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - i0;
  };
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double ty;
    coord(y, h, out_h, y0, y1, ty);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double tx;
      coord(x, w, out_w, x0, x1, tx);
      auto v = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy * w + xx)]; };
      const double top = v(y0, x0) * (1 - tx) + v(y0, x1) * tx;
      const double bot = v(y1, x0) * (1 - tx) + v(y1, x1) * tx;
      out[static_cast<std::size_t>(y * out_w + x)] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Rendering render_heatmap(const Heatmap& map, std::span<const float> image, int image_hw, int out_hw) {
  if (out_hw < map.h || out_hw < map.w) throw std::invalid_argument("render_heatmap: out_hw below map size");
  const auto plane = static_cast<std::size_t>(image_hw) * static_cast<std::size_t>(image_hw);
  if (image.size() != 3 * plane) throw std::invalid_argument("render_heatmap: image must be [3, H, W]");
  Rendering r;
  r.hw = out_hw;
  const auto up = resize_bilinear(map.values, map.h, map.w, out_hw, out_hw);
  r.gray.resize(up.size());
  for (std::size_t i = 0; i < up.size(); ++i) r.gray[i] = to_byte(up[i]);

  std::vector<std::vector<double>> ch(3);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> src(image.begin() + static_cast<std::ptrdiff_t>(c * plane),
                            image.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
    ch[c] = resize_bilinear(src, image_hw, image_hw, out_hw, out_hw);
  }
  r.rgb.resize(up.size() * 3);
  for (std::size_t i = 0; i < up.size(); ++i) {
    r.rgb[3 * i] = to_byte(0.5 * ch[0][i] + 0.5 * up[i]);
    r.rgb[3 * i + 1] = to_byte(ch[1][i]);
    r.rgb[3 * i + 2] = to_byte(ch[2][i]);
  }
  return r;
}

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, std::span<const std::uint8_t> bytes,
                  int w, int h) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(fmt::format("write failed: {}", path.string()));
}

}  // namespace

void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> gray, int w, int h) {
  if (gray.size() != static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
    throw std::invalid_argument("write_pgm: size mismatch");
  }
  write_netpbm(path, "P5", gray, w, h);
}

void write_ppm(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int w, int h) {
  if (rgb.size() != 3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
    throw std::invalid_argument("write_ppm: size mismatch");
  }
  write_netpbm(path, "P6", rgb, w, h);
}

std::vector<float> read_ppm(const std::filesystem::path& path, int& w, int& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t += c;
      }
    }
    return t;
  };
  if (token() != "P6") throw std::runtime_error(fmt::format("{}: not a binary PPM", path.string()));
  w = std::stoi(token());
  h = std::stoi(token());
  if (token() != "255") throw std::runtime_error(fmt::format("{}: maxval must be 255", path.string()));
  const auto plane = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::vector<unsigned char> bytes(plane * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error(fmt::format("{}: truncated pixel data", path.string()));
  }
  std::vector<float> out(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = static_cast<float>(bytes[3 * i + c]) / 255.0f;
  }
  return out;
}

}  // namespace pibnas
