#include "pibnas/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

namespace pibnas {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("Dataset::slice out of range");
  Dataset out;
  out.classes = classes;
  out.hw = hw;
  out.norm = norm;
  const auto is = static_cast<std::ptrdiff_t>(image_size());
  out.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin) * is,
                    pixels.begin() + static_cast<std::ptrdiff_t>(end) * is);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Dataset read_cifar_bin(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {}", file.string()));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw DataError(fmt::format("{}: {} bytes is not a whole number of {}-byte records",
                                file.string(), bytes.size(), kCifarRecordBytes));
  }
  Dataset d;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  d.labels.resize(n);
  d.pixels.resize(n * d.image_size());
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError(fmt::format("{}: record {} has label {} (valid 0-9)", file.string(), i, rec[0]));
    }
    d.labels[i] = rec[0];
    for (std::size_t k = 0; k < d.image_size(); ++k) {
      d.pixels[i * d.image_size() + k] = static_cast<float>(rec[1 + k]) / 255.0f;
    }
  }
  return d;
}

void write_cifar_bin(const std::filesystem::path& file, const Dataset& raw) {
  if (raw.hw != kCifarHw) throw DataError("write_cifar_bin: images must be 32x32");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write {}", file.string()));
  std::vector<char> rec(kCifarRecordBytes);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw.labels[i] < 0 || raw.labels[i] > 9) throw DataError("write_cifar_bin: label out of range");
    rec[0] = static_cast<char>(raw.labels[i]);
    const auto img = raw.image(i);
    for (std::size_t k = 0; k < img.size(); ++k) {
      const float v = std::clamp(img[k], 0.0f, 1.0f);
      rec[1 + k] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw DataError(fmt::format("write failed: {}", file.string()));
}

void normalize(Dataset& d, const Normalization& norm) {
  const std::size_t plane = static_cast<std::size_t>(d.hw) * d.hw;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = d.pixels.data() + i * d.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - norm.mean[c]) / norm.std[c];
    }
  }
  d.norm = norm;
}

CifarSplits load_cifar10(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw DataError(fmt::format("dataset directory {} does not exist", dir.string()));
  }
  CifarSplits s;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = read_cifar_bin(dir / fmt::format("data_batch_{}.bin", b));
    s.train.pixels.insert(s.train.pixels.end(), part.pixels.begin(), part.pixels.end());
    s.train.labels.insert(s.train.labels.end(), part.labels.begin(), part.labels.end());
  }
  s.test = read_cifar_bin(dir / "test_batch.bin");
  normalize(s.train, Normalization::cifar10());
  normalize(s.test, Normalization::cifar10());
  return s;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.n < spec.classes) {
    throw std::invalid_argument("make_synthetic: need n >= classes >= 1");
  }
  if (spec.hw < 1) throw std::invalid_argument("make_synthetic: hw must be positive");
  Rng rng(spec.seed);
  const int hw = spec.hw;
  const std::size_t plane = static_cast<std::size_t>(hw) * hw;
  std::vector<std::vector<float>> means(static_cast<std::size_t>(spec.classes));
  for (auto& m : means) {
    m.resize(3 * plane);
    std::array<double, 3> colour{}, blob{};
    for (auto& v : colour) v = 0.8 * rng.normal();
    for (auto& v : blob) v = 1.5 * rng.normal();
    const double cy = rng.uniform(0.25, 0.75) * hw, cx = rng.uniform(0.25, 0.75) * hw;
    const double sigma = hw / 5.0;
    for (std::size_t c = 0; c < 3; ++c) {
      for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
          const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          m[c * plane + static_cast<std::size_t>(y * hw + x)] =
              static_cast<float>(colour[c] + blob[c] * std::exp(-r2 / (2 * sigma * sigma)));
        }
      }
    }
  }
  Dataset d;
  d.classes = spec.classes;
  d.hw = hw;
  d.norm = Normalization::synthetic();
  d.labels.resize(static_cast<std::size_t>(spec.n));
  d.pixels.resize(static_cast<std::size_t>(spec.n) * d.image_size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    d.labels[i] = label;
    const auto& m = means[static_cast<std::size_t>(label)];
    float* p = d.pixels.data() + i * d.image_size();
    for (std::size_t k = 0; k < m.size(); ++k) {
      p[k] = m[k] + (spec.noise > 0 ? static_cast<float>(spec.noise * rng.normal()) : 0.0f);
    }
  }
  return d;
}

void cutout(std::span<float> image, int channels, int hw, int length, Rng& rng) {
  if (length < 0) throw std::invalid_argument("cutout: negative length");
  const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(hw)));
  const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(hw)));
  if (length == 0) return;
  const int y1 = std::clamp(cy - length / 2, 0, hw), y2 = std::clamp(cy + length / 2, 0, hw);
  const int x1 = std::clamp(cx - length / 2, 0, hw), x2 = std::clamp(cx + length / 2, 0, hw);
  for (int c = 0; c < channels; ++c) {
    for (int y = y1; y < y2; ++y) {
      for (int x = x1; x < x2; ++x) image[static_cast<std::size_t>((c * hw + y) * hw + x)] = 0.0f;
    }
  }
}

void random_crop_flip(std::span<float> image, int channels, int hw, int pad, Rng& rng) {
  const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
  const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
  const bool flip = rng.bernoulli(0.5);
  std::vector<float> src(image.begin(), image.end());
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < hw; ++y) {
      for (int x = 0; x < hw; ++x) {
        const int sy = y + dy, sx = (flip ? hw - 1 - x : x) + dx;
        const bool inside = sy >= 0 && sy < hw && sx >= 0 && sx < hw;
        image[static_cast<std::size_t>((c * hw + y) * hw + x)] =
            inside ? src[static_cast<std::size_t>((c * hw + sy) * hw + sx)] : 0.0f;
      }
    }
  }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng* shuffle) {
  if (batch < 1) throw std::invalid_argument("epoch_batches: batch must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle->below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + static_cast<std::size_t>(batch))));
  }
  return out;
}

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices, const AugmentConfig* aug,
                 Rng* rng) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (aug && !rng) throw std::invalid_argument("make_batch: augmentation needs an rng");
  const std::size_t is = d.image_size();
  std::vector<Real> x(indices.size() * is);
  std::vector<float> img(is);
  Batch b;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto src = d.image(indices[k]);
    std::copy(src.begin(), src.end(), img.begin());
    if (aug) {
      if (aug->crop_flip) random_crop_flip(img, 3, d.hw, aug->pad, *rng);
      if (aug->cutout > 0) cutout(img, 3, d.hw, aug->cutout, *rng);
    }
    std::copy(img.begin(), img.end(), x.begin() + static_cast<std::ptrdiff_t>(k * is));
    b.labels.push_back(d.labels[indices[k]]);
  }
  b.x = Tensor::from(Shape{static_cast<std::int64_t>(indices.size()), 3, d.hw, d.hw}, std::move(x));
  return b;
}

}  // namespace pibnas
