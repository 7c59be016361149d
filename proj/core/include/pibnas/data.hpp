#pragma once

// Datasets: CIFAR-10 binary batches and a synthetic stand-in, plus the
// train-time augmentation pipeline (pad-4 crop, flip, cutout) and batching.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "pibnas/rng.hpp"
#include "pibnas/tensor.hpp"

namespace pibnas {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr int kCifarHw = 32;

struct Normalization {
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> std{1.0f, 1.0f, 1.0f};

  static Normalization cifar10() {
    return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  }
  static Normalization synthetic() { return {{0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f}}; }
};

/// Images stored NCHW with 3 channels, already normalized by `norm`.
struct Dataset {
  int classes = 10;
  int hw = kCifarHw;
  std::vector<float> pixels;
  std::vector<int> labels;
  Normalization norm;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return static_cast<std::size_t>(3 * hw * hw); }
  std::span<const float> image(std::size_t i) const {
    return std::span(pixels).subspan(i * image_size(), image_size());
  }
  /// Samples [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const;
};

/// One CIFAR-10 binary file, pixels scaled to [0, 1] (not normalized).
Dataset read_cifar_bin(const std::filesystem::path& file);
/// Inverse of read_cifar_bin; pixel values are rounded to bytes.
void write_cifar_bin(const std::filesystem::path& file, const Dataset& raw);
void normalize(Dataset& d, const Normalization& norm);

struct CifarSplits {
  Dataset train;
  Dataset test;
};
/// `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`, normalized.
CifarSplits load_cifar10(const std::filesystem::path& dir);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  int n = 512;
  int classes = 4;
  int hw = 32;
  double noise = 0.5;
};
/// Class-conditional images: a per-class colour offset plus a smooth blob,
/// with i.i.d. Gaussian pixel noise. Labels cycle 0, 1, ..., classes - 1.
Dataset make_synthetic(const SyntheticSpec& spec);

/// Zeroes a length x length square centred on a uniformly drawn pixel,
/// clipped to the image, in every channel.
void cutout(std::span<float> image, int channels, int hw, int length, Rng& rng);
/// Random crop from the zero-padded image, then a horizontal flip with p = 0.5.
void random_crop_flip(std::span<float> image, int channels, int hw, int pad, Rng& rng);

struct AugmentConfig {
  bool crop_flip = true;
  int pad = 4;
  /// 0 disables cutout.
  int cutout = 16;
};

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

/// Sample order for one epoch, cut into batches (the last may be short).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng* shuffle);
/// Gathers samples; applies augmentation when `aug` is given.
Batch make_batch(const Dataset& d, std::span<const std::size_t> indices,
                 const AugmentConfig* aug = nullptr, Rng* rng = nullptr);

}  // namespace pibnas
