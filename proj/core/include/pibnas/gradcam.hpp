#pragma once

// Gradient-weighted class activation maps over the final cell's output and
// their PGM/PPM renderings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pibnas/network.hpp"
#include "pibnas/tensor.hpp"

namespace pibnas {

inline constexpr int kRenderHw = 224;

struct Heatmap {
  int h = 0;
  int w = 0;
  /// Row-major, every entry in [0, 1].
  std::vector<double> values;
  int target_class = -1;
  std::string source;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y * w + x)]; }
};

/// ReLU(sum_c mean(G_c) * A_c), min-max normalized; an all-zero map stays
/// zero. A and G are one sample's [C, H, W] activations and gradients.
Heatmap cam_from_activations(std::span<const Real> a, std::span<const Real> g, int channels, int h, int w);

/// Maps a [1, 3, H, W] image to (logits [1, K], features [1, C, h, w]).
using CamForward = std::function<std::pair<Tensor, Tensor>(const Tensor&)>;

/// Target defaults to the arg-max logit. Throws std::out_of_range for a bad class.
Heatmap gradcam(const CamForward& forward, const Tensor& image, std::optional<int> target = std::nullopt);
/// Eval-mode GradCAM on the last cell of `net`.
Heatmap gradcam(EvalNetwork& net, const Tensor& image, std::optional<int> target = std::nullopt);

/// Bilinear resize (half-pixel centres, edge clamped) of a single-channel grid.
std::vector<double> resize_bilinear(std::span<const double> src, int h, int w, int out_h, int out_w);

struct Rendering {
  int hw = 0;
  std::vector<std::uint8_t> gray;  // hw * hw
  std::vector<std::uint8_t> rgb;   // hw * hw * 3, interleaved
};

/// Upsamples map and image to out_hw; the overlay blends the map into the red
/// channel at 0.5 opacity. `image` is [3, H, W] with values in [0, 1].
Rendering render_heatmap(const Heatmap& map, std::span<const float> image, int image_hw,
                         int out_hw = kRenderHw);

void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> gray, int w, int h);
void write_ppm(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int w, int h);
/// Reads a binary P6 file with maxval 255 into [3, H, W] floats in [0, 1].
std::vector<float> read_ppm(const std::filesystem::path& path, int& w, int& h);

}  // namespace pibnas
