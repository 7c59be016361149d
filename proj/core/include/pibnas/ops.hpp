#pragma once

// Differentiable primitives. Every function records itself on the active
// tape when any input requires a gradient; otherwise it runs in no-grad mode.
// Activations are NCHW; classifier tensors are rank-2 [N, D].

#include <cstdint>
#include <span>
#include <vector>

#include "pibnas/tensor.hpp"

namespace pibnas {

enum class Mode { train, eval };

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dil_h = 1;
  int dil_w = 1;
  int groups = 1;

  static Conv2dOptions square(int stride, int pad, int dilation = 1, int groups = 1) {
    return {stride, stride, pad, pad, dilation, dilation, groups};
  }
};

int conv_out_size(int in, int kernel, int stride, int pad, int dilation);

/// Cross-correlation. `w` is [C_out, C_in / groups, K_h, K_w]; `b` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dOptions& opt);

/// 1x1 conv where output channel j reads only input channels
/// [starts[j], starts[j] + window). `w` is [C_out, window].
Tensor window_conv1x1(const Tensor& x, const Tensor& w, std::span<const int> starts);

/// Window starts for C_out windows of width `window` over C_in channels.
std::vector<int> window_starts(int c_in, int c_out, int window);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

inline constexpr Real kBatchNormEps = 1e-5;
inline constexpr Real kBatchNormMomentum = 0.1;
inline constexpr Real kLayerNormEps = 1e-6;

/// Running statistics of one batch-norm layer. `tracked` counts train-mode
/// updates; eval mode requires it to be nonzero (or loaded from a checkpoint).
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  Tensor tracked;
  /// Biased batch statistics of the most recent train-mode call.
  std::vector<Real> last_mean;
  std::vector<Real> last_var;

  static BatchNormState make(int channels);
  bool initialized() const { return tracked.defined() && tracked.item() > 0; }
};

/// `gamma`/`beta` may both be undefined (affine = false).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode);

/// Normalizes each sample over (C, H, W); per-channel affine when given.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

enum class PoolKind { max, avg };

/// Average pooling excludes padded cells from the divisor. Max-pool gradient
/// goes to the first maximal element in row-major window order.
Tensor pool2d(const Tensor& x, PoolKind kind, int kernel, int stride, int pad);
inline Tensor pool3x3(const Tensor& x, PoolKind kind, int stride) {
  return pool2d(x, kind, 3, stride, 1);
}

/// x: [N, D], w: [K, D], b: [K] (may be undefined) -> [N, K].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// [N, C, H, W] -> [N, C].
Tensor global_avg_pool(const Tensor& x);
Tensor concat_channels(std::span<const Tensor> xs);
Tensor add(std::span<const Tensor> xs);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real s);
Tensor sum(const Tensor& x);
/// Row-wise softmax of a rank-2 tensor.
Tensor softmax_rows(const Tensor& x);
/// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// weights.data()[index] * x, differentiable in both.
Tensor weighted(const Tensor& x, const Tensor& weights, std::int64_t index);
/// Multiplies sample n by factors[n].
Tensor per_sample_scale(const Tensor& x, std::span<const Real> factors);
/// Drops the first `offset` rows and columns: x[:, :, offset:, offset:].
Tensor crop_shift(const Tensor& x, int offset);
Tensor reshape(const Tensor& x, const Shape& shape);

/// Counts multiply-accumulates issued by conv2d, window_conv1x1 and linear
/// on this thread while alive.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::int64_t count() const { return count_; }

  static void add(std::int64_t macs);

 private:
  std::int64_t count_ = 0;
  MacCounter* saved_;
};

}  // namespace pibnas
