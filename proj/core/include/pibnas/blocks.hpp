#pragma once

// Candidate operations of the search space as parameterized blocks.
//
// Topologies (conv weights in brackets, norm affine counted separately):
//   sep_conv      [act -> dw(K, s) -> pw(C->C) -> norm] -> [act -> dw(K) -> pw -> norm]
//   convnext      dw(K, s) -> norm -> pw(C->FC) -> act -> pw(FC->C)          [2FC^2 + K^2C]
//   pib_conv      dw(K, s) -> norm -> pw(C->FC) -> act -> pw_reduce(FC->C)
//                   -> dw(K) -> norm                   [(F+1)C^2 + 2K^2C, grouped reduce]
//   dil_conv      act -> dw(K, dilation 2, s) -> pw(C->C) -> norm
//   conv_7x1_1x7  act -> conv(1x7, stride (1, s)) -> conv(7x1, stride (s, 1)) -> norm
//   pools         pool3x3(s) -> norm
//   skip          identity (s = 1) or factorized reduce (s = 2)
//   none          zeros of the strided output shape
//
// Convolutions are bias-free. With `grouped_reduce`, the channel-reducing
// pointwise conv lets each output channel read C of the FC inputs; this is a
// grouped conv (groups = F) when F is an integer dividing C, otherwise a
// channel-window conv with the same connectivity rule.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "pibnas/genotype.hpp"
#include "pibnas/ops.hpp"
#include "pibnas/rng.hpp"
#include "pibnas/tensor.hpp"

namespace pibnas {

enum class Activation { gelu, relu };
enum class NormKind { batch, layer };

std::string_view activation_name(Activation a);
std::string_view norm_name(NormKind n);

struct BlockConfig {
  int channels = 16;
  int kernel = 3;
  int stride = 1;
  /// Inverted-bottleneck ratio F = C_inv / C.
  double ratio = 2.0;
  Activation activation = Activation::gelu;
  NormKind norm = NormKind::batch;
  bool grouped_reduce = true;
  /// Learnable norm scale/shift (off during search).
  bool affine = true;

  /// F * C; throws if not integral or F < 1.
  int expanded_channels() const;
};

enum class ParamCategory { conv, norm, linear, bias };

struct ParamItem {
  std::string layer;
  ParamCategory category;
  std::int64_t count;
};

struct WeightCount {
  std::vector<ParamItem> items;

  std::int64_t of(ParamCategory c) const;
  std::int64_t conv() const { return of(ParamCategory::conv); }
  std::int64_t norm() const { return of(ParamCategory::norm); }
  std::int64_t total() const;
  void append(const WeightCount& other, const std::string& prefix);
};

struct ActLayer {
  Activation act;
};
struct ConvLayer {
  std::string name;
  Tensor weight;
  Conv2dOptions opt;
};
struct WindowConvLayer {
  std::string name;
  Tensor weight;  // [C_out, window]
  std::vector<int> starts;
};
struct NormLayer {
  std::string name;
  NormKind kind;
  Tensor gamma;  // undefined when not affine
  Tensor beta;
  BatchNormState state;
};
struct PoolLayer {
  PoolKind kind;
  int kernel;
  int stride;
  int pad;
};

using Layer = std::variant<ActLayer, ConvLayer, WindowConvLayer, NormLayer, PoolLayer>;

/// Ordered layer chain.
class Sequential {
 public:
  void add(Layer layer) { layers_.push_back(std::move(layer)); }
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers);
  WeightCount count_weights() const;
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
};

/// Layer factories used by blocks and by the network stem/preprocessing.
ConvLayer make_conv(const std::string& name, int c_in, int c_out, int kh, int kw,
                    const Conv2dOptions& opt, Rng& rng);
NormLayer make_norm(const std::string& name, int channels, NormKind kind, bool affine);

class Block {
 public:
  enum class Topology { sequential, factorized_reduce, identity, zero };

  OpKind kind() const { return kind_; }
  const BlockConfig& config() const { return cfg_; }
  Topology topology() const { return topology_; }
  int out_channels() const { return out_channels_; }
  bool is_identity() const { return topology_ == Topology::identity; }

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers);
  WeightCount count_weights() const { return body_.count_weights(); }

  Sequential& body() { return body_; }

 private:
  friend Block make_sep_conv(const BlockConfig&, Rng&);
  friend Block make_convnext_block(const BlockConfig&, Rng&);
  friend Block make_pib_conv(const BlockConfig&, Rng&);
  friend Block make_dil_conv(const BlockConfig&, Rng&);
  friend Block make_conv_7x1_1x7(const BlockConfig&, Rng&);
  friend Block make_pool(const BlockConfig&, PoolKind);
  friend Block make_skip(const BlockConfig&, Rng&);
  friend Block make_zero(const BlockConfig&);
  friend Block make_factorized_reduce(int, int, const BlockConfig&, Rng&);
  friend Block make_act_conv_norm(int, int, const BlockConfig&, Rng&);

  Block(OpKind kind, BlockConfig cfg, Topology topology, int out_channels)
      : kind_(kind), cfg_(cfg), topology_(topology), out_channels_(out_channels) {}

  OpKind kind_;
  BlockConfig cfg_;
  Topology topology_;
  int out_channels_;
  Sequential body_;
};

Block make_sep_conv(const BlockConfig& cfg, Rng& rng);
Block make_convnext_block(const BlockConfig& cfg, Rng& rng);
Block make_pib_conv(const BlockConfig& cfg, Rng& rng);
Block make_dil_conv(const BlockConfig& cfg, Rng& rng);
Block make_conv_7x1_1x7(const BlockConfig& cfg, Rng& rng);
Block make_pool(const BlockConfig& cfg, PoolKind kind);
Block make_skip(const BlockConfig& cfg, Rng& rng);
Block make_zero(const BlockConfig& cfg);
/// act -> two parallel 1x1 stride-2 convs (second on the input shifted by one
/// pixel) -> channel concat -> norm. Requires even C_out and even H, W.
Block make_factorized_reduce(int c_in, int c_out, const BlockConfig& cfg, Rng& rng);
/// act -> 1x1 conv (C_in -> C_out) -> norm; cell input preprocessing.
Block make_act_conv_norm(int c_in, int c_out, const BlockConfig& cfg, Rng& rng);

/// Builds the block for `kind`, taking the kernel size from the kind.
/// ConvNeXt blocks built this way always use F = 4.
Block make_block(OpKind kind, const BlockConfig& cfg, Rng& rng);

/// Learnable scalars of a block, itemized per layer.
WeightCount count_block_weights(const Block& b);

}  // namespace pibnas
