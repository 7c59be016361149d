#pragma once

// Continuous relaxation of the cell search space: every candidate edge holds
// all operations at once, mixed by softmax(alpha).

#include <memory>
#include <vector>

#include "pibnas/blocks.hpp"
#include "pibnas/genotype.hpp"
#include "pibnas/rng.hpp"

namespace pibnas {

/// Offset of the first candidate edge feeding derived node `node` (0-based).
constexpr int edge_offset(int node) { return node * (node + 3) / 2; }

/// Architecture logits, one [14, |ops|] matrix per cell type.
struct ArchParams {
  std::vector<OpKind> ops;
  Tensor normal;
  Tensor reduce;

  /// Entries drawn from scale * N(0, 1).
  static ArchParams init(std::vector<OpKind> ops, Rng& rng, Real scale = 1e-3);
  static ArchParams zeros(std::vector<OpKind> ops);

  Tensor& of(CellType t) { return t == CellType::normal ? normal : reduce; }
  const Tensor& of(CellType t) const { return t == CellType::normal ? normal : reduce; }
  int num_ops() const { return static_cast<int>(ops.size()); }
  /// Softmax weights of one edge row.
  std::vector<Real> weights(CellType t, int edge) const;
};

/// All candidate blocks of one edge.
class MixedOp {
 public:
  MixedOp(std::span<const OpKind> ops, const BlockConfig& cfg, Rng& rng);

  /// Sum over ops of weights[row * |ops| + o] * op(x), where `weights` is the
  /// row-softmaxed alpha matrix.
  Tensor forward(const Tensor& x, const Tensor& weights, int row, Mode mode);
  void collect(const std::string& prefix, NamedTensors* params, NamedTensors* buffers);
  std::vector<Block>& blocks() { return blocks_; }

 private:
  std::vector<Block> blocks_;
};

/// softmax(alphas.of(t)[edge]) mixture of `op` outputs on x.
Tensor mixed_forward(MixedOp& op, const Tensor& x, const ArchParams& alphas, CellType t, int edge,
                     Mode mode);

struct SupernetOptions {
  /// Search-phase blocks: norm affine off by default.
  BlockConfig block{.affine = false};
  std::vector<OpKind> ops{search_ops().begin(), search_ops().end()};
};

class Supernet {
 public:
  Supernet(const NetworkPlan& plan, const SupernetOptions& options, Rng& rng);
  ~Supernet();
  Supernet(Supernet&&) noexcept;
  Supernet& operator=(Supernet&&) noexcept;

  /// Logits [N, classes].
  Tensor forward(const Tensor& x, const ArchParams& alphas, Mode mode);
  NamedTensors weights();
  NamedTensors buffers();
  const NetworkPlan& plan() const { return plan_; }
  const std::vector<OpKind>& ops() const { return ops_; }

 private:
  struct Impl;
  NetworkPlan plan_;
  std::vector<OpKind> ops_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pibnas
