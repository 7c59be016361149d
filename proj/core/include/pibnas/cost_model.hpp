#pragma once

// Analytical parameter and multiply-accumulate accounting for blocks, cells
// and whole evaluation networks. Counts are derived from closed-form layer
// shapes; no tensors are allocated.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pibnas/genotype.hpp"

namespace pibnas {

/// 2FC^2 + K^2C: conv weights of the ConvNeXt inverted bottleneck.
std::int64_t eq1_weights(int c, int k, double f);
/// (F+1)C^2 + 2K^2C: conv weights of the grouped pseudo-inverted bottleneck.
std::int64_t eq2_weights(int c, int k, double f);
/// (F+1) / (2F), the ratio of the C^2 coefficients at equal F.
double coefficient_ratio(double f);

struct CostOptions {
  double ratio = 2.0;
  bool grouped_reduce = true;
  bool include_aux = false;
  /// Counts one MAC per normalized element (affine scale and shift).
  bool count_norm_macs = false;
};

struct OpCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  OpCost& operator+=(const OpCost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
};

/// Cost of one block applied to a C x hw x hw input with the given stride.
OpCost op_cost(OpKind op, int c, int stride, int hw, const CostOptions& opt = {});

struct LayerCost {
  int index = 0;
  CellType cell = CellType::normal;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct CostReport {
  std::vector<LayerCost> per_layer;
  OpCost stem;
  OpCost classifier;
  OpCost aux;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  int input_hw = 32;
  bool includes_aux = false;

  double params_m() const { return static_cast<double>(params) / 1e6; }
  double gmac() const { return static_cast<double>(macs) / 1e9; }
};

/// Params and MACs of the evaluation network for one input image.
CostReport cost_report(const Genotype& g, const NetworkPlan& plan, const CostOptions& opt = {});
inline CostReport count_params(const Genotype& g, const NetworkPlan& plan, const CostOptions& opt = {}) {
  return cost_report(g, plan, opt);
}
inline CostReport count_macs(const Genotype& g, const NetworkPlan& plan, const CostOptions& opt = {}) {
  return cost_report(g, plan, opt);
}

struct NamedGenotype {
  std::string name;
  Genotype genotype;
};

struct CompareRow {
  std::string genotype;
  int layers = 0;
  double params_m = 0.0;
  double gmac = 0.0;
  std::optional<double> accuracy;
};

struct TableSettings {
  int c_init = 36;
  int num_classes = 10;
  int input_hw = 32;
  CostOptions cost;
};

/// One row per (genotype, layer count), layers descending within a genotype.
std::vector<CompareRow> compare_table(std::span<const NamedGenotype> genotypes,
                                      std::span<const int> layer_counts,
                                      const TableSettings& settings = {});
/// Header `genotype,layers,params_m,gmac,accuracy`; accuracy left empty when unknown.
void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows);

struct EqCheckRow {
  int c = 0;
  int k = 0;
  double f = 0.0;
  std::int64_t eq1 = 0;
  std::int64_t convnext_measured = 0;
  std::int64_t eq2 = 0;
  std::int64_t pib_measured = 0;
  bool ok() const { return eq1 == convnext_measured && eq2 == pib_measured; }
};

/// Builds the ConvNeXt and grouped PIBConv blocks on the grid
/// C in {8,16,32,64}, K in {3,5,7}, F in {1.5,2,3,4,4.5} (F*C integral) and
/// compares their conv weight counts with eq1_weights / eq2_weights.
std::vector<EqCheckRow> eq_grid_check();

}  // namespace pibnas
