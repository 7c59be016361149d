#include "pibnas/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "pibnas/blocks.hpp"

namespace pibnas {

namespace {

std::int64_t expanded(int c, double f) {
  const double fc = f * c;
  if (!(f > 0.0) || std::abs(fc - std::round(fc)) > 1e-9) {
    throw std::invalid_argument(fmt::format("F * C = {} * {} is not integral", f, c));
  }
  return static_cast<std::int64_t>(std::llround(fc));
}

using I = std::int64_t;

OpCost conv(I c_in, I c_out, I kh, I kw, I groups, I h_out, I w_out) {
  const I weights = c_out * (c_in / groups) * kh * kw;
  return {weights, weights * h_out * w_out};
}

OpCost norm(I c, I h, I w, const CostOptions& opt) { return {2 * c, opt.count_norm_macs ? c * h * w : 0}; }

I strided(I hw, I s) { return (hw - 1) / s + 1; }

OpCost factorized_reduce(I c_in, I c_out, I hw, const CostOptions& opt) {
  const I ho = hw / 2;
  OpCost r = conv(c_in, c_out / 2, 1, 1, 1, ho, ho);
  r += conv(c_in, c_out / 2, 1, 1, 1, ho, ho);
  r += norm(c_out, ho, ho, opt);
  return r;
}

OpCost act_conv_norm(I c_in, I c_out, I hw, const CostOptions& opt) {
  OpCost r = conv(c_in, c_out, 1, 1, 1, hw, hw);
  r += norm(c_out, hw, hw, opt);
  return r;
}

}  // namespace

std::int64_t eq1_weights(int c, int k, double f) {
  return 2 * expanded(c, f) * c + static_cast<I>(k) * k * c;
}

std::int64_t eq2_weights(int c, int k, double f) {
  return expanded(c, f) * c + static_cast<I>(c) * c + 2 * static_cast<I>(k) * k * c;
}

double coefficient_ratio(double f) {
  if (!(f > 0.0)) throw std::invalid_argument("coefficient_ratio: F must be positive");
  return (f + 1.0) / (2.0 * f);
}

OpCost op_cost(OpKind op, int c_, int stride, int hw_, const CostOptions& opt) {
  const I c = c_, s = stride, hw = hw_, ho = strided(hw, s);
  const I k = op_kernel(op);
  OpCost r;
  switch (op) {
    case OpKind::none: return r;
    case OpKind::skip_connect: return s == 1 ? r : factorized_reduce(c, c, hw, opt);
    case OpKind::sep_conv_3x3:
    case OpKind::sep_conv_5x5:
      r += conv(c, c, k, k, c, ho, ho);
      r += conv(c, c, 1, 1, 1, ho, ho);
      r += norm(c, ho, ho, opt);
      r += conv(c, c, k, k, c, ho, ho);
      r += conv(c, c, 1, 1, 1, ho, ho);
      r += norm(c, ho, ho, opt);
      return r;
    case OpKind::convnext_conv_7x7: {
      const I fc = expanded(c_, 4.0);
      r += conv(c, c, k, k, c, ho, ho);
      r += norm(c, ho, ho, opt);
      r += conv(c, fc, 1, 1, 1, ho, ho);
      r += conv(fc, c, 1, 1, 1, ho, ho);
      return r;
    }
    case OpKind::pib_conv_3x3:
    case OpKind::pib_conv_5x5:
    case OpKind::pib_conv_7x7: {
      const I fc = expanded(c_, opt.ratio);
      r += conv(c, c, k, k, c, ho, ho);
      r += norm(c, ho, ho, opt);
      r += conv(c, fc, 1, 1, 1, ho, ho);
      // Grouped reduce: every output channel reads C of the FC inputs.
      r += opt.grouped_reduce ? OpCost{c * c, c * c * ho * ho} : conv(fc, c, 1, 1, 1, ho, ho);
      r += conv(c, c, k, k, c, ho, ho);
      r += norm(c, ho, ho, opt);
      return r;
    }
    case OpKind::dil_conv_3x3:
    case OpKind::dil_conv_5x5:
      r += conv(c, c, k, k, c, ho, ho);
      r += conv(c, c, 1, 1, 1, ho, ho);
      r += norm(c, ho, ho, opt);
      return r;
    case OpKind::conv_7x1_1x7:
      r += conv(c, c, 1, 7, 1, hw, ho);
      r += conv(c, c, 7, 1, 1, ho, ho);
      r += norm(c, ho, ho, opt);
      return r;
    case OpKind::max_pool_3x3:
    case OpKind::avg_pool_3x3: return norm(c, ho, ho, opt);
  }
  throw std::invalid_argument("op_cost: unknown op");
}

CostReport cost_report(const Genotype& g, const NetworkPlan& plan, const CostOptions& opt) {
  CostReport rep;
  rep.input_hw = plan.input_hw;
  const I c_stem = 3LL * plan.c_init;
  I hw = plan.input_hw;
  rep.stem = conv(3, c_stem, 3, 3, 1, hw, hw);
  rep.stem += norm(c_stem, hw, hw, opt);

  I c_pp = c_stem, c_p = c_stem, hw_pp = hw;
  for (int i = 0; i < plan.layers; ++i) {
    const bool reduction = plan.is_reduction(i);
    const CellType t = reduction ? CellType::reduce : CellType::normal;
    const CellSpec& spec = g.cell(t);
    const I c = plan.channels[static_cast<std::size_t>(i)];
    OpCost cell = hw_pp != hw ? factorized_reduce(c_pp, c, hw_pp, opt) : act_conv_norm(c_pp, c, hw, opt);
    cell += act_conv_norm(c_p, c, hw, opt);
    const I out_hw = reduction ? strided(hw, 2) : hw;
    for (const auto& node : spec.nodes) {
      for (const Edge& e : node) {
        const bool from_input = e.source < 2;
        const int stride = reduction && from_input ? 2 : 1;
        cell += op_cost(e.op, static_cast<int>(c), stride, static_cast<int>(from_input ? hw : out_hw), opt);
      }
    }
    rep.per_layer.push_back({i, t, cell.params, cell.macs});
    hw_pp = hw;
    hw = out_hw;
    c_pp = c_p;
    c_p = static_cast<I>(spec.concat.size()) * c;

    if (opt.include_aux && plan.aux_index && *plan.aux_index == i) {
      const I p = (hw - 5) / 3 + 1;
      rep.aux = conv(c_p, 128, 1, 1, 1, p, p);
      rep.aux += norm(128, p, p, opt);
      rep.aux += conv(128, 768, 2, 2, 1, p - 1, p - 1);
      rep.aux += norm(768, p - 1, p - 1, opt);
      rep.aux += OpCost{768LL * plan.num_classes + plan.num_classes, 768LL * plan.num_classes};
      rep.includes_aux = true;
    }
  }
  rep.classifier = {c_p * plan.num_classes + plan.num_classes, c_p * plan.num_classes};

  rep.params = rep.stem.params + rep.classifier.params + rep.aux.params;
  rep.macs = rep.stem.macs + rep.classifier.macs + rep.aux.macs;
  for (const auto& l : rep.per_layer) {
    rep.params += l.params;
    rep.macs += l.macs;
  }
  return rep;
}

std::vector<CompareRow> compare_table(std::span<const NamedGenotype> genotypes,
                                      std::span<const int> layer_counts, const TableSettings& settings) {
  std::vector<int> layers(layer_counts.begin(), layer_counts.end());
  std::sort(layers.begin(), layers.end(), std::greater<>());
  std::vector<CompareRow> rows;
  for (const auto& ng : genotypes) {
    if (auto v = validate_genotype(ng.genotype); !v.empty()) throw GenotypeValidationError(std::move(v));
    for (int n : layers) {
      const bool aux = settings.cost.include_aux && n >= 3;
      const NetworkPlan plan = plan_network(n, settings.c_init, settings.num_classes, settings.input_hw, aux);
      const CostReport rep = cost_report(ng.genotype, plan, settings.cost);
      rows.push_back({ng.name, n, rep.params_m(), rep.gmac(), std::nullopt});
    }
  }
  return rows;
}

void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows) {
  out << "genotype,layers,params_m,gmac,accuracy\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{:.4f},{:.4f},", r.genotype, r.layers, r.params_m, r.gmac);
    if (r.accuracy) out << fmt::format("{:.4f}", *r.accuracy);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_compare_csv: write failed");
}

std::vector<EqCheckRow> eq_grid_check() {
  std::vector<EqCheckRow> rows;
  Rng rng(0);
  for (int c : {8, 16, 32, 64}) {
    for (int k : {3, 5, 7}) {
      for (double f : {1.5, 2.0, 3.0, 4.0, 4.5}) {
        if (std::abs(f * c - std::round(f * c)) > 1e-9) continue;
        BlockConfig cfg;
        cfg.channels = c;
        cfg.kernel = k;
        cfg.ratio = f;
        cfg.grouped_reduce = true;
        EqCheckRow row{c, k, f, eq1_weights(c, k, f), 0, eq2_weights(c, k, f), 0};
        row.convnext_measured = make_convnext_block(cfg, rng).count_weights().conv();
        row.pib_measured = make_pib_conv(cfg, rng).count_weights().conv();
        rows.push_back(row);
      }
    }
  }
  return rows;
}

}  // namespace pibnas
