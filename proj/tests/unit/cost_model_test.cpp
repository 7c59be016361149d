#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pibnas/cost_model.hpp"
#include "pibnas/network.hpp"

using namespace pibnas;

namespace {

Genotype fixture(const char* name) { return load_genotype_file(testing::data_path(name)); }

}  // namespace

TEST_SUITE("cost_model") {
  TEST_CASE("closed forms at hand-computed points") {
    CHECK(eq1_weights(16, 7, 4.0) == 2832);
    CHECK(eq1_weights(1, 1, 1.0) == 3);
    CHECK(eq1_weights(32, 3, 4.0) == 8480);
    CHECK(eq2_weights(16, 3, 2.0) == 1056);
    CHECK(eq2_weights(16, 7, 2.0) == 2336);
    CHECK(eq2_weights(8, 5, 1.5) == 12 * 8 + 64 + 2 * 25 * 8);
    for (int c : {8, 24, 64}) {
      for (int k : {3, 5, 7}) {
        for (double f : {1.5, 2.0, 3.0, 4.0}) {
          CHECK(eq1_weights(c, k, f) == testing::eq1_oracle(c, k, f));
          CHECK(eq2_weights(c, k, f) == testing::eq2_oracle(c, k, f));
        }
      }
    }
  }

  TEST_CASE("coefficient ratio") {
    CHECK(coefficient_ratio(4.0) == doctest::Approx(0.625));
    CHECK(std::abs(coefficient_ratio(4.0) - 0.63) <= 0.01);
    CHECK(coefficient_ratio(1.0) == doctest::Approx(1.0));
    for (double f = 1.25; f <= 8.0; f += 0.25) {
      CHECK(coefficient_ratio(f) < 1.0);
      CHECK(coefficient_ratio(f) > 0.5);
      CHECK(coefficient_ratio(f + 0.25) < coefficient_ratio(f));
    }
  }

  TEST_CASE("grouped PIBConv beats the ConvNeXt block at equal ratio for large C") {
    for (int c : {64, 128, 256}) {
      for (double f : {2.0, 4.0}) CHECK(eq2_weights(c, 7, f) < eq1_weights(c, 7, f));
    }
  }

  TEST_CASE("baseline genotype matches the published cost columns") {
    const Genotype g = fixture("genotypes/darts_v2.geno");
    const auto r20 = cost_report(g, plan_network(20, 36, 10, 32, false));
    const auto r10 = cost_report(g, plan_network(10, 36, 10, 32, false));
    CHECK(std::abs(r20.params_m() - 3.30) / 3.30 <= 0.02);
    CHECK(std::abs(r10.params_m() - 1.6) / 1.6 <= 0.03);
    CHECK(std::abs(r20.gmac() - 0.547) / 0.547 <= 0.10);
    CHECK(std::abs(r10.gmac() - 0.265) / 0.265 <= 0.10);
  }

  TEST_CASE("per-layer costs add up") {
    const Genotype g = fixture("genotypes/pibconv_representative.geno");
    const auto r = cost_report(g, plan_network(8, 16, 10, 32, false));
    REQUIRE(r.per_layer.size() == 8);
    std::int64_t p = r.stem.params + r.classifier.params, m = r.stem.macs + r.classifier.macs;
    for (const auto& l : r.per_layer) {
      p += l.params;
      m += l.macs;
      CHECK(l.cell == (l.index == 2 || l.index == 5 ? CellType::reduce : CellType::normal));
    }
    CHECK(p == r.params);
    CHECK(m == r.macs);
  }

  TEST_CASE("counted MACs agree with an instrumented forward") {
    for (const char* f : {"genotypes/darts_v2.geno", "genotypes/pibconv_representative.geno"}) {
      CAPTURE(f);
      const Genotype g = fixture(f);
      const NetworkPlan plan = plan_network(4, 4, 10, 16, false);
      Rng rng(1);
      EvalNetwork net(g, plan, {}, rng);
      const auto expected = cost_report(g, plan).macs;
      for (int batch : {1, 3}) {
        MacCounter mc;
        net.forward(testing::random_leaf(Shape{batch, 3, 16, 16}, 2), Mode::train);
        CHECK(mc.count() == batch * expected);
      }
    }
  }

  TEST_CASE("aux head and norm MACs only add") {
    const Genotype g = fixture("genotypes/darts_v2.geno");
    const NetworkPlan plan = plan_network(8, 16, 10, 32, true);
    const auto base = cost_report(g, plan);
    CostOptions aux;
    aux.include_aux = true;
    CostOptions norms;
    norms.count_norm_macs = true;
    CHECK(cost_report(g, plan, aux).params > base.params);
    CHECK(cost_report(g, plan, aux).includes_aux);
    CHECK(cost_report(g, plan, norms).macs > base.macs);
    CHECK(cost_report(g, plan, norms).params == base.params);
  }

  TEST_CASE("wider bottleneck costs more") {
    const Genotype g = fixture("genotypes/pibconv_representative.geno");
    const NetworkPlan plan = plan_network(8, 16, 10, 32, false);
    CostOptions f2, f3, dense;
    f3.ratio = 3.0;
    dense.grouped_reduce = false;
    CHECK(cost_report(g, plan, f3).params > cost_report(g, plan, f2).params);
    CHECK(cost_report(g, plan, dense).params > cost_report(g, plan, f2).params);
  }

  TEST_CASE("compare table rows shrink with depth") {
    const std::vector<NamedGenotype> gs{{"darts", fixture("genotypes/darts_v2.geno")},
                                        {"pib", fixture("genotypes/pibconv_representative.geno")}};
    const std::vector<int> layers{20, 15, 10, 8, 5, 2};
    const auto rows = compare_table(gs, layers);
    REQUIRE(rows.size() == 12);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].genotype != rows[i - 1].genotype) continue;
      CHECK(rows[i].layers < rows[i - 1].layers);
      CHECK(rows[i].params_m < rows[i - 1].params_m);
      CHECK(rows[i].gmac < rows[i - 1].gmac);
    }
    std::stringstream ss;
    write_compare_csv(ss, rows);
    std::string header;
    std::getline(ss, header);
    CHECK(header == "genotype,layers,params_m,gmac,accuracy");
    std::string first;
    std::getline(ss, first);
    CHECK(first.starts_with("darts,20,"));
    CHECK(first.ends_with(","));
  }

  TEST_CASE("none edges cost nothing") {
    CHECK(op_cost(OpKind::none, 16, 1, 8).params == 0);
    CHECK(op_cost(OpKind::none, 16, 2, 8).macs == 0);
    CHECK(op_cost(OpKind::skip_connect, 16, 1, 8).params == 0);
    CHECK(op_cost(OpKind::skip_connect, 16, 2, 8).params > 0);
    // two (3x3 dw + pw) stacks: weights plus four affine norms worth 2C each
    CHECK(op_cost(OpKind::sep_conv_3x3, 16, 1, 8).params == 800 + 4 * 16);
  }
}
