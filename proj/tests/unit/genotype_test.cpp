#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "pibnas/genotype.hpp"
#include "pibnas/rng.hpp"

using namespace pibnas;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Genotype random_genotype(Rng& rng) {
  Genotype g;
  const auto ops = all_ops();
  for (CellType t : {CellType::normal, CellType::reduce}) {
    for (int node = 0; node < kCellNodes; ++node) {
      for (auto& e : g.cell(t).nodes[static_cast<std::size_t>(node)]) {
        e.op = ops[rng.below(ops.size())];
        e.source = static_cast<int>(rng.below(static_cast<std::uint64_t>(node + 2)));
      }
    }
    std::set<int> concat;
    for (int i = 2; i < 6; ++i) {
      if (rng.bernoulli(0.7)) concat.insert(i);
    }
    if (concat.empty()) concat.insert(5);
    g.cell(t).concat = concat;
  }
  return g;
}

const char* kAllSkip =
    "normal: (skip_connect,0)(skip_connect,1) | (skip_connect,0)(skip_connect,1) | "
    "(skip_connect,0)(skip_connect,1) | (skip_connect,0)(skip_connect,1) ; concat: 2 3 4 5 ;\n"
    "reduce: (skip_connect,0)(skip_connect,1) | (skip_connect,0)(skip_connect,1) | "
    "(skip_connect,0)(skip_connect,1) | (skip_connect,0)(skip_connect,1) ; concat: 2 3 4 5";

}  // namespace

TEST_SUITE("genotype") {
  TEST_CASE("parse builds the listed edges") {
    const Genotype g = parse_genotype(kAllSkip);
    for (CellType t : {CellType::normal, CellType::reduce}) {
      for (const auto& node : g.cell(t).nodes) {
        CHECK(node[0] == Edge{OpKind::skip_connect, 0});
        CHECK(node[1] == Edge{OpKind::skip_connect, 1});
      }
      CHECK(g.cell(t).concat == std::set<int>{2, 3, 4, 5});
    }
  }

  TEST_CASE("canonical string is deterministic and whitespace-insensitive") {
    const std::string a = serialize_genotype(parse_genotype(kAllSkip));
    std::string spaced = kAllSkip;
    for (std::size_t p = 0; (p = spaced.find(',', p)) != std::string::npos; p += 3) spaced.replace(p, 1, " , ");
    CHECK(serialize_genotype(parse_genotype(spaced)) == a);
    CHECK(a.find("  ") == std::string::npos);
  }

  TEST_CASE("alias spelling is accepted and normalized") {
    std::string text = kAllSkip;
    text.replace(text.find("skip_connect"), 12, "Dialated_Conv_3x3");
    const Genotype g = parse_genotype(text);
    CHECK(g.normal.nodes[0][0].op == OpKind::dil_conv_3x3);
    CHECK(serialize_genotype(g).find("dil_conv_3x3") != std::string::npos);
    CHECK(serialize_genotype(g).find("dialated") == std::string::npos);
  }

  TEST_CASE("unknown operation is rejected") {
    std::string text = kAllSkip;
    text.replace(text.find("skip_connect"), 12, "pib_conv_9x9");
    CHECK_THROWS_AS(parse_genotype(text), GenotypeParseError);
  }

  TEST_CASE("syntax errors report a position") {
    std::string text = kAllSkip;
    text.replace(text.find('|'), 1, "#");
    try {
      parse_genotype(text);
      FAIL("expected a parse error");
    } catch (const GenotypeParseError& e) {
      CHECK(e.position() > 0);
      CHECK(e.position() <= text.size());
    }
  }

  TEST_CASE("wrong edge and node counts are rejected") {
    CHECK_THROWS(parse_genotype("normal: (skip_connect,0) | (skip_connect,0)(skip_connect,1) ; concat: 2 ;"));
    std::string three_nodes = kAllSkip;
    three_nodes.erase(three_nodes.find("| (skip_connect,0)(skip_connect,1) ;"), 34);
    CHECK_THROWS(parse_genotype(three_nodes));
  }

  TEST_CASE("source at or after the node is a violation naming the node") {
    Genotype g = parse_genotype(kAllSkip);
    g.normal.nodes[0][1].source = 3;
    const auto v = validate_genotype(g);
    REQUIRE(v.size() == 1);
    CHECK(v[0].node == 2);
    CHECK(v[0].cell == CellType::normal);
    std::string text = serialize_genotype(g);
    CHECK_THROWS_AS(parse_genotype(text), GenotypeValidationError);
  }

  TEST_CASE("concat outside the derived nodes is a violation") {
    Genotype g = parse_genotype(kAllSkip);
    g.reduce.concat.insert(7);
    const auto v = validate_genotype(g);
    REQUIRE(v.size() == 1);
    CHECK(v[0].cell == CellType::reduce);
  }

  TEST_CASE("fixtures validate and round-trip byte for byte") {
    for (const char* name : {"genotypes/darts_v2.geno", "genotypes/pibconv_representative.geno"}) {
      CAPTURE(name);
      const std::string raw = read_file(testing::data_path(name));
      const Genotype g = load_genotype_file(testing::data_path(name));
      CHECK(validate_genotype(g).empty());
      // The canonical body is everything after the comment lines.
      std::string body;
      std::stringstream ss(raw);
      for (std::string line; std::getline(ss, line);) {
        if (!line.starts_with('#')) body += line + "\n";
      }
      std::string canon = serialize_genotype(g);
      if (!canon.ends_with('\n')) canon += '\n';
      CHECK(canon == body);
    }
  }

  TEST_CASE("parse inverts serialize on random genotypes") {
    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
      const Genotype g = random_genotype(rng);
      REQUIRE(validate_genotype(g).empty());
      const std::string s = serialize_genotype(g);
      CHECK(parse_genotype(s) == g);
      CHECK(serialize_genotype(parse_genotype(s)) == s);
    }
  }

  TEST_CASE("every op name parses and serializes canonically") {
    CHECK(search_ops().size() == 10);
    for (OpKind op : search_ops()) CHECK_FALSE(is_legacy(op));
    for (OpKind op : all_ops()) {
      const auto back = op_from_name(op_name(op));
      REQUIRE(back.has_value());
      CHECK(*back == op);
    }
    const std::set<std::string> expected{"none", "skip_connect", "pib_conv_3x3", "pib_conv_5x5", "pib_conv_7x7",
                                      "dil_conv_3x3", "dil_conv_5x5", "conv_7x1_1x7", "max_pool_3x3",
                                      "avg_pool_3x3"};
    std::set<std::string> got;
    for (OpKind op : search_ops()) got.insert(std::string(op_name(op)));
    CHECK(got == expected);
  }

  TEST_CASE("plan reductions follow floor arithmetic") {
    for (int n = 1; n <= 30; ++n) {
      CAPTURE(n);
      const NetworkPlan p = plan_network(n, 16, 10, 32, n >= 3);
      std::vector<int> expect;
      if (n >= 3) expect = {n / 3, 2 * n / 3};
      CHECK(p.reduction_indices == expect);
      if (n >= 3) {
        REQUIRE(p.aux_index.has_value());
        CHECK(*p.aux_index == 2 * n / 3);
        CHECK(n / 3 < 2 * n / 3);
      }
      int c = 16;
      for (int i = 0; i < n; ++i) {
        if (p.is_reduction(i)) c *= 2;
        CHECK(p.channels[static_cast<std::size_t>(i)] == c);
      }
    }
    const NetworkPlan p20 = plan_network(20, 36, 10, 32, true);
    CHECK(p20.reduction_indices == std::vector<int>{6, 13});
    CHECK(*p20.aux_index == 13);
    CHECK(plan_network(8, 16, 10, 32, false).reduction_indices == std::vector<int>{2, 5});
    CHECK(plan_network(2, 16, 10, 32, false).reduction_indices.empty());
  }

  TEST_CASE("aux needs at least three layers") {
    CHECK_THROWS(plan_network(2, 16, 10, 32, true));
    CHECK_NOTHROW(plan_network(3, 16, 10, 32, true));
  }
}
