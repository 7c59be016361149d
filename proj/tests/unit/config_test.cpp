#include <filesystem>
#include <fstream>

#include "doctest.h"

#ifdef PIBNAS_HAVE_APP
#include "app/commands.hpp"
#include "app/run_config.hpp"

using namespace pibnas;
using namespace pibnas::app;
namespace fs = std::filesystem;

TEST_SUITE("config") {
  TEST_CASE("desk defaults resolve without input") {
    const RunConfig e = resolve_config(Command::evaluate, nullptr, {});
    CHECK(e.preset == "desk");
    CHECK(e.layers == 4);
    CHECK(e.c_init == 8);
    CHECK(e.epochs == 8);
    CHECK(e.synthetic_classes == 4);
    const RunConfig s = resolve_config(Command::search, nullptr, {});
    CHECK(s.synthetic_hw == 16);
    CHECK(s.epochs == 3);
    CHECK_FALSE(s.cutout);
  }

  TEST_CASE("full preset carries the full-scale settings") {
    const RunConfig e = resolve_config(Command::evaluate, nullptr, {{"preset", "full"}});
    CHECK(e.layers == 20);
    CHECK(e.c_init == 36);
    CHECK(e.epochs == 600);
    CHECK(e.batch == 96);
    CHECK(e.lr == doctest::Approx(0.0025));
    CHECK(e.dataset == "cifar10");
    const RunConfig s = resolve_config(Command::search, nullptr, {{"preset", "full"}});
    CHECK(s.layers == 8);
    CHECK(s.c_init == 16);
    CHECK(s.epochs == 50);
    CHECK(s.batch == 64);
    CHECK_THROWS_AS(resolve_config(Command::search, nullptr, {{"preset", "huge"}}), UsageError);
  }

  TEST_CASE("flags override the file which overrides the preset") {
    const auto path = fs::temp_directory_path() / "pibnas_cfg_test.json";
    std::ofstream(path) << R"({"epochs": 2, "batch": 4, "order": "first"})";
    const RunConfig c = resolve_config(Command::search, &path, {{"batch", "6"}, {"augment", "false"}});
    CHECK(c.epochs == 2);
    CHECK(c.batch == 6);
    CHECK(c.order == "first");
    CHECK_FALSE(c.augment);
    std::ofstream(path) << R"({"epochz": 2})";
    CHECK_THROWS_AS(resolve_config(Command::search, &path, {}), UsageError);
    std::ofstream(path) << R"({"epochs": "two"})";
    CHECK_THROWS_AS(resolve_config(Command::search, &path, {}), UsageError);
    std::ofstream(path) << "{not json";
    CHECK_THROWS_AS(resolve_config(Command::search, &path, {}), UsageError);
    fs::remove(path);
  }

  TEST_CASE("flag text is checked against the key type") {
    CHECK_THROWS_AS(resolve_config(Command::evaluate, nullptr, {{"epochs", "abc"}}), UsageError);
    CHECK_THROWS_AS(resolve_config(Command::evaluate, nullptr, {{"augment", "maybe"}}), UsageError);
    CHECK_THROWS_AS(resolve_config(Command::evaluate, nullptr, {{"epochs", "0"}}), UsageError);
    CHECK_THROWS_AS(resolve_config(Command::search, nullptr, {{"order", "third"}}), UsageError);
    CHECK_THROWS_AS(resolve_config(Command::search, nullptr, {{"xi", "0"}}), UsageError);
    CHECK(resolve_config(Command::evaluate, nullptr, {{"lr", "0.5"}}).lr == 0.5);
  }

  TEST_CASE("json round trip covers every key") {
    RunConfig c;
    c.seed = 99;
    c.data_dir = "/tmp/x";
    c.pib_ratio = 3.0;
    const auto j = to_json(c);
    CHECK(j.size() == config_keys().size());
    const RunConfig back = from_json(j);
    CHECK(back.seed == 99);
    CHECK(back.data_dir == "/tmp/x");
    CHECK(back.pib_ratio == 3.0);
    CHECK(to_json(back) == j);
    CHECK(kebab("drop_path_prob") == "drop-path-prob");
  }

  TEST_CASE("derived configs") {
    RunConfig c = resolve_config(Command::evaluate, nullptr, {{"layers", "2"}});
    CHECK(train_config(c).aux_weight == 0.0);
    c = resolve_config(Command::evaluate, nullptr, {});
    const TrainConfig t = train_config(c);
    CHECK(t.aux_weight == doctest::Approx(0.4));
    CHECK(t.augment.cutout == 16);
    CHECK(t.seed == 7);
    c = resolve_config(Command::search, nullptr, {{"order", "first"}});
    CHECK_FALSE(search_config(c).second_order);
    CHECK(parse_precision("f64") == Precision::f64);
    CHECK_THROWS_AS(parse_precision("f16"), UsageError);
  }

  TEST_CASE("synthetic splits are disjoint slices of one draw") {
    const RunConfig c = resolve_config(Command::evaluate, nullptr,
                                       {{"synthetic_n", "8"}, {"synthetic_test_n", "4"},
                                        {"synthetic_hw", "8"}});
    const Splits s = load_data(c);
    CHECK(s.train.size() == 8);
    CHECK(s.test.size() == 4);
    CHECK(s.train.hw == 8);
    CHECK(num_classes(c) == 4);
    CHECK(input_hw(c) == 8);
  }

  TEST_CASE("layer lists") {
    CHECK(parse_layer_list("20,10") == std::vector<int>{20, 10});
    CHECK(parse_layer_list("2..8:2") == std::vector<int>{2, 4, 6, 8});
    CHECK_THROWS_AS(parse_layer_list(""), UsageError);
    CHECK_THROWS_AS(parse_layer_list("a,b"), UsageError);
    CHECK_THROWS_AS(parse_layer_list("0"), UsageError);
  }
}
#endif
