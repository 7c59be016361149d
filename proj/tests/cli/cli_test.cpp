#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "pibnas_cli_stdout.txt";
  const std::string cmd = std::string(PIBNAS_CLI) + " " + args + " > " + out.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("pibnas_cli_" + name);
  fs::remove_all(d);
  return d;
}

const char* kTinySearch =
    "--epochs 2 --synthetic-n 16 --synthetic-hw 8 --layers 2 --c-init 4 --batch 8 --order first";
const char* kTinyEval =
    "--epochs 2 --synthetic-n 16 --synthetic-test-n 8 --synthetic-hw 8 --layers 2 --c-init 4 --batch 8";

std::string fixture(const char* name) { return pibnas::testing::data_path(std::string("genotypes/") + name); }

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("").code == 2);
  CHECK(run("--help").code == 0);
  CHECK(run("bogus").code == 2);
  CHECK(run("search --no-such-flag 1").code == 2);
  CHECK(run("evaluate --epochs abc").code == 2);
  CHECK(run("analyze --layers '' " + fixture("darts_v2.geno")).code == 2);
  CHECK(run("analyze missing.geno").code == 2);
  const fs::path cfg = fs::temp_directory_path() / "pibnas_cli_bad.json";
  std::ofstream(cfg) << R"({"epochz": 3})";
  CHECK(run("search --config " + cfg.string()).code == 2);
  fs::remove(cfg);
  const fs::path dir = fresh_dir("nocifar");
  CHECK(run("evaluate --dataset cifar10 --data-dir /nonexistent --genotype " + fixture("darts_v2.geno") +
            " --out-dir " + dir.string())
            .code == 2);
  CHECK_FALSE(fs::exists(dir / "metrics.csv"));
}

TEST_CASE("bad genotype files are reported") {
  const fs::path g = fs::temp_directory_path() / "pibnas_cli_bad.geno";
  std::ofstream(g) << "normal: (skip_connect,0) ;";
  const fs::path dir = fresh_dir("badgeno");
  CHECK(run(std::string("evaluate ") + kTinyEval + " --genotype " + g.string() + " --out-dir " + dir.string()).code ==
        2);
  fs::remove(g);
}

TEST_CASE("search writes its artifacts and is repeatable") {
  const fs::path a = fresh_dir("search_a"), b = fresh_dir("search_b");
  REQUIRE(run(std::string("search ") + kTinySearch + " --out-dir " + a.string()).code == 0);
  REQUIRE(run(std::string("search ") + kTinySearch + " --out-dir " + b.string()).code == 0);
  for (const char* f : {"genotype.geno", "arch_weights.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  // Only the output directory differs between the two runs.
  auto ja = nlohmann::json::parse(slurp(a / "search_summary.json"));
  auto jb = nlohmann::json::parse(slurp(b / "search_summary.json"));
  ja["config"].erase("out_dir");
  jb["config"].erase("out_dir");
  CHECK(ja == jb);
  CHECK(fs::exists(a / "resolved_config.json"));
  std::ifstream traj(a / "arch_weights.csv");
  CHECK(pibnas::testing::read_trajectory(traj).size() == 2u * 2u * 14u * 10u);

  const auto summary = nlohmann::json::parse(slurp(a / "search_summary.json"));
  CHECK(summary["epochs"] == 2);
  CHECK(summary["seed"] == 7);
  CHECK(summary["history"].size() == 2);
  CHECK(summary["alphas"]["normal"].size() == 14);

  const Run d = run("derive " + (a / "search_summary.json").string());
  CHECK(d.code == 0);
  CHECK(d.out == slurp(a / "genotype.geno"));
}

TEST_CASE("evaluate, gradcam and compare on a tiny run") {
  const fs::path dir = fresh_dir("eval");
  const std::string geno = fixture("pibconv_representative.geno");
  REQUIRE(run(std::string("evaluate ") + kTinyEval + " --genotype " + geno + " --out-dir " + dir.string()).code == 0);
  std::ifstream metrics(dir / "metrics.csv");
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "epoch,lr,train_loss,train_acc,test_acc");
  int rows = 0;
  while (std::getline(metrics, line)) rows += !line.empty();
  CHECK(rows == 2);
  CHECK(fs::exists(dir / "model.pibw"));

  const fs::path cam = dir / "cam";
  REQUIRE(run(std::string("gradcam ") + kTinyEval + " --genotype " + geno + " --checkpoint " +
              (dir / "model.pibw").string() + " --out-dir " + cam.string() + " --count 2")
              .code == 0);
  for (int i = 0; i < 2; ++i) {
    const std::string pgm = slurp(cam / ("cam_" + std::to_string(i) + ".pgm"));
    CHECK(pgm.starts_with("P5\n224 224\n255\n"));
    CHECK(pgm.size() == 15 + 224 * 224);
    CHECK(slurp(cam / ("overlay_" + std::to_string(i) + ".ppm")).starts_with("P6\n224 224\n255\n"));
  }
  // A checkpoint that does not fit the genotype is a usage error.
  CHECK(run(std::string("gradcam ") + kTinyEval + " --genotype " + fixture("darts_v2.geno") + " --checkpoint " +
            (dir / "model.pibw").string() + " --out-dir " + (dir / "cam2").string())
            .code == 2);

  const Run cmp = run("compare --layers 2 --genotype pib=" + geno + " --metrics pib:2:" +
                      (dir / "metrics.csv").string());
  CHECK(cmp.code == 0);
  CHECK(cmp.out.starts_with("genotype,layers,params_m,gmac,accuracy\npib,2,"));
  CHECK(cmp.out.back() == '\n');
  CHECK(cmp.out.find(",\n") == std::string::npos);  // accuracy filled in
}

TEST_CASE("divergence exits with 3") {
  const fs::path dir = fresh_dir("diverge");
  CHECK(run(std::string("evaluate ") + kTinyEval + " --lr 1e30 --grad-clip 0 --genotype " +
            fixture("darts_v2.geno") + " --out-dir " + dir.string())
            .code == 3);
}

TEST_CASE("analyze prints the cost table and checks") {
  const Run r = run("analyze --layers 20,10 " + fixture("darts_v2.geno"));
  REQUIRE(r.code == 0);
  std::stringstream ss(r.out);
  std::string header, r20, r10;
  std::getline(ss, header);
  std::getline(ss, r20);
  std::getline(ss, r10);
  CHECK(header == "genotype,layers,params_m,gmac,accuracy");
  CHECK(r20.starts_with("darts_v2,20,"));
  CHECK(r10.starts_with("darts_v2,10,"));
  const Run eq = run("analyze --eq-check");
  CHECK(eq.code == 0);
  CHECK(eq.out.find("mismatches: 0") != std::string::npos);
  const Run sweep = run("analyze --ratio-sweep");
  CHECK(sweep.code == 0);
  CHECK(sweep.out.find("0.625") != std::string::npos);
}
