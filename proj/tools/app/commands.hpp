#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pibnas/cost_model.hpp"
#include "run_config.hpp"

namespace pibnas::app {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

/// Writes genotype.geno, arch_weights.csv, search_summary.json and
/// resolved_config.json to out_dir. Partial outputs are removed on failure.
void cmd_search(const RunConfig& c, std::ostream& log);

/// Trains the genotype in c.genotype; writes metrics.csv, model.pibw and
/// resolved_config.json.
void cmd_evaluate(const RunConfig& c, std::ostream& log);

/// Re-derives the genotype from a search summary's alphas.
std::string cmd_derive(const fs::path& summary);

struct AnalyzeOptions {
  std::vector<fs::path> genotypes;
  std::vector<int> layers;
  TableSettings table;
  bool eq_check = false;
  bool ratio_sweep = false;
  fs::path per_layer_json;  // empty: not written
};

/// Comparison CSV to `out`; eq-check and sweep tables to `log`. Returns the
/// number of closed-form grid mismatches (0 when the check is off).
int cmd_analyze(const AnalyzeOptions& o, std::ostream& out, std::ostream& log);

/// One cam_<i>.pgm and overlay_<i>.ppm per image in out_dir. Without image
/// paths the first `count` test images of the configured dataset are used.
void cmd_gradcam(const RunConfig& c, const std::vector<fs::path>& images, int count, std::ostream& log);

struct CompareOptions {
  std::vector<std::string> genotypes;  // name=path
  std::vector<std::string> metrics;    // name:layers:path
  std::vector<int> layers;
  TableSettings table;
};

void cmd_compare(const CompareOptions& o, std::ostream& out);

/// "20,10,5" or "2..20:2" (inclusive range with optional step).
std::vector<int> parse_layer_list(const std::string& text);

/// Best test accuracy in a metrics CSV.
double best_test_acc(const fs::path& metrics);

/// Maps an in-flight exception to an exit code, printing it to `err`.
int report_error(std::exception_ptr e, std::ostream& err);

}  // namespace pibnas::app
