// pibnas: search, evaluate, derive, analyze, gradcam and compare.

#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "app/commands.hpp"

namespace app = pibnas::app;

namespace {

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
};

// One --kebab-case flag per config key; only flags given on the command line
// reach the override map.
void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--config", flags.config_file, "JSON run config")->check(CLI::ExistingFile);
  for (const auto& key : app::config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + app::kebab(key), [&flags, key](const std::string& v) { flags.values[key] = v; },
        "override '" + key + "'");
  }
}

app::RunConfig resolve(app::Command c, const ConfigFlags& flags) {
  const std::filesystem::path file = flags.config_file;
  return app::resolve_config(c, flags.config_file.empty() ? nullptr : &file, flags.values);
}

void add_cost_flags(CLI::App* cmd, pibnas::TableSettings& t, std::string& layers) {
  cmd->add_option("--layers", layers, "layer counts, e.g. 20,10,5 or 2..20:2")->capture_default_str();
  cmd->add_option("--c-init", t.c_init)->capture_default_str();
  cmd->add_option("--classes", t.num_classes)->capture_default_str();
  cmd->add_option("--hw", t.input_hw, "input image size")->capture_default_str();
  cmd->add_option("--ratio", t.cost.ratio, "PIBConv expansion F")->capture_default_str();
  cmd->add_flag("!--ungrouped", t.cost.grouped_reduce, "count the PIB reduce as a dense 1x1 conv");
  cmd->add_flag("--include-aux", t.cost.include_aux, "count the auxiliary head");
  cmd->add_flag("--count-norm-macs", t.cost.count_norm_macs, "charge one MAC per normalized element");
}

std::ostream* open_or_stdout(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return &std::cout;
  file.open(path);
  if (!file) throw app::UsageError("cannot write " + path);
  return &file;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"PIBConv architecture search workbench"};
  cli.require_subcommand(1);

  ConfigFlags search_flags, eval_flags, cam_flags;
  auto* search = cli.add_subcommand("search", "supernet search; writes genotype.geno, arch_weights.csv, "
                                              "search_summary.json");
  add_config_flags(search, search_flags);

  auto* evaluate = cli.add_subcommand("evaluate", "train a genotype; writes metrics.csv and model.pibw");
  add_config_flags(evaluate, eval_flags);

  std::string summary_path, derive_out;
  auto* derive = cli.add_subcommand("derive", "genotype from a search summary's alphas");
  derive->add_option("summary", summary_path, "search_summary.json")->required();
  derive->add_option("-o,--output", derive_out, "write the genotype here instead of stdout");

  app::AnalyzeOptions analyze_opts;
  std::string analyze_layers = "20,15,10,8,5,2", analyze_out;
  auto* analyze = cli.add_subcommand("analyze", "params / GMAC table for genotype files");
  analyze->add_option("genotypes", analyze_opts.genotypes, ".geno files")->check(CLI::ExistingFile);
  add_cost_flags(analyze, analyze_opts.table, analyze_layers);
  analyze->add_flag("--eq-check", analyze_opts.eq_check, "check closed-form weight counts against built blocks");
  analyze->add_flag("--ratio-sweep", analyze_opts.ratio_sweep, "coefficient ratio over F");
  analyze->add_option("--per-layer", analyze_opts.per_layer_json, "write per-layer costs as JSON");
  analyze->add_option("-o,--output", analyze_out, "CSV path (default stdout)");

  std::vector<std::filesystem::path> cam_images;
  int cam_count = 4;
  auto* cam = cli.add_subcommand("gradcam", "GradCAM maps for a trained checkpoint");
  add_config_flags(cam, cam_flags);
  cam->add_option("images", cam_images, "binary PPM images")->check(CLI::ExistingFile);
  cam->add_option("--count", cam_count, "dataset test images to use when no images are given")
      ->capture_default_str();

  app::CompareOptions compare_opts;
  std::string compare_layers = "20,15,10,8,5,2", compare_out;
  auto* compare = cli.add_subcommand("compare", "cost table joined with trained accuracies");
  compare->add_option("--genotype", compare_opts.genotypes, "name=path (repeatable)");
  compare->add_option("--metrics", compare_opts.metrics, "name:layers:metrics.csv (repeatable)");
  add_cost_flags(compare, compare_opts.table, compare_layers);
  compare->add_option("-o,--output", compare_out, "CSV path (default stdout)");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : app::kExitUsage;
  }

  try {
    if (search->parsed()) {
      app::cmd_search(resolve(app::Command::search, search_flags), std::cerr);
    } else if (evaluate->parsed()) {
      app::cmd_evaluate(resolve(app::Command::evaluate, eval_flags), std::cerr);
    } else if (derive->parsed()) {
      const std::string text = app::cmd_derive(summary_path);
      std::ofstream file;
      *open_or_stdout(derive_out, file) << text;
    } else if (analyze->parsed()) {
      analyze_opts.layers = app::parse_layer_list(analyze_layers);
      std::ofstream file;
      std::ostream* out = open_or_stdout(analyze_out, file);
      if (app::cmd_analyze(analyze_opts, *out, std::cout) > 0) return 1;
    } else if (cam->parsed()) {
      app::cmd_gradcam(resolve(app::Command::gradcam, cam_flags), cam_images, cam_count, std::cerr);
    } else if (compare->parsed()) {
      compare_opts.layers = app::parse_layer_list(compare_layers);
      std::ofstream file;
      app::cmd_compare(compare_opts, *open_or_stdout(compare_out, file));
    }
  } catch (...) {
    return app::report_error(std::current_exception(), std::cerr);
  }
  return app::kExitOk;
}
