#pragma once

// Run configuration shared by the subcommands. A flat JSON object; presets
// supply defaults, a config file overrides them, --kebab-case flags override
// the file. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "pibnas/data.hpp"
#include "pibnas/search.hpp"
#include "pibnas/trainer.hpp"

namespace pibnas::app {

/// Bad flags, bad config values or unusable inputs; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Command { search, evaluate, gradcam };

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 7;
  std::string precision = "f32";

  std::string dataset = "synthetic";  // synthetic | cifar10
  std::string data_dir;
  int synthetic_n = 256;
  int synthetic_test_n = 256;
  int synthetic_classes = 4;
  int synthetic_hw = 32;
  double synthetic_noise = 2.0;

  std::string out_dir = ".";
  std::string genotype;
  std::string checkpoint;

  int epochs = 8;
  int batch = 32;
  int layers = 4;
  int c_init = 8;
  double lr = 0.01;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;

  std::string order = "second";  // first | second
  double xi = -1.0;
  double arch_lr = 3e-4;
  double arch_weight_decay = 1e-3;

  bool augment = true;
  bool cutout = true;
  int cutout_length = 16;
  double drop_path_prob = 0.0;
  double aux_weight = 0.4;
  double pib_ratio = 2.0;
  bool grouped_reduce = true;
};

/// Defaults for a command under a preset ("desk" or "full").
nlohmann::json preset_json(Command cmd, std::string_view preset);

/// Every config key, in declaration order.
std::vector<std::string> config_keys();

std::string kebab(std::string_view key);

/// preset -> file -> flags. `flags` maps config keys to raw flag text.
RunConfig resolve_config(Command cmd, const std::filesystem::path* file,
                         const std::map<std::string, std::string>& flags);

nlohmann::json to_json(const RunConfig& c);
RunConfig from_json(const nlohmann::json& j);

/// Throws UsageError on out-of-range values.
void check(const RunConfig& c);

Precision parse_precision(const std::string& s);

SearchConfig search_config(const RunConfig& c);
TrainConfig train_config(const RunConfig& c);

struct Splits {
  Dataset train;
  Dataset test;
};

/// Synthetic data, or CIFAR-10 from data_dir (falling back to $PIB_DATA_DIR).
Splits load_data(const RunConfig& c);

int num_classes(const RunConfig& c);
int input_hw(const RunConfig& c);

}  // namespace pibnas::app
