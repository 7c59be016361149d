#include "run_config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <fmt/format.h>

namespace pibnas::app {

using nlohmann::json;

#define PIBNAS_CONFIG_FIELDS(X)                                                              \
  X(preset) X(seed) X(precision) X(dataset) X(data_dir) X(synthetic_n) X(synthetic_test_n)   \
  X(synthetic_classes) X(synthetic_hw) X(synthetic_noise) X(out_dir) X(genotype)             \
  X(checkpoint) X(epochs) X(batch) X(layers) X(c_init) X(lr) X(lr_min) X(momentum)           \
  X(weight_decay) X(grad_clip) X(order) X(xi) X(arch_lr) X(arch_weight_decay) X(augment)     \
  X(cutout) X(cutout_length) X(drop_path_prob) X(aux_weight) X(pib_ratio) X(grouped_reduce)

json to_json(const RunConfig& c) {
  json j = json::object();
#define X(f) j[#f] = c.f;
  PIBNAS_CONFIG_FIELDS(X)
#undef X
  return j;
}

RunConfig from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  const auto keys = config_keys();
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw UsageError(fmt::format("unknown config key '{}'", k));
    }
  }
  RunConfig c;
  try {
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    PIBNAS_CONFIG_FIELDS(X)
#undef X
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("config: {}", e.what()));
  }
  return c;
}

std::vector<std::string> config_keys() {
  return {
#define X(f) #f,
      PIBNAS_CONFIG_FIELDS(X)
#undef X
  };
}

std::string kebab(std::string_view key) {
  std::string s(key);
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

json preset_json(Command cmd, std::string_view preset) {
  RunConfig c;  // desk evaluation defaults
  if (preset == "desk") {
    if (cmd == Command::search) {
      c.synthetic_n = 64;
      c.synthetic_test_n = 0;
      c.synthetic_hw = 16;
      c.epochs = 3;
      c.batch = 16;
      c.lr = 0.025;
      c.lr_min = 0.001;
      c.cutout = false;
    }
  } else if (preset == "full") {
    c.preset = "full";
    c.seed = 0;
    c.dataset = "cifar10";
    c.lr = 0.0025;
    if (cmd == Command::search) {
      c.epochs = 50;
      c.batch = 64;
      c.layers = 8;
      c.c_init = 16;
      c.lr_min = 0.001;
      c.cutout = false;
    } else {
      c.epochs = 600;
      c.batch = 96;
      c.layers = 20;
      c.c_init = 36;
      c.drop_path_prob = 0.2;
    }
  } else {
    throw UsageError(fmt::format("unknown preset '{}' (desk, full)", preset));
  }
  return to_json(c);
}

namespace {

json parse_flag(const std::string& key, const std::string& text, const json& like) {
  const auto bad = [&] { return UsageError(fmt::format("--{}: cannot parse '{}'", kebab(key), text)); };
  if (like.is_string()) return text;
  if (like.is_boolean()) {
    if (text == "true" || text == "1" || text == "on") return true;
    if (text == "false" || text == "0" || text == "off") return false;
    throw bad();
  }
  std::size_t used = 0;
  try {
    if (like.is_number_unsigned()) {
      if (text.starts_with('-')) throw bad();
      const auto v = std::stoull(text, &used);
      if (used == text.size()) return v;
    } else if (like.is_number_integer()) {
      const auto v = std::stoll(text, &used);
      if (used == text.size()) return v;
    } else {
      const auto v = std::stod(text, &used);
      if (used == text.size()) return v;
    }
  } catch (const std::logic_error&) {
  }
  throw bad();
}

}  // namespace

RunConfig resolve_config(Command cmd, const std::filesystem::path* file,
                         const std::map<std::string, std::string>& flags) {
  json file_json = json::object();
  if (file != nullptr) {
    std::ifstream in(*file);
    if (!in) throw UsageError(fmt::format("cannot open config {}", file->string()));
    try {
      file_json = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError(fmt::format("{}: {}", file->string(), e.what()));
    }
    from_json(file_json);  // key and type check
  }
  std::string preset = "desk";
  if (auto it = flags.find("preset"); it != flags.end()) {
    preset = it->second;
  } else if (file_json.contains("preset")) {
    preset = file_json["preset"].get<std::string>();
  }
  json j = preset_json(cmd, preset);
  j.merge_patch(file_json);
  for (const auto& [key, text] : flags) {
    if (!j.contains(key)) throw UsageError(fmt::format("unknown option --{}", kebab(key)));
    j[key] = parse_flag(key, text, j[key]);
  }
  RunConfig c = from_json(j);
  check(c);
  return c;
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw UsageError(fmt::format("precision must be f32 or f64, got '{}'", s));
}

void check(const RunConfig& c) {
  auto require = [](bool ok, std::string_view what) {
    if (!ok) throw UsageError(std::string(what));
  };
  parse_precision(c.precision);
  require(c.dataset == "synthetic" || c.dataset == "cifar10", "dataset must be synthetic or cifar10");
  require(c.order == "first" || c.order == "second", "order must be first or second");
  require(c.order == "first" || c.xi != 0.0, "order=second needs xi > 0 (or negative for the current lr)");
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.batch >= 1, "batch must be >= 1");
  require(c.layers >= 1, "layers must be >= 1");
  require(c.c_init >= 1, "c_init must be >= 1");
  require(c.lr > 0.0, "lr must be positive");
  require(c.lr_min >= 0.0, "lr_min must be >= 0");
  require(c.synthetic_classes >= 2, "synthetic_classes must be >= 2");
  require(c.synthetic_n >= c.synthetic_classes, "synthetic_n must be >= synthetic_classes");
  require(c.synthetic_test_n >= 0, "synthetic_test_n must be >= 0");
  require(c.synthetic_hw >= 4, "synthetic_hw must be >= 4");
  require(c.synthetic_noise >= 0.0, "synthetic_noise must be >= 0");
  require(c.cutout_length >= 0, "cutout_length must be >= 0");
  require(c.drop_path_prob >= 0.0 && c.drop_path_prob < 1.0, "drop_path_prob must be in [0, 1)");
  require(c.aux_weight >= 0.0, "aux_weight must be >= 0");
  require(c.pib_ratio > 0.0, "pib_ratio must be positive");
}

SearchConfig search_config(const RunConfig& c) {
  SearchConfig s;
  s.epochs = c.epochs;
  s.batch = c.batch;
  s.layers = c.layers;
  s.c_init = c.c_init;
  s.weights = {c.lr, c.momentum, c.weight_decay};
  s.lr_min = c.lr_min;
  s.arch.lr = c.arch_lr;
  s.arch.weight_decay = c.arch_weight_decay;
  s.second_order = c.order == "second";
  s.xi = c.xi;
  s.grad_clip = c.grad_clip;
  s.supernet.block.ratio = c.pib_ratio;
  s.supernet.block.grouped_reduce = c.grouped_reduce;
  s.augment.cutout = c.cutout ? c.cutout_length : 0;
  s.augment_enabled = c.augment;
  s.seed = c.seed;
  return s;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch = c.batch;
  t.sgd = {c.lr, c.momentum, c.weight_decay};
  t.lr_min = c.lr_min;
  t.grad_clip = c.grad_clip;
  t.drop_path_prob = c.drop_path_prob;
  t.aux_weight = c.layers >= 3 ? c.aux_weight : 0.0;
  t.augment_enabled = c.augment;
  t.augment.cutout = c.cutout ? c.cutout_length : 0;
  t.seed = c.seed;
  return t;
}

int num_classes(const RunConfig& c) { return c.dataset == "cifar10" ? 10 : c.synthetic_classes; }

int input_hw(const RunConfig& c) { return c.dataset == "cifar10" ? kCifarHw : c.synthetic_hw; }

Splits load_data(const RunConfig& c) {
  if (c.dataset == "synthetic") {
    const SyntheticSpec spec{c.seed, c.synthetic_n + c.synthetic_test_n, c.synthetic_classes,
                             c.synthetic_hw, c.synthetic_noise};
    Dataset all = make_synthetic(spec);
    const auto n = static_cast<std::size_t>(c.synthetic_n);
    return {all.slice(0, n), all.slice(n, all.size())};
  }
  std::string dir = c.data_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("PIB_DATA_DIR")) dir = env;
  }
  if (dir.empty()) throw UsageError("cifar10 needs --data-dir or PIB_DATA_DIR");
  CifarSplits s = load_cifar10(dir);
  return {std::move(s.train), std::move(s.test)};
}

}  // namespace pibnas::app
