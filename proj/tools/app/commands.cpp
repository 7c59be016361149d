#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "pibnas/checkpoint.hpp"
#include "pibnas/gradcam.hpp"

namespace pibnas::app {

using nlohmann::json;

namespace {

// Files a command has started writing; removed unless commit() is reached.
class OutputGuard {
 public:
  explicit OutputGuard(fs::path dir) : dir_(std::move(dir)) {}
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : files_) fs::remove(p, ec);
  }
  fs::path add(const std::string& name) {
    files_.push_back(dir_ / name);
    return files_.back();
  }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  std::vector<fs::path> files_;
  bool committed_ = false;
};

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", p.string()));
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  auto out = open_out(p);
  out << text;
  if (!out) throw std::runtime_error(fmt::format("write failed: {}", p.string()));
}

void prepare_out_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw UsageError(fmt::format("cannot create output directory {}: {}", c.out_dir, ec.message()));
}

bool wants_aux(const RunConfig& c) { return c.layers >= 3 && c.aux_weight > 0.0; }

NetworkPlan eval_plan(const RunConfig& c) {
  return plan_network(c.layers, c.c_init, num_classes(c), input_hw(c), wants_aux(c));
}

NetworkOptions eval_options(const RunConfig& c) {
  NetworkOptions o;
  o.block.ratio = c.pib_ratio;
  o.block.grouped_reduce = c.grouped_reduce;
  return o;
}

Genotype load_genotype(const RunConfig& c) {
  if (c.genotype.empty()) throw UsageError("no genotype given (--genotype)");
  return load_genotype_file(c.genotype);
}

json alphas_json(const ArchParams& a) {
  json ops = json::array();
  for (OpKind op : a.ops) ops.push_back(std::string(op_name(op)));
  auto rows = [&](CellType t) {
    json m = json::array();
    const auto d = a.of(t).data();
    const auto n = a.ops.size();
    for (std::size_t e = 0; e < kCandidateEdges; ++e) {
      m.push_back(std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(e * n),
                                      d.begin() + static_cast<std::ptrdiff_t>((e + 1) * n)));
    }
    return m;
  };
  return {{"ops", ops}, {"normal", rows(CellType::normal)}, {"reduce", rows(CellType::reduce)}};
}

ArchParams alphas_from_json(const json& j) {
  std::vector<OpKind> ops;
  for (const auto& name : j.at("ops")) {
    auto op = op_from_name(name.get<std::string>());
    if (!op) throw UsageError(fmt::format("unknown op '{}' in summary", name.get<std::string>()));
    ops.push_back(*op);
  }
  ArchParams a = ArchParams::zeros(ops);
  for (CellType t : {CellType::normal, CellType::reduce}) {
    const auto& m = j.at(std::string(cell_type_name(t)));
    if (m.size() != kCandidateEdges) throw UsageError("summary alphas must have 14 rows per cell");
    std::vector<Real> flat;
    for (const auto& row : m) {
      if (row.size() != ops.size()) throw UsageError("summary alpha row length differs from op count");
      for (const auto& v : row) flat.push_back(v.get<double>());
    }
    a.of(t).copy_from(flat);
  }
  return a;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

void cmd_search(const RunConfig& c, std::ostream& log) {
  set_precision(parse_precision(c.precision));
  Splits data = load_data(c);
  auto [train, val] = split_half(data.train);
  if (train.size() == 0 || val.size() == 0) throw UsageError("search needs at least 2 samples");

  prepare_out_dir(c);
  OutputGuard guard(c.out_dir);
  const fs::path config_path = guard.add("resolved_config.json");
  const fs::path traj_path = guard.add("arch_weights.csv");
  const fs::path geno_path = guard.add("genotype.geno");
  const fs::path summary_path = guard.add("search_summary.json");
  write_text(config_path, dump(to_json(c)));

  auto traj = open_out(traj_path);
  const SearchResult r = run_search(search_config(c), train, val, &traj, [&](const SearchEpoch& e) {
    log << fmt::format("search epoch {}/{} lr {:.6g} train_loss {:.4f} val_loss {:.4f} val_acc {:.4f}\n",
                       e.epoch, c.epochs, e.lr, e.train_loss, e.val_loss, e.val_acc);
    log.flush();
  });
  traj.close();
  if (!traj) throw std::runtime_error(fmt::format("write failed: {}", traj_path.string()));

  save_genotype_file(geno_path, r.genotype);
  json history = json::array();
  for (const auto& e : r.history) {
    history.push_back({{"epoch", e.epoch},
                       {"lr", e.lr},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"val_acc", e.val_acc},
                       {"skipped_corrections", e.skipped_corrections}});
  }
  const json summary{{"genotype", serialize_genotype(r.genotype)},
                     {"best_val_acc", r.best_val_acc},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"config", to_json(c)},
                     {"history", history},
                     {"alphas", alphas_json(r.alphas)}};
  write_text(summary_path, dump(summary));
  guard.commit();
  log << serialize_genotype(r.genotype) << '\n';
}

void cmd_evaluate(const RunConfig& c, std::ostream& log) {
  set_precision(parse_precision(c.precision));
  const Genotype g = load_genotype(c);
  Splits data = load_data(c);
  Rng init = Rng::stream(c.seed, "init");
  EvalNetwork net(g, eval_plan(c), eval_options(c), init);

  prepare_out_dir(c);
  OutputGuard guard(c.out_dir);
  const fs::path config_path = guard.add("resolved_config.json");
  const fs::path metrics_path = guard.add("metrics.csv");
  const fs::path model_path = guard.add("model.pibw");
  write_text(config_path, dump(to_json(c)));

  auto metrics = open_out(metrics_path);
  metrics << kMetricsHeader << '\n';
  const TrainResult r = train_eval(net, data.train, data.test, train_config(c), [&](const EpochMetrics& m) {
    write_metrics_row(metrics, m);
    metrics.flush();
    log << fmt::format("epoch {}/{} lr {:.6g} train_loss {:.4f} train_acc {:.4f} test_acc {:.4f}\n",
                       m.epoch, c.epochs, m.lr, m.train_loss, m.train_acc, m.test_acc);
    log.flush();
  });
  metrics.close();
  if (!metrics) throw std::runtime_error(fmt::format("write failed: {}", metrics_path.string()));
  save_checkpoint(model_path, net.state());
  guard.commit();
  log << fmt::format("best test accuracy {:.4f}\n", r.best_test_acc);
}

std::string cmd_derive(const fs::path& summary) {
  std::ifstream in(summary);
  if (!in) throw UsageError(fmt::format("cannot open {}", summary.string()));
  json j;
  try {
    j = json::parse(in);
    return serialize_genotype(derive_genotype(alphas_from_json(j.at("alphas"))));
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("{}: {}", summary.string(), e.what()));
  }
}

int cmd_analyze(const AnalyzeOptions& o, std::ostream& out, std::ostream& log) {
  if (o.layers.empty()) throw UsageError("analyze: empty layer list");
  if (o.genotypes.empty() && !o.eq_check && !o.ratio_sweep) throw UsageError("analyze: no genotype files");
  int mismatches = 0;
  if (!o.genotypes.empty()) {
    std::vector<NamedGenotype> named;
    for (const auto& p : o.genotypes) named.push_back({p.stem().string(), load_genotype_file(p)});
    write_compare_csv(out, compare_table(named, o.layers, o.table));

    if (!o.per_layer_json.empty()) {
      json doc = json::array();
      for (const auto& ng : named) {
        for (int n : o.layers) {
          const bool aux = o.table.cost.include_aux && n >= 3;
          const auto plan = plan_network(n, o.table.c_init, o.table.num_classes, o.table.input_hw, aux);
          const CostReport rep = cost_report(ng.genotype, plan, o.table.cost);
          json layers = json::array();
          for (const auto& l : rep.per_layer) {
            layers.push_back({{"index", l.index},
                              {"cell_type", std::string(cell_type_name(l.cell))},
                              {"params", l.params},
                              {"macs", l.macs}});
          }
          doc.push_back({{"genotype", ng.name},
                         {"layers", n},
                         {"stem", {{"params", rep.stem.params}, {"macs", rep.stem.macs}}},
                         {"classifier", {{"params", rep.classifier.params}, {"macs", rep.classifier.macs}}},
                         {"aux", {{"params", rep.aux.params}, {"macs", rep.aux.macs}}},
                         {"cells", layers},
                         {"params", rep.params},
                         {"macs", rep.macs}});
        }
      }
      write_text(o.per_layer_json, dump(doc));
    }
  }
  if (o.eq_check) {
    log << "c,k,f,eq1,convnext_measured,eq2,pib_measured,ok\n";
    for (const auto& r : eq_grid_check()) {
      log << fmt::format("{},{},{},{},{},{},{},{}\n", r.c, r.k, r.f, r.eq1, r.convnext_measured, r.eq2,
                         r.pib_measured, r.ok() ? "yes" : "no");
      mismatches += r.ok() ? 0 : 1;
    }
    log << fmt::format("eq-check mismatches: {}\n", mismatches);
  }
  if (o.ratio_sweep) {
    log << "f,coefficient_ratio,eq1_c64_k5,eq2_c64_k5\n";
    for (double f : {1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 6.0, 8.0}) {
      log << fmt::format("{},{:.4f},{},{}\n", f, coefficient_ratio(f), eq1_weights(64, 5, f),
                         eq2_weights(64, 5, f));
    }
  }
  return mismatches;
}

void cmd_gradcam(const RunConfig& c, const std::vector<fs::path>& images, int count, std::ostream& log) {
  set_precision(parse_precision(c.precision));
  const Genotype g = load_genotype(c);
  if (c.checkpoint.empty()) throw UsageError("no checkpoint given (--checkpoint)");
  Rng init = Rng::stream(c.seed, "init");
  EvalNetwork net(g, eval_plan(c), eval_options(c), init);
  NamedTensors state = net.state();
  restore_checkpoint(load_checkpoint(c.checkpoint), state);

  const int hw = input_hw(c);
  // Raw [3, hw, hw] images in [0, 1] plus the normalization the net expects.
  std::vector<std::vector<float>> raw;
  Normalization norm = c.dataset == "cifar10" ? Normalization::cifar10() : Normalization::synthetic();
  if (!images.empty()) {
    for (const auto& p : images) {
      int w = 0, h = 0;
      auto img = read_ppm(p, w, h);
      if (w != hw || h != hw) {
        throw UsageError(fmt::format("{} is {}x{}, the network expects {}x{}", p.string(), w, h, hw, hw));
      }
      raw.push_back(std::move(img));
    }
  } else {
    if (count < 1) throw UsageError("gradcam: --count must be >= 1");
    Splits data = load_data(c);
    const Dataset& src = data.test.size() ? data.test : data.train;
    norm = src.norm;
    const auto plane = static_cast<std::size_t>(hw) * static_cast<std::size_t>(hw);
    for (std::size_t i = 0; i < std::min<std::size_t>(static_cast<std::size_t>(count), src.size()); ++i) {
      const auto im = src.image(i);
      std::vector<float> r(im.size());
      for (std::size_t k = 0; k < im.size(); ++k) {
        const std::size_t ch = k / plane;
        r[k] = std::clamp(im[k] * norm.std[ch] + norm.mean[ch], 0.0f, 1.0f);
      }
      raw.push_back(std::move(r));
    }
  }

  prepare_out_dir(c);
  OutputGuard guard(c.out_dir);
  const auto plane = static_cast<std::size_t>(hw) * static_cast<std::size_t>(hw);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::vector<Real> x(raw[i].size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      const std::size_t ch = k / plane;
      x[k] = (raw[i][k] - norm.mean[ch]) / norm.std[ch];
    }
    const Tensor input = Tensor::from(Shape{1, 3, hw, hw}, std::move(x));
    const Heatmap m = gradcam(net, input);
    const Rendering r = render_heatmap(m, raw[i], hw);
    write_pgm(guard.add(fmt::format("cam_{}.pgm", i)), r.gray, r.hw, r.hw);
    write_ppm(guard.add(fmt::format("overlay_{}.ppm", i)), r.rgb, r.hw, r.hw);
    log << fmt::format("image {}: class {} from {}\n", i, m.target_class, m.source);
  }
  guard.commit();
}

namespace {

std::pair<std::string, std::string> split_once(const std::string& s, char sep, const char* what) {
  const auto pos = s.find(sep);
  if (pos == std::string::npos || pos == 0 || pos + 1 == s.size()) {
    throw UsageError(fmt::format("expected {}, got '{}'", what, s));
  }
  return {s.substr(0, pos), s.substr(pos + 1)};
}

int parse_int(const std::string& s) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError(fmt::format("not an integer: '{}'", s));
  return v;
}

}  // namespace

std::vector<int> parse_layer_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (const auto dots = item.find(".."); dots != std::string::npos) {
      std::string hi_text = item.substr(dots + 2);
      int step = 1;
      if (const auto colon = hi_text.find(':'); colon != std::string::npos) {
        step = parse_int(hi_text.substr(colon + 1));
        hi_text = hi_text.substr(0, colon);
      }
      const int lo = parse_int(item.substr(0, dots)), hi = parse_int(hi_text);
      if (step < 1 || hi < lo) throw UsageError(fmt::format("bad layer range '{}'", item));
      for (int n = lo; n <= hi; n += step) out.push_back(n);
    } else {
      out.push_back(parse_int(item));
    }
  }
  if (out.empty()) throw UsageError("empty layer list");
  for (int n : out) {
    if (n < 1) throw UsageError(fmt::format("layer count must be >= 1, got {}", n));
  }
  return out;
}

double best_test_acc(const fs::path& metrics) {
  std::ifstream in(metrics);
  if (!in) throw UsageError(fmt::format("cannot open {}", metrics.string()));
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw UsageError(fmt::format("{}: not a metrics file", metrics.string()));
  double best = 0.0;
  bool any = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto pos = line.rfind(',');
    try {
      best = std::max(best, std::stod(line.substr(pos + 1)));
    } catch (const std::logic_error&) {
      throw UsageError(fmt::format("{}: bad row '{}'", metrics.string(), line));
    }
    any = true;
  }
  if (!any) throw UsageError(fmt::format("{}: no data rows", metrics.string()));
  return best;
}

void cmd_compare(const CompareOptions& o, std::ostream& out) {
  if (o.genotypes.empty()) throw UsageError("compare: no --genotype name=path given");
  if (o.layers.empty()) throw UsageError("compare: empty layer list");
  std::vector<NamedGenotype> named;
  for (const auto& spec : o.genotypes) {
    auto [name, path] = split_once(spec, '=', "name=path");
    named.push_back({name, load_genotype_file(path)});
  }
  std::map<std::pair<std::string, int>, double> acc;
  for (const auto& spec : o.metrics) {
    auto [name, rest] = split_once(spec, ':', "name:layers:path");
    auto [layers, path] = split_once(rest, ':', "name:layers:path");
    acc[{name, parse_int(layers)}] = best_test_acc(path);
  }
  auto rows = compare_table(named, o.layers, o.table);
  for (auto& r : rows) {
    if (auto it = acc.find({r.genotype, r.layers}); it != acc.end()) r.accuracy = it->second;
  }
  write_compare_csv(out, rows);
}

int report_error(std::exception_ptr e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const GenotypeValidationError& ex) {
    err << "error: invalid genotype\n";
    for (const auto& v : ex.violations()) err << "  " << v.to_string() << '\n';
    return kExitUsage;
  } catch (const CheckpointMismatch& ex) {
    err << fmt::format("error: checkpoint does not fit the model (tensor '{}'): {}\n", ex.tensor(), ex.what());
    return kExitUsage;
  } catch (const DivergenceError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitDiverged;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const GenotypeParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DataError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace pibnas::app
