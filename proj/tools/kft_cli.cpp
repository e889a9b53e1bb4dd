#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "kft/calibration.hpp"
#include "kft/checkpoint.hpp"
#include "kft/config.hpp"
#include "kft/errors.hpp"
#include "kft/eval.hpp"
#include "kft/train.hpp"
#include "kft/variational.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kft;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Collects a command's files and publishes them only once every one of them
/// has been produced.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
  ~Outputs() {
    for (const auto& [tmp, final_path] : staged_) {
      std::error_code ec;
      fs::remove(tmp, ec);
    }
  }
  Outputs(const Outputs&) = delete;
  Outputs& operator=(const Outputs&) = delete;

  /// Temporary path for `target`, a name under the output directory or a
  /// path with its own directory; renamed into place on commit.
  fs::path stage(const fs::path& target) {
    const fs::path final_path = target.is_absolute() || target.has_parent_path() ? target : dir_ / target;
    fs::create_directories(final_path.parent_path().empty() ? fs::path(".") : final_path.parent_path());
    fs::path tmp = final_path;
    tmp += ".partial";
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }

  void text(const fs::path& target, const std::string& body) {
    const fs::path tmp = stage(target);
    std::ofstream out(tmp, std::ios::binary);
    out << body;
    if (!out) throw DataError("cannot write " + tmp.string());
  }

  /// Renames staged files into place and records the command, its resolved
  /// config and outputs under its own key in manifest.json.
  void commit(const std::string& command, const json& config) {
    json names = json::array();
    for (const auto& [tmp, final_path] : staged_) names.push_back(final_path.string());
    const fs::path manifest_file = dir_ / "manifest.json";
    json manifest = json::object();
    if (std::ifstream in(manifest_file); in) {
      try {
        manifest = json::parse(in);
      } catch (const json::exception&) {
        manifest = json::object();
      }
      if (!manifest.is_object()) manifest = json::object();
    }
    manifest[command] = {{"config", config}, {"outputs", names}};
    text("manifest.json", manifest.dump(2) + "\n");
    for (const auto& [tmp, final_path] : staged_) {
      fs::rename(tmp, final_path);
      std::cout << "wrote " << final_path.string() << '\n';
    }
    staged_.clear();
  }

 private:
  fs::path dir_;
  std::vector<std::pair<fs::path, fs::path>> staged_;
};

struct Context {
  std::string command;
  RunConfig config;
  json resolved;
};

const std::string& require_path(const std::string& value, const std::string& field) {
  if (value.empty()) throw ConfigError("required for this command", field);
  return value;
}

fs::path checkpoint_path(const RunConfig& c) {
  return c.paths.checkpoint.empty() ? fs::path(c.paths.output) / "model.kft" : fs::path(c.paths.checkpoint);
}

LoadedData load_training_data(const RunConfig& c) {
  std::map<std::size_t, fs::path> side;
  for (const auto& [mode, file] : c.paths.side) side[mode] = file;
  return load_data(require_path(c.paths.data, "paths.data"), side, c.data);
}

/// Model block with extents taken from the data when the config leaves them
/// empty.
ModelConfig model_for(const RunConfig& c, const CooDataset& data) {
  ModelConfig m = c.model;
  if (m.extents.empty()) {
    m.extents = data.extents();
  } else if (m.extents != data.extents()) {
    throw ConfigError("extents differ from the data (" + shape_string(data.extents()) + ")", "model.extents");
  }
  m.validate();
  return m;
}

std::string trace_csv(const Trace& trace) {
  std::ostringstream out;
  write_trace_csv(out, trace);
  return out.str();
}

template <class Fit>
int run_training(const Context& ctx, Fit fit) {
  const RunConfig& c = ctx.config;
  LoadedData data = load_training_data(c);
  const Split split = split_dataset(data.dataset.size(), c.seed);
  const CooDataset train = data.dataset.subset(split.train);
  const ModelConfig model = model_for(c, data.dataset);
  Outputs out(c.paths.output);
  try {
    fit(out, model, data, train);
  } catch (const DivergenceError& e) {
    // The partial trace is kept for diagnosis; the checkpoint is not written.
    Outputs diag(c.paths.output);
    diag.text("trace.csv", trace_csv(e.trace()));
    diag.commit(ctx.command, ctx.resolved);
    throw;
  }
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int cmd_train(const Context& ctx) {
  return run_training(ctx, [&](Outputs& out, const ModelConfig& mc, LoadedData& data, const CooDataset& train) {
    KftModel model(mc, data.side);
    const Trace trace = em_train(model, train, ctx.config.train);
    save_model(out.stage(checkpoint_path(ctx.config)), model, data.dataset.target_transform);
    out.text("trace.csv", trace_csv(trace));
  });
}

int cmd_vi_train(const Context& ctx) {
  return run_training(ctx, [&](Outputs& out, const ModelConfig& mc, LoadedData& data, const CooDataset& train) {
    VariationalModel model(mc, data.side, ctx.config.vi);
    const Trace trace = vi_train(model, train, ctx.config.train);
    save_vi_model(out.stage(checkpoint_path(ctx.config)), model, data.dataset.target_transform);
    out.text("trace.csv", trace_csv(trace));
  });
}

using AnyModel = std::variant<LoadedModel, LoadedViModel>;

AnyModel load_any(const fs::path& file) {
  const Archive a = read_archive(file);
  if (checkpoint_format(a) == "kft-vi-model") return vi_model_from_archive(a);
  return model_from_archive(a);
}

const KftModel& means_of(const AnyModel& m) {
  if (const auto* vi = std::get_if<LoadedViModel>(&m)) return vi->model.means();
  return std::get<LoadedModel>(m).model;
}

const ZTransform& transform_of(const AnyModel& m) {
  if (const auto* vi = std::get_if<LoadedViModel>(&m)) return vi->targets;
  return std::get<LoadedModel>(m).targets;
}

/// Mean predictions in original target units.
std::vector<double> predict_original(const AnyModel& m, const IndexBatch& batch) {
  try {
    std::vector<double> pred = means_of(m).predict(batch);
    for (auto& v : pred) v = transform_of(m).invert(v);
    return pred;
  } catch (const ShapeError& e) {
    throw DataError(e.what());
  }
}

int cmd_predict(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const AnyModel model = load_any(checkpoint_path(c));
  const std::size_t order = means_of(model).order();
  const IndexBatch batch = load_index_file(require_path(c.paths.data, "paths.data"), order);
  const auto pred = predict_original(model, batch);

  std::optional<PredictiveSamples> samples;
  if (const auto* vi = std::get_if<LoadedViModel>(&model)) {
    samples = vi->model.sample_predictive(batch, c.predictive.draws, c.seed);
  }
  std::vector<double> levels;
  for (double a : kCalibrationAlphas) levels.push_back(a);
  for (auto it = kCalibrationAlphas.rbegin(); it != kCalibrationAlphas.rend(); ++it) levels.push_back(1.0 - *it);

  std::ostringstream csv;
  for (std::size_t m = 0; m < order; ++m) csv << 'i' << (m + 1) << ',';
  csv << "prediction";
  if (samples) {
    for (double q : levels) csv << ",q" << q;
  }
  csv << '\n';
  std::vector<double> sorted(samples ? samples->draws : 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t m = 0; m < order; ++m) csv << batch.modes[m][i] << ',';
    csv << number(pred[i]);
    if (samples) {
      const auto draws = samples->at(i);
      std::copy(draws.begin(), draws.end(), sorted.begin());
      std::sort(sorted.begin(), sorted.end());
      for (double q : levels) csv << ',' << number(transform_of(model).invert(quantile(sorted, q)));
    }
    csv << '\n';
  }
  Outputs out(c.paths.output);
  out.text("predictions.csv", csv.str());
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

struct EvalData {
  CooDataset data;
  Split split;
};

EvalData evaluation_data(const RunConfig& c) {
  LoadOptions raw = c.data;
  raw.scale_targets = false;
  EvalData e{load_data(require_path(c.paths.data, "paths.data"), {}, raw).dataset, {}};
  e.split = split_dataset(e.data.size(), c.seed);
  return e;
}

int cmd_evaluate(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const AnyModel model = load_any(checkpoint_path(c));
  const EvalData e = evaluation_data(c);
  json report = json::object();
  const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
      {"train", &e.split.train}, {"validation", &e.split.validation}, {"test", &e.split.test}};
  for (const auto& [name, records] : parts) {
    const auto pred = predict_original(model, e.data.batch(*records));
    report[name] = to_json(metrics(pred, e.data.targets_at(*records)));
  }
  Outputs out(c.paths.output);
  out.text("metrics.json", report.dump(2) + "\n");
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int cmd_calibrate(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const AnyModel model = load_any(checkpoint_path(c));
  const auto* vi = std::get_if<LoadedViModel>(&model);
  if (!vi) throw DataError("calibrate needs a variational checkpoint (vi-train)");
  const EvalData e = evaluation_data(c);
  const IndexBatch batch = e.data.batch(e.split.test);
  std::vector<double> targets = e.data.targets_at(e.split.test);
  const double r2 = r2_score(predict_original(model, batch), targets);
  for (auto& y : targets) y = vi->targets.apply(y);
  const PredictiveSamples samples = vi->model.sample_predictive(batch, c.predictive.draws, c.seed);
  const CalibrationReport report = calibration_report(samples, targets, r2);
  const auto& modes = c.predictive.heatmap_modes;
  std::ostringstream heatmap;
  write_heatmap_csv(heatmap, calibration_heatmap(samples, targets, batch, modes[0], modes[1]));
  Outputs out(c.paths.output);
  out.text("calibration.json", to_json(report).dump(2) + "\n");
  out.text("heatmap.csv", heatmap.str());
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int cmd_search(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const LoadedData data = load_training_data(c);
  const Split split = split_dataset(data.dataset.size(), c.seed);
  const TrialSetup base{model_for(c, data.dataset), c.train, c.vi};
  Outputs out(c.paths.output);
  std::ofstream log(out.stage("search.jsonl"), std::ios::binary);
  const SearchResult result =
      random_search(c.search, base, data.dataset, data.side, split, c.search_iterations, c.seed, &log);
  log.close();
  const Trial& best = result.trials[result.best];
  json summary{{"best_trial", best.index}, {"score", best.score}, {"config", to_json(best.setup)},
               {"validation", to_json(best.validation)}};
  if (best.calibration) summary["calibration"] = to_json(*best.calibration);
  out.text("best.json", summary.dump(2) + "\n");
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int cmd_ablate(const Context& ctx) {
  const AblationResult result = ablation_suite(ctx.config.ablate);
  std::ostringstream csv;
  write_ablation_csv(csv, result);
  json summary = json::array();
  for (const auto& row : result.rows) {
    summary.push_back({{"condition", to_string(row.condition)}, {"mean", row.mean}, {"sd", row.sd}, {"r2", row.r2}});
  }
  Outputs out(ctx.config.paths.output);
  out.text("ablation.csv", csv.str());
  out.text("ablation_summary.json", summary.dump(2) + "\n");
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int cmd_synth(const Context& ctx) {
  const SynthData d = synth(ctx.config.synth);
  Outputs out(ctx.config.paths.output);
  save_dataset(out.stage("data.csv"), d.dataset);
  for (std::size_t m = 0; m < d.side.size(); ++m) {
    if (d.side[m]) save_side(out.stage("side." + std::to_string(m) + ".csv"), *d.side[m]);
  }
  out.commit(ctx.command, ctx.resolved);
  return kOk;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "error (" << kind << "): " << e.what() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tensor factorization with kernel side information"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;

  const std::vector<std::pair<std::string, std::pair<std::string, std::function<int(const Context&)>>>> commands{
      {"synth", {"Write a planted synthetic dataset and side files", cmd_synth}},
      {"train", {"Fit a model by block coordinate descent", cmd_train}},
      {"vi-train", {"Fit a variational posterior", cmd_vi_train}},
      {"predict", {"Predict for index tuples in paths.data", cmd_predict}},
      {"evaluate", {"Write R2 and RMSE per split as JSON", cmd_evaluate}},
      {"calibrate", {"Write the calibration report and heatmap", cmd_calibrate}},
      {"search", {"Random hyperparameter search", cmd_search}},
      {"ablate", {"Side-information ablation on synthetic data", cmd_ablate}},
  };
  std::function<int(const Context&)> selected;
  std::string selected_name;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("-c,--config", config_file, "JSON run configuration");
    sub->add_option("-s,--set", overrides, "Override a field: dotted.path=value");
    sub->callback([&, name = name, fn = entry.second] {
      selected = fn;
      selected_name = name;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    Context ctx{selected_name, {}, {}};
    ctx.config = load_run_config(config_file, overrides, &ctx.resolved);
    return selected(ctx);
  } catch (const ConfigError& e) {
    return report("config", e, kConfig);
  } catch (const DataError& e) {
    return report("data", e, kData);
  } catch (const NumericalError& e) {
    return report("numerical", e, kNumerical);
  } catch (const ShapeError& e) {
    return report("config", e, kConfig);
  } catch (const std::exception& e) {
    return report("failure", e, kFailure);
  }
}
