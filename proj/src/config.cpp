#include "kft/config.hpp"

#include <fstream>

#include "json_fields.hpp"
#include "kft/checkpoint.hpp"

namespace kft {

using nlohmann::json;
using detail::JsonFields;
using detail::with_path;

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"batch_fraction", c.batch_fraction},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, const std::string& prefix) {
  JsonFields f(j, prefix);
  TrainConfig c;
  f.get("epochs", c.epochs);
  f.get("iterations_per_epoch", c.iterations_per_epoch);
  f.get("batch_fraction", c.batch_fraction);
  f.get("learning_rate", c.learning_rate);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

json to_json(const PriorHyper& c) {
  return {{"mean", c.mean},           {"var", c.var},         {"aux_mean", c.aux_mean},
          {"aux_var", c.aux_var},     {"bias_mean", c.bias_mean}, {"bias_var", c.bias_var},
          {"noise_var", c.noise_var}, {"kernel_jitter", c.kernel_jitter}};
}

json to_json(const VariationalConfig& c) {
  return {{"family", to_string(c.family)},
          {"prior", to_json(c.prior)},
          {"factor_rank", c.factor_rank},
          {"init_log_var", c.init_log_var},
          {"init_factor_scale", c.init_factor_scale}};
}

VariationalConfig variational_config_from_json(const json& j, const std::string& prefix) {
  JsonFields f(j, prefix);
  VariationalConfig c;
  if (f.has("family")) {
    const auto s = f.require<std::string>("family");
    c.family = with_path(f.path("family"), [&] { return family_from_string(s); });
  }
  if (f.has("prior")) {
    JsonFields p(f.raw("prior"), f.path("prior"));
    p.get("mean", c.prior.mean);
    p.get("var", c.prior.var);
    p.get("aux_mean", c.prior.aux_mean);
    p.get("aux_var", c.prior.aux_var);
    p.get("bias_mean", c.prior.bias_mean);
    p.get("bias_var", c.prior.bias_var);
    p.get("noise_var", c.prior.noise_var);
    p.get("kernel_jitter", c.prior.kernel_jitter);
    p.finish();
  }
  f.get("factor_rank", c.factor_rank);
  f.get("init_log_var", c.init_log_var);
  f.get("init_factor_scale", c.init_factor_scale);
  f.finish();
  return c;
}

json to_json(const SynthSpec& c) {
  return {{"extents", c.extents},
          {"rank", c.rank},
          {"kind", to_string(c.kind)},
          {"side_dim", c.side_dim},
          {"clusters", c.clusters},
          {"index_share", c.index_share},
          {"observed_fraction", c.observed_fraction},
          {"noise", c.noise},
          {"seed", c.seed}};
}

SynthSpec synth_spec_from_json(const json& j, const std::string& prefix) {
  JsonFields f(j, prefix);
  SynthSpec c;
  f.get("extents", c.extents);
  f.get("rank", c.rank);
  if (f.has("kind")) {
    const auto s = f.require<std::string>("kind");
    c.kind = with_path(f.path("kind"), [&] { return side_kind_from_string(s); });
  }
  f.get("side_dim", c.side_dim);
  f.get("clusters", c.clusters);
  f.get("index_share", c.index_share);
  f.get("observed_fraction", c.observed_fraction);
  f.get("noise", c.noise);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

namespace {

json to_json(const Range& r) { return {{"lo", r.lo}, {"hi", r.hi}, {"log", r.log_scale}}; }

void read_range(JsonFields& f, const std::string& key, Range& out) {
  if (!f.has(key)) return;
  JsonFields r(f.raw(key), f.path(key));
  r.get("lo", out.lo);
  r.get("hi", out.hi);
  r.get("log", out.log_scale);
  r.finish();
}

}  // namespace

json to_json(const SearchSpace& c) {
  std::vector<std::string> kernels;
  for (auto k : c.kernels) kernels.push_back(to_string(k));
  return {{"batch_fraction", to_json(c.batch_fraction)},
          {"learning_rate", to_json(c.learning_rate)},
          {"reg", to_json(c.reg)},
          {"ranks", c.ranks},
          {"kernels", kernels},
          {"noise_var", to_json(c.noise_var)},
          {"prior_var", to_json(c.prior_var)},
          {"bayesian", c.bayesian},
          {"calibration_draws", c.calibration_draws}};
}

SearchSpace search_space_from_json(const json& j, const std::string& prefix) {
  JsonFields f(j, prefix);
  SearchSpace c;
  read_range(f, "batch_fraction", c.batch_fraction);
  read_range(f, "learning_rate", c.learning_rate);
  read_range(f, "reg", c.reg);
  f.get("ranks", c.ranks);
  if (f.has("kernels")) {
    const auto names = f.require<std::vector<std::string>>("kernels");
    c.kernels.clear();
    for (std::size_t i = 0; i < names.size(); ++i) {
      c.kernels.push_back(with_path(f.path("kernels") + "[" + std::to_string(i) + "]",
                                    [&] { return kernel_kind_from_string(names[i]); }));
    }
  }
  read_range(f, "noise_var", c.noise_var);
  read_range(f, "prior_var", c.prior_var);
  f.get("bayesian", c.bayesian);
  f.get("calibration_draws", c.calibration_draws);
  f.finish();
  c.validate(prefix);
  return c;
}

json to_json(const AblationSpec& c) {
  return {{"synth", to_json(c.data)},  {"model", to_json(c.model)}, {"train", to_json(c.train)},
          {"side_space", to_string(c.side_space)}, {"seeds", c.seeds}, {"seed", c.seed}};
}

AblationSpec ablation_spec_from_json(const json& j, const std::string& prefix) {
  JsonFields f(j, prefix);
  AblationSpec c;
  if (f.has("synth")) c.data = synth_spec_from_json(f.raw("synth"), f.path("synth"));
  if (f.has("model")) c.model = model_config_from_json(f.raw("model"), f.path("model"));
  if (f.has("train")) c.train = train_config_from_json(f.raw("train"), f.path("train"));
  if (f.has("side_space")) {
    const auto s = f.require<std::string>("side_space");
    c.side_space = with_path(f.path("side_space"), [&] { return space_from_string(s); });
  }
  f.get("seeds", c.seeds);
  f.get("seed", c.seed);
  f.finish();
  c.validate(prefix);
  return c;
}

json to_json(const Metrics& m) { return {{"r2", m.r2}, {"rmse", m.rmse}, {"count", m.count}}; }

json to_json(const TrialSetup& s) {
  return {{"model", to_json(s.model)}, {"train", to_json(s.train)}, {"vi", to_json(s.vi)}};
}

json to_json(const RunConfig& c) {
  json side = json::object();
  for (const auto& [mode, file] : c.paths.side) side[std::to_string(mode)] = file;
  return {{"seed", c.seed},
          {"paths", {{"data", c.paths.data}, {"side", side}, {"checkpoint", c.paths.checkpoint}, {"output", c.paths.output}}},
          {"data", {{"scale_targets", c.data.scale_targets}, {"onehot_cap", c.data.onehot_cap}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"vi", to_json(c.vi)},
          {"predictive", {{"draws", c.predictive.draws}, {"heatmap_modes", c.predictive.heatmap_modes}}},
          {"search", {{"iterations", c.search_iterations}, {"space", to_json(c.search)}}},
          {"ablate", to_json(c.ablate)},
          {"synth", to_json(c.synth)}};
}

RunConfig run_config_from_json(const json& j) {
  JsonFields f(j, "");
  RunConfig c;
  f.get("seed", c.seed);
  if (f.has("paths")) {
    JsonFields p(f.raw("paths"), "paths");
    p.get("data", c.paths.data);
    p.get("checkpoint", c.paths.checkpoint);
    p.get("output", c.paths.output);
    if (p.has("side")) {
      JsonFields s(p.raw("side"), "paths.side");
      for (const auto& item : p.raw("side").items()) {
        std::size_t mode = 0;
        try {
          std::size_t used = 0;
          mode = std::stoul(item.key(), &used);
          if (used != item.key().size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          throw ConfigError("side keys must be mode numbers", s.path(item.key()));
        }
        c.paths.side[mode] = s.require<std::string>(item.key());
      }
      s.finish();
    }
    p.finish();
  }
  if (f.has("data")) {
    JsonFields d(f.raw("data"), "data");
    d.get("scale_targets", c.data.scale_targets);
    d.get("onehot_cap", c.data.onehot_cap);
    d.finish();
  }
  // Seeds left unset in the file follow the global seed.
  auto unset = [&](const char* block, const char* key) {
    return !j.contains(block) || !j.at(block).is_object() || !j.at(block).contains(key);
  };
  if (f.has("model")) c.model = model_config_from_json(f.raw("model"), "model");
  if (unset("model", "init_seed")) c.model.init_seed = c.seed;
  if (unset("model", "rff_seed")) c.model.rff_seed = c.seed;
  if (f.has("train")) c.train = train_config_from_json(f.raw("train"), "train");
  if (unset("train", "seed")) c.train.seed = c.seed;
  if (f.has("vi")) c.vi = variational_config_from_json(f.raw("vi"), "vi");
  if (f.has("predictive")) {
    JsonFields p(f.raw("predictive"), "predictive");
    p.get("draws", c.predictive.draws);
    p.get("heatmap_modes", c.predictive.heatmap_modes);
    p.finish();
    if (c.predictive.heatmap_modes.size() != 2) throw ConfigError("expected two modes", "predictive.heatmap_modes");
  }
  if (f.has("search")) {
    JsonFields s(f.raw("search"), "search");
    s.get("iterations", c.search_iterations);
    if (s.has("space")) c.search = search_space_from_json(s.raw("space"), "search.space");
    s.finish();
    if (c.search_iterations == 0) throw ConfigError("must be >= 1", "search.iterations");
  }
  if (f.has("ablate")) c.ablate = ablation_spec_from_json(f.raw("ablate"), "ablate");
  if (unset("ablate", "seed")) c.ablate.seed = c.seed;
  if (f.has("synth")) c.synth = synth_spec_from_json(f.raw("synth"), "synth");
  if (unset("synth", "seed")) c.synth.seed = c.seed;
  f.finish();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override path", path);
    if (!node->is_object()) throw ConfigError("cannot set a field inside a non-object", path.substr(0, start - 1));
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          json* resolved) {
  json j = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  if (resolved) *resolved = to_json(c);
  return c;
}

}  // namespace kft
