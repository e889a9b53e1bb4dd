#include "kft/eval.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

#include "kft/config.hpp"
#include "kft/errors.hpp"

namespace kft {

namespace {

void check_pair(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("prediction and target counts differ");
  if (target.size() < 2) throw DataError("metrics need at least two points");
}

}  // namespace

double r2_score(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  double mean = 0.0;
  for (double y : target) mean += y;
  mean /= static_cast<double>(target.size());
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    res += (target[i] - pred[i]) * (target[i] - pred[i]);
    tot += (target[i] - mean) * (target[i] - mean);
  }
  if (!(tot > 0.0)) throw DataError("R² is undefined for a constant target");
  return 1.0 - res / tot;
}

double rmse(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target);
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (target[i] - pred[i]) * (target[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(target.size()));
}

Metrics metrics(std::span<const double> pred, std::span<const double> target) {
  return {r2_score(pred, target), rmse(pred, target), target.size()};
}

double Range::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  if (log_scale) return std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
  return lo + u * (hi - lo);
}

void Range::validate(const std::string& path) const {
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) throw ConfigError("need finite lo <= hi", path);
  if (log_scale && !(lo > 0.0)) throw ConfigError("log-scale bounds must be > 0", path);
}

void SearchSpace::validate(const std::string& prefix) const {
  batch_fraction.validate(prefix + ".batch_fraction");
  if (!(batch_fraction.lo > 0.0) || batch_fraction.hi > 1.0) {
    throw ConfigError("must lie in (0, 1]", prefix + ".batch_fraction");
  }
  learning_rate.validate(prefix + ".learning_rate");
  if (learning_rate.lo < 0.0) throw ConfigError("must be >= 0", prefix + ".learning_rate");
  reg.validate(prefix + ".reg");
  if (reg.lo < 0.0) throw ConfigError("must be >= 0", prefix + ".reg");
  noise_var.validate(prefix + ".noise_var");
  prior_var.validate(prefix + ".prior_var");
  if (!(noise_var.lo > 0.0)) throw ConfigError("must be > 0", prefix + ".noise_var");
  if (!(prior_var.lo > 0.0)) throw ConfigError("must be > 0", prefix + ".prior_var");
  if (ranks.empty()) throw ConfigError("need at least one rank", prefix + ".ranks");
  for (auto r : ranks) {
    if (r == 0) throw ConfigError("ranks must be >= 1", prefix + ".ranks");
  }
  if (kernels.empty()) throw ConfigError("need at least one kernel", prefix + ".kernels");
  if (bayesian && calibration_draws < kMinCalibrationDraws) {
    throw ConfigError("must be >= " + std::to_string(kMinCalibrationDraws), prefix + ".calibration_draws");
  }
}

TrialSetup sample_trial(const SearchSpace& space, const TrialSetup& base, std::mt19937_64& rng) {
  TrialSetup s = base;
  s.train.batch_fraction = space.batch_fraction.sample(rng);
  s.train.learning_rate = space.learning_rate.sample(rng);
  s.model.reg = space.reg.sample(rng);
  s.model.aux_reg = s.model.reg;
  std::uniform_int_distribution<std::size_t> rank_pick(0, space.ranks.size() - 1);
  s.model.rank = space.ranks[rank_pick(rng)];
  std::uniform_int_distribution<std::size_t> kernel_pick(0, space.kernels.size() - 1);
  s.model.kernel = space.kernels[kernel_pick(rng)];
  // Drawn in every trial so the stream does not depend on `bayesian`.
  const double noise = space.noise_var.sample(rng), prior = space.prior_var.sample(rng);
  if (space.bayesian) {
    s.vi.prior.noise_var = noise;
    s.vi.prior.var = prior;
  }
  return s;
}

KftModel fit_model(const TrialSetup& setup, const SideFeatures& side, const CooDataset& train) {
  KftModel model(setup.model, side);
  em_train(model, train, setup.train);
  return model;
}

SearchResult random_search(const SearchSpace& space, const TrialSetup& base, const CooDataset& data,
                           const SideFeatures& side, const Split& split, std::size_t iterations,
                           std::uint64_t seed, std::ostream* log) {
  space.validate();
  if (iterations == 0) throw ConfigError("must be >= 1", "search.iterations");
  const CooDataset train = data.subset(split.train);
  const CooDataset valid = data.subset(split.validation);
  const IndexBatch valid_batch = valid.all();
  std::mt19937_64 rng(seed);
  SearchResult result;
  bool found = false;
  for (std::size_t t = 0; t < iterations; ++t) {
    Trial trial;
    trial.index = t;
    trial.setup = sample_trial(space, base, rng);
    const auto start = std::chrono::steady_clock::now();
    try {
      if (space.bayesian) {
        VariationalModel vm(trial.setup.model, side, trial.setup.vi);
        vi_train(vm, train, trial.setup.train);
        const auto pred = vm.predict_mean(valid_batch);
        trial.validation = metrics(pred, valid.targets());
        const auto samples = vm.sample_predictive(valid_batch, space.calibration_draws, seed + t + 1);
        trial.calibration = calibration_report(samples, valid.targets(), trial.validation.r2);
        trial.score = -trial.calibration->eta;
      } else {
        const KftModel model = fit_model(trial.setup, side, train);
        trial.validation = metrics(model.predict(valid_batch), valid.targets());
        trial.score = trial.validation.r2;
      }
      if (!std::isfinite(trial.score)) throw NumericalError("non-finite validation score");
    } catch (const NumericalError& e) {
      trial.failed = true;
      trial.error = e.what();
      trial.score = -std::numeric_limits<double>::infinity();
    }
    trial.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!trial.failed && (!found || trial.score > result.trials[result.best].score)) {
      result.best = t;
      found = true;
    }
    if (log) {
      nlohmann::json line{{"trial", t}, {"config", to_json(trial.setup)}, {"failed", trial.failed},
                          {"wall_seconds", trial.seconds}};
      if (trial.failed) {
        line["error"] = trial.error;
      } else {
        line["metrics"] = {{"validation", to_json(trial.validation)}, {"score", trial.score}};
        if (trial.calibration) line["metrics"]["calibration"] = to_json(*trial.calibration);
      }
      *log << line.dump() << '\n' << std::flush;
    }
    result.trials.push_back(std::move(trial));
  }
  if (!found) throw NumericalError("every search trial diverged");
  return result;
}

std::string to_string(AblationCondition c) {
  switch (c) {
    case AblationCondition::VanillaNoSide: return "vanilla-no-side";
    case AblationCondition::VanillaSide: return "vanilla-side";
    case AblationCondition::WlrConstant: return "wlr-constant";
    case AblationCondition::WlrNoise: return "wlr-noise";
    case AblationCondition::WlrInformative: return "wlr-informative";
  }
  return "unknown";
}

SynthSpec default_ablation_data() {
  SynthSpec d;
  d.extents = {20, 20, 20};
  d.rank = 2;
  d.clusters = 4;
  d.index_share = 0.5;
  d.observed_fraction = 0.2;
  d.noise = 0.1;
  return d;
}

ModelConfig default_ablation_model() {
  ModelConfig m;
  m.rank = 2;
  m.reg = 0.01;
  m.aux_reg = 0.01;
  return m;
}

TrainConfig default_ablation_train() {
  TrainConfig t;
  t.epochs = 20;
  t.iterations_per_epoch = 50;
  t.batch_fraction = 0.2;
  t.learning_rate = 0.02;
  return t;
}

void AblationSpec::validate(const std::string& prefix) const {
  if (seeds == 0) throw ConfigError("must be >= 1", prefix + ".seeds");
  if (side_space == Space::Primal) throw ConfigError("side-informed conditions need a dual space", prefix + ".side_space");
  if (data.extents.size() < 2) throw ConfigError("at least two modes are required", prefix + ".synth.extents");
}

const AblationRow& AblationResult::row(AblationCondition c) const {
  for (const auto& r : rows) {
    if (r.condition == c) return r;
  }
  throw ConfigError("no ablation row for " + to_string(c));
}

AblationResult ablation_suite(const AblationSpec& spec) {
  spec.validate();
  AblationResult result;
  for (auto c : kAblationConditions) result.rows.push_back({c, {}, 0.0, 0.0});
  for (std::size_t s = 0; s < spec.seeds; ++s) {
    const std::uint64_t seed = spec.seed + s;
    result.seeds.push_back(seed);
    SynthSpec data_spec = spec.data;
    data_spec.kind = SideKind::Informative;
    data_spec.seed = seed;
    const SynthData d = synth(data_spec);
    const Split split = split_dataset(d.dataset.size(), seed);
    const CooDataset train = d.dataset.subset(split.train);
    const CooDataset test = d.dataset.subset(split.test);
    const std::size_t order = data_spec.extents.size();

    for (auto& row : result.rows) {
      TrialSetup setup{spec.model, spec.train, {}};
      setup.model.extents = data_spec.extents;
      setup.model.grouping.clear();
      setup.model.init_seed = seed;
      setup.model.rff_seed = seed;
      setup.train.seed = seed;
      setup.model.space = spec.side_space;
      SideFeatures side(order);
      switch (row.condition) {
        case AblationCondition::VanillaNoSide:
          setup.model.variant = Variant::Vanilla;
          break;
        case AblationCondition::VanillaSide:
          setup.model.variant = Variant::Vanilla;
          side = d.informative;
          break;
        case AblationCondition::WlrConstant:
        case AblationCondition::WlrNoise: {
          setup.model.variant = Variant::Wlr;
          const SideKind kind =
              row.condition == AblationCondition::WlrConstant ? SideKind::Constant : SideKind::GaussianNoise;
          for (std::size_t m = 0; m < order; ++m) {
            side[m] = make_side(kind, data_spec.extents[m], data_spec.side_dim, seed * 1000003 + m + 1);
          }
          break;
        }
        case AblationCondition::WlrInformative:
          setup.model.variant = Variant::Wlr;
          side = d.informative;
          break;
      }
      const KftModel model = fit_model(setup, side, train);
      row.r2.push_back(r2_score(model.predict(test.all()), test.targets()));
    }
  }
  for (auto& row : result.rows) {
    const double n = static_cast<double>(row.r2.size());
    for (double v : row.r2) row.mean += v / n;
    double ss = 0.0;
    for (double v : row.r2) ss += (v - row.mean) * (v - row.mean);
    row.sd = row.r2.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return result;
}

void write_ablation_csv(std::ostream& out, const AblationResult& result) {
  out << "condition,seed,test_r2\n";
  char buf[64];
  for (const auto& row : result.rows) {
    for (std::size_t s = 0; s < row.r2.size(); ++s) {
      std::snprintf(buf, sizeof buf, "%.17g", row.r2[s]);
      out << to_string(row.condition) << ',' << result.seeds[s] << ',' << buf << '\n';
    }
  }
}

}  // namespace kft
