#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kft/calibration.hpp"
#include "kft/data.hpp"
#include "kft/model.hpp"
#include "kft/train.hpp"
#include "kft/variational.hpp"

namespace kft {

/// 1 − SS_res / SS_tot. Throws DataError for fewer than two points or a
/// constant target.
double r2_score(std::span<const double> pred, std::span<const double> target);
double rmse(std::span<const double> pred, std::span<const double> target);

struct Metrics {
  double r2 = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

Metrics metrics(std::span<const double> pred, std::span<const double> target);

/// Closed interval sampled uniformly, or log-uniformly when `log_scale`.
struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool log_scale = false;

  double sample(std::mt19937_64& rng) const;
  void validate(const std::string& path) const;
};

struct SearchSpace {
  Range batch_fraction{0.05, 0.5, false};
  Range learning_rate{1e-3, 5e-2, true};
  Range reg{1e-4, 1.0, true};
  std::vector<std::size_t> ranks{2, 4, 8};
  std::vector<KernelKind> kernels{KernelKind::Rbf, KernelKind::Matern12, KernelKind::Matern32};
  Range noise_var{1e-2, 1.0, true};  // Bayesian trials
  Range prior_var{1e-1, 10.0, true};
  /// Select by η on validation (variational trials) instead of R².
  bool bayesian = false;
  std::size_t calibration_draws = 200;

  void validate(const std::string& prefix = "search.space") const;
};

/// Everything one trial trains with.
struct TrialSetup {
  ModelConfig model;
  TrainConfig train;
  VariationalConfig vi;
};

/// Draws the searched fields of `base` from `space`.
TrialSetup sample_trial(const SearchSpace& space, const TrialSetup& base, std::mt19937_64& rng);

struct Trial {
  std::size_t index = 0;
  TrialSetup setup;
  bool failed = false;
  std::string error;
  Metrics validation;
  std::optional<CalibrationReport> calibration;
  double score = 0.0;  // higher is better: R², or −η for Bayesian trials
  double seconds = 0.0;
};

struct SearchResult {
  std::vector<Trial> trials;
  std::size_t best = 0;
};

/// Uniform random search over `space`. Each trial trains on `split.train`
/// and is scored on `split.validation`; trials that diverge are kept in the
/// log but never selected. When `log` is set, one JSON line per trial is
/// written as soon as it finishes.
SearchResult random_search(const SearchSpace& space, const TrialSetup& base, const CooDataset& data,
                           const SideFeatures& side, const Split& split, std::size_t iterations,
                           std::uint64_t seed, std::ostream* log = nullptr);

/// Frequentist fit of `setup` on `train`; used by search and ablations.
KftModel fit_model(const TrialSetup& setup, const SideFeatures& side, const CooDataset& train);

enum class AblationCondition { VanillaNoSide, VanillaSide, WlrConstant, WlrNoise, WlrInformative };

inline constexpr std::array<AblationCondition, 5> kAblationConditions{
    AblationCondition::VanillaNoSide, AblationCondition::VanillaSide, AblationCondition::WlrConstant,
    AblationCondition::WlrNoise, AblationCondition::WlrInformative};

std::string to_string(AblationCondition c);

SynthSpec default_ablation_data();
ModelConfig default_ablation_model();
TrainConfig default_ablation_train();

/// Defaults describe a 20x20x20 planted problem with clustered side features.
struct AblationSpec {
  SynthSpec data = default_ablation_data();
  ModelConfig model = default_ablation_model();  // variant, space, extents and seeds are set per condition
  TrainConfig train = default_ablation_train();
  Space side_space = Space::DualExact;  // space of the side-informed conditions
  std::size_t seeds = 5;
  std::uint64_t seed = 0;

  void validate(const std::string& prefix = "ablate") const;
};

struct AblationRow {
  AblationCondition condition;
  std::vector<double> r2;  // test R² per seed
  double mean = 0.0;
  double sd = 0.0;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  const AblationRow& row(AblationCondition c) const;
};

/// One synthetic truth per seed, five side-information conditions fitted on
/// its train split and scored on its test split.
AblationResult ablation_suite(const AblationSpec& spec);

/// CSV `condition,seed,test_r2`, one line per condition and seed.
void write_ablation_csv(std::ostream& out, const AblationResult& result);

}  // namespace kft
