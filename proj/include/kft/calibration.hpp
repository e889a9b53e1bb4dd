#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "kft/data.hpp"
#include "kft/variational.hpp"

namespace kft {

/// Tail masses α; each defines the central interval [q_α, q_{1−α}].
inline constexpr std::array<double, 5> kCalibrationAlphas{0.05, 0.15, 0.25, 0.35, 0.45};

/// Predictive draws below this count are rejected.
inline constexpr std::size_t kMinCalibrationDraws = 100;

struct CalibrationReport {
  std::vector<double> alphas;
  std::vector<double> coverage;   // share of targets inside each interval
  std::vector<double> deviation;  // |coverage − (1 − 2α)|
  double total_deviation = 0.0;
  double r2 = 0.0;
  double eta = 0.0;  // total_deviation − r2; lower is better
};

/// Per point and α, whether the target lies inside the empirical central
/// interval of its predictive draws. Indexed [alpha][point].
std::vector<std::vector<bool>> interval_hits(const PredictiveSamples& samples, std::span<const double> targets);

/// Coverage report; `r2` comes from the mean prediction on the same points.
CalibrationReport calibration_report(const PredictiveSamples& samples, std::span<const double> targets, double r2);

nlohmann::json to_json(const CalibrationReport& report);

struct HeatmapCell {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  double alpha = 0.0;
  double coverage = 0.0;
  std::size_t count = 0;
};

/// Coverage aggregated over every mode except `mode_a` and `mode_b`, sorted
/// by (index_a, index_b, alpha).
std::vector<HeatmapCell> calibration_heatmap(const PredictiveSamples& samples, std::span<const double> targets,
                                             const IndexBatch& batch, std::size_t mode_a, std::size_t mode_b);

/// CSV with header `mode_a_index,mode_b_index,alpha,coverage`.
void write_heatmap_csv(std::ostream& out, const std::vector<HeatmapCell>& cells);

}  // namespace kft
