#include "kft/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "kft/errors.hpp"

namespace kft {

std::vector<std::vector<bool>> interval_hits(const PredictiveSamples& samples, std::span<const double> targets) {
  if (targets.size() != samples.points) throw ShapeError("calibration: target count differs from sample points");
  if (samples.draws < kMinCalibrationDraws) {
    throw ConfigError("calibration needs at least " + std::to_string(kMinCalibrationDraws) +
                      " predictive draws per point, got " + std::to_string(samples.draws));
  }
  std::vector<std::vector<bool>> hits(kCalibrationAlphas.size(), std::vector<bool>(samples.points));
  std::vector<double> sorted(samples.draws);
  for (std::size_t i = 0; i < samples.points; ++i) {
    const auto draws = samples.at(i);
    std::copy(draws.begin(), draws.end(), sorted.begin());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t a = 0; a < kCalibrationAlphas.size(); ++a) {
      const double lo = quantile(sorted, kCalibrationAlphas[a]);
      const double hi = quantile(sorted, 1.0 - kCalibrationAlphas[a]);
      hits[a][i] = targets[i] >= lo && targets[i] <= hi;
    }
  }
  return hits;
}

CalibrationReport calibration_report(const PredictiveSamples& samples, std::span<const double> targets, double r2) {
  if (samples.points == 0) throw ShapeError("calibration: no points");
  const auto hits = interval_hits(samples, targets);
  CalibrationReport r;
  r.r2 = r2;
  long double total = 0.0L;  // wider accumulator keeps Σ(1 − 2α) exact
  for (std::size_t a = 0; a < kCalibrationAlphas.size(); ++a) {
    const double alpha = kCalibrationAlphas[a];
    const auto inside = static_cast<double>(std::count(hits[a].begin(), hits[a].end(), true));
    const double coverage = inside / static_cast<double>(samples.points);
    r.alphas.push_back(alpha);
    r.coverage.push_back(coverage);
    r.deviation.push_back(std::abs(coverage - (1.0 - 2.0 * alpha)));
    total += r.deviation.back();
  }
  r.total_deviation = static_cast<double>(total);
  r.eta = r.total_deviation - r2;
  return r;
}

nlohmann::json to_json(const CalibrationReport& r) {
  return {{"alphas", r.alphas},         {"coverage", r.coverage}, {"deviation", r.deviation},
          {"total_deviation", r.total_deviation}, {"r2", r.r2}, {"eta", r.eta}};
}

std::vector<HeatmapCell> calibration_heatmap(const PredictiveSamples& samples, std::span<const double> targets,
                                             const IndexBatch& batch, std::size_t mode_a, std::size_t mode_b) {
  if (mode_a >= batch.order() || mode_b >= batch.order() || mode_a == mode_b) {
    throw ConfigError("heatmap modes must be two distinct modes below " + std::to_string(batch.order()));
  }
  if (batch.size() != samples.points) throw ShapeError("calibration: batch size differs from sample points");
  const auto hits = interval_hits(samples, targets);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[{batch.modes[mode_a][i], batch.modes[mode_b][i]}].push_back(i);
  std::vector<HeatmapCell> cells;
  for (const auto& [key, points] : groups) {
    for (std::size_t a = 0; a < kCalibrationAlphas.size(); ++a) {
      std::size_t inside = 0;
      for (auto i : points) inside += hits[a][i] ? 1 : 0;
      cells.push_back({key.first, key.second, kCalibrationAlphas[a],
                       static_cast<double>(inside) / static_cast<double>(points.size()), points.size()});
    }
  }
  return cells;
}

void write_heatmap_csv(std::ostream& out, const std::vector<HeatmapCell>& cells) {
  out << "mode_a_index,mode_b_index,alpha,coverage\n";
  char buf[64];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%.17g", c.coverage);
    out << c.index_a << ',' << c.index_b << ',' << c.alpha << ',' << buf << '\n';
  }
}

}  // namespace kft
