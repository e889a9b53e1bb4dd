#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "kft/data.hpp"
#include "kft/errors.hpp"
#include "kft/model.hpp"

namespace kft {

struct TrainConfig {
  std::size_t epochs = 20;
  /// Optimizer steps per parameter group and epoch; 0 runs one full pass
  /// over the shuffled batches.
  std::size_t iterations_per_epoch = 0;
  double batch_fraction = 1.0;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and per-tensor moments keyed by
/// tensor name.
class Adam {
 public:
  explicit Adam(double learning_rate) : lr_(learning_rate) {}

  void step(const std::string& name, DenseTensor& param, const DenseTensor& grad);
  double learning_rate() const { return lr_; }

 private:
  struct Moments {
    DenseTensor first, second;
    std::size_t steps = 0;
  };
  double lr_;
  std::map<std::string, Moments> state_;
};

/// Shuffled without-replacement batches over `records` items.
class BatchSampler {
 public:
  BatchSampler(std::size_t records, double fraction, std::uint64_t seed);

  std::size_t batch_size() const { return batch_size_; }
  /// Batches of one pass; the last may be shorter. Deterministic in
  /// (seed, pass).
  std::vector<std::vector<std::size_t>> pass(std::uint64_t pass_index) const;

 private:
  std::size_t records_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

/// Throws NumericalError naming `label` when `grad` has a non-finite entry.
void require_finite(const DenseTensor& grad, const std::string& label);

struct GroupGradients {
  std::vector<NamedTensor> tensors;
  std::vector<DenseTensor> grads;
  ObjectiveParts parts;
};

/// Gradient of the objective on one batch with respect to `group` only.
GroupGradients gradients(KftModel& model, const IndexBatch& batch, std::span<const double> targets,
                         std::size_t n_total, ParamGroup group);

struct TraceRow {
  std::size_t epoch = 0;
  std::string phase;
  std::size_t iteration = 0;
  double objective = 0.0;
  double mse = 0.0;
  double reg = 0.0;
};

using Trace = std::vector<TraceRow>;

class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& message, Trace trace)
      : NumericalError(message), trace_(std::move(trace)) {}
  const Trace& trace() const noexcept { return trace_; }

 private:
  Trace trace_;
};

/// Groups trained in order for this model: cores, then auxiliary cores if
/// the variant has them, then kernel parameters if any are trainable.
std::vector<ParamGroup> training_groups(const KftModel& model);

using StepObserver = std::function<void(const TraceRow&)>;

/// Block-coordinate training: each epoch visits every group in order and
/// updates only that group. Returns the per-step objective trace.
Trace em_train(KftModel& model, const CooDataset& train, const TrainConfig& config,
               const StepObserver& observer = {});

void write_trace_csv(std::ostream& out, const Trace& trace);

}  // namespace kft
