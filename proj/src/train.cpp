#include "kft/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "kft/tensor_ops.hpp"

namespace kft {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("must be >= 1", "train.epochs");
  if (!(batch_fraction > 0.0 && batch_fraction <= 1.0)) {
    throw ConfigError("must lie in (0, 1]", "train.batch_fraction");
  }
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("must be finite and >= 0", "train.learning_rate");
  }
}

void Adam::step(const std::string& name, DenseTensor& param, const DenseTensor& grad) {
  if (param.shape() != grad.shape()) throw ShapeError("Adam: gradient shape differs for " + name);
  auto [it, fresh] = state_.try_emplace(name);
  Moments& s = it->second;
  if (fresh) {
    s.first = DenseTensor(param.shape());
    s.second = DenseTensor(param.shape());
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++s.steps;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.steps));
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.first[i] = b1 * s.first[i] + (1.0 - b1) * grad[i];
    s.second[i] = b2 * s.second[i] + (1.0 - b2) * grad[i] * grad[i];
    if (lr_ == 0.0) continue;
    param[i] -= lr_ * (s.first[i] / c1) / (std::sqrt(s.second[i] / c2) + eps);
  }
}

BatchSampler::BatchSampler(std::size_t records, double fraction, std::uint64_t seed)
    : records_(records), seed_(seed) {
  if (records == 0) throw DataError("cannot sample batches from an empty dataset");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("must lie in (0, 1]", "train.batch_fraction");
  batch_size_ = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(records))), 1, records);
}

std::vector<std::vector<std::size_t>> BatchSampler::pass(std::uint64_t pass_index) const {
  std::vector<std::size_t> order(records_);
  for (std::size_t i = 0; i < records_; ++i) order[i] = i;
  std::seed_seq seq{seed_, pass_index};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < records_; start += batch_size_) {
    const std::size_t end = std::min(records_, start + batch_size_);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void require_finite(const DenseTensor& grad, const std::string& label) {
  if (!all_finite(grad)) throw NumericalError("non-finite gradient for " + label);
}

GroupGradients gradients(KftModel& model, const IndexBatch& batch, std::span<const double> targets,
                         std::size_t n_total, ParamGroup group) {
  const ParamVars v = model.vars({group});
  GroupGradients out;
  out.parts = model.objective(v, batch, targets, n_total);
  ad::backward(out.parts.total);
  const auto named = model.named_tensors();
  const auto vars = model.ordered(v);
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].group != group) continue;
    DenseTensor g = vars[i].grad();
    require_finite(g, named[i].name);
    out.tensors.push_back(named[i]);
    out.grads.push_back(std::move(g));
  }
  return out;
}

std::vector<ParamGroup> training_groups(const KftModel& model) {
  std::vector<ParamGroup> groups{ParamGroup::Cores};
  if (model.config().variant != Variant::Vanilla) groups.push_back(ParamGroup::Aux);
  if (model.trains_kernel()) groups.push_back(ParamGroup::Kernel);
  return groups;
}

Trace em_train(KftModel& model, const CooDataset& train, const TrainConfig& config,
               const StepObserver& observer) {
  config.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  const BatchSampler sampler(train.size(), config.batch_fraction, config.seed);
  const auto groups = training_groups(model);
  Adam adam(config.learning_rate);
  Trace trace;
  std::uint64_t pass_index = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (ParamGroup group : groups) {
      std::size_t step = 0;
      const std::size_t limit = config.iterations_per_epoch;
      while (limit == 0 ? step == 0 : step < limit) {
        for (const auto& records : sampler.pass(pass_index++)) {
          if (limit != 0 && step >= limit) break;
          const IndexBatch batch = train.batch(records);
          const std::vector<double> y = train.targets_at(records);
          GroupGradients g;
          try {
            g = gradients(model, batch, y, train.size(), group);
          } catch (const NumericalError& e) {
            throw DivergenceError(e.what(), std::move(trace));
          }
          TraceRow row{epoch, to_string(group), step, g.parts.total.item(), g.parts.mse, g.parts.reg};
          trace.push_back(row);
          if (!std::isfinite(row.objective)) {
            throw DivergenceError("objective became non-finite in epoch " + std::to_string(epoch) +
                                      ", phase " + row.phase,
                                  std::move(trace));
          }
          for (std::size_t i = 0; i < g.tensors.size(); ++i) {
            adam.step(g.tensors[i].name, *g.tensors[i].tensor, g.grads[i]);
          }
          if (observer) observer(row);
          ++step;
        }
        if (limit == 0) break;
      }
    }
  }
  return trace;
}

void write_trace_csv(std::ostream& out, const Trace& trace) {
  out << "epoch,phase,iteration,objective,mse,reg\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.objective, r.mse, r.reg);
    out << r.epoch << ',' << r.phase << ',' << r.iteration << ',' << buf << '\n';
  }
}

}  // namespace kft
