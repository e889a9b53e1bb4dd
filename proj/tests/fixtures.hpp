#pragma once

// Small trained models shared by unit and acceptance tests.

#include <cstdint>
#include <random>

#include "kft/data.hpp"
#include "kft/variational.hpp"

namespace fixture {

struct TrainedVi {
  kft::VariationalModel model;
  kft::CooDataset data;
};

/// Univariate VI on a planted 20x20 rank-2 tensor with z-scaled targets.
inline TrainedVi trained_vi(std::uint64_t seed) {
  kft::SynthSpec spec;
  spec.extents = {20, 20};
  spec.kind = kft::SideKind::None;
  spec.observed_fraction = 0.5;
  spec.noise = 0.2;
  spec.seed = seed;
  const kft::SynthData d = kft::synth(spec);
  const kft::ZTransform z = kft::ZTransform::fit(d.dataset.targets());
  std::vector<double> y;
  for (double v : d.dataset.targets()) y.push_back(z.apply(v));
  kft::CooDataset data(d.dataset.extents(), d.dataset.flat_indices(), std::move(y));
  kft::ModelConfig c;
  c.variant = kft::Variant::Vanilla;
  c.space = kft::Space::Primal;
  c.extents = spec.extents;
  c.rank = 2;
  c.init_seed = seed;
  kft::VariationalConfig vc;
  vc.prior.noise_var = 0.05;
  kft::VariationalModel vm(c, d.side, vc);
  kft::TrainConfig t;
  t.epochs = 5;
  t.iterations_per_epoch = 100;
  t.batch_fraction = 0.2;
  t.learning_rate = 0.02;
  t.seed = seed;
  kft::vi_train(vm, data, t);
  return {std::move(vm), std::move(data)};
}

/// `points` index tuples drawn uniformly over the model's extents.
inline kft::IndexBatch random_batch(const std::vector<std::size_t>& extents, std::size_t points,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  kft::IndexBatch b;
  for (auto n : extents) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> col(points);
    for (auto& i : col) i = pick(rng);
    b.modes.push_back(std::move(col));
  }
  return b;
}

/// One predictive draw per point, spreading points over `pool` independent
/// parameter draws so that targets are not all tied to one sample.
inline std::vector<double> simulated_targets(const kft::VariationalModel& vm, const kft::IndexBatch& batch,
                                             std::size_t pool, std::uint64_t seed) {
  const kft::PredictiveSamples s = vm.sample_predictive(batch, pool, seed);
  std::vector<double> y(s.points);
  for (std::size_t i = 0; i < s.points; ++i) y[i] = s.at(i)[i % pool];
  return y;
}

}  // namespace fixture
