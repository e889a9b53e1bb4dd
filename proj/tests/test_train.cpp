#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "kft/train.hpp"
#include "oracles.hpp"

using namespace kft;

namespace {

double r2(const std::vector<double>& pred, const std::vector<double>& y) {
  double mean = 0.0;
  for (double v : y) mean += v / static_cast<double>(y.size());
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    res += (pred[i] - y[i]) * (pred[i] - y[i]);
    tot += (y[i] - mean) * (y[i] - mean);
  }
  return 1.0 - res / tot;
}

ModelConfig small_config(Variant v, Space s) {
  ModelConfig c;
  c.variant = v;
  c.space = s;
  c.extents = {4, 3, 3};
  c.rank = 2;
  c.reg = 0.2;
  c.aux_reg = 0.1;
  c.rff_features = 6;
  return c;
}

SideFeatures small_side() {
  std::mt19937_64 rng(3);
  SideFeatures side{oracle::random_tensor({4, 2}, rng), std::nullopt, oracle::random_tensor({3, 2}, rng)};
  return side;
}

CooDataset small_data(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<std::size_t> idx;
  std::vector<double> y;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; k += 2) {
        idx.insert(idx.end(), {i, j, k});
        y.push_back(normal(rng));
      }
  return CooDataset({4, 3, 3}, idx, y);
}

}  // namespace

TEST(Gradients, ZeroResidualWithoutRegIsZero) {
  ModelConfig c = small_config(Variant::Wlr, Space::DualExact);
  c.reg = c.aux_reg = 0.0;
  KftModel m(c, small_side());
  const IndexBatch b = small_data(1).all();
  const auto y = m.predict(b);
  for (ParamGroup g : training_groups(m)) {
    for (const auto& grad : gradients(m, b, y, b.size(), g).grads) {
      EXPECT_EQ(max_abs_diff(grad, DenseTensor(grad.shape())), 0.0);
    }
  }
}

TEST(Gradients, RankOneMatrixHandDerivative) {
  ModelConfig c;
  c.variant = Variant::Vanilla;
  c.space = Space::Primal;
  c.extents = {3, 4};
  c.rank = 1;
  KftModel m(c, {});
  const IndexBatch b{{{0, 0, 2, 1, 0}, {1, 3, 3, 0, 2}}};
  const std::vector<double> y{0.3, -1.2, 0.8, 2.0, 0.1};
  const auto g = gradients(m, b, y, 20, ParamGroup::Cores);
  const auto& u = m.params().cores[0];
  const auto& v = m.params().cores[1];
  for (std::size_t i = 0; i < 3; ++i) {
    double want = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      if (b.modes[0][r] != i) continue;
      const std::size_t j = b.modes[1][r];
      want += 2.0 / 5.0 * (u[i] * v[j] - y[r]) * v[j];
    }
    EXPECT_NEAR(g.grads[0][i], want, 1e-14);
  }
}

TEST(GradientsProperty, EveryGroupMatchesFiniteDifferences) {
  const CooDataset data = small_data(2);
  const IndexBatch b = data.all();
  for (Variant v : {Variant::Wlr, Variant::Ls}) {
    for (Space s : {Space::Primal, Space::DualExact, Space::DualRff}) {
      KftModel m(small_config(v, s), small_side());
      std::mt19937_64 rng(4);
      for (auto& nt : m.named_tensors()) {
        if (nt.group != ParamGroup::Kernel) *nt.tensor = oracle::random_tensor(nt.tensor->shape(), rng);
      }
      for (ParamGroup group : training_groups(m)) {
        const auto g = gradients(m, b, data.targets(), 40, group);
        double worst = 0.0;
        for (std::size_t t = 0; t < g.tensors.size(); ++t) {
          DenseTensor& p = *g.tensors[t].tensor;
          for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p[i], h = 1e-5;
            p[i] = keep + h;
            const double up = m.objective(m.vars(), b, data.targets(), 40).total.item();
            p[i] = keep - h;
            const double down = m.objective(m.vars(), b, data.targets(), 40).total.item();
            p[i] = keep;
            const double fd = (up - down) / (2 * h), an = g.grads[t][i];
            worst = std::max(worst, std::abs(an - fd) / std::max(1e-6, std::abs(an) + std::abs(fd)));
          }
        }
        EXPECT_LE(worst, 1e-4) << to_string(v) << "/" << to_string(s) << "/" << to_string(group);
      }
    }
  }
}

TEST(Gradients, NonFiniteGradientNamesTensor) {
  KftModel m(small_config(Variant::Wlr, Space::Primal), {});
  m.params().weights[1][0] = std::numeric_limits<double>::infinity();
  const IndexBatch b = small_data(3).all();
  try {
    gradients(m, b, small_data(3).targets(), b.size(), ParamGroup::Cores);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("core."), std::string::npos);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Adam adam(0.1);
  DenseTensor p({2}, {1.0, -1.0});
  adam.step("x", p, DenseTensor({2}, {3.0, -0.5}));
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -0.9, 1e-8);
  EXPECT_THROW(adam.step("x", p, DenseTensor({3})), ShapeError);
}

TEST(BatchSampler, FullFractionIsOneBatch) {
  const BatchSampler s(37, 1.0, 1);
  const auto pass = s.pass(0);
  ASSERT_EQ(pass.size(), 1u);
  EXPECT_EQ(std::set<std::size_t>(pass[0].begin(), pass[0].end()).size(), 37u);
}

TEST(BatchSampler, SeededAndCoversEachPointOnce) {
  const BatchSampler s(10000, 0.01, 7);
  EXPECT_EQ(s.batch_size(), 100u);
  const auto a = s.pass(3);
  EXPECT_EQ(a, BatchSampler(10000, 0.01, 7).pass(3));
  EXPECT_NE(a, s.pass(4));
  ASSERT_EQ(a.size(), 100u);
  std::set<std::size_t> seen;
  for (const auto& batch : a) {
    EXPECT_EQ(batch.size(), 100u);
    seen.insert(batch.begin(), batch.end());
  }
  EXPECT_EQ(seen.size(), 10000u);
  EXPECT_THROW(BatchSampler(0, 0.5, 1), DataError);
  EXPECT_THROW(BatchSampler(10, 0.0, 1), ConfigError);
}

TEST(EmTrain, RecoversPlantedRankTwoTensor) {
  SynthSpec spec;
  spec.kind = SideKind::None;
  spec.observed_fraction = 0.5;
  spec.seed = 11;
  const SynthData d = synth(spec);
  ModelConfig c;
  c.variant = Variant::Vanilla;
  c.space = Space::Primal;
  c.extents = spec.extents;
  c.rank = 2;
  KftModel m(c, d.side);
  TrainConfig t;
  t.epochs = 20;
  t.iterations_per_epoch = 100;
  t.batch_fraction = 0.2;
  t.learning_rate = 0.02;
  em_train(m, d.dataset, t);
  EXPECT_GE(r2(m.predict(d.dataset.all()), d.dataset.targets()), 0.99);
}

TEST(EmTrain, ZeroLearningRateLeavesParametersUntouched) {
  KftModel m(small_config(Variant::Ls, Space::DualExact), small_side());
  const Parameters before = m.params();
  TrainConfig t;
  t.epochs = 2;
  t.learning_rate = 0.0;
  t.batch_fraction = 0.4;
  em_train(m, small_data(5), t);
  EXPECT_EQ(m.params(), before);
}

TEST(EmTrain, OnlyTheActiveGroupChanges) {
  KftModel m(small_config(Variant::Wlr, Space::DualExact), small_side());
  TrainConfig t;
  t.epochs = 2;
  t.batch_fraction = 0.5;
  t.learning_rate = 0.05;
  Parameters last = m.params();
  std::vector<std::string> phases;
  em_train(m, small_data(6), t, [&](const TraceRow& row) {
    const Parameters& now = m.params();
    const bool cores = row.phase == to_string(ParamGroup::Cores);
    const bool aux = row.phase == to_string(ParamGroup::Aux);
    const bool kernel = row.phase == to_string(ParamGroup::Kernel);
    EXPECT_EQ(now.cores != last.cores, cores);
    EXPECT_EQ(now.weights != last.weights, aux);
    EXPECT_EQ(now.log_lengthscales != last.log_lengthscales, kernel);
    if (phases.empty() || phases.back() != row.phase) phases.push_back(row.phase);
    last = now;
  });
  const std::vector<std::string> want{"cores", "aux", "kernel", "cores", "aux", "kernel"};
  EXPECT_EQ(phases, want);
}

TEST(EmTrain, DeterministicTrace) {
  auto run = [] {
    KftModel m(small_config(Variant::Ls, Space::DualRff), small_side());
    TrainConfig t;
    t.epochs = 3;
    t.batch_fraction = 0.3;
    t.seed = 9;
    std::ostringstream out;
    write_trace_csv(out, em_train(m, small_data(7), t));
    return out.str();
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.substr(0, a.find('\n')), "epoch,phase,iteration,objective,mse,reg");
}

TEST(EmTrain, DivergenceCarriesTrace) {
  KftModel m(small_config(Variant::Vanilla, Space::Primal), {});
  TrainConfig t;
  t.epochs = 50;
  t.learning_rate = 1e150;
  try {
    em_train(m, small_data(8), t);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_FALSE(e.trace().empty());
  }
}

TEST(TrainConfig, ValidationNamesField) {
  TrainConfig t;
  t.batch_fraction = 1.5;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.epochs = 0;
  try {
    t.validate();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "train.epochs");
  }
}
