#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "kft/errors.hpp"
#include "kft/model.hpp"
#include "kft/tensor_ops.hpp"
#include "model_oracles.hpp"
#include "oracles.hpp"

using namespace kft;
using ad::Var;

using namespace model_oracle;

TEST(Forward, NoSideRankOneIsOuterProduct) {
  KftModel m(config(Variant::Vanilla, Space::Primal, {3, 4}, 1), {});
  randomize(m, 1);
  const IndexBatch b = all_indices({3, 4});
  const auto pred = m.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) {
    const double u = m.params().cores[0][b.modes[0][r]], v = m.params().cores[1][b.modes[1][r]];
    EXPECT_NEAR(pred[r], u * v, 1e-14);
  }
}

TEST(Forward, IdentitySideInfoMatchesNoSide) {
  const std::vector<std::size_t> ext{3, 4, 2};
  SideFeatures eye;
  for (auto n : ext) eye.emplace_back(DenseTensor::identity(n));
  KftModel plain(config(Variant::Vanilla, Space::Primal, ext, 2), {});
  KftModel side(config(Variant::Vanilla, Space::Primal, ext, 2), eye);
  randomize(plain, 2);
  side.params() = plain.params();
  const IndexBatch b = all_indices(ext);
  const auto a = plain.predict(b), c = side.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(a[r], c[r], 1e-12);
}

TEST(Forward, VanillaMatchesBruteForceInEverySpace) {
  const std::vector<std::size_t> ext{4, 3, 5};
  for (Space s : {Space::Primal, Space::DualExact}) {
    KftModel m(config(Variant::Vanilla, s, ext, 3), random_side(ext, 2, 3));
    randomize(m, 4);
    const IndexBatch b = all_indices(ext);
    const auto pred = m.predict(b);
    for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(pred[r], brute_force(m, entry(b, r)), 1e-10);
  }
}

TEST(Forward, RandomFeatureSpaceUsesFeatureGram) {
  const std::vector<std::size_t> ext{4, 5};
  ModelConfig c = config(Variant::Wlr, Space::DualRff, ext, 2);
  c.rff_features = 16;
  KftModel m(c, random_side(ext, 2, 5));
  randomize(m, 6);
  const IndexBatch b = all_indices(ext);
  const auto pred = m.predict(b);
  std::vector<DenseTensor> approx;
  for (std::size_t p = 0; p < 2; ++p) {
    const DenseTensor& phi = m.rff_matrix(p);
    approx.push_back(oracle::naive_matmul(phi, phi.transposed()));
  }
  const auto& prm = m.params();
  for (std::size_t r = 0; r < b.size(); ++r) {
    auto slice = [&](std::size_t p, std::size_t a, std::size_t i, std::size_t cc) {
      double s = 0.0;
      for (std::size_t f = 0; f < ext[p]; ++f) s += approx[p](i, f) * prm.cores[p].at({a, f, cc});
      return s * prm.weights[p].at({a, i, cc});
    };
    EXPECT_NEAR(pred[r], oracle::chain_entry(2, {1, 2, 1}, entry(b, r), slice), 1e-10);
  }
}

TEST(Forward, WlrMatchesBruteForce) {
  const std::vector<std::size_t> ext{5, 3, 4};
  for (Space s : {Space::Primal, Space::DualExact}) {
    SideFeatures side = random_side(ext, 3, 7);
    side[1].reset();  // mixed wiring: one mode without side information
    KftModel m(config(Variant::Wlr, s, ext, 3), side);
    randomize(m, 8);
    const IndexBatch b = all_indices(ext);
    const auto pred = m.predict(b);
    for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(pred[r], brute_force(m, entry(b, r)), 1e-10);
  }
}

TEST(Forward, LsMatchesBruteForceAndReducesToBias) {
  const std::vector<std::size_t> ext{3, 4, 2};
  ModelConfig c = config(Variant::Ls, Space::DualExact, ext, 2);
  c.scale_rank = 3;
  c.bias_rank = 1;
  KftModel m(c, random_side(ext, 2, 9));
  randomize(m, 10);
  const IndexBatch b = all_indices(ext);
  auto pred = m.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(pred[r], brute_force(m, entry(b, r)), 1e-10);

  for (auto& core : m.params().cores) core = DenseTensor(core.shape());
  pred = m.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) {
    EXPECT_NEAR(pred[r], oracle::tt_entry(m.params().biases, entry(b, r)), 1e-14);
  }
}

TEST(Forward, NeutralAuxiliaryCoresEqualVanilla) {
  const std::vector<std::size_t> ext{4, 3, 3};
  const SideFeatures side = random_side(ext, 2, 11);
  KftModel vanilla(config(Variant::Vanilla, Space::DualExact, ext, 2), side);
  randomize(vanilla, 12);
  const IndexBatch b = all_indices(ext);
  const auto base = vanilla.predict(b);

  KftModel wlr(config(Variant::Wlr, Space::DualExact, ext, 2), side);
  wlr.initialize(0);  // V′ starts at exactly one
  wlr.params().cores = vanilla.params().cores;
  const auto w = wlr.predict(b);

  ModelConfig lc = config(Variant::Ls, Space::DualExact, ext, 2);
  lc.scale_rank = 1;
  lc.bias_rank = 1;
  KftModel ls(lc, side);
  ls.params().cores = vanilla.params().cores;
  for (auto& t : ls.params().scales) t = DenseTensor(t.shape(), 1.0);
  for (auto& t : ls.params().biases) t = DenseTensor(t.shape());
  const auto l = ls.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) {
    EXPECT_NEAR(w[r], base[r], 1e-12);
    EXPECT_NEAR(l[r], base[r], 1e-12);
  }
}

TEST(ForwardProperty, ConstantSideInfoCollapsesVanillaOutput) {
  const std::vector<std::size_t> ext{6, 5, 4};
  for (Space s : {Space::Primal, Space::DualExact}) {
    SideFeatures ones;
    for (auto n : ext) ones.emplace_back(DenseTensor({n, 3}, 1.0));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      KftModel m(config(Variant::Vanilla, s, ext, 3), ones);
      randomize(m, 100 + seed);
      const auto pred = m.predict(all_indices(ext));
      EXPECT_LT(variance(pred), 1e-20) << to_string(s);
    }
  }
}

TEST(ForwardProperty, ConstantSideInfoWlrIsFactorizationOfWeights) {
  // With an all-ones Gram, V×K has every middle slice equal to the row-sum
  // S[a,c] = Σ_f V[a,f,c]; WLR then factorizes the cores V′∘S.
  const std::vector<std::size_t> ext{4, 3, 5};
  SideFeatures ones;
  for (auto n : ext) ones.emplace_back(DenseTensor({n, 2}, 1.0));
  for (std::size_t rank : {1u, 3u}) {
    KftModel wlr(config(Variant::Wlr, Space::DualExact, ext, rank), ones);
    randomize(wlr, 13 + rank);
    KftModel plain(config(Variant::Vanilla, Space::Primal, ext, rank), {});
    double c = 1.0;
    for (std::size_t p = 0; p < 3; ++p) {
      const DenseTensor& v = wlr.params().cores[p];
      DenseTensor scaled_w = wlr.params().weights[p];
      for (std::size_t a = 0; a < v.extent(0); ++a)
        for (std::size_t cc = 0; cc < v.extent(2); ++cc) {
          double s = 0.0;
          for (std::size_t f = 0; f < v.extent(1); ++f) s += v.at({a, f, cc});
          for (std::size_t i = 0; i < ext[p]; ++i) scaled_w.at({a, i, cc}) *= s;
          c *= s;
        }
      plain.params().cores[p] = scaled_w;
    }
    const IndexBatch b = all_indices(ext);
    const auto got = wlr.predict(b), want = plain.predict(b);
    for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(got[r], want[r], 1e-10);
    if (rank == 1) {
      for (std::size_t p = 0; p < 3; ++p) plain.params().cores[p] = wlr.params().weights[p];
      const auto base = plain.predict(b);
      for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(got[r], c * base[r], 1e-10);
    }
  }
}

TEST(ForwardProperty, JointCoreMatchesDoubleKernelSum) {
  const std::vector<std::size_t> ext{3, 4, 2};
  ModelConfig c = config(Variant::Wlr, Space::DualExact, ext, 2);
  c.grouping = {{0, 1}, {2}};
  const SideFeatures side = random_side(ext, 2, 15);
  KftModel m(c, side);
  randomize(m, 16);
  ASSERT_EQ(m.params().cores[0].shape(), (Shape{1, 3, 4, 2}));
  const auto& prm = m.params();
  const DenseTensor k0 = rbf_gram(*side[0]), k1 = rbf_gram(*side[1]), k2 = rbf_gram(*side[2]);
  const IndexBatch b = all_indices(ext);
  const auto pred = m.predict(b);
  for (std::size_t r = 0; r < b.size(); ++r) {
    const auto id = entry(b, r);
    double y = 0.0;
    for (std::size_t rk = 0; rk < 2; ++rk) {
      double first = 0.0, second = 0.0;
      for (std::size_t f0 = 0; f0 < 3; ++f0)
        for (std::size_t f1 = 0; f1 < 4; ++f1)
          first += k0(id[0], f0) * k1(id[1], f1) * prm.cores[0].at({0, f0, f1, rk});
      first *= prm.weights[0].at({0, id[0], id[1], rk});
      for (std::size_t f2 = 0; f2 < 2; ++f2) second += k2(id[2], f2) * prm.cores[1].at({rk, f2, 0});
      second *= prm.weights[1].at({rk, id[2], 0});
      y += first * second;
    }
    EXPECT_NEAR(pred[r], y, 1e-10);
  }
}

TEST(Forward, RejectsOutOfRangeAndRaggedBatches) {
  KftModel m(config(Variant::Vanilla, Space::Primal, {3, 4}, 2), {});
  IndexBatch b{{{0, 3}, {1, 1}}};
  EXPECT_THROW(m.predict(b), ShapeError);
  b = IndexBatch{{{0, 1}, {1}}};
  EXPECT_THROW(m.forward(m.vars(), b), ShapeError);
  b = IndexBatch{{{0}}};
  EXPECT_THROW(m.forward(m.vars(), b), ShapeError);
}

TEST(Model, RejectsInconsistentSideInfo) {
  SideFeatures side{DenseTensor({4, 2}), std::nullopt};
  EXPECT_THROW(KftModel(config(Variant::Wlr, Space::DualExact, {3, 4}, 2), side), ShapeError);
  EXPECT_THROW(KftModel(config(Variant::Wlr, Space::DualExact, {3, 4}, 2), SideFeatures(3)), ShapeError);
}

TEST(Model, ConfigValidationNamesTheField) {
  auto expect_path = [](ModelConfig c, const std::string& path) {
    try {
      c.validate();
      ADD_FAILURE() << "no error for " << path;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.path(), path);
    }
  };
  ModelConfig c = config(Variant::Wlr, Space::DualRff, {3, 4}, 2);
  expect_path([&] { auto x = c; x.extents = {3}; return x; }(), "model.extents");
  expect_path([&] { auto x = c; x.rank = 0; return x; }(), "model.rank");
  expect_path([&] { auto x = c; x.reg = -1.0; return x; }(), "model.reg");
  expect_path([&] { auto x = c; x.rff_features = 7; return x; }(), "model.rff_features");
  expect_path([&] { auto x = c; x.grouping = {{1}, {0}}; return x; }(), "model.grouping");
  expect_path([&] { auto x = c; x.grouping = {{0}}; return x; }(), "model.grouping");
}

TEST(Model, NamedTensorsFollowFixedOrder) {
  const std::vector<std::size_t> ext{3, 4};
  SideFeatures side = random_side(ext, 2, 17);
  side[1].reset();
  KftModel m(config(Variant::Ls, Space::DualExact, ext, 2), side);
  std::vector<std::string> names;
  for (const auto& nt : m.named_tensors()) names.push_back(nt.name);
  const std::vector<std::string> want{"core.0",  "core.1",  "scale.0", "scale.1",
                                      "bias.0",  "bias.1",  "log_lengthscale.0"};
  EXPECT_EQ(names, want);
  EXPECT_EQ(m.ordered(m.vars()).size(), want.size());
}

TEST(Model, InitializationIsSeededAndNeutral) {
  const std::vector<std::size_t> ext{3, 4};
  KftModel a(config(Variant::Wlr, Space::Primal, ext, 2), {});
  KftModel b(config(Variant::Wlr, Space::Primal, ext, 2), {});
  EXPECT_EQ(a.params(), b.params());
  b.initialize(1);
  EXPECT_NE(a.params().cores, b.params().cores);
  for (const auto& w : a.params().weights)
    for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(RegPrimal, HandComputedValues) {
  ModelConfig c = config(Variant::Vanilla, Space::Primal, {2, 2}, 1);
  c.grouping = {{0, 1}};
  c.reg = 1.0;
  KftModel m(c, {});
  m.params().cores[0] = DenseTensor({1, 2, 2, 1}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m.regularizer_value(), 30.0);
  m.params().cores[0] = DenseTensor({1, 2, 2, 1});
  EXPECT_DOUBLE_EQ(m.regularizer_value(), 0.0);

  KftModel unreg(config(Variant::Ls, Space::Primal, {3, 4}, 2), {});
  randomize(unreg, 18);
  EXPECT_DOUBLE_EQ(unreg.regularizer_value(), 0.0);
}

TEST(RegPrimal, SumsFrobeniusNormsOfEveryChain) {
  ModelConfig c = config(Variant::Wlr, Space::Primal, {3, 4}, 2);
  c.reg = 0.3;
  c.aux_reg = 0.7;
  KftModel wlr(c, {});
  randomize(wlr, 19);
  double want = 0.0;
  for (const auto& t : wlr.params().cores) want += 0.3 * frobenius_sq(t);
  for (const auto& t : wlr.params().weights) want += 0.7 * frobenius_sq(t);
  EXPECT_NEAR(wlr.regularizer_value(), want, 1e-12);

  c.variant = Variant::Ls;
  KftModel ls(c, {});
  randomize(ls, 20);
  want = 0.0;
  for (const auto& t : ls.params().cores) want += 0.3 * frobenius_sq(t);
  for (const auto& t : ls.params().scales) want += 0.3 * frobenius_sq(t);
  for (const auto& t : ls.params().biases) want += 0.3 * frobenius_sq(t);
  EXPECT_NEAR(ls.regularizer_value(), want, 1e-12);
}


TEST(RegDualWlr, ZeroWeightsGiveZero) {
  ModelConfig c = config(Variant::Wlr, Space::DualExact, {3, 4}, 2);
  c.reg = 1.0;
  KftModel m(c, random_side({3, 4}, 2, 21));
  randomize(m, 22);
  for (auto& w : m.params().weights) w = DenseTensor(w.shape());
  EXPECT_DOUBLE_EQ(m.regularizer_value(), 0.0);
}

TEST(RegDualWlr, IdentityGramUnitWeightsIsScaledNorm) {
  const std::vector<std::size_t> ext{3, 5};
  ModelConfig c = config(Variant::Wlr, Space::DualExact, ext, 2);
  c.reg = 1.0;
  KftModel m(c, SideFeatures{spread_features(3), spread_features(5)});
  randomize(m, 23);
  for (auto& w : m.params().weights) w = DenseTensor(w.shape(), 1.0);
  double want = 0.0;
  for (std::size_t p = 0; p < 2; ++p) want += static_cast<double>(ext[p]) * frobenius_sq(m.params().cores[p]);
  EXPECT_NEAR(m.regularizer_value(), want, 1e-10);
  double nested = 0.0;
  for (std::size_t p = 0; p < 2; ++p) {
    const auto& w = m.params().weights[p];
    nested += rkhs_nested_sum(m.params().cores[p], core_grams(m, p),
                              [&](std::size_t a, std::size_t, std::size_t cc) { return weight_mass(w, a, cc); });
  }
  EXPECT_NEAR(m.regularizer_value(), nested, 1e-10);
}

TEST(RegDualWlr, JointCoreMatchesNestedSum) {
  const std::vector<std::size_t> ext{3, 4, 2};
  ModelConfig c = config(Variant::Wlr, Space::DualExact, ext, 2);
  c.grouping = {{0, 1}, {2}};
  c.reg = 0.4;
  SideFeatures side = random_side(ext, 2, 24);
  side[2].reset();
  KftModel m(c, side);
  randomize(m, 25);
  double want = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& w = m.params().weights[k];
    want += 0.4 * rkhs_nested_sum(m.params().cores[k], core_grams(m, k),
                                  [&](std::size_t a, std::size_t, std::size_t cc) { return weight_mass(w, a, cc); });
  }
  EXPECT_NEAR(m.regularizer_value(), want, 1e-10);
  EXPECT_GE(m.regularizer_value(), 0.0);
}

TEST(RegDualLs, ZeroIdentityAndNestedSum) {
  const std::vector<std::size_t> ext{3, 4};
  ModelConfig c = config(Variant::Ls, Space::DualExact, ext, 2);
  c.reg = 1.0;
  KftModel zero(c, random_side(ext, 2, 26));
  for (auto& nt : zero.named_tensors()) {
    if (nt.group != ParamGroup::Kernel) *nt.tensor = DenseTensor(nt.tensor->shape());
  }
  EXPECT_DOUBLE_EQ(zero.regularizer_value(), 0.0);

  KftModel eye(c, SideFeatures{spread_features(3), spread_features(4)});
  randomize(eye, 27);
  double want = 0.0;
  for (std::size_t p = 0; p < 2; ++p) {
    want += frobenius_sq(eye.params().cores[p]) + frobenius_sq(eye.params().scales[p]) +
            frobenius_sq(eye.params().biases[p]);
  }
  EXPECT_NEAR(eye.regularizer_value(), want, 1e-10);

  c.grouping = {{0, 1}};
  KftModel joint(c, random_side(ext, 2, 28));
  randomize(joint, 29);
  const auto& prm = joint.params();
  want = frobenius_sq(prm.scales[0]) + frobenius_sq(prm.biases[0]) +
         rkhs_nested_sum(prm.cores[0], core_grams(joint, 0), [](auto, auto, auto) { return 1.0; });
  EXPECT_NEAR(joint.regularizer_value(), want, 1e-10);
}

TEST(RegDualProperty, NonNegativeForRandomCores) {
  const std::vector<std::size_t> ext{4, 3, 3};
  for (Variant v : {Variant::Vanilla, Variant::Wlr, Variant::Ls}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      ModelConfig c = config(v, Space::DualExact, ext, 2);
      c.reg = 1.0;
      c.kernel = seed % 2 ? KernelKind::Matern32 : KernelKind::Rbf;
      KftModel m(c, random_side(ext, 2, 200 + seed));
      randomize(m, 300 + seed);
      EXPECT_GE(m.regularizer_value(), 0.0) << to_string(v);
      ModelConfig rc = c;
      rc.space = Space::DualRff;
      rc.rff_features = 8;
      KftModel r(rc, random_side(ext, 2, 200 + seed));
      randomize(r, 300 + seed);
      EXPECT_GE(r.regularizer_value(), -1e-12) << to_string(v);
    }
  }
}

TEST(RegDualVanilla, RandomFeatureFormUsesFeatureGram) {
  const std::vector<std::size_t> ext{4, 3};
  ModelConfig c = config(Variant::Vanilla, Space::DualRff, ext, 2);
  c.reg = 1.0;
  c.rff_features = 6;
  KftModel m(c, random_side(ext, 2, 30));
  randomize(m, 31);
  double want = 0.0;
  for (std::size_t p = 0; p < 2; ++p) {
    const DenseTensor& phi = m.rff_matrix(p);
    want += rkhs_nested_sum(m.params().cores[p], {oracle::naive_matmul(phi, phi.transposed())},
                            [](auto, auto, auto) { return 1.0; });
  }
  EXPECT_NEAR(m.regularizer_value(), want, 1e-10);
}

TEST(Objective, PerfectAndZeroModels) {
  KftModel m(config(Variant::Vanilla, Space::Primal, {3, 4}, 2), {});
  randomize(m, 32);
  const IndexBatch b = all_indices({3, 4});
  const auto pred = m.predict(b);
  EXPECT_NEAR(m.objective(m.vars(), b, pred, b.size()).total.item(), 0.0, 1e-24);

  for (auto& core : m.params().cores) core = DenseTensor(core.shape());
  const std::vector<double> ones(b.size(), 1.0);
  EXPECT_DOUBLE_EQ(m.objective(m.vars(), b, ones, b.size()).total.item(), 1.0);
}

TEST(Objective, AddsBatchScaledRegularizer) {
  ModelConfig c = config(Variant::Wlr, Space::DualExact, {3, 4}, 2);
  c.reg = 0.5;
  KftModel m(c, random_side({3, 4}, 2, 33));
  randomize(m, 34);
  const IndexBatch b{{{0, 2, 1}, {3, 0, 1}}};
  const std::vector<double> y{0.5, -1.0, 2.0};
  const auto parts = m.objective(m.vars(), b, y, 12);
  const auto pred = m.predict(b);
  double mse = 0.0;
  for (std::size_t r = 0; r < 3; ++r) mse += (pred[r] - y[r]) * (pred[r] - y[r]) / 3.0;
  EXPECT_NEAR(parts.mse, mse, 1e-12);
  EXPECT_NEAR(parts.reg, m.regularizer_value(), 1e-12);
  EXPECT_NEAR(parts.total.item(), mse + 3.0 / 12.0 * m.regularizer_value(), 1e-12);
  EXPECT_THROW(m.objective(m.vars(), IndexBatch{{{}, {}}}, {}, 12), ShapeError);
  EXPECT_THROW(m.objective(m.vars(), b, std::vector<double>{1.0}, 12), ShapeError);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  const std::vector<std::size_t> ext{3, 4, 2};
  for (Variant v : {Variant::Vanilla, Variant::Wlr, Variant::Ls}) {
    for (Space s : {Space::Primal, Space::DualExact, Space::DualRff}) {
      ModelConfig c = config(v, s, ext, 2);
      c.reg = 0.3;
      c.aux_reg = 0.2;
      c.rff_features = 6;
      SideFeatures side = random_side(ext, 2, 35);
      side[1].reset();
      KftModel m(c, side);
      randomize(m, 36);
      const IndexBatch b{{{0, 2, 1, 2}, {3, 0, 1, 1}, {1, 1, 0, 0}}};
      const std::vector<double> y{0.5, -1.0, 2.0, 0.1};
      std::vector<DenseTensor> inputs;
      for (const auto& nt : m.named_tensors()) inputs.push_back(*nt.tensor);
      auto f = [&](const std::vector<Var>& leaves) {
        ParamVars pv = m.vars();
        std::size_t i = 0;
        for (auto* list : {&pv.cores, &pv.weights, &pv.scales, &pv.biases}) {
          for (auto& x : *list) x = leaves[i++];
        }
        if (m.trains_kernel()) {
          for (std::size_t mode = 0; mode < ext.size(); ++mode) {
            if (m.has_side(mode)) pv.log_lengthscales[mode] = leaves[i++];
          }
        }
        return m.objective(pv, b, y, 20).total;
      };
      EXPECT_LT(gradcheck::check(f, inputs).max_rel_error, 1e-6) << to_string(v) << " " << to_string(s);
    }
  }
}
