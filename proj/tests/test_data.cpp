#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>

#include "kft/data.hpp"
#include "kft/errors.hpp"
#include "kft/eval.hpp"
#include "kft/train.hpp"

namespace fs = std::filesystem;
using namespace kft;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("kft_data_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  fs::path file(const std::string& name, const std::string& body = {}) const {
    const fs::path p = path_ / name;
    if (!body.empty()) std::ofstream(p) << body;
    return p;
  }

 private:
  fs::path path_;
};

void expect_data_error(const std::function<void()>& f, const std::string& fragment) {
  try {
    f();
    FAIL() << "expected DataError containing '" << fragment << "'";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

std::vector<double> values(const DenseTensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Load, ThreeLinesGiveThreeRecords) {
  TempDir dir;
  const auto f = dir.file("d.csv", "i1,i2,y\n0,0,1.5\n1,2,-2\n0,1,3\n");
  const LoadedData d = load_data(f, {}, {.scale_targets = false});
  ASSERT_EQ(d.dataset.size(), 3u);
  EXPECT_EQ(d.dataset.order(), 2u);
  EXPECT_EQ(d.dataset.extents(), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(d.dataset.targets(), (std::vector<double>{1.5, -2.0, 3.0}));
  EXPECT_EQ(d.dataset.index(1)[1], 2u);
}

TEST(Load, TargetsAreZScaledAndInvertible) {
  TempDir dir;
  const auto f = dir.file("d.csv", "i1,i2,y\n0,0,1\n1,0,2\n0,1,3\n");
  const LoadedData d = load_data(f, {});
  ASSERT_TRUE(d.dataset.targets_scaled);
  const double z = std::sqrt(1.5);
  EXPECT_NEAR(d.dataset.targets()[0], -z, 1e-12);
  EXPECT_NEAR(d.dataset.targets()[1], 0.0, 1e-12);
  EXPECT_NEAR(d.dataset.targets()[2], z, 1e-12);
  EXPECT_NEAR(d.dataset.target_transform.invert(d.dataset.targets()[2]), 3.0, 1e-12);
}

TEST(ZTransformTest, ColumnOneTwoThree) {
  const std::vector<double> col{1.0, 2.0, 3.0};
  const ZTransform t = ZTransform::fit(col);
  EXPECT_NEAR(t.apply(1.0), -1.2247, 1e-4);
  EXPECT_NEAR(t.apply(2.0), 0.0, 1e-15);
  EXPECT_NEAR(t.apply(3.0), 1.2247, 1e-4);
  EXPECT_NEAR(t.apply(3.0), std::sqrt(1.5), 1e-15);
}

TEST(ZTransformProperty, InverseIsIdentity) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(3.0, 7.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(50);
    for (auto& x : v) x = normal(rng);
    const ZTransform t = ZTransform::fit(v);
    for (double x : v) EXPECT_NEAR(t.invert(t.apply(x)), x, 1e-12);
  }
}

TEST(Load, SideFilesOneHotAndScale) {
  TempDir dir;
  const auto f = dir.file("d.csv", "i1,i2,y\n0,0,1\n1,1,2\n2,0,3\n");
  const auto s = dir.file("s.csv", "index,size,colour\n2,3.0,red\n0,1.0,blue\n1,2.0,red\n");
  const LoadedData d = load_data(f, {{0, s}});
  ASSERT_TRUE(d.side[0].has_value());
  EXPECT_FALSE(d.side[1].has_value());
  const DenseTensor& side = *d.side[0];
  ASSERT_EQ(side.rows(), 3u);
  ASSERT_EQ(side.cols(), 3u);  // size + two colour indicators
  EXPECT_NEAR(side(0, 0), -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(side(2, 0), std::sqrt(1.5), 1e-12);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(side(i, 1) + side(i, 2), 1.0);
  EXPECT_NE(side(0, 1), side(2, 1));
  EXPECT_EQ(side(1, 1), side(2, 1));
}

TEST(Load, RejectsDuplicatesAndBadRows) {
  TempDir dir;
  expect_data_error([&] { load_data(dir.file("a.csv", "i1,i2,y\n0,0,1\n1,0,2\n0,0,3\n"), {}); },
                    "a.csv:4: duplicate index tuple");
  expect_data_error([&] { load_data(dir.file("b.csv", "i1,i2,y\n0,0,1\n1,0,abc\n"), {}); }, "b.csv:3: non-numeric");
  expect_data_error([&] { load_data(dir.file("c.csv", "i1,i2,y\n0,x,1\n"), {}); }, "invalid index");
  expect_data_error([&] { load_data(dir.file("missing.csv"), {}); }, "cannot open");
  const auto f = dir.file("d.csv", "i1,i2,y\n0,0,1\n3,0,2\n");
  const auto short_side = dir.file("s.csv", "index,v\n0,1\n1,2\n");
  expect_data_error([&] { load_data(f, {{0, short_side}}); }, "unknown index 3");
  const auto gap_side = dir.file("g.csv", "index,v\n0,1\n1,2\n3,4\n");
  expect_data_error([&] { load_data(f, {{0, gap_side}}); }, "missing side row for index 2");
}

TEST(CooDatasetTest, RejectsDuplicateAndOutOfRange) {
  EXPECT_THROW(CooDataset({2, 2}, {0, 0, 0, 0}, {1.0, 2.0}), DataError);
  EXPECT_THROW(CooDataset({2, 2}, {0, 2}, {1.0}), DataError);
  EXPECT_NO_THROW(CooDataset({2, 2}, {0, 1, 1, 0}, {1.0, 2.0}));
}

TEST(SaveLoad, DatasetAndSideRoundTrip) {
  TempDir dir;
  SynthSpec spec;
  spec.extents = {6, 5, 4};
  spec.noise = 0.3;
  spec.seed = 9;
  const SynthData s = synth(spec);
  save_dataset(dir.file("d.csv"), s.dataset);
  save_side(dir.file("s0.csv"), *s.side[0]);
  const LoadedData back = load_data(dir.file("d.csv"), {{0, dir.file("s0.csv")}}, {.scale_targets = false});
  ASSERT_EQ(back.dataset.size(), s.dataset.size());
  EXPECT_EQ(back.dataset.flat_indices(), s.dataset.flat_indices());
  EXPECT_EQ(back.dataset.targets(), s.dataset.targets());
  // Features are z-scaled on load, so compare against the scaled original.
  const DenseTensor& side = *back.side[0];
  for (std::size_t c = 0; c < side.cols(); ++c) {
    std::vector<double> col(side.rows());
    for (std::size_t i = 0; i < side.rows(); ++i) col[i] = (*s.side[0])(i, c);
    const ZTransform t = ZTransform::fit(col);
    for (std::size_t i = 0; i < side.rows(); ++i) EXPECT_NEAR(side(i, c), t.apply(col[i]), 1e-12);
  }
}

TEST(SaveLoad, ScaledTargetsAreSavedInOriginalUnits) {
  TempDir dir;
  const auto f = dir.file("d.csv", "i1,i2,y\n0,0,10\n1,0,20\n0,1,40\n");
  const LoadedData d = load_data(f, {});
  save_dataset(dir.file("out.csv"), d.dataset);
  const LoadedData raw = load_data(dir.file("out.csv"), {}, {.scale_targets = false});
  EXPECT_NEAR(raw.dataset.targets()[0], 10.0, 1e-12);
  EXPECT_NEAR(raw.dataset.targets()[2], 40.0, 1e-12);
}

TEST(SplitTest, TenRecordsGiveSixTwoTwo) {
  const Split s = split_dataset(10, 1);
  EXPECT_EQ(s.train.size(), 6u);
  EXPECT_EQ(s.validation.size(), 2u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(SplitTest, SeededAndDistinctAcrossSeeds) {
  const Split a = split_dataset(1000, 5), b = split_dataset(1000, 5), c = split_dataset(1000, 6);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
}

TEST(SplitTest, RejectsFewerThanFive) { EXPECT_THROW(split_dataset(4, 0), DataError); }

TEST(SplitProperty, DisjointExhaustiveTrainFirstRounding) {
  for (std::size_t n = 5; n < 60; ++n) {
    const Split s = split_dataset(n, n);
    EXPECT_EQ(s.validation.size(), n / 5);
    EXPECT_EQ(s.test.size(), n / 5);
    EXPECT_EQ(s.train.size(), n - 2 * (n / 5));
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.validation.begin(), s.validation.end());
    all.insert(s.test.begin(), s.test.end());
    EXPECT_EQ(all.size(), n);
    EXPECT_EQ(*all.rbegin(), n - 1);
  }
}

TEST(Synth, ConstantKindIsAllOnes) {
  SynthSpec spec;
  spec.kind = SideKind::Constant;
  spec.extents = {5, 4};
  const SynthData s = synth(spec);
  for (const auto& side : s.side) {
    ASSERT_TRUE(side.has_value());
    for (double v : side->data()) EXPECT_EQ(v, 1.0);
  }
}

TEST(Synth, NoiseKindIsSeedReproducible) {
  SynthSpec spec;
  spec.kind = SideKind::GaussianNoise;
  spec.extents = {5, 4};
  spec.seed = 11;
  const SynthData a = synth(spec), b = synth(spec);
  spec.seed = 12;
  const SynthData c = synth(spec);
  EXPECT_EQ(values(*a.side[0]), values(*b.side[0]));
  EXPECT_NE(values(*a.side[0]), values(*c.side[0]));
  EXPECT_EQ(a.dataset.targets(), b.dataset.targets());
}

TEST(Synth, NoneKindHasNoSide) {
  SynthSpec spec;
  spec.kind = SideKind::None;
  const SynthData s = synth(spec);
  for (const auto& side : s.side) EXPECT_FALSE(side.has_value());
}

TEST(Synth, ObservationsMatchTruthWithoutNoise) {
  SynthSpec spec;
  spec.extents = {4, 5, 3};
  spec.observed_fraction = 0.5;
  const SynthData s = synth(spec);
  EXPECT_EQ(s.dataset.size(), 30u);
  const auto strides = s.truth.strides();
  for (std::size_t r = 0; r < s.dataset.size(); ++r) {
    std::size_t flat = 0;
    for (std::size_t m = 0; m < 3; ++m) flat += s.dataset.index(r)[m] * strides[m];
    EXPECT_EQ(s.dataset.targets()[r], s.truth[flat]);
  }
}

TEST(Synth, NoiselessRefitReachesHighR2) {
  SynthSpec spec;
  spec.extents = {15, 15};
  spec.observed_fraction = 0.6;
  spec.seed = 3;
  const SynthData s = synth(spec);
  ModelConfig m;
  m.variant = Variant::Vanilla;
  m.space = Space::Primal;
  m.extents = spec.extents;
  m.rank = spec.rank;
  m.init_seed = 3;
  KftModel model(m, SideFeatures(2));
  TrainConfig t;
  t.epochs = 10;
  t.iterations_per_epoch = 300;
  t.learning_rate = 0.03;
  em_train(model, s.dataset, t);
  EXPECT_GE(r2_score(model.predict(s.dataset.all()), s.dataset.targets()), 0.99);
}

TEST(SideKindNames, RoundTrip) {
  for (auto k : {SideKind::Informative, SideKind::Constant, SideKind::GaussianNoise, SideKind::None}) {
    EXPECT_EQ(side_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(side_kind_from_string("bogus"), ConfigError);
}

TEST(IndexFile, WithAndWithoutTargets) {
  TempDir dir;
  const IndexBatch a = load_index_file(dir.file("a.csv", "i1,i2\n0,1\n2,0\n"), 2);
  const IndexBatch b = load_index_file(dir.file("b.csv", "i1,i2,y\n0,1,5\n2,0,6\n"), 2);
  EXPECT_EQ(a.modes, b.modes);
  EXPECT_EQ(a.modes[0], (std::vector<std::size_t>{0, 2}));
  expect_data_error([&] { load_index_file(dir.file("c.csv", "i1,i2,i3,y\n0,1,1,5\n"), 2); }, "expected 2 index columns");
  expect_data_error([&] { load_index_file(dir.file("d.csv", "i1,i2\n0,-1\n"), 2); }, "d.csv:2: invalid index");
}
