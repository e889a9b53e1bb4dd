#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kft/tensor.hpp"

namespace kft {

/// A batch of index tuples stored column-wise: modes[p][b] is the mode-p
/// index of entry b.
struct IndexBatch {
  std::vector<std::vector<std::size_t>> modes;

  std::size_t size() const { return modes.empty() ? 0 : modes[0].size(); }
  std::size_t order() const { return modes.size(); }
};

/// z-transform x -> (x - mean) / scale with population standard deviation.
/// A zero-variance column keeps scale 1 so constants survive unchanged.
struct ZTransform {
  double mean = 0.0;
  double scale = 1.0;

  static ZTransform fit(std::span<const double> values, bool center_constant = true);
  double apply(double x) const { return (x - mean) / scale; }
  double invert(double z) const { return z * scale + mean; }
};

/// Sparse observations of an order-P tensor.
class CooDataset {
 public:
  CooDataset() = default;
  CooDataset(std::vector<std::size_t> extents, std::vector<std::size_t> indices,
             std::vector<double> targets);

  std::size_t size() const { return targets_.size(); }
  std::size_t order() const { return extents_.size(); }
  const std::vector<std::size_t>& extents() const { return extents_; }
  std::span<const std::size_t> index(std::size_t record) const {
    return {indices_.data() + record * order(), order()};
  }
  const std::vector<std::size_t>& flat_indices() const { return indices_; }
  const std::vector<double>& targets() const { return targets_; }

  IndexBatch batch(std::span<const std::size_t> records) const;
  IndexBatch all() const;
  std::vector<double> targets_at(std::span<const std::size_t> records) const;
  /// Records in the given order, keeping extents and target transform.
  CooDataset subset(std::span<const std::size_t> records) const;

  /// Target scaling applied at load; identity when disabled.
  ZTransform target_transform;
  bool targets_scaled = false;

 private:
  std::vector<std::size_t> extents_;
  std::vector<std::size_t> indices_;  // row-major, size() × order()
  std::vector<double> targets_;
};

/// Per-mode side information; std::nullopt where a mode has none.
using SideFeatures = std::vector<std::optional<DenseTensor>>;

struct LoadOptions {
  bool scale_targets = true;
  std::size_t onehot_cap = 64;  // maximum categories per text column
};

struct LoadedData {
  CooDataset dataset;
  SideFeatures side;
};

/// Reads `i1,...,iP,y` records plus one side file per listed mode. Every
/// error names the file and line.
LoadedData load_data(const std::filesystem::path& data_file,
                     const std::map<std::size_t, std::filesystem::path>& side_files,
                     const LoadOptions& options = {});

/// Reads index tuples from a CSV with `order` index columns and an optional
/// trailing target column, which is ignored.
IndexBatch load_index_file(const std::filesystem::path& file, std::size_t order);

/// Parses a side file (first column = mode index) into an n × c matrix with
/// one-hot expansion of text columns and z-scaled numeric columns.
DenseTensor load_side_file(const std::filesystem::path& file, std::size_t expected_rows,
                           std::size_t onehot_cap);

/// Writes the dataset in original target units.
void save_dataset(const std::filesystem::path& file, const CooDataset& data);
void save_side(const std::filesystem::path& file, const DenseTensor& features);

struct Split {
  std::vector<std::size_t> train, validation, test;
  std::uint64_t seed = 0;
};

/// Seeded shuffle, then floor(0.2N) validation and test records with the
/// remainder in train. Requires at least five records.
Split split_dataset(std::size_t records, std::uint64_t seed);

enum class SideKind { Informative, Constant, GaussianNoise, None };

std::string to_string(SideKind kind);
SideKind side_kind_from_string(const std::string& name);

struct SynthSpec {
  std::vector<std::size_t> extents{30, 30};
  std::size_t rank = 2;
  SideKind kind = SideKind::Informative;
  std::size_t side_dim = 3;
  /// Number of feature clusters for informative side information; 0 draws
  /// continuous Gaussian features instead of cluster indicators.
  std::size_t clusters = 0;
  /// Weight of the per-index component not explained by side information.
  double index_share = 0.0;
  double observed_fraction = 0.3;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

struct SynthData {
  CooDataset dataset;
  SideFeatures side;         // as requested by `kind`
  SideFeatures informative;  // the features the truth was generated through
  DenseTensor truth;         // full noiseless tensor
};

SynthData synth(const SynthSpec& spec);

/// Side matrix of the given kind for a mode with `rows` indices.
std::optional<DenseTensor> make_side(SideKind kind, std::size_t rows, std::size_t dim,
                                     std::uint64_t seed);

}  // namespace kft
