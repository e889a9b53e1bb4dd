#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kft/autodiff.hpp"
#include "kft/data.hpp"
#include "kft/kernels.hpp"
#include "kft/tensor.hpp"

namespace kft {

enum class Variant { Vanilla, Wlr, Ls };
enum class Space { Primal, DualExact, DualRff };

std::string to_string(Variant v);
std::string to_string(Space s);
Variant variant_from_string(const std::string& name);
Space space_from_string(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::Wlr;
  Space space = Space::DualExact;
  std::vector<std::size_t> extents;
  /// Modes owned by each core, contiguous and in order. Empty means one core
  /// per mode.
  std::vector<std::vector<std::size_t>> grouping;
  std::size_t rank = 2;
  std::size_t scale_rank = 0;  // LS scale chain; 0 means `rank`
  std::size_t bias_rank = 0;   // LS bias chain; 0 means `rank`
  double reg = 0.0;            // λ for every core
  double aux_reg = 0.0;        // λ′ for the WLR weights
  KernelKind kernel = KernelKind::Rbf;
  double lengthscale = 1.0;    // initial value, shared by all modes
  std::size_t rff_features = 64;
  std::uint64_t rff_seed = 0;
  std::uint64_t init_seed = 0;
  double init_scale = -1.0;    // std of core init; negative means 1/sqrt(rank)
  double aux_noise = 1e-2;     // perturbation of the neutral LS scale/bias init

  std::vector<std::vector<std::size_t>> resolved_grouping() const;
  void validate() const;
};

/// Trainable tensors. Cores are laid out (R_left, m_1[, m_2], R_right) where
/// m is c_p for primal side information and n_p otherwise.
struct Parameters {
  std::vector<DenseTensor> cores;
  std::vector<DenseTensor> weights;  // WLR V′, same ranks as cores, middle n_p
  std::vector<DenseTensor> scales;   // LS scale chain
  std::vector<DenseTensor> biases;   // LS bias chain
  std::vector<DenseTensor> log_lengthscales;  // one {1} tensor per mode

  bool operator==(const Parameters&) const = default;
};

/// Parameters as graph leaves for one evaluation.
struct ParamVars {
  std::vector<ad::Var> cores, weights, scales, biases;
  std::vector<ad::Var> log_lengthscales;
};

enum class ParamGroup { Cores, Aux, Kernel };
std::string to_string(ParamGroup g);

/// Named view of every trainable tensor, in a fixed order.
struct NamedTensor {
  std::string name;
  ParamGroup group;
  DenseTensor* tensor;
};

struct ObjectiveParts {
  ad::Var total;
  double mse = 0.0;
  double reg = 0.0;
};

class KftModel {
 public:
  KftModel(ModelConfig config, SideFeatures side);

  const ModelConfig& config() const { return config_; }
  const SideFeatures& side() const { return side_; }
  std::size_t order() const { return config_.extents.size(); }
  std::size_t num_cores() const { return groups_.size(); }
  const std::vector<std::size_t>& core_modes(std::size_t k) const { return groups_[k]; }
  bool has_side(std::size_t mode) const { return side_[mode].has_value(); }

  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }

  /// Every trainable tensor with its group. Log-lengthscales appear as
  /// one-element tensors only when the kernel group is trainable.
  std::vector<NamedTensor> named_tensors();

  /// Middle extent of core k along covered mode `mode`.
  std::size_t middle_extent(std::size_t mode) const;
  Shape core_shape(std::size_t k) const;
  Shape index_core_shape(std::size_t k, std::size_t left, std::size_t right) const;
  std::size_t left_rank(std::size_t k, std::size_t rank) const { return k == 0 ? 1 : rank; }
  std::size_t right_rank(std::size_t k, std::size_t rank) const {
    return k + 1 == num_cores() ? 1 : rank;
  }
  std::size_t scale_rank() const;
  std::size_t bias_rank() const;
  bool trains_kernel() const;

  /// Leaves for the current parameters; tensors of `trainable` groups
  /// require gradients.
  ParamVars vars(std::initializer_list<ParamGroup> trainable = {}) const;
  ParamVars vars(const std::vector<ParamGroup>& trainable) const;
  /// Vars of `v` in the order of `named_tensors()`.
  std::vector<ad::Var> ordered(const ParamVars& v) const;

  /// Kernel matrix of a mode under the current log-lengthscale var.
  ad::Var gram_var(std::size_t mode, const ParamVars& v) const;
  /// Φ for a random-feature mode.
  const DenseTensor& rff_matrix(std::size_t mode) const;
  const DenseTensor& sqdist(std::size_t mode) const;

  /// Core after the per-axis transforms that precede gathering (×Φᵀ for
  /// random-feature modes); identity otherwise.
  ad::Var prepare_core(std::size_t k, const ad::Var& core) const;
  /// Row selectors of core k for a batch.
  std::vector<ad::Selector> selectors(std::size_t k, const IndexBatch& batch,
                                      const ParamVars& v) const;
  /// Dense B × n weight rows of a side-informed dual mode: rows of K or of
  /// ΦΦᵀ. Used where the explicit row is needed.
  ad::Var dual_rows(std::size_t mode, std::span<const std::size_t> idx, const ParamVars& v) const;
  static std::vector<ad::Selector> index_selectors(const std::vector<std::size_t>& modes,
                                                   const IndexBatch& batch);

  /// Per-core gathered slices (L, B, R) of the side-information chain.
  std::vector<ad::Var> main_slices(const ParamVars& v, const IndexBatch& batch) const;

  ad::Var forward(const ParamVars& v, const IndexBatch& batch) const;
  ad::Var regularizer(const ParamVars& v) const;

  /// Batch MSE + (|batch| / n_total)·Λ.
  ObjectiveParts objective(const ParamVars& v, const IndexBatch& batch,
                           std::span<const double> targets, std::size_t n_total) const;

  std::vector<double> predict(const IndexBatch& batch) const;
  double regularizer_value() const;

  /// Draws fresh initial values for every trainable tensor.
  void initialize(std::uint64_t seed);

 private:
  void check_batch(const IndexBatch& batch) const;

  ModelConfig config_;
  SideFeatures side_;
  std::vector<std::vector<std::size_t>> groups_;
  std::vector<std::optional<DenseTensor>> sqdist_;  // dual-exact
  std::vector<std::optional<DenseTensor>> phi_;     // dual-rff
  std::vector<std::optional<DenseTensor>> phi_t_;   // dual-rff, transposed
  Parameters params_;
};

}  // namespace kft
