#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kft/tensor.hpp"

namespace kft {

enum class KernelKind { Rbf, Matern12, Matern32, Matern52 };

std::string to_string(KernelKind kind);
KernelKind kernel_kind_from_string(const std::string& name);

/// Stationary kernel with one lengthscale shared by all feature columns.
struct KernelParams {
  KernelKind kind = KernelKind::Rbf;
  double lengthscale = 1.0;

  void validate() const;
};

/// Side information for one tensor mode: an n_p × c_p feature matrix whose
/// row i describes index i of mode `mode`.
struct SideInfo {
  std::size_t mode = 0;
  DenseTensor features;

  std::size_t rows() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  void validate(std::size_t expected_rows) const;
};

/// k(r) for distance r >= 0.
double kernel_value(KernelKind kind, double distance, double lengthscale);

/// d k / d log(lengthscale) at distance r.
double kernel_dlog_lengthscale(KernelKind kind, double distance, double lengthscale);

/// Pairwise squared Euclidean distances between the rows of `features`.
DenseTensor squared_distances(const DenseTensor& features);

/// Kernel matrix from precomputed squared distances.
DenseTensor gram_from_sqdist(const DenseTensor& sqdist, const KernelParams& params);

/// Exact Gram matrix K = k(D, D). Throws DataError on non-finite features.
DenseTensor gram(const SideInfo& side, const KernelParams& params);
DenseTensor gram(const DenseTensor& features, const KernelParams& params);

/// Random Fourier feature map: `count` features from count/2 frequencies.
struct RffMap {
  KernelParams params;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  DenseTensor frequencies;  // (count/2) × dim

  std::size_t dim() const { return frequencies.cols(); }
};

/// Draws count/2 frequency vectors from the kernel's spectral measure
/// (Gaussian for RBF, multivariate Student-t with 1, 3, 5 degrees of freedom
/// for Matérn 1/2, 3/2, 5/2), scaled by 1/lengthscale. Deterministic in seed.
RffMap rff_sample(const KernelParams& params, std::size_t count, std::size_t dim,
                  std::uint64_t seed);

/// φ(x) = sqrt(2/I) [cos(ω_k·x) ..., sin(ω_k·x) ...].
std::vector<double> rff_features(std::span<const double> x, const RffMap& map);

/// Φ with row i = φ(features[i, :]); shape n × I.
DenseTensor rff_feature_matrix(const DenseTensor& features, const RffMap& map);

/// V ×_axis Φᵀ ×_axis Φ, the low-memory stand-in for V ×_axis K.
DenseTensor rff_gram_apply(const DenseTensor& v, const DenseTensor& phi, Axis axis);

}  // namespace kft
