#include "kft/kernels.hpp"

#include <cmath>
#include <random>

#include "kft/errors.hpp"
#include "kft/tensor_ops.hpp"

namespace kft {

std::string to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::Rbf: return "rbf";
    case KernelKind::Matern12: return "matern-0.5";
    case KernelKind::Matern32: return "matern-1.5";
    case KernelKind::Matern52: return "matern-2.5";
  }
  return "unknown";
}

KernelKind kernel_kind_from_string(const std::string& name) {
  if (name == "rbf") return KernelKind::Rbf;
  if (name == "matern-0.5") return KernelKind::Matern12;
  if (name == "matern-1.5") return KernelKind::Matern32;
  if (name == "matern-2.5") return KernelKind::Matern52;
  throw ConfigError("unknown kernel '" + name + "' (rbf, matern-0.5, matern-1.5, matern-2.5)");
}

void KernelParams::validate() const {
  if (!(lengthscale > 0.0) || !std::isfinite(lengthscale)) {
    throw ConfigError("kernel lengthscale must be positive and finite");
  }
}

void SideInfo::validate(std::size_t expected_rows) const {
  if (features.order() != 2) throw ShapeError("side information must be a matrix");
  if (features.rows() != expected_rows) {
    throw ShapeError("side information for mode " + std::to_string(mode) + " has " +
                     std::to_string(features.rows()) + " rows, mode extent is " +
                     std::to_string(expected_rows));
  }
  if (!all_finite(features)) {
    throw DataError("side information for mode " + std::to_string(mode) +
                    " contains non-finite entries");
  }
}

double kernel_value(KernelKind kind, double distance, double lengthscale) {
  const double t = distance / lengthscale;
  switch (kind) {
    case KernelKind::Rbf: return std::exp(-0.5 * t * t);
    case KernelKind::Matern12: return std::exp(-t);
    case KernelKind::Matern32: {
      const double a = std::sqrt(3.0) * t;
      return (1.0 + a) * std::exp(-a);
    }
    case KernelKind::Matern52: {
      const double a = std::sqrt(5.0) * t;
      return (1.0 + a + a * a / 3.0) * std::exp(-a);
    }
  }
  return 0.0;
}

double kernel_dlog_lengthscale(KernelKind kind, double distance, double lengthscale) {
  const double t = distance / lengthscale;
  switch (kind) {
    case KernelKind::Rbf: return t * t * std::exp(-0.5 * t * t);
    case KernelKind::Matern12: return t * std::exp(-t);
    case KernelKind::Matern32: return 3.0 * t * t * std::exp(-std::sqrt(3.0) * t);
    case KernelKind::Matern52: {
      const double a = std::sqrt(5.0) * t;
      return (5.0 / 3.0) * t * t * (1.0 + a) * std::exp(-a);
    }
  }
  return 0.0;
}

DenseTensor squared_distances(const DenseTensor& features) {
  const std::size_t n = features.rows(), c = features.cols();
  DenseTensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double diff = features(i, k) - features(j, k);
        d += diff * diff;
      }
      out(i, j) = d;
      out(j, i) = d;
    }
  }
  return out;
}

DenseTensor gram_from_sqdist(const DenseTensor& sqdist, const KernelParams& params) {
  params.validate();
  DenseTensor out(sqdist.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = kernel_value(params.kind, std::sqrt(std::max(sqdist[i], 0.0)), params.lengthscale);
  }
  return out;
}

DenseTensor gram(const DenseTensor& features, const KernelParams& params) {
  if (features.order() != 2) throw ShapeError("gram: features must be a matrix");
  if (!all_finite(features)) throw DataError("gram: non-finite feature entries");
  return gram_from_sqdist(squared_distances(features), params);
}

DenseTensor gram(const SideInfo& side, const KernelParams& params) {
  return gram(side.features, params);
}

RffMap rff_sample(const KernelParams& params, std::size_t count, std::size_t dim,
                  std::uint64_t seed) {
  params.validate();
  if (count < 2 || count % 2 != 0) {
    throw ConfigError("RFF feature count must be even and >= 2, got " + std::to_string(count));
  }
  if (dim == 0) throw ShapeError("RFF input dimension must be >= 1");

  RffMap map{params, count, seed, DenseTensor(Shape{count / 2, dim})};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  double dof = 0.0;
  switch (params.kind) {
    case KernelKind::Rbf: dof = 0.0; break;
    case KernelKind::Matern12: dof = 1.0; break;
    case KernelKind::Matern32: dof = 3.0; break;
    case KernelKind::Matern52: dof = 5.0; break;
  }
  std::chi_squared_distribution<double> chi2(dof > 0.0 ? dof : 1.0);

  for (std::size_t k = 0; k < count / 2; ++k) {
    double scale = 1.0 / params.lengthscale;
    // Multivariate Student-t: one chi-square draw shared by the whole vector.
    if (dof > 0.0) scale /= std::sqrt(chi2(rng) / dof);
    for (std::size_t j = 0; j < dim; ++j) map.frequencies(k, j) = normal(rng) * scale;
  }
  return map;
}

std::vector<double> rff_features(std::span<const double> x, const RffMap& map) {
  if (x.size() != map.dim()) {
    throw ShapeError("rff_features: input has dimension " + std::to_string(x.size()) +
                     ", map expects " + std::to_string(map.dim()));
  }
  const std::size_t half = map.count / 2;
  const double norm = std::sqrt(2.0 / static_cast<double>(map.count));
  std::vector<double> phi(map.count);
  for (std::size_t k = 0; k < half; ++k) {
    double proj = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) proj += map.frequencies(k, j) * x[j];
    phi[k] = norm * std::cos(proj);
    phi[half + k] = norm * std::sin(proj);
  }
  return phi;
}

DenseTensor rff_feature_matrix(const DenseTensor& features, const RffMap& map) {
  if (features.order() != 2) throw ShapeError("rff_feature_matrix: features must be a matrix");
  if (!all_finite(features)) throw DataError("rff_feature_matrix: non-finite feature entries");
  const std::size_t n = features.rows();
  DenseTensor phi(Shape{n, map.count});
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = rff_features(features.data().subspan(i * features.cols(), features.cols()), map);
    std::copy(row.begin(), row.end(), phi.data().begin() + static_cast<std::ptrdiff_t>(i * map.count));
  }
  return phi;
}

DenseTensor rff_gram_apply(const DenseTensor& v, const DenseTensor& phi, Axis axis) {
  if (phi.order() != 2) throw ShapeError("rff_gram_apply: Φ must be a matrix");
  const std::size_t n = axis.resolve(v.order());
  if (phi.rows() != v.extent(n)) {
    throw ShapeError("rff_gram_apply: Φ has " + std::to_string(phi.rows()) +
                     " rows, tensor extent is " + std::to_string(v.extent(n)));
  }
  return mode_product(mode_product(v, phi.transposed(), axis), phi, axis);
}

}  // namespace kft
