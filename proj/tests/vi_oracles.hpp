#pragma once

// Dense reference computations for the variational layer: explicit
// covariance matrices, Kronecker products, direct sampling and Monte-Carlo
// expected log-likelihoods. Nothing here calls the closed-form code.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "kft/variational.hpp"
#include "oracles.hpp"

namespace vi_oracle {

using kft::DenseTensor;

inline Eigen::MatrixXd dense(const DenseTensor& t) { return t.as_matrix(); }

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// Σ_q of one mode, built entry by entry from the stored factor.
inline Eigen::MatrixXd mode_covariance(const DenseTensor& factor, const DenseTensor& log_diag, bool triangular) {
  const Eigen::Index n = static_cast<Eigen::Index>(factor.rows());
  const Eigen::MatrixXd b = dense(factor);
  const Eigen::MatrixXd bbt = b * b.transpose();
  if (!triangular) {
    Eigen::MatrixXd out = bbt;
    for (Eigen::Index i = 0; i < n; ++i) out(i, i) += std::exp(2.0 * log_diag[static_cast<std::size_t>(i)]);
    return out;
  }
  Eigen::MatrixXd tri = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) tri(i, j) = bbt(i, j);
  for (Eigen::Index i = 0; i < n; ++i) tri(i, i) += std::exp(log_diag[static_cast<std::size_t>(i)]);
  return tri * tri.transpose();
}

inline double rbf(const DenseTensor& x, std::size_t i, std::size_t j, double ls) {
  double d2 = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) d2 += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
  return std::exp(-0.5 * d2 / (ls * ls));
}

/// Prior precision of one mode as a dense matrix.
inline Eigen::MatrixXd prior_precision(const kft::VariationalModel& vm, std::size_t mode) {
  const auto& model = vm.means();
  const auto& prior = vm.config().prior;
  const std::size_t n = model.config().extents[mode];
  const auto nn = static_cast<Eigen::Index>(n);
  if (!model.has_side(mode)) return Eigen::MatrixXd::Identity(nn, nn) / prior.var;
  if (model.config().space == kft::Space::DualRff) {
    const Eigen::MatrixXd phi = dense(model.rff_matrix(mode));
    return phi * phi.transpose() + prior.var * Eigen::MatrixXd::Identity(nn, nn);
  }
  const double ls = std::exp(model.params().log_lengthscales[mode][0]);
  Eigen::MatrixXd k(nn, nn);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rbf(*model.side()[mode], i, j, ls);
  return k + prior.kernel_jitter * Eigen::MatrixXd::Identity(nn, nn);
}

/// Σ over fibers of the dense Gaussian KL of multivariate core k.
inline double core_kl(const kft::VariationalModel& vm, std::size_t k) {
  const auto& model = vm.means();
  const bool tri = model.config().space == kft::Space::DualExact;
  const auto& modes = model.core_modes(k);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Ones(1, 1), prec = Eigen::MatrixXd::Ones(1, 1);
  for (std::size_t q = 0; q < modes.size(); ++q) {
    cov = kron(cov, mode_covariance(vm.variances().factors[k][q], vm.variances().factor_log_diags[k][q], tri));
    prec = kron(prec, prior_precision(vm, modes[q]));
  }
  const DenseTensor& core = model.params().cores[k];
  const std::size_t left = core.extent(0), right = core.extent(core.order() - 1);
  const std::size_t mid = core.size() / (left * right);
  const Eigen::MatrixXd prior_cov = prec.inverse();
  DenseTensor cov_t({mid, mid}), prior_t({mid, mid});
  for (std::size_t i = 0; i < mid; ++i)
    for (std::size_t j = 0; j < mid; ++j) {
      cov_t(i, j) = cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      prior_t(i, j) = prior_cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  double total = 0.0;
  for (std::size_t l = 0; l < left; ++l)
    for (std::size_t r = 0; r < right; ++r) {
      std::vector<double> mean(mid);
      for (std::size_t i = 0; i < mid; ++i) mean[i] = core[(l * mid + i) * right + r];
      total += oracle::dense_kl(mean, cov_t, std::vector<double>(mid, vm.config().prior.mean), prior_t);
    }
  return total;
}

/// One parameter draw from q using dense Cholesky factors of the full
/// per-fiber covariance.
inline kft::Parameters draw(const kft::VariationalModel& vm, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  const auto& model = vm.means();
  const auto& var = vm.variances();
  kft::Parameters p = model.params();
  auto perturb = [&](std::vector<DenseTensor>& list, const std::vector<DenseTensor>& log_vars) {
    for (std::size_t k = 0; k < list.size(); ++k)
      for (std::size_t i = 0; i < list[k].size(); ++i) list[k][i] += std::sqrt(std::exp(log_vars[k][i])) * normal(rng);
  };
  if (vm.config().family == kft::Family::Univariate) {
    perturb(p.cores, var.core_log_vars);
  } else {
    const bool tri = model.config().space == kft::Space::DualExact;
    for (std::size_t k = 0; k < p.cores.size(); ++k) {
      Eigen::MatrixXd cov = Eigen::MatrixXd::Ones(1, 1);
      for (std::size_t q = 0; q < var.factors[k].size(); ++q) {
        cov = kron(cov, mode_covariance(var.factors[k][q], var.factor_log_diags[k][q], tri));
      }
      const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
      DenseTensor& core = p.cores[k];
      const std::size_t left = core.extent(0), right = core.extent(core.order() - 1);
      const std::size_t mid = core.size() / (left * right);
      for (std::size_t l = 0; l < left; ++l)
        for (std::size_t r = 0; r < right; ++r) {
          Eigen::VectorXd z(static_cast<Eigen::Index>(mid));
          for (auto& v : z) v = normal(rng);
          const Eigen::VectorXd x = chol * z;
          for (std::size_t i = 0; i < mid; ++i) core[(l * mid + i) * right + r] += x(static_cast<Eigen::Index>(i));
        }
    }
  }
  perturb(p.weights, var.weight_log_vars);
  perturb(p.scales, var.scale_log_vars);
  perturb(p.biases, var.bias_log_vars);
  return p;
}

struct McEstimate {
  double mean = 0.0;
  double se = 0.0;
};

/// Monte-Carlo E_q[Σ_b log N(y_b | f_b, σ²)] with its standard error.
inline McEstimate mc_log_lik(const kft::VariationalModel& vm, const kft::IndexBatch& batch,
                             const std::vector<double>& y, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  kft::KftModel sampled = vm.means();
  const double s2 = vm.config().prior.noise_var;
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi * s2);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    sampled.params() = draw(vm, rng);
    const auto f = sampled.predict(batch);
    double ll = 0.0;
    for (std::size_t b = 0; b < y.size(); ++b) ll += norm - (y[b] - f[b]) * (y[b] - f[b]) / (2.0 * s2);
    sum += ll;
    sum_sq += ll * ll;
  }
  const double n = static_cast<double>(samples);
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sum_sq / n - mean * mean) / n)};
}

/// Toy variational model with random means and variances. Modes 0 and 2
/// carry side information, mode 1 does not.
inline kft::VariationalModel toy_model(kft::Variant variant, kft::Space space, kft::Family family,
                                       std::vector<std::vector<std::size_t>> grouping, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  kft::ModelConfig c;
  c.variant = variant;
  c.space = space;
  c.extents = {3, 2, 3};
  c.grouping = std::move(grouping);
  c.rank = 2;
  c.rff_features = 4;
  c.rff_seed = seed;
  c.lengthscale = 1.3;
  kft::SideFeatures side{oracle::random_tensor({3, 2}, rng), std::nullopt, oracle::random_tensor({3, 2}, rng)};
  kft::VariationalConfig vc;
  vc.family = family;
  vc.prior.noise_var = 0.7;
  vc.prior.var = 1.5;
  vc.prior.aux_mean = 0.5;
  vc.prior.aux_var = 0.8;
  vc.prior.bias_var = 0.6;
  vc.prior.kernel_jitter = 1e-3;
  kft::VariationalModel vm(c, side, vc);
  std::uniform_real_distribution<double> unif(-3.0, -1.5);
  std::normal_distribution<double> normal(0.0, 0.7);
  for (const auto& nt : vm.means().named_tensors()) {
    if (nt.group == kft::ParamGroup::Kernel) continue;
    for (auto& v : nt.tensor->data()) v = normal(rng);
  }
  for (auto g : {kft::VarianceGroup::Cores, kft::VarianceGroup::Aux}) {
    for (auto& [name, t] : vm.variance_tensors(g)) {
      const bool factor = name.rfind("factor.", 0) == 0;
      for (auto& v : t->data()) v = factor ? 0.3 * normal(rng) : unif(rng);
    }
  }
  return vm;
}

}  // namespace vi_oracle
