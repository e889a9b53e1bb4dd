#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kft/autodiff.hpp"
#include "kft/model.hpp"
#include "kft/train.hpp"

namespace kft {

enum class Family { Univariate, Multivariate };

std::string to_string(Family f);
Family family_from_string(const std::string& name);

/// Prior and likelihood hyperparameters.
struct PriorHyper {
  double mean = 0.0;        // μ_p, main cores
  double var = 1.0;         // σ_p²; also the ridge of the random-feature prior
  double aux_mean = 0.0;    // μ′_p, WLR weights and LS scale chain
  double aux_var = 1.0;     // σ′_p²
  double bias_mean = 0.0;   // LS bias chain
  double bias_var = 1.0;
  double noise_var = 1.0;   // σ_y²
  double kernel_jitter = 1e-6;  // added to K before it is used as a prior precision

  void validate() const;
};

struct VariationalConfig {
  Family family = Family::Univariate;
  PriorHyper prior;
  std::size_t factor_rank = 2;   // columns of each multivariate factor B_q
  double init_log_var = -6.0;    // initial log-variance of every univariate entry
  double init_factor_scale = 1e-2;

  void validate(const ModelConfig& model) const;
};

/// Variance-side parameters; means live in the wrapped model's Parameters.
struct VarianceParams {
  std::vector<DenseTensor> core_log_vars;                // univariate, core shape
  std::vector<std::vector<DenseTensor>> factors;         // multivariate, per core and mode: n × r
  std::vector<std::vector<DenseTensor>> factor_log_diags;  // per core and mode: n
  std::vector<DenseTensor> weight_log_vars, scale_log_vars, bias_log_vars;

  bool operator==(const VarianceParams&) const = default;
};

struct VarianceVars {
  std::vector<ad::Var> core_log_vars;
  std::vector<std::vector<ad::Var>> factors, factor_log_diags;
  std::vector<ad::Var> weight_log_vars, scale_log_vars, bias_log_vars;
};

enum class VarianceGroup { Cores, Aux };

struct ElboParts {
  ad::Var loss;        // −ELBO / |batch|
  double recon = 0.0;  // Σ over batch of E_q[log p(y | ·)]
  double kl = 0.0;     // total KL, before batch scaling
  double elbo = 0.0;
  double mse = 0.0;    // batch MSE of the mean prediction
};

/// Per-mode covariance of a multivariate factor, as graph values.
struct ModeCovariance {
  ad::Var factor;    // B (n × r)
  ad::Var log_diag;  // log d (n)
};

/// Triangular factor ltri(BBᵀ) + diag(d) of the exact-kernel family.
ad::Var triangular_factor(const ModeCovariance& c);

/// Σ over entries of KL(N(mean, var) ‖ N(prior_mean, prior_var)).
ad::Var kl_univariate(const ad::Var& mean, const ad::Var& log_var, double prior_mean, double prior_var);
double kl_univariate(double mean, double var, double prior_mean, double prior_var);

/// KL between q = N(mean, BBᵀ + diag(d²)) and p = N(prior_mean, (ΦΦᵀ + σ²I)⁻¹)
/// for one n-vector, using only n × I and r × r intermediates.
double kl_multivariate_rff(std::span<const double> mean, const DenseTensor& factor,
                           std::span<const double> diag, double prior_mean, double prior_var,
                           const DenseTensor& phi);

/// Kronecker-structured draw: mean + Z ×_2 F_1 ×_3 F_2 … along the middle
/// axes, with F_q any factor of the mode covariance.
DenseTensor sample_core(const DenseTensor& mean, const std::vector<DenseTensor>& factors,
                        std::mt19937_64& rng);

/// Closed-form E_q[log N(y | f, σ²)] = −½log(2πσ²) − (y² − 2y·E[f] + E[f²]) / (2σ²),
/// summed over the batch.
ad::Var expected_log_lik(const ad::Var& mean, const ad::Var& second_moment, std::span<const double> y,
                         double noise_var);

struct PredictiveSamples {
  std::size_t points = 0;
  std::size_t draws = 0;
  std::vector<double> values;  // points × draws, row-major

  std::span<const double> at(std::size_t point) const { return {values.data() + point * draws, draws}; }
};

class VariationalModel {
 public:
  VariationalModel(ModelConfig model, SideFeatures side, VariationalConfig config);

  KftModel& means() { return model_; }
  const KftModel& means() const { return model_; }
  const VariationalConfig& config() const { return config_; }
  VarianceParams& variances() { return variances_; }
  const VarianceParams& variances() const { return variances_; }

  /// Variance tensors of a group with their names, in a fixed order.
  std::vector<std::pair<std::string, DenseTensor*>> variance_tensors(VarianceGroup group);
  VarianceVars variance_vars(std::initializer_list<VarianceGroup> trainable = {}) const;

  /// Mean and second moment of every batch prediction under q.
  std::pair<ad::Var, ad::Var> moments(const ParamVars& m, const VarianceVars& s, const IndexBatch& batch) const;
  ad::Var kl(const ParamVars& m, const VarianceVars& s) const;
  ElboParts elbo(const ParamVars& m, const VarianceVars& s, const IndexBatch& batch,
                 std::span<const double> targets, std::size_t n_total) const;

  /// Prediction of the mean chains.
  std::vector<double> predict_mean(const IndexBatch& batch) const { return model_.predict(batch); }
  /// Draws parameters from q, evaluates the forward pass and adds N(0, σ_y²)
  /// noise. Deterministic in `seed`.
  PredictiveSamples sample_predictive(const IndexBatch& batch, std::size_t draws, std::uint64_t seed,
                                      bool observation_noise = true) const;
  /// One draw of every parameter tensor from q.
  Parameters sample_parameters(std::mt19937_64& rng) const;

  void initialize_variances();

 private:
  ad::Var mode_variance_rows(std::size_t mode, const ModeCovariance& c, const IndexBatch& batch,
                             const ParamVars& m) const;
  ad::Var core_kl_multivariate(std::size_t k, const ParamVars& m, const VarianceVars& s) const;
  std::vector<ad::Var> variance_slices(const ParamVars& m, const VarianceVars& s,
                                       const IndexBatch& batch) const;

  KftModel model_;
  VariationalConfig config_;
  VarianceParams variances_;
};

/// Algorithm 2: a means phase (main means, auxiliary means, kernel
/// parameters) followed by a variance phase (main, auxiliary), each run for
/// `config.epochs` epochs with block-coordinate updates.
Trace vi_train(VariationalModel& model, const CooDataset& train, const TrainConfig& config,
               const StepObserver& observer = {});

/// Empirical quantile (linear interpolation between order statistics).
double quantile(std::span<const double> sorted, double q);

}  // namespace kft
