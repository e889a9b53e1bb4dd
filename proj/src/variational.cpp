#include "kft/variational.hpp"

#include <cmath>
#include <functional>
#include <numbers>

#include "kft/tensor_ops.hpp"

namespace kft {

using ad::Var;

std::string to_string(Family f) { return f == Family::Univariate ? "univariate" : "multivariate"; }

Family family_from_string(const std::string& name) {
  if (name == "univariate") return Family::Univariate;
  if (name == "multivariate") return Family::Multivariate;
  throw ConfigError("unknown family '" + name + "' (univariate, multivariate)");
}

void PriorHyper::validate() const {
  auto positive = [](double v, const char* path) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("must be finite and > 0", path);
  };
  positive(var, "vi.prior.var");
  positive(aux_var, "vi.prior.aux_var");
  positive(bias_var, "vi.prior.bias_var");
  positive(noise_var, "vi.prior.noise_var");
  if (!(kernel_jitter >= 0.0)) throw ConfigError("must be >= 0", "vi.prior.kernel_jitter");
}

void VariationalConfig::validate(const ModelConfig& model) const {
  prior.validate();
  if (family == Family::Multivariate && model.space == Space::Primal) {
    throw ConfigError("the multivariate family needs a kernel prior; use a dual space", "vi.family");
  }
  if (factor_rank == 0) throw ConfigError("must be >= 1", "vi.factor_rank");
  if (!std::isfinite(init_log_var)) throw ConfigError("must be finite", "vi.init_log_var");
  if (!(init_factor_scale >= 0.0)) throw ConfigError("must be >= 0", "vi.init_factor_scale");
}

namespace {

Var constant(const DenseTensor& t) { return Var::constant(t); }

Var scalar(double v) { return Var::constant(DenseTensor::scalar(v)); }

DenseTensor identity_scaled(std::size_t n, double s) {
  DenseTensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = s;
  return out;
}

// Σ_i d_i² with d = exp(log_d).
Var squared_diag(const Var& log_d) { return ad::exp(ad::scale(log_d, 2.0)); }

// Column vector view of a length-n Var.
Var column(const Var& v) { return ad::reshape(v, {v.value().size(), 1}); }

// Σ_i log(diag of the triangular factor)·2 = log det(𝐁𝐁ᵀ).
Var logdet_triangular(const Var& tri) { return ad::scale(ad::sum(ad::log(ad::diag_part(tri))), 2.0); }

// log det(BBᵀ + diag(d²)) = Σ log d² + log det(I_r + Bᵀ D⁻² B).
Var logdet_low_rank(const ModeCovariance& c) {
  const std::size_t r = c.factor.value().cols();
  const Var inv_d2 = ad::exp(ad::scale(c.log_diag, -2.0));
  const Var scaled = ad::scale_rows(c.factor, inv_d2);
  const Var inner = ad::add(constant(DenseTensor::identity(r)), ad::matmul(ad::transpose(c.factor), scaled));
  return ad::add(ad::scale(ad::sum(c.log_diag), 2.0), ad::logdet_spd(inner));
}

// tr((ΦΦᵀ + σ²I)(BBᵀ + diag(d²))), never forming an n × n matrix.
Var trace_rff(const ModeCovariance& c, const DenseTensor& phi, const DenseTensor& phi_t, double sigma2) {
  const Var d2 = squared_diag(c.log_diag);
  DenseTensor row_norms({phi.rows()});
  for (std::size_t i = 0; i < phi.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < phi.cols(); ++j) s += phi(i, j) * phi(i, j);
    row_norms[i] = s;
  }
  const Var projected = ad::matmul(constant(phi_t), c.factor);
  Var out = ad::add(ad::sum(ad::square(projected)), ad::sum(ad::mul(d2, constant(row_norms))));
  return ad::add(out, ad::scale(ad::add(ad::sum(ad::square(c.factor)), ad::sum(d2)), sigma2));
}

// log det(ΦΦᵀ + σ²I_n) = (n − I)·log σ² + log det(σ²I_I + ΦᵀΦ).
double logdet_rff_precision(const DenseTensor& phi, const DenseTensor& phi_t, double sigma2) {
  const std::size_t n = phi.rows(), features = phi.cols();
  const DenseTensor inner = add(matmul(phi_t, phi), identity_scaled(features, sigma2));
  return (static_cast<double>(n) - static_cast<double>(features)) * std::log(sigma2) +
         ad::logdet_spd(constant(inner)).item();
}

// (ΦΦᵀ + σ²I) applied along `axis`.
Var apply_rff_precision(const Var& t, const DenseTensor& phi, const DenseTensor& phi_t, double sigma2,
                        Axis axis) {
  const Var projected = ad::mode_product(ad::mode_product(t, constant(phi_t), axis), constant(phi), axis);
  return ad::add(projected, ad::scale(t, sigma2));
}

}  // namespace

Var triangular_factor(const ModeCovariance& c) {
  const Var bbt = ad::matmul(c.factor, ad::transpose(c.factor));
  return ad::add(ad::tril(bbt), ad::diag_embed(ad::exp(c.log_diag)));
}

Var kl_univariate(const Var& mean, const Var& log_var, double prior_mean, double prior_var) {
  const double n = static_cast<double>(mean.value().size());
  const Var diff = ad::add_scalar(mean, -prior_mean);
  Var out = ad::scale(ad::sum(ad::square(diff)), 0.5 / prior_var);
  out = ad::add(out, ad::scale(ad::sum(ad::exp(log_var)), 0.5 / prior_var));
  out = ad::sub(out, ad::scale(ad::sum(log_var), 0.5));
  return ad::add_scalar(out, 0.5 * n * (std::log(prior_var) - 1.0));
}

double kl_univariate(double mean, double var, double prior_mean, double prior_var) {
  if (!(var > 0.0) || !(prior_var > 0.0)) throw NumericalError("kl_univariate: variances must be > 0");
  const double ratio = var / prior_var;
  return (mean - prior_mean) * (mean - prior_mean) / (2.0 * prior_var) + 0.5 * (ratio - 1.0 - std::log(ratio));
}

double kl_multivariate_rff(std::span<const double> mean, const DenseTensor& factor, std::span<const double> diag,
                           double prior_mean, double prior_var, const DenseTensor& phi) {
  const std::size_t n = mean.size();
  if (factor.rows() != n || diag.size() != n || phi.rows() != n) {
    throw ShapeError("kl_multivariate_rff: factor, diagonal and features must have " + std::to_string(n) + " rows");
  }
  DenseTensor log_d({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (!(diag[i] > 0.0)) throw NumericalError("kl_multivariate_rff: diagonal entries must be > 0");
    log_d[i] = std::log(diag[i]);
  }
  const DenseTensor phi_t = phi.transposed();
  const ModeCovariance c{constant(factor), constant(log_d)};
  DenseTensor delta({1, n, 1});
  for (std::size_t i = 0; i < n; ++i) delta[i] = mean[i] - prior_mean;
  const Var dv = constant(delta);
  const double maha = ad::sum(ad::mul(dv, apply_rff_precision(dv, phi, phi_t, prior_var, Axis(1)))).item();
  const double trace = trace_rff(c, phi, phi_t, prior_var).item();
  const double logdet_prec = logdet_rff_precision(phi, phi_t, prior_var);
  const double logdet_q = logdet_low_rank(c).item();
  return 0.5 * (trace + maha - static_cast<double>(n) - logdet_prec - logdet_q);
}

DenseTensor sample_core(const DenseTensor& mean, const std::vector<DenseTensor>& factors, std::mt19937_64& rng) {
  if (factors.size() + 2 != mean.order()) throw ShapeError("sample_core: one factor per middle axis required");
  Shape zshape{mean.extent(0)};
  for (std::size_t q = 0; q < factors.size(); ++q) {
    if (factors[q].rows() != mean.extent(q + 1)) throw ShapeError("sample_core: factor rows differ from extent");
    zshape.push_back(factors[q].cols());
  }
  zshape.push_back(mean.extent(mean.order() - 1));
  std::normal_distribution<double> normal;
  DenseTensor z(zshape);
  for (auto& v : z.data()) v = normal(rng);
  for (std::size_t q = 0; q < factors.size(); ++q) {
    z = mode_product(z, factors[q], Axis(static_cast<std::ptrdiff_t>(q + 1)));
  }
  return add(mean, z);
}

Var expected_log_lik(const Var& mean, const Var& second_moment, std::span<const double> y, double noise_var) {
  const std::size_t b = y.size();
  if (mean.value().size() != b || second_moment.value().size() != b) {
    throw ShapeError("expected_log_lik: moment and target counts differ");
  }
  DenseTensor yt({b}), y2({b});
  for (std::size_t i = 0; i < b; ++i) {
    yt[i] = y[i];
    y2[i] = y[i] * y[i];
  }
  const Var quad = ad::add(ad::sub(constant(y2), ad::scale(ad::mul(constant(yt), mean), 2.0)), second_moment);
  const double norm = -0.5 * static_cast<double>(b) * std::log(2.0 * std::numbers::pi * noise_var);
  return ad::add_scalar(ad::scale(ad::sum(quad), -0.5 / noise_var), norm);
}

VariationalModel::VariationalModel(ModelConfig model, SideFeatures side, VariationalConfig config)
    : model_(std::move(model), std::move(side)), config_(std::move(config)) {
  config_.validate(model_.config());
  initialize_variances();
}

void VariationalModel::initialize_variances() {
  std::mt19937_64 rng(model_.config().init_seed * 6364136223846793005ULL + 1442695040888963407ULL);
  std::normal_distribution<double> normal;
  variances_ = VarianceParams{};
  const Parameters& p = model_.params();
  auto like = [&](const std::vector<DenseTensor>& list) {
    std::vector<DenseTensor> out;
    for (const auto& t : list) out.emplace_back(t.shape(), config_.init_log_var);
    return out;
  };
  if (config_.family == Family::Univariate) {
    variances_.core_log_vars = like(p.cores);
  } else {
    for (std::size_t k = 0; k < model_.num_cores(); ++k) {
      std::vector<DenseTensor> fs, ds;
      for (auto m : model_.core_modes(k)) {
        const std::size_t n = model_.config().extents[m];
        DenseTensor f({n, config_.factor_rank});
        for (auto& v : f.data()) v = config_.init_factor_scale * normal(rng);
        fs.push_back(std::move(f));
        ds.emplace_back(Shape{n}, 0.5 * config_.init_log_var);
      }
      variances_.factors.push_back(std::move(fs));
      variances_.factor_log_diags.push_back(std::move(ds));
    }
  }
  variances_.weight_log_vars = like(p.weights);
  variances_.scale_log_vars = like(p.scales);
  variances_.bias_log_vars = like(p.biases);
}

std::vector<std::pair<std::string, DenseTensor*>> VariationalModel::variance_tensors(VarianceGroup group) {
  std::vector<std::pair<std::string, DenseTensor*>> out;
  auto add_list = [&](const std::string& stem, std::vector<DenseTensor>& list) {
    for (std::size_t k = 0; k < list.size(); ++k) out.emplace_back(stem + std::to_string(k), &list[k]);
  };
  if (group == VarianceGroup::Cores) {
    add_list("core_log_var.", variances_.core_log_vars);
    for (std::size_t k = 0; k < variances_.factors.size(); ++k) {
      for (std::size_t q = 0; q < variances_.factors[k].size(); ++q) {
        const std::string tag = std::to_string(k) + "." + std::to_string(q);
        out.emplace_back("factor." + tag, &variances_.factors[k][q]);
        out.emplace_back("factor_log_diag." + tag, &variances_.factor_log_diags[k][q]);
      }
    }
  } else {
    add_list("weight_log_var.", variances_.weight_log_vars);
    add_list("scale_log_var.", variances_.scale_log_vars);
    add_list("bias_log_var.", variances_.bias_log_vars);
  }
  return out;
}

VarianceVars VariationalModel::variance_vars(std::initializer_list<VarianceGroup> trainable) const {
  auto wants = [&](VarianceGroup g) {
    for (auto t : trainable) {
      if (t == g) return true;
    }
    return false;
  };
  auto wrap = [](const std::vector<DenseTensor>& list, bool grad) {
    std::vector<Var> out;
    for (const auto& t : list) out.push_back(Var::leaf(t, grad));
    return out;
  };
  const bool cores = wants(VarianceGroup::Cores), aux = wants(VarianceGroup::Aux);
  VarianceVars v;
  v.core_log_vars = wrap(variances_.core_log_vars, cores);
  for (std::size_t k = 0; k < variances_.factors.size(); ++k) {
    v.factors.push_back(wrap(variances_.factors[k], cores));
    v.factor_log_diags.push_back(wrap(variances_.factor_log_diags[k], cores));
  }
  v.weight_log_vars = wrap(variances_.weight_log_vars, aux);
  v.scale_log_vars = wrap(variances_.scale_log_vars, aux);
  v.bias_log_vars = wrap(variances_.bias_log_vars, aux);
  return v;
}

Var VariationalModel::mode_variance_rows(std::size_t mode, const ModeCovariance& c, const IndexBatch& batch,
                                         const ParamVars& m) const {
  const auto& idx = batch.modes[mode];
  const Space space = model_.config().space;
  if (space == Space::DualExact) {
    const Var tri = triangular_factor(c);
    if (!model_.has_side(mode)) return ad::row_sums(ad::square(ad::index_rows(tri, idx)));
    const Var rows = model_.dual_rows(mode, idx, m);
    return ad::row_sums(ad::square(ad::matmul(rows, tri)));
  }
  const Var d2 = squared_diag(c.log_diag);
  if (!model_.has_side(mode)) {
    const Var diag = ad::reshape(ad::index_rows(column(d2), idx), {idx.size()});
    return ad::add(ad::row_sums(ad::square(ad::index_rows(c.factor, idx))), diag);
  }
  const Var rows = model_.dual_rows(mode, idx, m);
  const Var low_rank = ad::row_sums(ad::square(ad::matmul(rows, c.factor)));
  return ad::add(low_rank, ad::reshape(ad::matmul(ad::square(rows), column(d2)), {idx.size()}));
}

std::vector<Var> VariationalModel::variance_slices(const ParamVars& m, const VarianceVars& s,
                                                   const IndexBatch& batch) const {
  std::vector<Var> out;
  const Space space = model_.config().space;
  for (std::size_t k = 0; k < model_.num_cores(); ++k) {
    const Shape shape = model_.core_shape(k);
    const std::size_t left = shape.front(), right = shape.back();
    const auto& modes = model_.core_modes(k);
    if (config_.family == Family::Multivariate) {
      Var rows;
      for (std::size_t q = 0; q < modes.size(); ++q) {
        const Var r = mode_variance_rows(modes[q], {s.factors[k][q], s.factor_log_diags[k][q]}, batch, m);
        rows = q == 0 ? r : ad::mul(rows, r);
      }
      out.push_back(ad::expand_middle(rows, left, right));
      continue;
    }
    std::vector<ad::Selector> sel;
    for (auto mode : modes) {
      const auto& idx = batch.modes[mode];
      if (!model_.has_side(mode)) {
        sel.push_back(ad::Selector::indices(idx));
      } else if (space == Space::Primal) {
        sel.push_back(ad::Selector::rows(ad::square(ad::index_rows(constant(*model_.side()[mode]), idx))));
      } else {
        sel.push_back(ad::Selector::rows(ad::square(model_.dual_rows(mode, idx, m))));
      }
    }
    out.push_back(ad::gather_core(ad::exp(s.core_log_vars[k]), sel));
  }
  return out;
}

std::pair<Var, Var> VariationalModel::moments(const ParamVars& m, const VarianceVars& s,
                                              const IndexBatch& batch) const {
  // Validates the batch and gives the mean slices in one pass.
  std::vector<Var> means = model_.main_slices(m, batch);
  std::vector<Var> vars = variance_slices(m, s, batch);
  const Variant variant = model_.config().variant;
  if (variant == Variant::Wlr) {
    for (std::size_t k = 0; k < means.size(); ++k) {
      const auto sel = KftModel::index_selectors(model_.core_modes(k), batch);
      const Var w = ad::gather_core(m.weights[k], sel);
      const Var wv = ad::gather_core(ad::exp(s.weight_log_vars[k]), sel);
      const Var w2 = ad::square(w), m2 = ad::square(means[k]);
      vars[k] = ad::sub(ad::mul(ad::add(w2, wv), ad::add(m2, vars[k])), ad::mul(w2, m2));
      means[k] = ad::mul(w, means[k]);
    }
  }
  Var mean = ad::batched_chain(means);
  Var second = ad::second_moment_chain(means, vars);
  if (variant != Variant::Ls) return {mean, second};

  auto chain_moments = [&](const std::vector<Var>& mu, const std::vector<Var>& log_var) {
    std::vector<Var> ms, vs;
    for (std::size_t k = 0; k < mu.size(); ++k) {
      const auto sel = KftModel::index_selectors(model_.core_modes(k), batch);
      ms.push_back(ad::gather_core(mu[k], sel));
      vs.push_back(ad::gather_core(ad::exp(log_var[k]), sel));
    }
    return std::pair{ad::batched_chain(ms), ad::second_moment_chain(ms, vs)};
  };
  const auto [sm, s2] = chain_moments(m.scales, s.scale_log_vars);
  const auto [bm, b2] = chain_moments(m.biases, s.bias_log_vars);
  const Var f_mean = ad::add(ad::mul(sm, mean), bm);
  const Var f_second =
      ad::add(ad::add(ad::mul(s2, second), ad::scale(ad::mul(ad::mul(sm, mean), bm), 2.0)), b2);
  return {f_mean, f_second};
}

Var VariationalModel::core_kl_multivariate(std::size_t k, const ParamVars& m, const VarianceVars& s) const {
  const PriorHyper& prior = config_.prior;
  const auto& modes = model_.core_modes(k);
  const Shape shape = model_.core_shape(k);
  const double fibers = static_cast<double>(shape.front() * shape.back());
  double n_total = 1.0;
  for (auto mode : modes) n_total *= static_cast<double>(model_.config().extents[mode]);

  const Var delta = ad::add_scalar(m.cores[k], -prior.mean);
  Var weighted = delta;
  Var trace = scalar(1.0);
  Var logdets = scalar(0.0);  // Σ_q (N/n_q)·(log det P_q + log det Σ_q)
  const bool exact = model_.config().space == Space::DualExact;
  for (std::size_t q = 0; q < modes.size(); ++q) {
    const std::size_t mode = modes[q];
    const std::size_t n = model_.config().extents[mode];
    const double reps = n_total / static_cast<double>(n);
    const Axis axis(static_cast<std::ptrdiff_t>(q + 1));
    const ModeCovariance c{s.factors[k][q], s.factor_log_diags[k][q]};
    Var tr, ld_prec, ld_cov;
    if (!model_.has_side(mode)) {
      weighted = ad::scale(weighted, 1.0 / prior.var);
      ld_prec = scalar(-static_cast<double>(n) * std::log(prior.var));
      if (exact) {
        const Var tri = triangular_factor(c);
        tr = ad::scale(ad::sum(ad::square(tri)), 1.0 / prior.var);
        ld_cov = logdet_triangular(tri);
      } else {
        tr = ad::scale(ad::add(ad::sum(ad::square(c.factor)), ad::sum(squared_diag(c.log_diag))), 1.0 / prior.var);
        ld_cov = logdet_low_rank(c);
      }
    } else if (exact) {
      const Var precision = ad::add(model_.gram_var(mode, m), constant(identity_scaled(n, prior.kernel_jitter)));
      const Var tri = triangular_factor(c);
      weighted = ad::mode_product(weighted, precision, axis);
      tr = ad::sum(ad::mul(ad::matmul(precision, tri), tri));
      ld_prec = ad::logdet_spd(precision);
      ld_cov = logdet_triangular(tri);
    } else {
      const DenseTensor& phi = model_.rff_matrix(mode);
      const DenseTensor phi_t = phi.transposed();
      weighted = apply_rff_precision(weighted, phi, phi_t, prior.var, axis);
      tr = trace_rff(c, phi, phi_t, prior.var);
      ld_prec = scalar(logdet_rff_precision(phi, phi_t, prior.var));
      ld_cov = logdet_low_rank(c);
    }
    trace = ad::mul(trace, tr);
    logdets = ad::add(logdets, ad::scale(ad::add(ld_prec, ld_cov), reps));
  }
  const Var maha = ad::sum(ad::mul(delta, weighted));
  Var total = ad::add(ad::scale(trace, fibers), maha);
  total = ad::sub(total, ad::scale(logdets, fibers));
  return ad::scale(ad::add_scalar(total, -fibers * n_total), 0.5);
}

Var VariationalModel::kl(const ParamVars& m, const VarianceVars& s) const {
  const PriorHyper& prior = config_.prior;
  Var total = scalar(0.0);
  for (std::size_t k = 0; k < model_.num_cores(); ++k) {
    if (config_.family == Family::Univariate) {
      total = ad::add(total, kl_univariate(m.cores[k], s.core_log_vars[k], prior.mean, prior.var));
    } else {
      total = ad::add(total, core_kl_multivariate(k, m, s));
    }
  }
  for (std::size_t k = 0; k < m.weights.size(); ++k) {
    total = ad::add(total, kl_univariate(m.weights[k], s.weight_log_vars[k], prior.aux_mean, prior.aux_var));
  }
  for (std::size_t k = 0; k < m.scales.size(); ++k) {
    total = ad::add(total, kl_univariate(m.scales[k], s.scale_log_vars[k], prior.aux_mean, prior.aux_var));
    total = ad::add(total, kl_univariate(m.biases[k], s.bias_log_vars[k], prior.bias_mean, prior.bias_var));
  }
  return total;
}

ElboParts VariationalModel::elbo(const ParamVars& m, const VarianceVars& s, const IndexBatch& batch,
                                 std::span<const double> targets, std::size_t n_total) const {
  if (batch.size() == 0) throw ShapeError("elbo: empty batch");
  if (targets.size() != batch.size()) throw ShapeError("elbo: target count differs from batch");
  if (n_total < batch.size()) throw ShapeError("elbo: n_total smaller than the batch");
  const auto [mean, second] = moments(m, s, batch);
  const Var recon = expected_log_lik(mean, second, targets, config_.prior.noise_var);
  const Var kl_total = kl(m, s);
  const double nb = static_cast<double>(batch.size());
  const Var elbo_var = ad::sub(recon, ad::scale(kl_total, nb / static_cast<double>(n_total)));
  ElboParts out;
  out.loss = ad::scale(elbo_var, -1.0 / nb);
  out.recon = recon.item();
  out.kl = kl_total.item();
  out.elbo = elbo_var.item();
  double sq = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) sq += std::pow(mean.value()[i] - targets[i], 2);
  out.mse = sq / nb;
  return out;
}

Parameters VariationalModel::sample_parameters(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal;
  const Parameters& mean = model_.params();
  Parameters out = mean;
  auto perturb = [&](std::vector<DenseTensor>& list, const std::vector<DenseTensor>& log_vars) {
    for (std::size_t k = 0; k < list.size(); ++k) {
      for (std::size_t i = 0; i < list[k].size(); ++i) list[k][i] += std::exp(0.5 * log_vars[k][i]) * normal(rng);
    }
  };
  if (config_.family == Family::Univariate) {
    perturb(out.cores, variances_.core_log_vars);
  } else {
    const bool exact = model_.config().space == Space::DualExact;
    for (std::size_t k = 0; k < model_.num_cores(); ++k) {
      std::vector<DenseTensor> factors;
      for (std::size_t q = 0; q < variances_.factors[k].size(); ++q) {
        const ModeCovariance c{constant(variances_.factors[k][q]), constant(variances_.factor_log_diags[k][q])};
        if (exact) {
          factors.push_back(triangular_factor(c).value());
          continue;
        }
        // [B | diag(d)] has covariance BBᵀ + diag(d²).
        const DenseTensor& b = variances_.factors[k][q];
        const std::size_t n = b.rows(), r = b.cols();
        DenseTensor f({n, r + n});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < r; ++j) f(i, j) = b(i, j);
          f(i, r + i) = std::exp(variances_.factor_log_diags[k][q][i]);
        }
        factors.push_back(std::move(f));
      }
      out.cores[k] = sample_core(mean.cores[k], factors, rng);
    }
  }
  perturb(out.weights, variances_.weight_log_vars);
  perturb(out.scales, variances_.scale_log_vars);
  perturb(out.biases, variances_.bias_log_vars);
  return out;
}

PredictiveSamples VariationalModel::sample_predictive(const IndexBatch& batch, std::size_t draws,
                                                      std::uint64_t seed, bool observation_noise) const {
  PredictiveSamples out;
  out.points = batch.size();
  out.draws = draws;
  out.values.assign(out.points * draws, 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double noise_sd = observation_noise ? std::sqrt(config_.prior.noise_var) : 0.0;
  KftModel sampled = model_;
  for (std::size_t d = 0; d < draws; ++d) {
    sampled.params() = sample_parameters(rng);
    const auto pred = sampled.predict(batch);
    for (std::size_t i = 0; i < out.points; ++i) {
      const double eps = noise_sd > 0.0 ? noise_sd * normal(rng) : 0.0;
      out.values[i * draws + d] = pred[i] + eps;
    }
  }
  return out;
}

namespace {

// Vars of the variance tensors of `group`, aligned with variance_tensors().
std::vector<Var> ordered_variance_vars(const VarianceVars& v, VarianceGroup group) {
  std::vector<Var> out;
  auto append = [&](const std::vector<Var>& list) { out.insert(out.end(), list.begin(), list.end()); };
  if (group == VarianceGroup::Cores) {
    append(v.core_log_vars);
    for (std::size_t k = 0; k < v.factors.size(); ++k) {
      for (std::size_t q = 0; q < v.factors[k].size(); ++q) {
        out.push_back(v.factors[k][q]);
        out.push_back(v.factor_log_diags[k][q]);
      }
    }
  } else {
    append(v.weight_log_vars);
    append(v.scale_log_vars);
    append(v.bias_log_vars);
  }
  return out;
}

}  // namespace

Trace vi_train(VariationalModel& model, const CooDataset& train, const TrainConfig& config,
               const StepObserver& observer) {
  config.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  const BatchSampler sampler(train.size(), config.batch_fraction, config.seed);
  KftModel& means = model.means();
  Adam adam(config.learning_rate);
  Trace trace;
  std::uint64_t pass_index = 0;
  const double n_total = static_cast<double>(train.size());

  // One block: a label and a step function returning the trace row values.
  struct Block {
    std::string phase;
    std::function<TraceRow(const IndexBatch&, std::span<const double>)> step;
  };
  auto record = [&](const ElboParts& e) { return TraceRow{0, {}, 0, e.loss.item(), e.mse, e.kl / n_total}; };
  std::vector<Block> mean_blocks, variance_blocks;
  for (ParamGroup group : training_groups(means)) {
    mean_blocks.push_back({"means/" + to_string(group), [&, group](const IndexBatch& b, std::span<const double> y) {
                             const ParamVars mv = means.vars({group});
                             const ElboParts e = model.elbo(mv, model.variance_vars(), b, y, train.size());
                             ad::backward(e.loss);
                             const auto named = means.named_tensors();
                             const auto vars = means.ordered(mv);
                             std::vector<std::pair<std::size_t, DenseTensor>> grads;
                             for (std::size_t i = 0; i < named.size(); ++i) {
                               if (named[i].group != group) continue;
                               grads.emplace_back(i, vars[i].grad());
                               require_finite(grads.back().second, named[i].name);
                             }
                             TraceRow row = record(e);
                             for (auto& [i, g] : grads) adam.step(named[i].name, *named[i].tensor, g);
                             return row;
                           }});
  }
  std::vector<VarianceGroup> vgroups{VarianceGroup::Cores};
  if (means.config().variant != Variant::Vanilla) vgroups.push_back(VarianceGroup::Aux);
  for (VarianceGroup group : vgroups) {
    const std::string label = group == VarianceGroup::Cores ? "variances/cores" : "variances/aux";
    variance_blocks.push_back({label, [&, group](const IndexBatch& b, std::span<const double> y) {
                                 const VarianceVars sv = model.variance_vars({group});
                                 const ElboParts e = model.elbo(means.vars(), sv, b, y, train.size());
                                 ad::backward(e.loss);
                                 const auto named = model.variance_tensors(group);
                                 const auto vars = ordered_variance_vars(sv, group);
                                 std::vector<DenseTensor> grads;
                                 for (std::size_t i = 0; i < named.size(); ++i) {
                                   grads.push_back(vars[i].grad());
                                   require_finite(grads.back(), named[i].first);
                                 }
                                 TraceRow row = record(e);
                                 for (std::size_t i = 0; i < named.size(); ++i) {
                                   adam.step(named[i].first, *named[i].second, grads[i]);
                                 }
                                 return row;
                               }});
  }

  for (const auto* blocks : {&mean_blocks, &variance_blocks}) {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      for (const Block& block : *blocks) {
        std::size_t step = 0;
        const std::size_t limit = config.iterations_per_epoch;
        do {
          for (const auto& records : sampler.pass(pass_index++)) {
            if (limit != 0 && step >= limit) break;
            const IndexBatch batch = train.batch(records);
            const std::vector<double> y = train.targets_at(records);
            TraceRow row;
            try {
              row = block.step(batch, y);
            } catch (const NumericalError& e) {
              throw DivergenceError(e.what(), std::move(trace));
            }
            row.epoch = epoch;
            row.phase = block.phase;
            row.iteration = step;
            trace.push_back(row);
            if (!std::isfinite(row.objective)) {
              throw DivergenceError("negative ELBO became non-finite in phase " + block.phase, std::move(trace));
            }
            if (observer) observer(row);
            ++step;
          }
        } while (limit != 0 && step < limit);
      }
    }
  }
  return trace;
}

double quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ShapeError("quantile of an empty sample");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace kft
