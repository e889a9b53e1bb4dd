#include "kft/model.hpp"

#include <cmath>
#include <random>

#include "kft/errors.hpp"
#include "kft/tensor_ops.hpp"

namespace kft {

using ad::Var;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Wlr: return "wlr";
    case Variant::Ls: return "ls";
  }
  return "unknown";
}

std::string to_string(Space s) {
  switch (s) {
    case Space::Primal: return "primal";
    case Space::DualExact: return "dual-exact";
    case Space::DualRff: return "dual-rff";
  }
  return "unknown";
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Cores: return "cores";
    case ParamGroup::Aux: return "aux";
    case ParamGroup::Kernel: return "kernel";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  if (name == "vanilla") return Variant::Vanilla;
  if (name == "wlr") return Variant::Wlr;
  if (name == "ls") return Variant::Ls;
  throw ConfigError("unknown variant '" + name + "' (vanilla, wlr, ls)");
}

Space space_from_string(const std::string& name) {
  if (name == "primal") return Space::Primal;
  if (name == "dual-exact") return Space::DualExact;
  if (name == "dual-rff") return Space::DualRff;
  throw ConfigError("unknown space '" + name + "' (primal, dual-exact, dual-rff)");
}

std::vector<std::vector<std::size_t>> ModelConfig::resolved_grouping() const {
  if (!grouping.empty()) return grouping;
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t m = 0; m < extents.size(); ++m) out.push_back({m});
  return out;
}

void ModelConfig::validate() const {
  if (extents.size() < 2) throw ConfigError("at least two modes are required", "model.extents");
  for (auto e : extents) {
    if (e == 0) throw ConfigError("extents must be >= 1", "model.extents");
  }
  if (rank == 0) throw ConfigError("rank must be >= 1", "model.rank");
  if (!(reg >= 0.0)) throw ConfigError("must be >= 0", "model.reg");
  if (!(aux_reg >= 0.0)) throw ConfigError("must be >= 0", "model.aux_reg");
  if (!(lengthscale > 0.0)) throw ConfigError("must be > 0", "model.lengthscale");
  if (space == Space::DualRff && (rff_features < 2 || rff_features % 2 != 0)) {
    throw ConfigError("must be even and >= 2", "model.rff_features");
  }
  const auto groups = resolved_grouping();
  std::size_t next = 0;
  for (const auto& g : groups) {
    if (g.empty()) throw ConfigError("empty core group", "model.grouping");
    for (auto m : g) {
      if (m != next++) {
        throw ConfigError("groups must cover the modes contiguously and in order", "model.grouping");
      }
    }
  }
  if (next != extents.size()) {
    throw ConfigError("groups must cover every mode exactly once", "model.grouping");
  }
}

KftModel::KftModel(ModelConfig config, SideFeatures side)
    : config_(std::move(config)), side_(std::move(side)) {
  config_.validate();
  const std::size_t p = order();
  if (side_.empty()) side_.assign(p, std::nullopt);
  if (side_.size() != p) {
    throw ShapeError("side information list has " + std::to_string(side_.size()) +
                     " entries for " + std::to_string(p) + " modes");
  }
  groups_ = config_.resolved_grouping();
  sqdist_.assign(p, std::nullopt);
  phi_.assign(p, std::nullopt);
  phi_t_.assign(p, std::nullopt);
  for (std::size_t m = 0; m < p; ++m) {
    if (!side_[m]) continue;
    SideInfo{m, *side_[m]}.validate(config_.extents[m]);
    if (config_.space == Space::DualExact) {
      sqdist_[m] = squared_distances(*side_[m]);
    } else if (config_.space == Space::DualRff) {
      const RffMap map = rff_sample(KernelParams{config_.kernel, config_.lengthscale},
                                    config_.rff_features, side_[m]->cols(),
                                    config_.rff_seed * 7919 + m);
      phi_[m] = rff_feature_matrix(*side_[m], map);
      phi_t_[m] = phi_[m]->transposed();
    }
  }
  initialize(config_.init_seed);
}

std::size_t KftModel::middle_extent(std::size_t mode) const {
  if (config_.space == Space::Primal && side_[mode]) return side_[mode]->cols();
  return config_.extents[mode];
}

Shape KftModel::core_shape(std::size_t k) const {
  Shape s{left_rank(k, config_.rank)};
  for (auto m : groups_[k]) s.push_back(middle_extent(m));
  s.push_back(right_rank(k, config_.rank));
  return s;
}

Shape KftModel::index_core_shape(std::size_t k, std::size_t left, std::size_t right) const {
  Shape s{left};
  for (auto m : groups_[k]) s.push_back(config_.extents[m]);
  s.push_back(right);
  return s;
}

std::size_t KftModel::scale_rank() const {
  return config_.scale_rank ? config_.scale_rank : config_.rank;
}
std::size_t KftModel::bias_rank() const {
  return config_.bias_rank ? config_.bias_rank : config_.rank;
}

bool KftModel::trains_kernel() const {
  if (config_.space != Space::DualExact) return false;
  for (const auto& s : side_) {
    if (s) return true;
  }
  return false;
}

void KftModel::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double std_core =
      config_.init_scale >= 0.0 ? config_.init_scale : 1.0 / std::sqrt(static_cast<double>(config_.rank));
  params_ = Parameters{};
  for (std::size_t k = 0; k < num_cores(); ++k) {
    DenseTensor core(core_shape(k));
    for (auto& v : core.data()) v = std_core * normal(rng);
    params_.cores.push_back(std::move(core));
  }
  if (config_.variant == Variant::Wlr) {
    for (std::size_t k = 0; k < num_cores(); ++k) {
      params_.weights.emplace_back(
          index_core_shape(k, left_rank(k, config_.rank), right_rank(k, config_.rank)), 1.0);
    }
  }
  if (config_.variant == Variant::Ls) {
    // Scale chain starts on the unit path (product 1), bias near zero; a small
    // perturbation keeps both chains off the zero-gradient saddle.
    const double eps = config_.aux_noise;
    for (std::size_t k = 0; k < num_cores(); ++k) {
      const std::size_t ls = left_rank(k, scale_rank()), rs = right_rank(k, scale_rank());
      DenseTensor scale(index_core_shape(k, ls, rs));
      const std::size_t middle = scale.size() / (ls * rs);
      for (std::size_t a = 0; a < ls; ++a)
        for (std::size_t f = 0; f < middle; ++f)
          for (std::size_t c = 0; c < rs; ++c) {
            scale[(a * middle + f) * rs + c] = (a == 0 && c == 0 ? 1.0 : 0.0) + eps * normal(rng);
          }
      params_.scales.push_back(std::move(scale));
      DenseTensor bias(index_core_shape(k, left_rank(k, bias_rank()), right_rank(k, bias_rank())));
      for (auto& v : bias.data()) v = eps * normal(rng);
      params_.biases.push_back(std::move(bias));
    }
  }
  for (std::size_t m = 0; m < order(); ++m) {
    params_.log_lengthscales.push_back(DenseTensor::scalar(std::log(config_.lengthscale)));
  }
}

std::vector<NamedTensor> KftModel::named_tensors() {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < params_.cores.size(); ++k) {
    out.push_back({"core." + std::to_string(k), ParamGroup::Cores, &params_.cores[k]});
  }
  for (std::size_t k = 0; k < params_.weights.size(); ++k) {
    out.push_back({"weight." + std::to_string(k), ParamGroup::Aux, &params_.weights[k]});
  }
  for (std::size_t k = 0; k < params_.scales.size(); ++k) {
    out.push_back({"scale." + std::to_string(k), ParamGroup::Aux, &params_.scales[k]});
  }
  for (std::size_t k = 0; k < params_.biases.size(); ++k) {
    out.push_back({"bias." + std::to_string(k), ParamGroup::Aux, &params_.biases[k]});
  }
  if (trains_kernel()) {
    for (std::size_t m = 0; m < order(); ++m) {
      if (side_[m]) {
        out.push_back({"log_lengthscale." + std::to_string(m), ParamGroup::Kernel,
                       &params_.log_lengthscales[m]});
      }
    }
  }
  return out;
}

std::vector<Var> KftModel::ordered(const ParamVars& v) const {
  std::vector<Var> out;
  out.insert(out.end(), v.cores.begin(), v.cores.end());
  out.insert(out.end(), v.weights.begin(), v.weights.end());
  out.insert(out.end(), v.scales.begin(), v.scales.end());
  out.insert(out.end(), v.biases.begin(), v.biases.end());
  if (trains_kernel()) {
    for (std::size_t m = 0; m < order(); ++m) {
      if (side_[m]) out.push_back(v.log_lengthscales[m]);
    }
  }
  return out;
}

ParamVars KftModel::vars(std::initializer_list<ParamGroup> trainable) const {
  return vars(std::vector<ParamGroup>(trainable));
}

ParamVars KftModel::vars(const std::vector<ParamGroup>& trainable) const {
  auto wants = [&](ParamGroup g) {
    for (auto t : trainable) {
      if (t == g) return true;
    }
    return false;
  };
  ParamVars v;
  for (const auto& t : params_.cores) v.cores.push_back(Var::leaf(t, wants(ParamGroup::Cores)));
  for (const auto& t : params_.weights) v.weights.push_back(Var::leaf(t, wants(ParamGroup::Aux)));
  for (const auto& t : params_.scales) v.scales.push_back(Var::leaf(t, wants(ParamGroup::Aux)));
  for (const auto& t : params_.biases) v.biases.push_back(Var::leaf(t, wants(ParamGroup::Aux)));
  const bool kernel = wants(ParamGroup::Kernel) && trains_kernel();
  for (std::size_t m = 0; m < order(); ++m) {
    v.log_lengthscales.push_back(Var::leaf(params_.log_lengthscales[m], kernel && side_[m]));
  }
  return v;
}

const DenseTensor& KftModel::rff_matrix(std::size_t mode) const {
  if (!phi_[mode]) throw ShapeError("mode " + std::to_string(mode) + " has no random features");
  return *phi_[mode];
}

const DenseTensor& KftModel::sqdist(std::size_t mode) const {
  if (!sqdist_[mode]) throw ShapeError("mode " + std::to_string(mode) + " has no kernel matrix");
  return *sqdist_[mode];
}

Var KftModel::gram_var(std::size_t mode, const ParamVars& v) const {
  return ad::kernel_gram(sqdist(mode), v.log_lengthscales[mode], config_.kernel);
}

Var KftModel::prepare_core(std::size_t k, const Var& core) const {
  Var out = core;
  if (config_.space != Space::DualRff) return out;
  const auto& modes = groups_[k];
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (phi_t_[modes[i]]) {
      out = ad::mode_product(out, Var::constant(*phi_t_[modes[i]]), Axis(static_cast<std::ptrdiff_t>(i + 1)));
    }
  }
  return out;
}

namespace {

DenseTensor gather_rows(const DenseTensor& m, std::span<const std::size_t> idx) {
  DenseTensor out(Shape{idx.size(), m.cols()});
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t j = 0; j < m.cols(); ++j) out(b, j) = m(idx[b], j);
  return out;
}

}  // namespace

std::vector<ad::Selector> KftModel::index_selectors(const std::vector<std::size_t>& modes,
                                                    const IndexBatch& batch) {
  std::vector<ad::Selector> out;
  for (auto m : modes) out.push_back(ad::Selector::indices(batch.modes[m]));
  return out;
}

std::vector<ad::Selector> KftModel::selectors(std::size_t k, const IndexBatch& batch,
                                              const ParamVars& v) const {
  std::vector<ad::Selector> out;
  for (auto m : groups_[k]) {
    const auto& idx = batch.modes[m];
    if (!side_[m]) {
      out.push_back(ad::Selector::indices(idx));
      continue;
    }
    switch (config_.space) {
      case Space::Primal:
        out.push_back(ad::Selector::rows(Var::constant(gather_rows(*side_[m], idx))));
        break;
      case Space::DualExact:
        out.push_back(ad::Selector::rows(ad::index_rows(gram_var(m, v), idx)));
        break;
      case Space::DualRff:
        out.push_back(ad::Selector::rows(Var::constant(gather_rows(*phi_[m], idx))));
        break;
    }
  }
  return out;
}

Var KftModel::dual_rows(std::size_t mode, std::span<const std::size_t> idx, const ParamVars& v) const {
  if (config_.space == Space::DualExact) return ad::index_rows(gram_var(mode, v), idx);
  if (config_.space == Space::DualRff) {
    return Var::constant(matmul(gather_rows(*phi_[mode], idx), *phi_t_[mode]));
  }
  throw ShapeError("dual_rows: primal space has no kernel rows");
}

void KftModel::check_batch(const IndexBatch& batch) const {
  if (batch.order() != order()) {
    throw ShapeError("batch has " + std::to_string(batch.order()) + " modes, model has " +
                     std::to_string(order()));
  }
  if (batch.size() == 0) throw ShapeError("empty batch");
  for (std::size_t m = 0; m < order(); ++m) {
    if (batch.modes[m].size() != batch.size()) throw ShapeError("ragged index batch");
    for (auto i : batch.modes[m]) {
      if (i >= config_.extents[m]) {
        throw ShapeError("index " + std::to_string(i) + " out of range for mode " +
                         std::to_string(m) + " (extent " + std::to_string(config_.extents[m]) + ")");
      }
    }
  }
}

std::vector<Var> KftModel::main_slices(const ParamVars& v, const IndexBatch& batch) const {
  std::vector<Var> slices;
  for (std::size_t k = 0; k < num_cores(); ++k) {
    slices.push_back(ad::gather_core(prepare_core(k, v.cores[k]), selectors(k, batch, v)));
  }
  return slices;
}

Var KftModel::forward(const ParamVars& v, const IndexBatch& batch) const {
  check_batch(batch);
  std::vector<Var> slices = main_slices(v, batch);
  switch (config_.variant) {
    case Variant::Vanilla:
      return ad::batched_chain(slices);
    case Variant::Wlr:
      for (std::size_t k = 0; k < num_cores(); ++k) {
        slices[k] = ad::gather_core(v.weights[k], index_selectors(groups_[k], batch)) * slices[k];
      }
      return ad::batched_chain(slices);
    case Variant::Ls: {
      std::vector<Var> scale, bias;
      for (std::size_t k = 0; k < num_cores(); ++k) {
        scale.push_back(ad::gather_core(v.scales[k], index_selectors(groups_[k], batch)));
        bias.push_back(ad::gather_core(v.biases[k], index_selectors(groups_[k], batch)));
      }
      return ad::batched_chain(scale) * ad::batched_chain(slices) + ad::batched_chain(bias);
    }
  }
  throw ShapeError("unknown variant");
}

Var KftModel::regularizer(const ParamVars& v) const {
  const double lam = config_.reg;
  Var total = Var::constant(DenseTensor::scalar(0.0));
  if (config_.space == Space::Primal) {
    for (std::size_t k = 0; k < num_cores(); ++k) {
      if (lam > 0.0) total = total + lam * ad::sum(ad::square(v.cores[k]));
      if (config_.variant == Variant::Wlr && config_.aux_reg > 0.0) {
        total = total + config_.aux_reg * ad::sum(ad::square(v.weights[k]));
      }
      if (config_.variant == Variant::Ls && lam > 0.0) {
        total = total + lam * (ad::sum(ad::square(v.scales[k])) + ad::sum(ad::square(v.biases[k])));
      }
    }
    return total;
  }
  if (lam == 0.0) return total;

  for (std::size_t k = 0; k < num_cores(); ++k) {
    const auto& modes = groups_[k];
    const Var& core = v.cores[k];
    Var kernelized = core;
    for (std::size_t i = 0; i < modes.size(); ++i) {
      const std::size_t m = modes[i];
      const Axis axis(static_cast<std::ptrdiff_t>(i + 1));
      if (!side_[m]) continue;
      if (config_.space == Space::DualExact) {
        kernelized = ad::mode_product(kernelized, gram_var(m, v), axis);
      } else {
        kernelized = ad::mode_product(kernelized, Var::constant(*phi_t_[m]), axis);
        kernelized = ad::mode_product(kernelized, Var::constant(*phi_[m]), axis);
      }
    }
    switch (config_.variant) {
      case Variant::Vanilla:
        total = total + lam * ad::sum(kernelized * core);
        break;
      case Variant::Wlr: {
        Var spread = ad::square(v.weights[k]);
        for (std::size_t i = 0; i < modes.size(); ++i) {
          const std::size_t n = config_.extents[modes[i]];
          spread = ad::mode_product(spread, Var::constant(DenseTensor(Shape{n, n}, 1.0)),
                                    Axis(static_cast<std::ptrdiff_t>(i + 1)));
        }
        total = total + lam * ad::sum(kernelized * (spread * core));
        break;
      }
      case Variant::Ls:
        total = total + lam * (ad::sum(ad::square(v.scales[k])) + ad::sum(kernelized * core) +
                               ad::sum(ad::square(v.biases[k])));
        break;
    }
  }
  return total;
}

ObjectiveParts KftModel::objective(const ParamVars& v, const IndexBatch& batch,
                                   std::span<const double> targets, std::size_t n_total) const {
  if (batch.size() == 0) throw ShapeError("objective: empty batch");
  if (targets.size() != batch.size()) throw ShapeError("objective: target count differs from batch");
  if (n_total < batch.size()) throw ShapeError("objective: n_total smaller than the batch");
  const double nb = static_cast<double>(batch.size());
  Var pred = forward(v, batch);
  Var resid = pred - Var::constant(DenseTensor(Shape{targets.size()},
                                               std::vector<double>(targets.begin(), targets.end())));
  Var mse = (1.0 / nb) * ad::sum(ad::square(resid));
  Var reg = regularizer(v);
  ObjectiveParts out;
  out.mse = mse.item();
  out.reg = reg.item();
  out.total = mse + (nb / static_cast<double>(n_total)) * reg;
  return out;
}

std::vector<double> KftModel::predict(const IndexBatch& batch) const {
  const ParamVars v = vars();
  std::vector<double> out;
  out.reserve(batch.size());
  constexpr std::size_t chunk = 4096;
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t end = std::min(batch.size(), start + chunk);
    IndexBatch part;
    for (const auto& col : batch.modes) {
      part.modes.emplace_back(col.begin() + static_cast<std::ptrdiff_t>(start),
                              col.begin() + static_cast<std::ptrdiff_t>(end));
    }
    const Var pred = forward(v, part);
    out.insert(out.end(), pred.value().data().begin(), pred.value().data().end());
  }
  return out;
}

double KftModel::regularizer_value() const { return regularizer(vars()).item(); }

}  // namespace kft
