#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kft/kernels.hpp"
#include "kft/tensor.hpp"

/// Tensor-level reverse-mode differentiation. Each op records its inputs and a
/// closure that maps the output gradient onto the inputs; `backward` walks the
/// graph in reverse topological order. Graphs are rebuilt per evaluation.
namespace kft::ad {

struct Node {
  DenseTensor value;
  DenseTensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const DenseTensor&)> backward;

  void accumulate(const DenseTensor& g);
  DenseTensor& grad_buffer();  // zero-initialised on first use
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(DenseTensor value);
  static Var leaf(DenseTensor value, bool requires_grad = true);

  const DenseTensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  /// Gradient after `backward`; zeros when nothing reached this node.
  DenseTensor grad() const;

  /// Value of a single-element Var.
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
void backward(const Var& root);

// Elementwise and reductions.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var square(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sum(const Var& a);  // shape {1}
Var reshape(const Var& a, Shape shape);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// Linear algebra.
Var mode_product(const Var& x, const Var& u, Axis axis);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var tril(const Var& a);
Var diag_embed(const Var& v);   // n -> n×n
Var diag_part(const Var& a);    // n×n -> n
Var row_sums(const Var& a);     // n×m -> n
Var scale_rows(const Var& a, const Var& v);  // a[i,j] * v[i]
Var index_rows(const Var& a, std::span<const std::size_t> rows);

/// v (B) -> (L, B, R) with out[a,b,c] = v[b].
Var expand_middle(const Var& v, std::size_t left, std::size_t right);

/// Picks one row-space per covered mode: either a hard index per batch entry
/// or a dense B × m weight matrix.
struct Selector {
  std::vector<std::size_t> index;
  Var weights;

  static Selector indices(std::vector<std::size_t> idx) { return {std::move(idx), Var()}; }
  static Selector rows(Var w) { return {{}, std::move(w)}; }
  bool dense() const { return weights.valid(); }
  std::size_t batch() const;
};

/// out[a,b,c] = Σ_f core[a,f_1..f_k,c] Π_k w_k(b, f_k) for a core of shape
/// (L, m_1, ..., m_k, R) and one selector per middle axis.
Var gather_core(const Var& core, const std::vector<Selector>& selectors);

/// Per batch entry b, the product slice_1[:,b,:] · slice_2[:,b,:] ··· of
/// (L_k, B, R_k) slices with L_1 = R_last = 1. Output shape {B}.
Var batched_chain(const std::vector<Var>& slices);

/// E[f_b²] for the chain product f_b of independent random slices whose
/// entries have means `means[k]` and variances `variances[k]`. Output {B}.
Var second_moment_chain(const std::vector<Var>& means, const std::vector<Var>& variances);

/// K_ij = k(sqrt(sqdist_ij); exp(log_lengthscale)).
Var kernel_gram(const DenseTensor& sqdist, const Var& log_lengthscale, KernelKind kind);

/// log det of a symmetric positive-definite matrix; throws NumericalError
/// when the Cholesky factorisation fails.
Var logdet_spd(const Var& a);

}  // namespace kft::ad
