#include "kft/autodiff.hpp"

#include <cmath>
#include <unordered_set>

#include "kft/errors.hpp"
#include "kft/tensor_ops.hpp"

namespace kft::ad {

void Node::accumulate(const DenseTensor& g) {
  if (!has_grad) {
    grad = g;
    has_grad = true;
    return;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

DenseTensor& Node::grad_buffer() {
  if (!has_grad) {
    grad = DenseTensor(value.shape());
    has_grad = true;
  }
  return grad;
}

Var Var::constant(DenseTensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(DenseTensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

DenseTensor Var::grad() const {
  if (node_->has_grad) return node_->grad;
  return DenseTensor(node_->value.shape());
}

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(shape()));
  return value()[0];
}

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must hold a single value");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(DenseTensor(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->has_grad && node->backward) node->backward(node->grad);
  }
}

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make(DenseTensor value, std::vector<NodePtr> parents,
         std::function<void(const DenseTensor&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  NodePtr na = a.node(), nb = b.node();
  return make(kft::add(a.value(), b.value()), {na, nb}, [na, nb](const DenseTensor& g) {
    if (na->requires_grad) na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  NodePtr na = a.node(), nb = b.node();
  return make(subtract(a.value(), b.value()), {na, nb}, [na, nb](const DenseTensor& g) {
    if (na->requires_grad) na->accumulate(g);
    if (nb->requires_grad) nb->accumulate(scaled(g, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  NodePtr na = a.node(), nb = b.node();
  return make(hadamard(a.value(), b.value()), {na, nb}, [na, nb](const DenseTensor& g) {
    if (na->requires_grad) na->accumulate(hadamard(g, nb->value));
    if (nb->requires_grad) nb->accumulate(hadamard(g, na->value));
  });
}

Var scale(const Var& a, double factor) {
  NodePtr na = a.node();
  return make(scaled(a.value(), factor), {na},
              [na, factor](const DenseTensor& g) { na->accumulate(scaled(g, factor)); });
}

Var add_scalar(const Var& a, double offset) {
  NodePtr na = a.node();
  DenseTensor out = a.value();
  for (auto& v : out.data()) v += offset;
  return make(std::move(out), {na}, [na](const DenseTensor& g) { na->accumulate(g); });
}

Var square(const Var& a) {
  NodePtr na = a.node();
  return make(squared(a.value()), {na}, [na](const DenseTensor& g) {
    DenseTensor d = hadamard(g, na->value);
    na->accumulate(scaled(d, 2.0));
  });
}

Var exp(const Var& a) {
  NodePtr na = a.node();
  DenseTensor out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  auto node_out = std::make_shared<DenseTensor>(out);
  return make(std::move(out), {na},
              [na, node_out](const DenseTensor& g) { na->accumulate(hadamard(g, *node_out)); });
}

Var log(const Var& a) {
  NodePtr na = a.node();
  DenseTensor out = a.value();
  for (auto& v : out.data()) {
    if (!(v > 0.0)) throw NumericalError("log of a non-positive value");
    v = std::log(v);
  }
  return make(std::move(out), {na}, [na](const DenseTensor& g) {
    DenseTensor d = g;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] /= na->value[i];
    na->accumulate(d);
  });
}

Var sum(const Var& a) {
  NodePtr na = a.node();
  return make(DenseTensor::scalar(kft::sum(a.value())), {na}, [na](const DenseTensor& g) {
    na->accumulate(DenseTensor(na->value.shape(), g[0]));
  });
}

Var reshape(const Var& a, Shape shape) {
  NodePtr na = a.node();
  return make(a.value().reshaped(std::move(shape)), {na},
              [na](const DenseTensor& g) { na->accumulate(g.reshaped(na->value.shape())); });
}

Var mode_product(const Var& x, const Var& u, Axis axis) {
  NodePtr nx = x.node(), nu = u.node();
  const std::size_t n = axis.resolve(x.value().order());
  DenseTensor out = kft::mode_product(x.value(), u.value(), axis);
  return make(std::move(out), {nx, nu}, [nx, nu, n](const DenseTensor& g) {
    const DenseTensor& xv = nx->value;
    const DenseTensor& uv = nu->value;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < n; ++i) outer *= xv.extent(i);
    for (std::size_t i = n + 1; i < xv.order(); ++i) inner *= xv.extent(i);
    const std::size_t mid = xv.extent(n);
    // Operator as (new extent) × mid, matching the forward product.
    RowMatrix op;
    if (uv.order() == 2) {
      op = uv.as_matrix();
    } else {
      op = ConstMap(uv.data().data(), ix(mid), ix(uv.size() / mid)).transpose();
    }
    const std::size_t j = static_cast<std::size_t>(op.rows());
    if (nx->requires_grad) {
      DenseTensor& gx = nx->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        ConstMap go(g.data().data() + o * j * inner, ix(j), ix(inner));
        MutMap gxo(gx.data().data() + o * mid * inner, ix(mid), ix(inner));
        gxo.noalias() += op.transpose() * go;
      }
    }
    if (nu->requires_grad) {
      RowMatrix gop = RowMatrix::Zero(ix(j), ix(mid));
      for (std::size_t o = 0; o < outer; ++o) {
        ConstMap go(g.data().data() + o * j * inner, ix(j), ix(inner));
        ConstMap xo(xv.data().data() + o * mid * inner, ix(mid), ix(inner));
        gop.noalias() += go * xo.transpose();
      }
      DenseTensor& gu = nu->grad_buffer();
      if (uv.order() == 2) {
        gu.as_matrix() += gop;
      } else {
        MutMap(gu.data().data(), ix(mid), ix(j)) += gop.transpose();
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  NodePtr na = a.node(), nb = b.node();
  return make(kft::matmul(a.value(), b.value()), {na, nb}, [na, nb](const DenseTensor& g) {
    if (na->requires_grad) na->grad_buffer().as_matrix() += g.as_matrix() * nb->value.as_matrix().transpose();
    if (nb->requires_grad) nb->grad_buffer().as_matrix() += na->value.as_matrix().transpose() * g.as_matrix();
  });
}

Var transpose(const Var& a) {
  NodePtr na = a.node();
  return make(a.value().transposed(), {na},
              [na](const DenseTensor& g) { na->accumulate(g.transposed()); });
}

Var tril(const Var& a) {
  NodePtr na = a.node();
  DenseTensor out = a.value();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < c; ++j) out(i, j) = 0.0;
  return make(std::move(out), {na}, [na, r, c](const DenseTensor& g) {
    DenseTensor d = g;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = i + 1; j < c; ++j) d(i, j) = 0.0;
    na->accumulate(d);
  });
}

Var diag_embed(const Var& v) {
  if (v.value().order() != 1) throw ShapeError("diag_embed: expects a vector");
  NodePtr nv = v.node();
  const std::size_t n = v.value().size();
  DenseTensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = v.value()[i];
  return make(std::move(out), {nv}, [nv, n](const DenseTensor& g) {
    DenseTensor d(Shape{n});
    for (std::size_t i = 0; i < n; ++i) d[i] = g(i, i);
    nv->accumulate(d);
  });
}

Var diag_part(const Var& a) {
  const std::size_t n = a.value().rows();
  if (a.value().cols() != n) throw ShapeError("diag_part: expects a square matrix");
  NodePtr na = a.node();
  DenseTensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()(i, i);
  return make(std::move(out), {na}, [na, n](const DenseTensor& g) {
    DenseTensor& d = na->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) d(i, i) += g[i];
  });
}

Var row_sums(const Var& a) {
  NodePtr na = a.node();
  const std::size_t r = a.value().rows(), c = a.value().cols();
  DenseTensor out(Shape{r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.value()(i, j);
  return make(std::move(out), {na}, [na, r, c](const DenseTensor& g) {
    DenseTensor& d = na->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d(i, j) += g[i];
  });
}

Var scale_rows(const Var& a, const Var& v) {
  const std::size_t r = a.value().rows(), c = a.value().cols();
  if (v.value().order() != 1 || v.value().size() != r) {
    throw ShapeError("scale_rows: vector length must equal the row count");
  }
  NodePtr na = a.node(), nv = v.node();
  DenseTensor out = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) *= v.value()[i];
  return make(std::move(out), {na, nv}, [na, nv, r, c](const DenseTensor& g) {
    if (na->requires_grad) {
      DenseTensor& d = na->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d(i, j) += g(i, j) * nv->value[i];
    }
    if (nv->requires_grad) {
      DenseTensor& d = nv->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i] += g(i, j) * na->value(i, j);
    }
  });
}

Var index_rows(const Var& a, std::span<const std::size_t> rows) {
  const std::size_t n = a.value().rows(), c = a.value().cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  DenseTensor out(Shape{idx.size(), c});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= n) throw ShapeError("index_rows: row " + std::to_string(idx[b]) + " out of range");
    for (std::size_t j = 0; j < c; ++j) out(b, j) = a.value()(idx[b], j);
  }
  NodePtr na = a.node();
  return make(std::move(out), {na}, [na, idx, c](const DenseTensor& g) {
    DenseTensor& d = na->grad_buffer();
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t j = 0; j < c; ++j) d(idx[b], j) += g(b, j);
  });
}

Var expand_middle(const Var& v, std::size_t left, std::size_t right) {
  if (v.value().order() != 1) throw ShapeError("expand_middle: expects a vector");
  const std::size_t nb = v.value().size();
  DenseTensor out(Shape{left, nb, right});
  for (std::size_t a = 0; a < left; ++a)
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t c = 0; c < right; ++c) out[(a * nb + b) * right + c] = v.value()[b];
  NodePtr nv = v.node();
  return make(std::move(out), {nv}, [nv, left, nb, right](const DenseTensor& g) {
    DenseTensor d(Shape{nb});
    for (std::size_t a = 0; a < left; ++a)
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t c = 0; c < right; ++c) d[b] += g[(a * nb + b) * right + c];
    nv->accumulate(d);
  });
}

std::size_t Selector::batch() const { return dense() ? weights.value().rows() : index.size(); }

namespace {

// One row of a selector as sparse (position, weight) terms.
struct Term {
  std::size_t pos;
  double weight;
};

void selector_terms(const Selector& s, std::size_t b, std::size_t extent, std::vector<Term>& out) {
  out.clear();
  if (s.dense()) {
    const DenseTensor& w = s.weights.value();
    for (std::size_t f = 0; f < extent; ++f) out.push_back({f, w(b, f)});
  } else {
    out.push_back({s.index[b], 1.0});
  }
}

}  // namespace

Var gather_core(const Var& core, const std::vector<Selector>& selectors) {
  const DenseTensor& cv = core.value();
  const std::size_t k = selectors.size();
  if (k == 0 || cv.order() != k + 2) {
    throw ShapeError("gather_core: core of shape " + shape_string(cv.shape()) + " needs " +
                     std::to_string(cv.order() >= 2 ? cv.order() - 2 : 0) + " selectors, got " +
                     std::to_string(k));
  }
  const std::size_t left = cv.extent(0), right = cv.extent(k + 1);
  std::vector<std::size_t> extents(k), strides(k);
  std::size_t middle = 1;
  for (std::size_t i = k; i-- > 0;) {
    extents[i] = cv.extent(i + 1);
    strides[i] = middle;
    middle *= extents[i];
  }
  const std::size_t nb = selectors[0].batch();
  for (std::size_t i = 0; i < k; ++i) {
    const Selector& s = selectors[i];
    if (s.batch() != nb) throw ShapeError("gather_core: selectors disagree on batch size");
    if (s.dense()) {
      if (s.weights.value().order() != 2 || s.weights.value().cols() != extents[i]) {
        throw ShapeError("gather_core: weight matrix " + shape_string(s.weights.shape()) +
                         " does not match core extent " + std::to_string(extents[i]));
      }
    } else {
      for (auto idx : s.index) {
        if (idx >= extents[i]) {
          throw ShapeError("gather_core: index " + std::to_string(idx) + " out of range " +
                           std::to_string(extents[i]));
        }
      }
    }
  }

  // Visits every (flat middle offset, per-selector term) combination for row b.
  auto for_each_combo = [k, strides](const std::vector<std::vector<Term>>& terms, auto&& visit) {
    std::vector<std::size_t> pick(k, 0);
    while (true) {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < k; ++i) offset += terms[i][pick[i]].pos * strides[i];
      visit(offset, pick);
      std::size_t i = k;
      while (i-- > 0) {
        if (++pick[i] < terms[i].size()) break;
        pick[i] = 0;
      }
      if (i == static_cast<std::size_t>(-1)) break;
    }
  };

  DenseTensor out(Shape{left, nb, right});
  std::vector<std::vector<Term>> terms(k);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < k; ++i) selector_terms(selectors[i], b, extents[i], terms[i]);
    for_each_combo(terms, [&](std::size_t offset, const std::vector<std::size_t>& pick) {
      double w = 1.0;
      for (std::size_t i = 0; i < k; ++i) w *= terms[i][pick[i]].weight;
      if (w == 0.0) return;
      for (std::size_t a = 0; a < left; ++a) {
        const double* src = cv.data().data() + (a * middle + offset) * right;
        double* dst = out.data().data() + (a * nb + b) * right;
        for (std::size_t c = 0; c < right; ++c) dst[c] += w * src[c];
      }
    });
  }

  std::vector<NodePtr> parents{core.node()};
  for (const auto& s : selectors) {
    if (s.dense()) parents.push_back(s.weights.node());
  }
  NodePtr nc = core.node();
  return make(std::move(out), parents,
              [nc, selectors, extents, strides, left, right, middle, nb, k,
               for_each_combo](const DenseTensor& g) {
    const DenseTensor& cv = nc->value;
    DenseTensor* gcore = nc->requires_grad ? &nc->grad_buffer() : nullptr;
    std::vector<DenseTensor*> gw(k, nullptr);
    for (std::size_t i = 0; i < k; ++i) {
      if (selectors[i].dense() && selectors[i].weights.requires_grad()) {
        gw[i] = &selectors[i].weights.node()->grad_buffer();
      }
    }
    std::vector<std::vector<Term>> terms(k);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t i = 0; i < k; ++i) selector_terms(selectors[i], b, extents[i], terms[i]);
      const double* gb_base = g.data().data();
      for_each_combo(terms, [&](std::size_t offset, const std::vector<std::size_t>& pick) {
        double w = 1.0;
        for (std::size_t i = 0; i < k; ++i) w *= terms[i][pick[i]].weight;
        double dot = 0.0;  // Σ_{a,c} g[a,b,c] core[a,offset,c]
        for (std::size_t a = 0; a < left; ++a) {
          const double* gb = gb_base + (a * nb + b) * right;
          const double* src = cv.data().data() + (a * middle + offset) * right;
          if (gcore && w != 0.0) {
            double* dst = gcore->data().data() + (a * middle + offset) * right;
            for (std::size_t c = 0; c < right; ++c) dst[c] += w * gb[c];
          }
          for (std::size_t c = 0; c < right; ++c) dot += gb[c] * src[c];
        }
        for (std::size_t i = 0; i < k; ++i) {
          if (!gw[i]) continue;
          double others = 1.0;
          for (std::size_t j = 0; j < k; ++j) {
            if (j != i) others *= terms[j][pick[j]].weight;
          }
          (*gw[i])(b, terms[i][pick[i]].pos) += others * dot;
        }
      });
    }
  });
}

namespace {

struct ChainDims {
  std::size_t batch = 0;
  std::vector<std::size_t> left, right;
};

ChainDims check_chain(const std::vector<Var>& slices, const char* what) {
  if (slices.empty()) throw ShapeError(std::string(what) + ": no slices");
  ChainDims d;
  d.batch = slices[0].value().order() == 3 ? slices[0].value().extent(1) : 0;
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const DenseTensor& s = slices[k].value();
    if (s.order() != 3 || s.extent(1) != d.batch) {
      throw ShapeError(std::string(what) + ": slice " + std::to_string(k) + " has shape " +
                       shape_string(s.shape()));
    }
    d.left.push_back(s.extent(0));
    d.right.push_back(s.extent(2));
    if (k > 0 && d.left[k] != d.right[k - 1]) {
      throw ShapeError(std::string(what) + ": rank mismatch at slice " + std::to_string(k));
    }
  }
  if (d.left.front() != 1 || d.right.back() != 1) {
    throw ShapeError(std::string(what) + ": boundary ranks must be 1");
  }
  return d;
}

// Slice k at batch entry b as an L_k × R_k matrix.
RowMatrix slice_at(const DenseTensor& s, std::size_t b) {
  const std::size_t l = s.extent(0), nb = s.extent(1), r = s.extent(2);
  RowMatrix m(ix(l), ix(r));
  for (std::size_t a = 0; a < l; ++a)
    for (std::size_t c = 0; c < r; ++c) m(ix(a), ix(c)) = s[(a * nb + b) * r + c];
  return m;
}

void add_slice_at(DenseTensor& s, std::size_t b, const RowMatrix& m) {
  const std::size_t l = s.extent(0), nb = s.extent(1), r = s.extent(2);
  for (std::size_t a = 0; a < l; ++a)
    for (std::size_t c = 0; c < r; ++c) s[(a * nb + b) * r + c] += m(ix(a), ix(c));
}

}  // namespace

Var batched_chain(const std::vector<Var>& slices) {
  const ChainDims dims = check_chain(slices, "batched_chain");
  const std::size_t nb = dims.batch;
  DenseTensor out(Shape{nb});
  for (std::size_t b = 0; b < nb; ++b) {
    RowMatrix x = slice_at(slices[0].value(), b);
    for (std::size_t k = 1; k < slices.size(); ++k) x = x * slice_at(slices[k].value(), b);
    out[b] = x(0, 0);
  }
  std::vector<NodePtr> parents;
  for (const auto& s : slices) parents.push_back(s.node());
  return make(std::move(out), parents, [parents, nb](const DenseTensor& g) {
    const std::size_t p = parents.size();
    for (std::size_t b = 0; b < nb; ++b) {
      std::vector<RowMatrix> mats(p);
      for (std::size_t k = 0; k < p; ++k) mats[k] = slice_at(parents[k]->value, b);
      // prefix[k] = mats[0..k-1] (1 × L_k); suffix[k] = mats[k+1..] (R_k × 1).
      std::vector<RowMatrix> prefix(p), suffix(p);
      prefix[0] = RowMatrix::Ones(1, 1);
      for (std::size_t k = 1; k < p; ++k) prefix[k] = prefix[k - 1] * mats[k - 1];
      suffix[p - 1] = RowMatrix::Ones(1, 1);
      for (std::size_t k = p - 1; k-- > 0;) suffix[k] = mats[k + 1] * suffix[k + 1];
      for (std::size_t k = 0; k < p; ++k) {
        if (!parents[k]->requires_grad) continue;
        RowMatrix gk = g[b] * prefix[k].transpose() * suffix[k].transpose();
        add_slice_at(parents[k]->grad_buffer(), b, gk);
      }
    }
  });
}

Var second_moment_chain(const std::vector<Var>& means, const std::vector<Var>& variances) {
  const ChainDims dims = check_chain(means, "second_moment_chain");
  if (variances.size() != means.size()) {
    throw ShapeError("second_moment_chain: mean and variance lists differ in length");
  }
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (variances[k].shape() != means[k].shape()) {
      throw ShapeError("second_moment_chain: variance slice " + std::to_string(k) +
                       " does not match its mean");
    }
  }
  const std::size_t nb = dims.batch, p = means.size();

  // X_k = mᵀ X_{k-1} m + Diag(dᵀ diag X_{k-1}), starting from X_0 = [1].
  auto step = [](const RowMatrix& x, const RowMatrix& m, const RowMatrix& d) {
    RowMatrix next = m.transpose() * x * m;
    next.diagonal() += d.transpose() * x.diagonal();
    return next;
  };

  DenseTensor out(Shape{nb});
  for (std::size_t b = 0; b < nb; ++b) {
    RowMatrix x = RowMatrix::Ones(1, 1);
    for (std::size_t k = 0; k < p; ++k) {
      x = step(x, slice_at(means[k].value(), b), slice_at(variances[k].value(), b));
    }
    out[b] = x(0, 0);
  }

  std::vector<NodePtr> mean_nodes, var_nodes, parents;
  for (std::size_t k = 0; k < p; ++k) {
    mean_nodes.push_back(means[k].node());
    var_nodes.push_back(variances[k].node());
    parents.push_back(means[k].node());
    parents.push_back(variances[k].node());
  }
  return make(std::move(out), parents, [mean_nodes, var_nodes, nb, p, step](const DenseTensor& g) {
    for (std::size_t b = 0; b < nb; ++b) {
      std::vector<RowMatrix> m(p), d(p);
      for (std::size_t k = 0; k < p; ++k) {
        m[k] = slice_at(mean_nodes[k]->value, b);
        d[k] = slice_at(var_nodes[k]->value, b);
      }
      // before[k] = X_{k} entering slice k; after[k] = adjoint Y leaving slice k.
      std::vector<RowMatrix> before(p), after(p);
      before[0] = RowMatrix::Ones(1, 1);
      for (std::size_t k = 1; k < p; ++k) before[k] = step(before[k - 1], m[k - 1], d[k - 1]);
      after[p - 1] = RowMatrix::Constant(1, 1, g[b]);
      for (std::size_t k = p - 1; k-- > 0;) {
        const RowMatrix& y = after[k + 1];
        RowMatrix prev = m[k + 1] * y * m[k + 1].transpose();
        prev.diagonal() += d[k + 1] * y.diagonal();
        after[k] = prev;
      }
      for (std::size_t k = 0; k < p; ++k) {
        if (mean_nodes[k]->requires_grad) {
          RowMatrix gm = 2.0 * before[k] * m[k] * after[k];
          add_slice_at(mean_nodes[k]->grad_buffer(), b, gm);
        }
        if (var_nodes[k]->requires_grad) {
          RowMatrix gd = before[k].diagonal() * after[k].diagonal().transpose();
          add_slice_at(var_nodes[k]->grad_buffer(), b, gd);
        }
      }
    }
  });
}

Var kernel_gram(const DenseTensor& sqdist, const Var& log_lengthscale, KernelKind kind) {
  if (log_lengthscale.value().size() != 1) throw ShapeError("kernel_gram: lengthscale must be scalar");
  const double ls = std::exp(log_lengthscale.item());
  DenseTensor out = gram_from_sqdist(sqdist, KernelParams{kind, ls});
  NodePtr nl = log_lengthscale.node();
  auto dist = std::make_shared<DenseTensor>(sqdist);
  return make(std::move(out), {nl}, [nl, dist, kind, ls](const DenseTensor& g) {
    double acc = 0.0;
    for (std::size_t i = 0; i < dist->size(); ++i) {
      acc += g[i] * kernel_dlog_lengthscale(kind, std::sqrt(std::max((*dist)[i], 0.0)), ls);
    }
    nl->accumulate(DenseTensor::scalar(acc));
  });
}

Var logdet_spd(const Var& a) {
  const DenseTensor& av = a.value();
  if (av.order() != 2 || av.rows() != av.cols()) throw ShapeError("logdet_spd: square matrix required");
  Eigen::LLT<RowMatrix> llt(av.as_matrix());
  if (llt.info() != Eigen::Success) throw NumericalError("logdet_spd: matrix is not positive definite");
  const Eigen::VectorXd diag = llt.matrixL().toDenseMatrix().diagonal();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (!(diag(i) > 0.0)) throw NumericalError("logdet_spd: matrix is not positive definite");
    logdet += 2.0 * std::log(diag(i));
  }
  NodePtr na = a.node();
  if (!na->requires_grad) return Var::constant(DenseTensor::scalar(logdet));
  RowMatrix inverse = llt.solve(RowMatrix::Identity(av.rows(), av.rows()));
  auto inv = std::make_shared<DenseTensor>(DenseTensor::from_eigen(inverse));
  return make(DenseTensor::scalar(logdet), {na},
              [na, inv](const DenseTensor& g) { na->accumulate(scaled(*inv, g[0])); });
}

}  // namespace kft::ad
