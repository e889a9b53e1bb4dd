#include "kft/tensor_ops.hpp"

#include "kft/errors.hpp"

namespace kft {

namespace {

struct Split {
  std::size_t outer = 1;  // product of extents before the axis
  std::size_t mid = 1;    // the axis extent
  std::size_t inner = 1;  // product of extents after the axis
};

Split split_at(const Shape& shape, std::size_t axis) {
  Split s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

}  // namespace

DenseTensor mode_product(const DenseTensor& x, const DenseTensor& u, Axis axis) {
  const std::size_t n = axis.resolve(x.order());
  const Split s = split_at(x.shape(), n);
  if (u.order() < 2) throw ShapeError("mode_product: U must have order >= 2");

  Shape out_shape(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(n));
  RowMatrix op;  // (new extent) × I_n
  if (u.order() == 2) {
    if (u.extent(1) != s.mid) {
      throw ShapeError("mode_product: U " + shape_string(u.shape()) + " cannot contract extent " +
                       std::to_string(s.mid) + " of " + shape_string(x.shape()));
    }
    out_shape.push_back(u.extent(0));
    op = u.as_matrix();
  } else {
    if (u.extent(0) != s.mid) {
      throw ShapeError("mode_product: leading extent of U " + shape_string(u.shape()) +
                       " does not match extent " + std::to_string(s.mid) + " of " +
                       shape_string(x.shape()));
    }
    const std::size_t k = u.size() / s.mid;
    out_shape.insert(out_shape.end(), u.shape().begin() + 1, u.shape().end());
    op = ConstMap(u.data().data(), static_cast<Eigen::Index>(s.mid), static_cast<Eigen::Index>(k))
             .transpose();
  }
  out_shape.insert(out_shape.end(), x.shape().begin() + static_cast<std::ptrdiff_t>(n) + 1,
                   x.shape().end());

  DenseTensor out(out_shape);
  const auto j = static_cast<Eigen::Index>(op.rows());
  const auto mid = static_cast<Eigen::Index>(s.mid);
  const auto inner = static_cast<Eigen::Index>(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    ConstMap xo(x.data().data() + o * s.mid * s.inner, mid, inner);
    MutMap yo(out.data().data() + o * static_cast<std::size_t>(j) * s.inner, j, inner);
    yo.noalias() = op * xo;
  }
  return out;
}

DenseTensor chain_last_mode(std::span<const DenseTensor> cores) {
  if (cores.empty()) throw ShapeError("chain_last_mode: no cores");
  DenseTensor acc = cores[0];
  bool drop_leading = false;
  if (acc.order() >= 3) {
    if (acc.extent(0) != 1) {
      throw ShapeError("chain_last_mode: first core must have unit left rank, got " +
                       shape_string(acc.shape()));
    }
    drop_leading = true;
  } else if (acc.order() != 2) {
    throw ShapeError("chain_last_mode: first core must be a matrix or order-3 tensor");
  }
  for (std::size_t p = 1; p < cores.size(); ++p) {
    const DenseTensor& core = cores[p];
    if (core.order() < 3) {
      throw ShapeError("chain_last_mode: core " + std::to_string(p) + " must have order >= 3");
    }
    if (core.extent(0) != acc.shape().back()) {
      throw ShapeError("chain_last_mode: rank mismatch at core " + std::to_string(p) + ": " +
                       std::to_string(acc.shape().back()) + " vs " +
                       std::to_string(core.extent(0)));
    }
    acc = mode_product(acc, core, Axis::last());
  }
  if (acc.shape().back() != 1) {
    throw ShapeError("chain_last_mode: trailing rank must be 1, got " +
                     std::to_string(acc.shape().back()));
  }
  Shape shape = acc.shape();
  shape.pop_back();
  if (drop_leading) shape.erase(shape.begin());
  if (shape.empty()) shape.push_back(1);
  return acc.reshaped(std::move(shape));
}

DenseTensor hadamard(const DenseTensor& a, const DenseTensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("hadamard: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  DenseTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

DenseTensor transposed_khatri_rao(const DenseTensor& a, const DenseTensor& b) {
  if (a.order() != 2 || b.order() != 2) throw ShapeError("transposed_khatri_rao: matrices only");
  if (a.rows() != b.rows()) {
    throw ShapeError("transposed_khatri_rao: row counts differ (" + std::to_string(a.rows()) +
                     " vs " + std::to_string(b.rows()) + ")");
  }
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  DenseTensor out(Shape{n, ca * cb});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < ca; ++p)
      for (std::size_t q = 0; q < cb; ++q) out(i, p * cb + q) = a(i, p) * b(i, q);
  return out;
}

DenseTensor kron_modes_matvec(const DenseTensor& x, std::span<const DenseTensor> mats) {
  if (mats.size() + 1 > x.order()) {
    throw ShapeError("kron_modes_matvec: " + std::to_string(mats.size()) +
                     " matrices for a tensor of order " + std::to_string(x.order()));
  }
  DenseTensor out = x;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (mats[i].order() != 2) throw ShapeError("kron_modes_matvec: factors must be matrices");
    out = mode_product(out, mats[i], Axis(static_cast<std::ptrdiff_t>(i + 1)));
  }
  return out;
}

DenseTensor unfold(const DenseTensor& x, Axis axis) {
  const std::size_t n = axis.resolve(x.order());
  const Split s = split_at(x.shape(), n);
  DenseTensor out(Shape{s.mid, s.outer * s.inner});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t m = 0; m < s.mid; ++m)
      for (std::size_t i = 0; i < s.inner; ++i)
        out(m, o * s.inner + i) = x[(o * s.mid + m) * s.inner + i];
  return out;
}

DenseTensor fold(const DenseTensor& unfolded, Axis axis, const Shape& shape) {
  const std::size_t n = axis.resolve(shape.size());
  const Split s = split_at(shape, n);
  if (unfolded.order() != 2 || unfolded.rows() != s.mid || unfolded.cols() != s.outer * s.inner) {
    throw ShapeError("fold: unfolded matrix does not match target shape");
  }
  DenseTensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t m = 0; m < s.mid; ++m)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * s.mid + m) * s.inner + i] = unfolded(m, o * s.inner + i);
  return out;
}

}  // namespace kft
