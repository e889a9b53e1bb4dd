#pragma once

#include <span>
#include <vector>

#include "kft/tensor.hpp"

namespace kft {

/// n-mode product X ×_n U.
///
/// An order-2 `U` (J × I_n) contracts its columns against extent I_n of `X`
/// and the result carries J in that position. An order-3 (or higher) `U`
/// (I_n × K_1 × K_2 ...) contracts its first extent and splices the remaining
/// extents in place of I_n; this is the form used to chain tensor-train cores
/// along the last mode.
DenseTensor mode_product(const DenseTensor& x, const DenseTensor& u, Axis axis);

/// Contracts a list of tensor-train cores, each against the last mode of the
/// running product. The first core may be an n_1 × R_1 matrix or a
/// 1 × n_1 × R_1 tensor; every later core is R_{p-1} × n_p(...) × R_p. The
/// trailing unit rank (and a leading unit rank) are dropped, so the result
/// has shape n_1 × ... × n_P.
DenseTensor chain_last_mode(std::span<const DenseTensor> cores);

DenseTensor hadamard(const DenseTensor& a, const DenseTensor& b);

/// Row-wise Kronecker product: row i of the n × (a·b) result is
/// kron(A[i,:], B[i,:]).
DenseTensor transposed_khatri_rao(const DenseTensor& a, const DenseTensor& b);

/// Applies X ×_{i+1} mats[i] for every i (zero-based axes 1, 2, ...). The
/// row-major vectorisation of the result equals (⊗_i mats[i]) · vec(X) for
/// each leading slice of X.
DenseTensor kron_modes_matvec(const DenseTensor& x, std::span<const DenseTensor> mats);

/// Moves axis `axis` to the front and flattens the rest: the mode-n
/// unfolding, shape I_n × (prod of other extents, row-major order kept).
DenseTensor unfold(const DenseTensor& x, Axis axis);

/// Inverse of `unfold` for a tensor whose folded shape is `shape`.
DenseTensor fold(const DenseTensor& unfolded, Axis axis, const Shape& shape);

}  // namespace kft
