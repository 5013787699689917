#pragma once

#include <cstddef>
#include <vector>

#include "sparseadapter/autodiff.hpp"

// Primitive differentiable ops. Every backward rule is expressed with these
// same ops, so gradients can be differentiated again (Hessian-vector products).
// "Rows" means all leading axes flattened; the last axis is the feature axis.
namespace sparseadapter::ops {

// Matrix product of rank-2 operands, or batched over the leading axis of rank-3 operands.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
// x times a single-element Var.
Var mul_scalar(const Var& x, const Var& s);

// x + b with b broadcast over rows; b has shape (cols).
Var add_rowvec(const Var& x, const Var& b);
// x * g with g broadcast over rows.
Var mul_rowvec(const Var& x, const Var& g);
// (..., d) -> (d)
Var sum_rows(const Var& x);
// (d) -> shape, repeating over rows
Var broadcast_rows(const Var& v, const Shape& shape);
// (..., d) -> (..., 1)
Var row_sum(const Var& x);
Var row_mean(const Var& x);
// (..., 1) -> (..., d)
Var broadcast_last(const Var& x, std::size_t d);

Var pow_scalar(const Var& x, double p);
Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);

// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(const Var& x);
// First and second derivatives of gelu, elementwise. Used by the backward rules.
Var gelu_grad(const Var& x);
Var gelu_grad2(const Var& x);

// Softmax over the last axis, max-shifted.
Var softmax_last(const Var& x);
// Mean cross-entropy of (N, C) logits against labels; log-sum-exp stabilized. Returns shape (1).
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Sum of all elements, shape (1).
Var sum_all(const Var& x);
// Single-element Var broadcast to shape.
Var fill(const Var& s, const Shape& shape);

Var reshape(const Var& x, const Shape& shape);

// (B*T, H*dh) -> (B*H, T, dh) and back.
Var split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);
Var merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);

// Row lookup table[ids] -> (n, d), and its adjoint.
Var gather_rows(const Var& table, const std::vector<std::size_t>& ids);
Var scatter_add_rows(const Var& x, const std::vector<std::size_t>& ids, std::size_t n_rows);

// (H, P, k) -> (B*H, P, k) by repeating over batch, and its adjoint.
Var tile_batch(const Var& x, std::size_t batch);
Var sum_batch(const Var& x, std::size_t batch);

// Rank-3 ops along the middle axis.
Var concat_mid(const Var& a, const Var& b);
Var slice_mid(const Var& x, std::size_t start, std::size_t len);
Var pad_mid(const Var& x, std::size_t before, std::size_t after);

// Composite: layer norm over the last axis with affine gamma/beta.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

}  // namespace sparseadapter::ops
