#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "saessv/graph.hpp"

namespace saessv::nd {

// Matrix product; rank-1 operands act as 1×n rows.
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise binary ops. `b` either matches `a` or is a single row
// (1×n or length-n) broadcast over every row of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var scale(Var a, double factor);
Var neg(Var a);
Var relu(Var a);
Var exp(Var a);
// Throws DomainError on non-positive input.
Var log(Var a);
Var square(Var a);
Var abs(Var a);

Var softmax_rows(Var a);
// Softmax over each row of a square score matrix with entries above the
// diagonal masked out.
Var causal_softmax_rows(Var scores);

Var sum(Var a);
Var mean(Var a);
// Mean over rows: m×n -> 1×n.
Var mean_rows(Var a);

Var gather_rows(Var table, std::span<const std::size_t> ids);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
// Dense 1×size row with values[i] placed at indices[i]; zero elsewhere.
Var scatter(Var values, std::span<const std::size_t> indices, std::size_t size);

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
// Mean token cross-entropy of logits rows against integer targets.
Var cross_entropy(Var logits, std::span<const std::size_t> targets);

// Plain (no-graph) kernels shared by the inference paths.
namespace kernel {
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_at_b(const Tensor& a, const Tensor& b, Tensor& out);  // aᵀ·b
void matmul_a_bt(const Tensor& a, const Tensor& b, Tensor& out);  // a·bᵀ
void softmax_inplace(std::span<double> row);
}  // namespace kernel

}  // namespace saessv::nd
