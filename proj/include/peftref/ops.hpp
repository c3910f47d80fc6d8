// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "peftref/tensor.hpp"

// Differentiable primitives. Each op records its backward rule on the active
// tape when at least one input requires a gradient. Binary ops require equal
// shapes: the only implicit broadcast is scale() by a scalar. Row-wise bias
// and column rescaling are separate, explicitly named ops.
namespace peftref {

// 2-D only. (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// (p x q) kron (r x s) -> (pr x qs), out[i*r+k, j*s+l] = a[i,j] * b[k,l].
Tensor kron(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// x[..., n] + bias[n] for every leading index.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[..., n] * v[n] for every leading index.
Tensor rescale_last_axis(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor tanh(const Tensor& x);

Tensor softmax(const Tensor& x);  // over the last axis
// Per-row standardization over the last axis, no affine terms.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Rows of table[V x d] selected by ids -> (ids.size() x d).
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Mean token cross-entropy of logits[m x V] against m class targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace peftref
