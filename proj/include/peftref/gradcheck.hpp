// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>

#include "peftref/tensor.hpp"

namespace peftref {

// Builds a scalar loss from the current values of the checked tensors.
using ScalarFn = std::function<Tensor()>;

// Compares the tape gradient of `f` against central differences with step
// `eps` and returns max |g_analytic - g_fd| / max(1, |g_fd|) over every
// coordinate of every tensor in `xs`. The tensors are perturbed in place and
// restored. Throws ContractError if f is not deterministic at the base point.
double finite_diff_check(const ScalarFn& f, std::span<const Tensor> xs, double eps = 1e-5);
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace peftref
