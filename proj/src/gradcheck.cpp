// SPDX-License-Identifier: Apache-2.0
#include "peftref/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "peftref/errors.hpp"

namespace peftref {

double finite_diff_check(const ScalarFn& f, std::span<const Tensor> xs, double eps) {
    if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = f();
        if (loss.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
        if (tape.empty()) {
            for (const auto& x : xs) analytic.emplace_back(x.numel(), 0.0);
        } else {
            tape.backward(loss);
            for (const auto& x : xs) analytic.push_back(x.grad());
        }
    }

    const double base_a = f().item();
    const double base_b = f().item();
    if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0) {
        throw ContractError("finite_diff_check: f is not deterministic under fixed inputs");
    }

    double worst = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        Tensor x = xs[t];
        auto values = x.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = f().item();
            values[i] = saved - eps;
            const double down = f().item();
            values[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[t][i] - fd) / std::max(1.0, std::abs(fd));
            if (!std::isfinite(err)) {
                throw NumericalError("finite_diff_check: non-finite gradient at tensor " + std::to_string(t) +
                                    " index " + std::to_string(i));
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
    const Tensor xs[] = {x};
    return finite_diff_check(f, xs, eps);
}

}  // namespace peftref
