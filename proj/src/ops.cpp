// SPDX-License-Identifier: Apache-2.0
#include "peftref/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "peftref/errors.hpp"

namespace peftref {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

// Returns the active tape when the result of an op over `inputs` must be
// recorded, nullptr otherwise.
Tape* tracking(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = Tape::current();
    if (!tape) return nullptr;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return tape;
    }
    return nullptr;
}

Tensor result(Shape shape, std::vector<double> values) {
    return Tensor::from_data(std::move(shape), std::move(values));
}

void push(Tape* tape, const char* op, std::vector<ImplPtr> inputs, Tensor& out,
          std::function<void()> backward) {
    out.set_requires_grad(true);
    tape->record({op, std::move(inputs), out.impl(), std::move(backward)});
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw RankError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
    }
}

std::size_t last_dim(const char* op, const Tensor& x) {
    if (x.rank() == 0) throw RankError(std::string(op) + ": scalar-rank input");
    return x.shape().back();
}

// Applies an elementwise unary map with derivative `dfdx(x, y)`.
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F f, D dfdx) {
    std::vector<double> y(x.numel());
    const auto xs = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
    Tensor out = result(x.shape(), std::move(y));
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl();
        ImplPtr oi = out.impl();
        push(tape, op, {xi}, out, [xi, oi, dfdx] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->data.size(); ++i) {
                xi->grad[i] += oi->grad[i] * dfdx(xi->data[i], oi->data[i]);
            }
        });
    }
    return out;
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> c(m * n, 0.0);
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * B[p * n + j];
        }
    }
    Tensor out = result({m, n}, std::move(c));
    if (auto* tape = tracking({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        push(tape, "matmul", {ai, bi}, out, [ai, bi, oi, m, k, n] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bi->data[p * n + j];
                        ai->grad[i * k + p] += acc;
                    }
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = ai->data[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) bi->grad[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> t(m * n);
    const auto A = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = A[i * n + j];
    }
    Tensor out = result({n, m}, std::move(t));
    if (auto* tape = tracking({&a})) {
        ImplPtr ai = a.impl(), oi = out.impl();
        push(tape, "transpose", {ai}, out, [ai, oi, m, n] {
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += oi->grad[j * m + i];
            }
        });
    }
    return out;
}

Tensor kron(const Tensor& a, const Tensor& b) {
    require_matrix("kron", a);
    require_matrix("kron", b);
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(0), s = b.dim(1);
    const std::size_t cols = q * s;
    std::vector<double> out_values(p * r * cols);
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j)
            for (std::size_t k = 0; k < r; ++k)
                for (std::size_t l = 0; l < s; ++l)
                    out_values[(i * r + k) * cols + (j * s + l)] = A[i * q + j] * B[k * s + l];
    Tensor out = result({p * r, cols}, std::move(out_values));
    if (auto* tape = tracking({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        push(tape, "kron", {ai, bi}, out, [ai, bi, oi, p, q, r, s, cols] {
            const auto& g = oi->grad;
            if (ai->requires_grad) ai->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j)
                    for (std::size_t k = 0; k < r; ++k)
                        for (std::size_t l = 0; l < s; ++l) {
                            const double gv = g[(i * r + k) * cols + (j * s + l)];
                            if (ai->requires_grad) ai->grad[i * q + j] += gv * bi->data[k * s + l];
                            if (bi->requires_grad) bi->grad[k * s + l] += gv * ai->data[i * q + j];
                        }
        });
    }
    return out;
}

namespace {
template <typename F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, double sign_b, bool product) {
    require_same_shape(op, a, b);
    std::vector<double> y(a.numel());
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(A[i], B[i]);
    Tensor out = result(a.shape(), std::move(y));
    if (auto* tape = tracking({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
        push(tape, op, {ai, bi}, out, [ai, bi, oi, sign_b, product] {
            const auto& g = oi->grad;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += product ? g[i] * bi->data[i] : g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    bi->grad[i] += product ? g[i] * ai->data[i] : sign_b * g[i];
            }
        });
    }
    return out;
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary("add", a, b, [](double x, double y) { return x + y; }, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; }, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; }, 1.0, true);
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return x * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = last_dim("add_bias", x);
    if (bias.rank() != 1 || bias.dim(0) != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                             shape_str(x.shape()));
    }
    std::vector<double> y(x.data().begin(), x.data().end());
    const auto bv = bias.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % n];
    Tensor out = result(x.shape(), std::move(y));
    if (auto* tape = tracking({&x, &bias})) {
        ImplPtr xi = x.impl(), bi = bias.impl(), oi = out.impl();
        push(tape, "add_bias", {xi, bi}, out, [xi, bi, oi, n] {
            const auto& g = oi->grad;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i % n] += g[i];
            }
        });
    }
    return out;
}

Tensor rescale_last_axis(const Tensor& x, const Tensor& v) {
    const std::size_t n = last_dim("rescale_last_axis", x);
    if (v.rank() != 1 || v.dim(0) != n) {
        throw DimensionError("rescale_last_axis: vector " + shape_str(v.shape()) +
                             " does not match last axis of " + shape_str(x.shape()));
    }
    std::vector<double> y(x.numel());
    const auto xs = x.data();
    const auto vs = v.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * vs[i % n];
    Tensor out = result(x.shape(), std::move(y));
    if (auto* tape = tracking({&x, &v})) {
        ImplPtr xi = x.impl(), vi = v.impl(), oi = out.impl();
        push(tape, "rescale_last_axis", {xi, vi}, out, [xi, vi, oi, n] {
            const auto& g = oi->grad;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i] * vi->data[i % n];
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) vi->grad[i % n] += g[i] * xi->data[i];
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary(
        "gelu", x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
        [](double v, double) {
            const double t = std::tanh(c * (v + k * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
        });
}

Tensor tanh(const Tensor& x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); },
                 [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x) {
    const std::size_t n = last_dim("softmax", x);
    if (n == 0 || x.numel() == 0) throw DomainError("softmax over an empty axis, shape " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / n;
    std::vector<double> y(x.numel());
    const auto xs = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xs.data() + r * n;
        double* o = y.data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= total;
    }
    Tensor out = result(x.shape(), std::move(y));
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl(), oi = out.impl();
        push(tape, "softmax", {xi}, out, [xi, oi, n, rows] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = oi->data.data() + r * n;
                const double* gr = oi->grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < n; ++j) xi->grad[r * n + j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
    const std::size_t n = last_dim("layer_norm", x);
    if (n == 0) throw DomainError("layer_norm over an empty axis");
    const std::size_t rows = x.numel() / n;
    std::vector<double> y(x.numel());
    std::vector<double> inv_std(rows);
    const auto xs = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xs.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += in[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] = (in[j] - mu) * inv_std[r];
    }
    Tensor out = result(x.shape(), std::move(y));
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl(), oi = out.impl();
        push(tape, "layer_norm", {xi}, out, [xi, oi, n, rows, inv_std = std::move(inv_std)] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const double dn = static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = oi->data.data() + r * n;
                const double* gr = oi->grad.data() + r * n;
                double g_mean = 0.0, gy_mean = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    g_mean += gr[j];
                    gy_mean += gr[j] * yr[j];
                }
                g_mean /= dn;
                gy_mean /= dn;
                for (std::size_t j = 0; j < n; ++j)
                    xi->grad[r * n + j] += inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
            }
        });
    }
    return out;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw IndexError("concat axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) {
            throw DimensionError("concat along axis " + std::to_string(axis) + ": " + shape_str(first) +
                                 " vs " + shape_str(s));
        }
        out_shape[axis] += s[axis];
    }
    const AxisSplit out_split = split_at(out_shape, axis);
    std::vector<double> y(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const AxisSplit s = split_at(p.shape(), axis);
        const std::size_t block = s.extent * s.inner;
        const auto src = p.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(src.data() + o * block, block,
                        y.data() + o * out_split.extent * out_split.inner + offset * out_split.inner);
        }
        offset += s.extent;
    }
    Tensor out = result(out_shape, std::move(y));

    Tape* tape = Tape::current();
    const bool any_grad =
        std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (tape && any_grad) {
        std::vector<ImplPtr> inputs;
        for (const auto& p : parts) inputs.push_back(p.impl());
        ImplPtr oi = out.impl();
        push(tape, "concat", inputs, out, [inputs, oi, offsets, axis, out_split] {
            for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
                const auto& in = inputs[idx];
                if (!in->requires_grad) continue;
                in->ensure_grad();
                const AxisSplit s = split_at(in->shape, axis);
                const std::size_t block = s.extent * s.inner;
                for (std::size_t o = 0; o < s.outer; ++o) {
                    const double* g = oi->grad.data() + o * out_split.extent * out_split.inner +
                                      offsets[idx] * out_split.inner;
                    double* dst = in->grad.data() + o * block;
                    for (std::size_t j = 0; j < block; ++j) dst[j] += g[j];
                }
            }
        });
    }
    return out;
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank()) {
        throw IndexError("slice axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    if (begin > end || end > x.dim(axis)) {
        throw IndexError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    const std::size_t block = (end - begin) * s.inner;
    std::vector<double> y(s.outer * block);
    const auto src = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(src.data() + o * s.extent * s.inner + begin * s.inner, block, y.data() + o * block);
    }
    Tensor out = result(out_shape, std::move(y));
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl(), oi = out.impl();
        push(tape, "slice", {xi}, out, [xi, oi, s, begin, block] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                double* dst = xi->grad.data() + o * s.extent * s.inner + begin * s.inner;
                const double* g = oi->grad.data() + o * block;
                for (std::size_t j = 0; j < block; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor out = result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl(), oi = out.impl();
        push(tape, "reshape", {xi}, out, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (auto* tape = tracking({&x})) {
        ImplPtr xi = x.impl(), oi = out.impl();
        push(tape, "sum", {xi}, out, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (auto& g : xi->grad) g += oi->grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DomainError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_matrix("embedding", table);
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<double> y(ids.size() * d);
    const auto t = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
    }
    Tensor out = result({ids.size(), d}, std::move(y));
    if (auto* tape = tracking({&table})) {
        ImplPtr ti = table.impl(), oi = out.impl();
        std::vector<int> id_copy(ids.begin(), ids.end());
        push(tape, "embedding", {ti}, out, [ti, oi, d, id_copy = std::move(id_copy)] {
            if (!ti->requires_grad) return;
            ti->ensure_grad();
            for (std::size_t i = 0; i < id_copy.size(); ++i) {
                double* dst = ti->grad.data() + static_cast<std::size_t>(id_copy[i]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += oi->grad[i * d + j];
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    require_matrix("cross_entropy", logits);
    const std::size_t m = logits.dim(0), v = logits.dim(1);
    if (targets.size() != m) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             shape_str(logits.shape()) + " logits");
    }
    if (m == 0 || v == 0) throw DomainError("cross_entropy over empty logits");
    std::vector<double> probs(m * v);
    double loss = 0.0;
    const auto x = logits.data();
    for (std::size_t i = 0; i < m; ++i) {
        const int t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("cross_entropy target " + std::to_string(t) + " outside " + std::to_string(v) +
                             " classes");
        }
        const double* row = x.data() + i * v;
        const double mx = *std::max_element(row, row + v);
        double total = 0.0;
        for (std::size_t j = 0; j < v; ++j) total += (probs[i * v + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= total;
        loss += std::log(total) + mx - row[t];
    }
    loss /= static_cast<double>(m);
    Tensor out = Tensor::scalar(loss);
    if (auto* tape = tracking({&logits})) {
        ImplPtr li = logits.impl(), oi = out.impl();
        std::vector<int> tgt(targets.begin(), targets.end());
        push(tape, "cross_entropy", {li}, out, [li, oi, m, v, probs = std::move(probs), tgt = std::move(tgt)] {
            if (!li->requires_grad) return;
            li->ensure_grad();
            const double g = oi->grad[0] / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < v; ++j) {
                    const double onehot = static_cast<std::size_t>(tgt[i]) == j ? 1.0 : 0.0;
                    li->grad[i * v + j] += g * (probs[i * v + j] - onehot);
                }
            }
        });
    }
    return out;
}

}  // namespace peftref
