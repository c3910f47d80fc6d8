// SPDX-License-Identifier: Apache-2.0
#include "peftref/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "peftref/errors.hpp"

namespace peftref {

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    if (shape.size() == 1) out << ',';
    out << ')';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->shape = {0}; }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }
Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw RankError("at(row, col) needs a matrix, got " + shape_str(shape()));
    return impl_->data[row * impl_->shape[1] + col];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    if (!value) impl_->grad.clear();
}

std::vector<double> Tensor::grad() const {
    if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_->requires_grad) impl_->grad.assign(numel(), 0.0);
}

Tensor Tensor::clone() const {
    return from_data(impl_->shape, impl_->data, impl_->requires_grad);
}

Tensor Tensor::detach() const { return from_data(impl_->shape, impl_->data, false); }

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

namespace {
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
}
}  // namespace

std::uint64_t hash_tensors(std::span<const NamedTensor> tensors) {
    std::uint64_t h = kFnvOffset;
    for (const auto& nt : tensors) {
        fnv_mix(h, nt.name.data(), nt.name.size());
        for (auto extent : nt.tensor.shape()) {
            const std::uint64_t e = extent;
            fnv_mix(h, &e, sizeof e);
        }
        fnv_mix(h, nt.tensor.data().data(), nt.tensor.numel() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
Tape::Scope::~Scope() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(Record record) { records_.push_back(std::move(record)); }

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (records_.empty()) throw ContractError("backward() on an empty tape");

    std::unordered_set<detail::TensorImpl*> seen;
    auto reset = [&](const std::shared_ptr<detail::TensorImpl>& t) {
        if (t->requires_grad && seen.insert(t.get()).second) t->grad.assign(t->data.size(), 0.0);
    };
    for (const auto& r : records_) {
        for (const auto& in : r.inputs) reset(in);
        reset(r.output);
    }
    auto& root = *loss.impl();
    root.ensure_grad();
    root.grad[0] = 1.0;

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
}

Tensor Rng::uniform_tensor(Shape shape, double bound, bool requires_grad) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

}  // namespace peftref
