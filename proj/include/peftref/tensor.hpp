// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace peftref {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient buffer"
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};
}  // namespace detail

// Dense row-major float64 tensor.
//
// A Tensor is a handle: copies share storage, the way parameters are shared
// between a module and the ops that read it. Use clone() for an independent
// deep copy.
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t row, std::size_t col) const;
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value);

    bool has_grad() const { return !impl_->grad.empty(); }
    // Gradient buffer; all zeros when no gradient has been accumulated.
    std::vector<double> grad() const;
    void zero_grad();

    Tensor clone() const;
    Tensor detach() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
    int layer = -1;  // -1 for tensors that do not belong to a transformer layer
};

// Bit-exact equality of shape and values.
bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// FNV-1a over the raw bytes of shapes and values, in list order.
std::uint64_t hash_tensors(std::span<const NamedTensor> tensors);

// Define-by-run record of executed primitives.
//
// Ops record onto the tape made current by a Tape::Scope on the calling
// thread. Without an active tape, ops compute values only. One tape per
// thread at a time; independent tapes may run on different threads.
class Tape {
public:
    struct Record {
        const char* op;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward;
    };

    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* current();

    void record(Record record);
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    // Resets the gradient of every grad-requiring tensor on the tape to zero,
    // seeds d(loss)/d(loss) = 1 and replays the records in reverse order.
    void backward(const Tensor& loss);

private:
    std::vector<Record> records_;
};

// Deterministic generator with platform-independent value mapping.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    double uniform(double lo, double hi);
    double normal();
    std::size_t uniform_index(std::size_t n);  // [0, n)

    Tensor uniform_tensor(Shape shape, double bound, bool requires_grad = false);

private:
    std::mt19937_64 engine_;
};

}  // namespace peftref
