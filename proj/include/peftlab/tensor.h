#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace peftlab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty == absent
    bool requires_grad = false;
    bool is_leaf = true;
};
}  // namespace detail

// Dense row-major float64 array with an optional gradient accumulator.
//
// Tensor is a handle: copies share storage, which is what lets the tape
// route adjoints back to the caller's parameters. Use clone() for an
// independent copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    // Rows/cols treat the tensor as a matrix over its last axis.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t i) const { return values()[i]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();  // allocates a zero grad if absent
    void zero_grad();                  // keeps the accumulator, sets it to 0
    void clear_grad();                 // drops the accumulator

    Tensor clone() const;  // deep copy of values; no grad, same requires_grad
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    // Internal plumbing for ops and the tape.
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of differentiable operations for one forward pass.
//
// backward() replays adjoints in exact reverse execution order. Gradients of
// intermediate results are recomputed on every call; leaf gradients
// accumulate across calls until the caller clears them.
class Tape {
public:
    using Adjoint = std::function<void(std::span<const double> out_grad)>;

    // A non-recording tape turns every op into a plain forward computation.
    explicit Tape(bool recording = true) : recording_(recording) {}
    bool recording() const { return recording_; }

    // Registers an op output and its adjoint. The output is marked non-leaf.
    void record(const Tensor& output, Adjoint adjoint);

    void backward(const Tensor& loss);
    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

private:
    struct Entry {
        std::shared_ptr<detail::TensorImpl> output;
        Adjoint adjoint;
    };
    std::vector<Entry> entries_;
    bool recording_ = true;
};

// Adds `delta` into t's gradient, allocating it on first use. No-op when
// t does not require grad.
void accumulate_grad(const Tensor& t, std::span<const double> delta);

}  // namespace peftlab
