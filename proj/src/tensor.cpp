#include "peftlab/tensor.h"

#include <sstream>

#include "peftlab/errors.h"

namespace peftlab {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) {
        throw DimensionError("tensor shape must have at least one axis");
    }
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_to_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_to_string(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                             shape_to_string(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }

std::size_t Tensor::cols() const { return impl_->shape.back(); }

std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<const double> Tensor::values() const { return impl_->values; }

std::span<double> Tensor::mutable_values() { return impl_->values; }

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() needs a single-element tensor, got " + shape_to_string(shape()));
    }
    return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (!flag) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_->is_leaf; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) throw UsageError("tensor has no gradient");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
    return Tensor(impl_->shape, impl_->values, impl_->requires_grad);
}

void accumulate_grad(const Tensor& t, std::span<const double> delta) {
    auto& impl = *t.impl();
    if (!impl.requires_grad) return;
    if (impl.grad.empty()) {
        impl.grad.assign(delta.begin(), delta.end());
        return;
    }
    for (std::size_t i = 0; i < delta.size(); ++i) impl.grad[i] += delta[i];
}

void Tape::record(const Tensor& output, Adjoint adjoint) {
    if (!recording_) return;
    output.impl()->is_leaf = false;
    output.impl()->requires_grad = true;
    entries_.push_back({output.impl(), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward() needs a scalar loss, got " +
                         (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
    }
    std::size_t loss_pos = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
        if (entries_[i].output == loss.impl()) {
            loss_pos = i;
            break;
        }
    }
    if (loss_pos == entries_.size()) {
        throw UsageError("backward(): loss was not produced on this tape");
    }
    for (auto& e : entries_) e.output->grad.clear();
    loss.impl()->grad.assign(1, 1.0);
    for (std::size_t i = loss_pos + 1; i-- > 0;) {
        auto& e = entries_[i];
        if (e.output->grad.empty()) continue;
        e.adjoint(e.output->grad);
    }
}

}  // namespace peftlab
