#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ferformer/errors.hpp"

namespace ferformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad; // empty until backward touches this tensor
};

// Dense row-major float tensor with shared-buffer value semantics: copies are
// shallow, so a parameter handed to an optimizer and to a forward pass is the
// same storage. The scalar type T is the global precision mode (float for
// training, double for verification).
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : impl_(std::make_shared<TensorImpl<T>>()) {
        validate_shape(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_numel(impl_->shape), fill);
    }

    Tensor(Shape shape, std::vector<T> values)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        validate_shape(shape);
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor init: shape " + shape_str(shape) + " wants " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }

    T& operator[](std::size_t i) { return impl_->data[i]; }
    const T& operator[](std::size_t i) const { return impl_->data[i]; }

    T& at(std::size_t i, std::size_t j) {
        return impl_->data[i * impl_->shape[1] + j];
    }
    const T& at(std::size_t i, std::size_t j) const {
        return impl_->data[i * impl_->shape[1] + j];
    }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->data[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
    }

    // Scalar extraction; the value of a loss.
    T item() const {
        if (numel() != 1) {
            throw UsageError("item(): tensor " + shape_str(shape()) + " is not a scalar");
        }
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (impl_->grad.empty()) {
            throw UsageError("grad(): no gradient present; run backward first");
        }
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    // Deep copy (fresh storage, no grad, no graph identity).
    Tensor clone() const {
        Tensor out;
        out.impl_ = std::make_shared<TensorImpl<T>>();
        out.impl_->shape = impl_->shape;
        out.impl_->data = impl_->data;
        return out;
    }

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    static void validate_shape(const Shape& s) {
        for (std::size_t d : s) {
            if (d == 0) throw ShapeError("tensor shape " + shape_str(s) + " has a zero dimension");
        }
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
void ensure_grad(const std::shared_ptr<TensorImpl<T>>& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
}

} // namespace ferformer
