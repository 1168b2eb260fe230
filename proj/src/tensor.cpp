#include "aurec/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace aurec {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

static void check_shape(const Shape& shape) {
    for (int64_t e : shape)
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
}

Tensor Tensor::empty(Shape shape, DType dtype) {
    check_shape(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->dtype = dtype;
    const int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    if (dtype == DType::f32) impl->data32.resize(static_cast<size_t>(n));
    else impl->data64.resize(static_cast<size_t>(n));
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return empty(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = empty(std::move(shape), dtype);
    if (dtype == DType::f32)
        std::fill(t.impl()->data32.begin(), t.impl()->data32.end(), static_cast<float>(value));
    else
        std::fill(t.impl()->data64.begin(), t.impl()->data64.end(), value);
    return t;
}

Tensor Tensor::from(const std::vector<double>& values, Shape shape, DType dtype) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not fill shape " + shape_str(shape));
    Tensor t = empty(std::move(shape), dtype);
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return from({value}, Shape{}, dtype); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, DType dtype) {
    Tensor t = empty(std::move(shape), dtype);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, rng.uniform(lo, hi));
    return t;
}

int64_t Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    return impl_->shape[static_cast<size_t>(axis)];
}

double Tensor::at(int64_t flat) const {
    return impl_->dtype == DType::f32 ? static_cast<double>(impl_->data32[static_cast<size_t>(flat)])
                                      : impl_->data64[static_cast<size_t>(flat)];
}

void Tensor::set(int64_t flat, double v) {
    if (impl_->dtype == DType::f32) impl_->data32[static_cast<size_t>(flat)] = static_cast<float>(v);
    else impl_->data64[static_cast<size_t>(flat)] = v;
}

double Tensor::grad_at(int64_t flat) const {
    if (!impl_->grad_allocated()) return 0.0;
    return impl_->dtype == DType::f32 ? static_cast<double>(impl_->grad32[static_cast<size_t>(flat)])
                                      : impl_->grad64[static_cast<size_t>(flat)];
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor with " + std::to_string(numel()) + " elements");
    return at(0);
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = at(i);
    return out;
}

std::vector<double> Tensor::grad_to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()), 0.0);
    if (impl_->grad_allocated())
        for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = grad_at(i);
    return out;
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->data32 = impl_->data32;
    impl->data64 = impl_->data64;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->data32 = impl_->data32;
    impl->data64 = impl_->data64;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

Tensor Tensor::to(DType dtype) const {
    if (dtype == impl_->dtype) return clone();
    Tensor t = empty(impl_->shape, dtype);
    for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
    return t;
}

} // namespace aurec
