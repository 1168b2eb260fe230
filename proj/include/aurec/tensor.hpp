#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aurec/error.hpp"
#include "aurec/rng.hpp"

namespace aurec {

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense n-d array. Copying a Tensor is shallow (shared buffer); ops always
// allocate fresh outputs. Gradients live beside the data and are only
// allocated once something actually flows into them.
struct TensorImpl {
    Shape shape;
    DType dtype = DType::f64;
    std::vector<float> data32, grad32;
    std::vector<double> data64, grad64;
    bool requires_grad = false;

    int64_t numel() const { return shape_numel(shape); }
    bool grad_allocated() const {
        return dtype == DType::f32 ? !grad32.empty() : !grad64.empty();
    }
    void ensure_grad() {
        if (grad_allocated()) return;
        if (dtype == DType::f32) grad32.assign(data32.size(), 0.0f);
        else grad64.assign(data64.size(), 0.0);
    }
    void zero_grad() {
        if (dtype == DType::f32) std::fill(grad32.begin(), grad32.end(), 0.0f);
        else std::fill(grad64.begin(), grad64.end(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor empty(Shape shape, DType dtype = DType::f64);
    static Tensor zeros(Shape shape, DType dtype = DType::f64);
    static Tensor full(Shape shape, double value, DType dtype = DType::f64);
    static Tensor from(const std::vector<double>& values, Shape shape, DType dtype = DType::f64);
    static Tensor scalar(double value, DType dtype = DType::f64);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, DType dtype = DType::f64);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        if (v) impl_->ensure_grad();
        return *this;
    }

    template <typename T> std::span<T> data();
    template <typename T> std::span<const T> data() const;
    template <typename T> std::span<T> grad();
    template <typename T> std::span<const T> grad() const;

    // dtype-agnostic element access, mostly for tests and glue code
    double at(int64_t flat) const;
    void set(int64_t flat, double v);
    double grad_at(int64_t flat) const;
    double item() const;

    std::vector<double> to_vector() const;
    std::vector<double> grad_to_vector() const;

    Tensor clone() const;          // deep copy of data (grad not copied)
    Tensor detach() const;         // shares data, drops grad tracking
    Tensor to(DType dtype) const;  // converting copy (identity returns clone)

    void zero_grad() { impl_->zero_grad(); }
    void ensure_grad() { impl_->ensure_grad(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

template <typename T> std::span<T> Tensor::data() {
    if constexpr (std::is_same_v<T, float>) return impl_->data32;
    else return impl_->data64;
}
template <typename T> std::span<const T> Tensor::data() const {
    if constexpr (std::is_same_v<T, float>) return impl_->data32;
    else return impl_->data64;
}
template <typename T> std::span<T> Tensor::grad() {
    impl_->ensure_grad();
    if constexpr (std::is_same_v<T, float>) return impl_->grad32;
    else return impl_->grad64;
}
template <typename T> std::span<const T> Tensor::grad() const {
    if constexpr (std::is_same_v<T, float>) return impl_->grad32;
    else return impl_->grad64;
}

} // namespace aurec
