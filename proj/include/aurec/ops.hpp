#pragma once

#include <cstdint>
#include <vector>

#include "aurec/tape.hpp"
#include "aurec/tensor.hpp"

namespace aurec::ops {

// Shape manipulation (copying; adjoints map back one-to-one).
Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor stack(const std::vector<Tensor>& parts, int axis);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);

// Elementwise binary with numpy-style broadcasting (aligned on trailing
// axes; an axis must match or be 1 on one side).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Elementwise unary.
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor elu(const Tensor& x);
Tensor log(const Tensor& x); // DomainError on non-positive input
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor affine(const Tensor& x, double scale, double shift);

// y = x / ||x|| along `axis`. Strict form raises DomainError on a zero
// slice; the guarded form emits a zero slice with a zero adjoint instead.
Tensor l2_normalize(const Tensor& x, int axis);
Tensor l2_normalize_guarded(const Tensor& x, int axis);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor global_avg_pool_2d(const Tensor& x); // [...,C,H,W] -> [...,C]

// Neural-net primitives.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor conv1d(const Tensor& x, const Tensor& w, int pad);
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad);
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor softmax(const Tensor& x, int axis);

// Activation-gated graph attention over F independent node sets.
// nodes [F,N,b], w [b,b], r [2b]; neighbors is an F*N*N 0/1 mask whose row
// (f,n,:) lists the aggregation sources of node n (self-loop required).
Tensor gat(const Tensor& nodes, const Tensor& w, const Tensor& r,
           const std::vector<uint8_t>& neighbors, double slope);

} // namespace aurec::ops
