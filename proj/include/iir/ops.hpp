#pragma once

// Differentiable primitives. Every op validates shapes (throwing ShapeError
// that names the op and operand shapes), rejects non-finite results with
// NumericError, and records an exact reverse-mode rule when any input
// requires a gradient.

#include <span>
#include <vector>

#include "iir/tensor.hpp"

namespace iir::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
Tensor silu(const Tensor& x);
// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, Real lo, Real hi);

// `bias` matches the trailing dimensions of `x` and is broadcast over the rest.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x [N,C,H,W] + v [N,C] broadcast over pixels.
Tensor add_channel(const Tensor& x, const Tensor& v);
// x [N,L,D] * scale [N,D] + shift [N,D], broadcast over L.
Tensor modulate(const Tensor& x, const Tensor& scale, const Tensor& shift);
// Row i of the leading axis multiplied by the constant factors[i].
Tensor scale_per_sample(const Tensor& x, std::span<const Real> factors);
// out[i] = a[i] + factors[i] * b[i]; rows with factor 0 copy `a` untouched.
Tensor add_scaled_per_sample(const Tensor& a, const Tensor& b, std::span<const Real> factors);

// [M,K] x [K,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// 3x3 convolution with reflect padding. x [N,Ci,H,W], w [Co,Ci,3,3], b [Co].
// stride 1 keeps H,W; stride 2 halves them (extents must be even).
// `bands` > 1 pads each of that many equal row bands separately.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int bands = 1);
Tensor upsample_nearest2x(const Tensor& x);

// Reductions to a scalar, accumulated in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Normalizes over the last axis. gamma/beta may be undefined (no affine).
Tensor layer_norm(const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {},
                  Real eps = Real(1e-5));
Tensor softmax(const Tensor& x);
// Multi-head scaled dot-product attention.
// q [N,Lq,E], k [N,Lk,E], v [N,Lk,E]; E divisible by heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(std::span<const Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, std::span<const std::int64_t> sizes);

// [N,C,H,W] <-> [N,H*W,C]
Tensor nchw_to_tokens(const Tensor& x);
Tensor tokens_to_nchw(const Tensor& x, std::int64_t height, std::int64_t width);
// [N,1,H,W] -> [N,(H/p)*(W/p),p*p], patches in raster order.
Tensor patchify(const Tensor& x, int patch);
// table [V,R] gathered by ids -> [N,R].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Convenience over the primitives above.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

}  // namespace iir::ops
