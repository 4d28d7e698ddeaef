#pragma once

#include <cstddef>
#include <vector>

#include "mindloop/tensor.hpp"

// Differentiable primitives. Every op checks its output for non-finite values
// and throws NumericError naming itself. No implicit broadcasting: operands of
// elementwise ops must have identical shapes.
namespace mindloop {

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Flat-index selection; result is rank 1.
Tensor gather(const Tensor& a, const std::vector<std::size_t>& flat_indices);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.1);
// Gradient passes through inside [lo, hi] and is zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

// Numerically stable: the slice max is subtracted before exponentiation.
Tensor softmax(const Tensor& a, std::size_t axis);

// x: C×H×W, weight: O×C×k×k, bias: O. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);
// Nearest-neighbour upsampling of a C×H×W map.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum_squares(const Tensor& a);
Tensor l2_norm(const Tensor& a);

}  // namespace mindloop
