#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "syncflow/tensor.hpp"

// Differentiable primitives. Every function records a backward closure on the
// active GradTape when at least one input requires grad, and raises
// NumericalError if its output contains NaN or Inf.
namespace syncflow {

// Elementwise with numpy-style broadcasting (shapes aligned at the back).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// a: [..., m, k]; b: [k, n], [..., k, n] with the same batch dims as a, or
// the transposed layouts [n, k] / [..., n, k] when transpose_b is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis);
// Normalizes along axis with epsilon 1e-5. gain/bias may be undefined
// tensors, in which case no affine transform is applied.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis = -1);

Tensor gelu(const Tensor& x); // tanh approximation
Tensor silu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);

// One dimension may be -1 and is inferred.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices);

// Channels-last 3-D convolution, stride 1, zero "same" padding.
// x: [B, T, H, W, C]; weight: [kT*kH*kW*C, O] laid out kernel-offset major;
// bias: [O] or undefined. Kernel extents must be odd.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::array<int, 3> kernel);

// Mean squared error over all elements.
Tensor mse(const Tensor& prediction, const Tensor& target);

// Raises NumericalError naming op if any value of t is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

} // namespace syncflow
