#pragma once

// Differentiable operations. Spatial tensors are [C,H,W]; token matrices are
// [N,D]. Every op validates shapes and throws ArgumentError on mismatch.

#include <vector>

#include "firm/nn/tensor.hpp"

namespace firm::nn {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Multiplies by a one-element tensor (e.g. a learnable scalar).
Tensor mul_scalar(const Tensor& a, const Tensor& s);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// Broadcasts over [C,H,W].
Tensor add_channel(const Tensor& x, const Tensor& bias);    // bias [C]
Tensor mul_channel(const Tensor& x, const Tensor& s);       // s [C]
Tensor mul_plane(const Tensor& x, const Tensor& plane);     // plane [1,H,W]

Tensor reshape(const Tensor& a, Shape shape);
// Concatenation / slicing along the leading axis.
Tensor concat0(const std::vector<Tensor>& parts);
Tensor slice0(const Tensor& a, int start, int count);

Tensor transpose(const Tensor& a);                          // [M,N] -> [N,M]
Tensor matmul(const Tensor& a, const Tensor& b);            // [M,K]x[K,N]
Tensor add_rowvec(const Tensor& a, const Tensor& b);        // [M,N] + [N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[N,in] w[in,out] b[out]
Tensor softmax_rows(const Tensor& a);
Tensor layernorm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
// Per-pixel normalisation across channels of a [C,H,W] tensor.
Tensor layernorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// x [Ci,H,W], w [Co, Ci/groups, K, K], bias [Co] or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int pad = 0, int groups = 1);
// Non-overlapping transpose convolution, kernel == stride. w [Ci, Co, K, K].
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride);

Tensor mean_spatial(const Tensor& x);                       // [C,H,W] -> [C]
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor avgpool2(const Tensor& x);                           // 2x2 mean, floor on odd sizes
Tensor grad_x(const Tensor& x);                             // forward difference, 0 in last column
Tensor grad_y(const Tensor& x);                             // forward difference, 0 in last row

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor l1_loss(const Tensor& a, const Tensor& b);           // mean |a-b|
Tensor mse_loss(const Tensor& a, const Tensor& b);          // mean (a-b)^2

// Weighted sum of scalars.
Tensor weighted_sum(const std::vector<Tensor>& scalars, const std::vector<double>& weights);

}  // namespace firm::nn
