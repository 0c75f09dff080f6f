#pragma once

#include <cstdint>
#include <vector>

#include "csnet/nd/tensor.hpp"

namespace csnet::nd {

// Elementwise; shapes must match.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sum(Var<T> a);

// [m, k] x [k, n].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x [n, in] * w [in, out] + bias [out]; pass bias.id < 0 for none.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);

// Columns [start, start + len) of a rank-2 tensor.
template <typename T> Var<T> slice_cols(Var<T> x, int start, int len);

// NHWC input [B, H, W, Cin], weight [k * k * Cin, Cout] laid out (ky, kx, ci),
// optional bias [Cout]. Zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int kernel, int stride, int pad);

struct BatchNormOptions {
  bool train = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Normalizes over every axis but the last. Running statistics are updated in
// train mode (unbiased variance, as is conventional) and used in eval mode.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, const BatchNormOptions& opt);

// Row-wise over the last axis of a rank-2 tensor.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);

// NHWC [B, H, W, C] -> [B, C].
template <typename T> Var<T> global_avg_pool2d(Var<T> x);

// Softmax of scores [E, h] independently per column over each CSR segment
// [row_ptr[i], row_ptr[i+1]). Throws ShapeError on an empty segment.
template <typename T>
Var<T> softmax_over_segments(Var<T> scores, const std::vector<std::uint32_t>& row_ptr);

// Group g averages rows indices[offsets[g] .. offsets[g+1]) of x [N, D].
// Throws ShapeError on an empty group.
template <typename T>
Var<T> segment_mean(Var<T> x, const std::vector<std::uint32_t>& offsets,
                    const std::vector<std::uint32_t>& indices);

// Mean cross-entropy of logits [B, C] against integer classes.
template <typename T> Var<T> cross_entropy(Var<T> logits, const std::vector<int>& classes);

// Per stored edge e = (i, cols[e]) and head k: scale * <Q_i^k, K_j^k>, where
// Q, K are [N, heads * d]. Output [E, heads].
template <typename T>
Var<T> edge_dot(Var<T> q, Var<T> k, const std::vector<std::uint32_t>& row_ptr,
                const std::vector<std::uint32_t>& cols, int heads, T scale);

// m_i^k = sum over edges e of row i: alpha[e, k] * V_{cols[e]}^k. Output
// shaped like V.
template <typename T>
Var<T> edge_aggregate(Var<T> alpha, Var<T> v, const std::vector<std::uint32_t>& row_ptr,
                      const std::vector<std::uint32_t>& cols);

// Plain (non-recorded) helpers.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace csnet::nd
