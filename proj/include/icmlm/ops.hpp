#pragma once

// Differentiable ops. Unless stated otherwise, "rows" means the last axis is
// the feature axis and all leading axes are flattened into rows.

#include <cstdint>
#include <span>
#include <vector>

#include "icmlm/autograd.hpp"
#include "icmlm/rng.hpp"

namespace icmlm::ag {

// op(a) * op(b) for rank-2 operands.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);

template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
// a + alpha * b, same shapes.
template <class T>
Var<T> add_scaled(Var<T> a, Var<T> b, T alpha);
template <class T>
Var<T> scale(Var<T> x, T alpha);

// Adds bias[F] to every row of x[..., F]; bias of size 1 broadcasts to all.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias);

template <class T>
Var<T> relu(Var<T> x);

// Layer normalization over each of `groups` equal slices of the last axis,
// followed by the elementwise affine gamma/beta of the full last-axis width.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups = 1, T eps = T(1e-5));

// Per-sample normalization of x[B, C, H, W] over (C, H, W), per-channel affine.
template <class T>
Var<T> sample_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// 3x3 convolution, padding 1. weight is [O, C*9], bias [O].
template <class T>
Var<T> conv3x3(Var<T> x, Var<T> weight, Var<T> bias, int stride);

// x[B, C, H, W] -> [B, C]
template <class T>
Var<T> global_avg_pool(Var<T> x);

// x[B, C, H, W] -> [B*H*W, C], row b*H*W + y*W + x.
template <class T>
Var<T> grid_rows(Var<T> x);

// Rows [begin, end) along axis 0 of a rank-2 tensor.
template <class T>
Var<T> slice_rows(Var<T> x, int begin, int end);

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

// table[V, D] rows selected by ids -> [n, D]
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids);

// Per-group a_g * b_g^T * alpha where a[M, G*D], b[N, G*D]; result [G, M, N].
template <class T>
Var<T> grouped_matmul_nt(Var<T> a, Var<T> b, int groups, T alpha);

// Per-group p_g * v_g where p[G, M, N], v[N, G*D]; result [M, G*D].
template <class T>
Var<T> grouped_matmul(Var<T> p, Var<T> v, int groups);

template <class T>
Var<T> softmax(Var<T> x);
template <class T>
Var<T> log_softmax(Var<T> x);
// Stable log-sum-exp over the last axis; result drops that axis.
template <class T>
Var<T> logsumexp(Var<T> x);

template <class T>
Var<T> transpose(Var<T> x);
template <class T>
Var<T> reshape(Var<T> x, Shape shape);

// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(Var<T> x, T p, Rng& rng);

template <class T>
Var<T> sum(Var<T> x);
template <class T>
Var<T> mean(Var<T> x);

// Mean over rows of -log softmax(logits)[target].
template <class T>
Var<T> sparse_cross_entropy(Var<T> logits, std::span<const int> targets);

// Mean over rows of -sum_k labels_k * log softmax(logits)_k.
template <class T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& labels);

// Value-level helpers shared by ops and evaluation code.
template <class T>
void softmax_inplace(std::span<T> row);
template <class T>
T logsumexp_value(std::span<const T> row);

}  // namespace icmlm::ag
