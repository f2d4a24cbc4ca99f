#pragma once

#include <span>
#include <vector>

#include "moby/tensor.hpp"

namespace moby {

// Differentiable primitives. Every op records a backward rule on the active
// Tape when any input requires grad; otherwise it only computes values.
//
// Broadcasting is trailing-suffix only: in binary ops `b` either matches
// `a` or its shape equals the trailing axes of `a`'s shape.

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

/// Multiplies every slice along axis 0 by its own constant factor.
template <typename Scalar>
Tensor<Scalar> scale_samples(const Tensor<Scalar>& x, std::span<const Scalar> factors);

/// [m,k] x [k,n] -> [m,n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// [g,m,k] x [g,k,n] -> [g,m,n]; with `transpose_b`, b is [g,n,k].
template <typename Scalar>
Tensor<Scalar> batched_matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false);

/// Affine map over the last axis: x[..., in] * weight[in, out] + bias[out].
/// `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);

/// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis = -1);

/// Mean over rows of -log softmax(logits)[label].
template <typename Scalar>
Tensor<Scalar> cross_entropy_from_logits(const Tensor<Scalar>& logits, std::span<const Index> labels);

/// Normalizes each row over the last axis.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5));

/// Running statistics of a batch norm layer; updated in training mode.
template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
  Scalar momentum = Scalar(0.1);

  explicit BatchNormStats(Index channels = 1)
      : mean(Tensor<Scalar>::zeros({channels})), var(Tensor<Scalar>::full({channels}, Scalar(1))) {}
};

/// Normalizes each channel (last axis) over all remaining axes. Training mode
/// uses batch statistics and updates `stats`; inference uses `stats`.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          BatchNormStats<Scalar>& stats, bool training, Scalar eps = Scalar(1e-5));

/// Rows scaled to unit Euclidean norm; the norm is clamped below by `eps`.
template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-12));

/// Shares storage with `x`.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& axes);

/// Swaps the two axes of a matrix.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);
/// Reduces `axis`, which is removed from the shape.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis);

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);

/// Elements [begin, end) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index begin, Index end);

/// Embedding-style lookup: out[i, ...] = x[indices[i], ...]. Backward
/// scatter-adds, so repeated indices accumulate.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> indices);

}  // namespace moby
