#pragma once

#include <string>

#include "moby/ops.hpp"
#include "moby/random.hpp"

namespace moby {

/// What a visited tensor is: trained by the optimizer, or state that is
/// saved with the model but never receives gradients.
enum class TensorRole { kParameter, kBuffer };

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename Scalar>
Tensor<Scalar> truncated_normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(std::move(shape), true);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.truncated_normal(stddev));
  return t;
}

template <typename Scalar>
Tensor<Scalar> constant_parameter(Shape shape, Scalar v) {
  Tensor<Scalar> t = Tensor<Scalar>::full(std::move(shape), v);
  t.set_requires_grad(true);
  return t;
}

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;    // [out], may be undefined

  Linear() = default;
  Linear(Index in, Index out, Rng& rng, bool with_bias = true)
      : weight(truncated_normal_tensor<Scalar>({in, out}, 0.02, rng)) {
    if (with_bias) bias = constant_parameter<Scalar>({out}, Scalar(0));
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return linear(x, weight, bias); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), weight, TensorRole::kParameter);
    if (bias.defined()) f(join_name(prefix, "bias"), bias, TensorRole::kParameter);
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  LayerNorm() = default;
  explicit LayerNorm(Index channels)
      : gamma(constant_parameter<Scalar>({channels}, Scalar(1))), beta(constant_parameter<Scalar>({channels}, Scalar(0))) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gamma, beta); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), gamma, TensorRole::kParameter);
    f(join_name(prefix, "bias"), beta, TensorRole::kParameter);
  }
};

template <typename Scalar>
struct BatchNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  BatchNormStats<Scalar> stats;

  BatchNorm() = default;
  explicit BatchNorm(Index channels)
      : gamma(constant_parameter<Scalar>({channels}, Scalar(1))),
        beta(constant_parameter<Scalar>({channels}, Scalar(0))),
        stats(channels) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) {
    return batch_norm(x, gamma, beta, stats, training);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "weight"), gamma, TensorRole::kParameter);
    f(join_name(prefix, "bias"), beta, TensorRole::kParameter);
    f(join_name(prefix, "running_mean"), stats.mean, TensorRole::kBuffer);
    f(join_name(prefix, "running_var"), stats.var, TensorRole::kBuffer);
  }
};

/// Either normalization over the channel axis; selects the variant that
/// replaces LayerNorm with BatchNorm in front of MLP blocks.
enum class NormKind { kLayerNorm, kBatchNorm };

template <typename Scalar>
struct ChannelNorm {
  NormKind kind = NormKind::kLayerNorm;
  LayerNorm<Scalar> ln;
  BatchNorm<Scalar> bn;

  ChannelNorm() = default;
  ChannelNorm(NormKind k, Index channels) : kind(k) {
    if (kind == NormKind::kLayerNorm) {
      ln = LayerNorm<Scalar>(channels);
    } else {
      bn = BatchNorm<Scalar>(channels);
    }
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) {
    return kind == NormKind::kLayerNorm ? ln(x) : bn(x, training);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    if (kind == NormKind::kLayerNorm) {
      ln.visit(prefix, f);
    } else {
      bn.visit(prefix, f);
    }
  }
};

}  // namespace moby
