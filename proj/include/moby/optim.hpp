#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moby/tensor.hpp"

namespace moby {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  /// Skip decay on 1-d tensors (norm affine, biases) and position tables.
  bool exclude_norm_and_bias = false;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("AdamW betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("AdamW eps must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  }
};

inline bool is_decay_exempt(const std::string& name, const Shape& shape) {
  return shape.size() <= 1 || name.find("relative_position_bias_table") != std::string::npos ||
         name.find("pos_embed") != std::string::npos;
}

template <typename Scalar>
void require_finite_grad(const Parameter<Scalar>& p) {
  if (!p.value.has_grad()) throw ContractError("parameter " + p.name + " has no gradient");
  if (!p.value.grad().allFinite()) throw NumericError("non-finite gradient in parameter " + p.name);
}

/// AdamW with decoupled weight decay:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
template <typename Scalar>
class AdamW {
 public:
  using Array = typename Tensor<Scalar>::Array;

  AdamW(std::vector<Parameter<Scalar>> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
      first_.push_back(Array::Zero(p.value.size()));
      second_.push_back(Array::Zero(p.value.size()));
      decay_.push_back(config_.exclude_norm_and_bias && is_decay_exempt(p.name, p.value.shape()) ? 0.0
                                                                                                   : config_.weight_decay);
    }
  }

  void step() {
    for (const auto& p : params_) require_finite_grad(p);
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(config_.beta1), b2 = static_cast<Scalar>(config_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar> w = params_[i].value;
      const Array& g = w.grad();
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * g;
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * g.square();
      const auto lr = static_cast<Scalar>(config_.lr);
      const auto m_hat = first_[i] / static_cast<Scalar>(c1);
      const auto v_hat = second_[i] / static_cast<Scalar>(c2);
      w.data() -= lr * (m_hat / (v_hat.sqrt() + static_cast<Scalar>(config_.eps)) + static_cast<Scalar>(decay_[i]) * w.data());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.clear_grad();
  }

  const std::vector<Parameter<Scalar>>& parameters() const { return params_; }
  const AdamWConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }

  // Moment access for checkpointing.
  std::vector<Array>& first_moments() { return first_; }
  std::vector<Array>& second_moments() { return second_; }
  const std::vector<Array>& first_moments() const { return first_; }
  const std::vector<Array>& second_moments() const { return second_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }

 private:
  std::vector<Parameter<Scalar>> params_;
  AdamWConfig config_;
  std::vector<Array> first_;
  std::vector<Array> second_;
  std::vector<double> decay_;
  std::int64_t steps_ = 0;
};

/// Heavy-ball SGD: v <- momentum v + g + wd w;  w <- w - lr v.
template <typename Scalar>
class Sgd {
 public:
  using Array = typename Tensor<Scalar>::Array;

  Sgd(std::vector<Parameter<Scalar>> params, double momentum = 0.9, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("SGD momentum must lie in [0, 1)");
    for (const auto& p : params_) velocity_.push_back(Array::Zero(p.value.size()));
  }

  void step(double lr) {
    for (const auto& p : params_) require_finite_grad(p);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar> w = params_[i].value;
      velocity_[i] = static_cast<Scalar>(momentum_) * velocity_[i] + w.grad() + static_cast<Scalar>(weight_decay_) * w.data();
      w.data() -= static_cast<Scalar>(lr) * velocity_[i];
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.clear_grad();
  }

  const std::vector<Array>& velocity() const { return velocity_; }

 private:
  std::vector<Parameter<Scalar>> params_;
  double momentum_;
  double weight_decay_;
  std::vector<Array> velocity_;
};

}  // namespace moby
