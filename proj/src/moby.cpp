#include "moby/moby.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

namespace moby {

template <typename Scalar>
Encoder<Scalar>::Encoder(const BackboneConfig& backbone, const HeadConfig& heads, bool with_predictor, Rng& rng)
    : backbone_(make_backbone<Scalar>(backbone, rng)),
      projector_(backbone.feature_dim(), heads.hidden, heads.out, rng) {
  if (with_predictor) predictor_.emplace(heads.out, heads.hidden, heads.out, rng);
}

template <typename Scalar>
Tensor<Scalar> Encoder<Scalar>::forward(const Tensor<Scalar>& images, double drop_path_rate, bool training, Rng& rng) {
  Tensor<Scalar> z = projector_.forward(backbone_->forward(images, drop_path_rate, training, rng), training);
  if (predictor_) z = predictor_->forward(z, training);
  return z;
}

template <typename Scalar>
void Encoder<Scalar>::visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
  backbone_->visit(join_name(prefix, "backbone"), f);
  projector_.visit(join_name(prefix, "projector"), f);
  if (predictor_) predictor_->visit(join_name(prefix, "predictor"), f);
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> collect(Encoder<Scalar>& encoder, const std::string& prefix) {
  std::vector<NamedTensor<Scalar>> out;
  encoder.visit(prefix, [&](const std::string& name, Tensor<Scalar>& t, TensorRole role) { out.push_back({name, t, role}); });
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>> parameters_of(Encoder<Scalar>& encoder, const std::string& prefix) {
  std::vector<Parameter<Scalar>> out;
  for (auto& t : collect(encoder, prefix)) {
    if (t.role == TensorRole::kParameter) out.push_back({t.name, t.value});
  }
  return out;
}

template <typename Scalar>
EncoderPair<Scalar>::EncoderPair(const BackboneConfig& backbone, const HeadConfig& heads, Rng& init)
    : online(backbone, heads, true, init), target([&] {
        Rng scratch(0);
        return Encoder<Scalar>(backbone, heads, false, scratch);
      }()) {
  auto on = collect(online, "");
  auto tg = collect(target, "");
  std::size_t j = 0;
  for (auto& t : tg) {
    while (j < on.size() && on[j].name != t.name) ++j;
    if (j == on.size()) throw ContractError("target tensor " + t.name + " has no online counterpart");
    t.value.data() = on[j].value.data();
    t.value.set_requires_grad(false);
    if (t.role == TensorRole::kParameter) correspondence.emplace_back(on[j].value, t.value);
  }
}

template <typename Scalar>
void EncoderPair<Scalar>::momentum_update(double m) {
  const auto keep = static_cast<Scalar>(m);
  const auto mix = static_cast<Scalar>(1.0 - m);
  for (auto& [src, dst] : correspondence) dst.data() = keep * dst.data() + mix * src.data();
}

template <typename Scalar>
KeyQueue<Scalar>::KeyQueue(Index capacity, Index dim) : capacity_(capacity), dim_(dim) {
  if (capacity <= 0 || dim <= 0) throw ConfigError("queue capacity and width must be positive");
  storage_ = RowMatrix<Scalar>::Zero(capacity, dim);
}

template <typename Scalar>
void KeyQueue<Scalar>::enqueue(const Tensor<Scalar>& keys) {
  if (keys.rank() != 2 || keys.dim(1) != dim_) {
    throw ShapeError("enqueue: keys " + to_string(keys.shape()) + " do not match queue width " + std::to_string(dim_));
  }
  const Index b = keys.dim(0);
  if (b > capacity_) {
    throw ConfigError("enqueue: batch of " + std::to_string(b) + " exceeds queue capacity " + std::to_string(capacity_));
  }
  if (keys.requires_grad()) throw ContractError("enqueue: keys must be detached");
  const auto norms = keys.matrix().rowwise().norm().array();
  if (((norms - Scalar(1)).abs() > Scalar(1e-3)).any()) throw ContractError("enqueue: keys must be unit-norm");
  for (Index r = 0; r < b; ++r) {
    storage_.row(cursor_) = keys.matrix().row(r);
    cursor_ = (cursor_ + 1) % capacity_;
  }
  fill_ = std::min(fill_ + b, capacity_);
}

template <typename Scalar>
Tensor<Scalar> KeyQueue<Scalar>::entries() const {
  if (fill_ == 0) return {};
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized({fill_, dim_});
  out.matrix() = storage_.topRows(fill_);
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> KeyQueue<Scalar>::ordered() const {
  RowMatrix<Scalar> out(fill_, dim_);
  const Index oldest = fill_ < capacity_ ? 0 : cursor_;
  for (Index i = 0; i < fill_; ++i) out.row(i) = storage_.row((oldest + i) % capacity_);
  return out;
}

template <typename Scalar>
void KeyQueue<Scalar>::restore(Index cursor, Index fill) {
  if (cursor < 0 || cursor >= capacity_ || fill < 0 || fill > capacity_) throw ContractError("queue cursor or fill out of range");
  cursor_ = cursor;
  fill_ = fill;
}

double momentum_at_step(Index step, Index total_steps, double start) {
  if (total_steps <= 0) throw ConfigError("momentum schedule needs a positive number of steps");
  if (step < 0) throw ConfigError("momentum schedule step must be non-negative");
  if (step > total_steps) {
    std::cerr << "warning: momentum requested at step " << step << " beyond schedule end " << total_steps
              << "; clamping to 1\n";
    return 1.0;
  }
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return 1.0 - (1.0 - start) * (std::cos(phase) + 1.0) / 2.0;
}

double MomentumSchedule::at(Index step) const { return momentum_at_step(step, total_steps, start); }

template <typename Scalar>
Tensor<Scalar> contrastive_loss(const Tensor<Scalar>& q, const Tensor<Scalar>& k_plus, const KeyQueue<Scalar>& queue,
                                double tau) {
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
  if (q.rank() != 2 || q.shape() != k_plus.shape() || q.dim(1) != queue.dim()) {
    throw ShapeError("contrastive_loss: q " + to_string(q.shape()) + ", k+ " + to_string(k_plus.shape()) +
                     " and queue width " + std::to_string(queue.dim()) + " disagree");
  }
  if (k_plus.requires_grad()) throw ContractError("contrastive_loss: keys must be detached");
  auto unit = [](const Tensor<Scalar>& t) {
    return ((t.matrix().rowwise().norm().array() - Scalar(1)).abs() <= Scalar(1e-3)).all();
  };
  if (!unit(q) || !unit(k_plus)) throw ContractError("contrastive_loss: q and k+ rows must be unit-norm");
  const Index b = q.dim(0);
  Tensor<Scalar> logits = reshape(sum(mul(q, k_plus), 1), {b, 1});
  if (queue.fill() > 0) logits = concat<Scalar>({logits, matmul(q, transpose(queue.entries()))}, 1);
  const std::vector<Index> labels(static_cast<std::size_t>(b), 0);
  return cross_entropy_from_logits(scale(logits, static_cast<Scalar>(1.0 / tau)), std::span<const Index>(labels));
}

void MobyConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  if (queue_size <= 0) throw ConfigError("queue_size must be positive");
  if (!(momentum_start >= 0 && momentum_start <= 1)) throw ConfigError("momentum_start must lie in [0, 1]");
  if (!(online_drop_path >= 0 && online_drop_path < 1)) throw ConfigError("online_drop_path must lie in [0, 1)");
  if (!(target_drop_path >= 0 && target_drop_path < 1)) throw ConfigError("target_drop_path must lie in [0, 1)");
  if (heads.hidden <= 0 || heads.out <= 0) throw ConfigError("head sizes must be positive");
}

template <typename Scalar>
TrainingState<Scalar>::TrainingState(const BackboneConfig& backbone, const MobyConfig& moby, const AdamWConfig& adamw,
                                     std::uint64_t seed)
    : encoders([&]() -> EncoderPair<Scalar> {
        Rng init = Rng::derive(seed, {tag(Stream::kInit)});
        return EncoderPair<Scalar>(backbone, moby.heads, init);
      }()),
      queues{KeyQueue<Scalar>(moby.queue_size, moby.heads.out), KeyQueue<Scalar>(moby.queue_size, moby.heads.out)},
      optimizer(parameters_of(encoders.online, "online"), adamw) {}

template <typename Scalar>
MobyLoss<Scalar> symmetric_loss(const Tensor<Scalar>& view1, const Tensor<Scalar>& view2, EncoderPair<Scalar>& encoders,
                                const std::array<KeyQueue<Scalar>, 2>& queues, const MobyConfig& config,
                                std::uint64_t seed, Index step) {
  auto stream = [&](std::uint64_t branch, std::uint64_t view) {
    return Rng::derive(seed, {tag(Stream::kDropPath), static_cast<std::uint64_t>(step), branch, view});
  };
  Rng r_q1 = stream(0, 0), r_q2 = stream(0, 1), r_k1 = stream(1, 0), r_k2 = stream(1, 1);
  const Tensor<Scalar> q1 = l2_normalize(encoders.online.forward(view1, config.online_drop_path, true, r_q1));
  const Tensor<Scalar> q2 = l2_normalize(encoders.online.forward(view2, config.online_drop_path, true, r_q2));
  MobyLoss<Scalar> out;
  out.k1 = l2_normalize(encoders.target.forward(view1, config.target_drop_path, true, r_k1)).detach();
  out.k2 = l2_normalize(encoders.target.forward(view2, config.target_drop_path, true, r_k2)).detach();
  out.loss = add(contrastive_loss(q1, out.k2, queues[1], config.tau), contrastive_loss(q2, out.k1, queues[0], config.tau));
  return out;
}

template <typename Scalar>
StepMetrics training_step(const Tensor<Scalar>& view1, const Tensor<Scalar>& view2, TrainingState<Scalar>& state,
                          const MobyConfig& config, const MomentumSchedule& schedule, std::uint64_t seed) {
  const Index step = state.step;
  const double m = schedule.at(step);
  state.optimizer.zero_grad();
  MobyLoss<Scalar> result;
  {
    Tape<Scalar> tape;
    auto diagnose = [&](const std::string& what) {
      const std::string op = tape.first_non_finite();
      return NumericError(what + " at step " + std::to_string(step) +
                          (op.empty() ? std::string() : "; first non-finite op: " + op));
    };
    // Some ops reject NaN input themselves; either way report where it began.
    try {
      result = symmetric_loss(view1, view2, state.encoders, state.queues, config, seed, step);
    } catch (const NumericError& e) {
      throw diagnose(e.what());
    }
    if (!std::isfinite(static_cast<double>(result.loss.item()))) throw diagnose("non-finite loss");
    tape.backward(result.loss);
  }
  for (const auto& [src, dst] : state.encoders.correspondence) {
    if (dst.has_grad()) throw ContractError("target parameter received a gradient");
  }
  state.optimizer.step();
  state.optimizer.zero_grad();
  state.encoders.momentum_update(m);
  state.queues[0].enqueue(result.k1);
  state.queues[1].enqueue(result.k2);
  state.step = step + 1;
  return {step, static_cast<double>(result.loss.item()), m, state.queues[0].fill(), state.optimizer.config().lr};
}

#define MOBY_INSTANTIATE_CORE(S)                                                                                    \
  template class Encoder<S>;                                                                                        \
  template std::vector<NamedTensor<S>> collect(Encoder<S>&, const std::string&);                                    \
  template std::vector<Parameter<S>> parameters_of(Encoder<S>&, const std::string&);                                \
  template struct EncoderPair<S>;                                                                                   \
  template class KeyQueue<S>;                                                                                       \
  template Tensor<S> contrastive_loss(const Tensor<S>&, const Tensor<S>&, const KeyQueue<S>&, double);              \
  template struct TrainingState<S>;                                                                                 \
  template MobyLoss<S> symmetric_loss(const Tensor<S>&, const Tensor<S>&, EncoderPair<S>&,                          \
                                      const std::array<KeyQueue<S>, 2>&, const MobyConfig&, std::uint64_t, Index);  \
  template StepMetrics training_step(const Tensor<S>&, const Tensor<S>&, TrainingState<S>&, const MobyConfig&,      \
                                     const MomentumSchedule&, std::uint64_t);

MOBY_INSTANTIATE_CORE(float)
MOBY_INSTANTIATE_CORE(double)

}  // namespace moby
