#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moby/backbone.hpp"
#include "moby/optim.hpp"

namespace moby {

/// Sizes of the projector and predictor MLPs.
struct HeadConfig {
  Index hidden = 512;
  Index out = 128;
};

/// Two-layer MLP head: linear -> batch norm -> ReLU -> linear.
template <typename Scalar>
struct MlpHead {
  Linear<Scalar> fc1;
  BatchNorm<Scalar> norm;
  Linear<Scalar> fc2;

  MlpHead() = default;
  MlpHead(Index in, Index hidden, Index out, Rng& rng) : fc1(in, hidden, rng), norm(hidden), fc2(hidden, out, rng) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) { return fc2(relu(norm(fc1(x), training))); }

  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
    fc1.visit(join_name(prefix, "linear1"), f);
    norm.visit(join_name(prefix, "bn"), f);
    fc2.visit(join_name(prefix, "linear2"), f);
  }
};

/// Backbone plus projector, and a predictor on the online branch only.
template <typename Scalar>
class Encoder {
 public:
  Encoder(const BackboneConfig& backbone, const HeadConfig& heads, bool with_predictor, Rng& rng);

  /// Head output before normalization, [b, heads.out].
  Tensor<Scalar> forward(const Tensor<Scalar>& images, double drop_path_rate, bool training, Rng& rng);

  Backbone<Scalar>& backbone() { return *backbone_; }
  bool has_predictor() const { return predictor_.has_value(); }
  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f);

 private:
  std::unique_ptr<Backbone<Scalar>> backbone_;
  MlpHead<Scalar> projector_;
  std::optional<MlpHead<Scalar>> predictor_;
};

/// A named tensor slot of a model together with its role.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> value;
  TensorRole role;
};

template <typename Scalar>
std::vector<NamedTensor<Scalar>> collect(Encoder<Scalar>& encoder, const std::string& prefix);

template <typename Scalar>
std::vector<Parameter<Scalar>> parameters_of(Encoder<Scalar>& encoder, const std::string& prefix);

/// Online (trained) and target (EMA) encoders.
///
/// At construction the target is an exact copy of the online backbone and
/// projector; target tensors never require grad. `correspondence` pairs
/// each online parameter (predictor excluded) with its target twin.
template <typename Scalar>
struct EncoderPair {
  Encoder<Scalar> online;
  Encoder<Scalar> target;
  std::vector<std::pair<Tensor<Scalar>, Tensor<Scalar>>> correspondence;

  EncoderPair(const BackboneConfig& backbone, const HeadConfig& heads, Rng& init);

  /// target <- m * target + (1 - m) * online over corresponding parameters.
  void momentum_update(double m);
};

/// Fixed-capacity FIFO of unit-norm key rows, used as negatives.
template <typename Scalar>
class KeyQueue {
 public:
  KeyQueue(Index capacity, Index dim);

  /// Appends rows, evicting the oldest once full. Keys must be detached and
  /// unit-norm; more rows than capacity is a config error.
  void enqueue(const Tensor<Scalar>& keys);

  Index capacity() const { return capacity_; }
  Index dim() const { return dim_; }
  Index fill() const { return fill_; }
  Index cursor() const { return cursor_; }

  /// Stored rows in storage order, [fill, dim]; undefined when empty.
  Tensor<Scalar> entries() const;
  /// Stored rows oldest first.
  RowMatrix<Scalar> ordered() const;

  RowMatrix<Scalar>& storage() { return storage_; }
  const RowMatrix<Scalar>& storage() const { return storage_; }
  /// Restores cursor and fill after loading storage.
  void restore(Index cursor, Index fill);

 private:
  Index capacity_;
  Index dim_;
  RowMatrix<Scalar> storage_;
  Index cursor_ = 0;
  Index fill_ = 0;
};

/// Cosine ramp of the target momentum from `start` at step 0 to 1 at `total_steps`.
struct MomentumSchedule {
  double start = 0.99;
  Index total_steps = 1;

  double at(Index step) const;
};

/// m = 1 - (1 - m0) (cos(pi step / T) + 1) / 2; steps past T clamp to 1.
double momentum_at_step(Index step, Index total_steps, double start);

/// InfoNCE over [q . k+, q . queue rows] / tau with the positive at index 0.
///
/// q and k_plus are unit-norm rows; k_plus and the queue carry no gradient.
/// With an empty queue only the positive logit remains and the loss is 0.
template <typename Scalar>
Tensor<Scalar> contrastive_loss(const Tensor<Scalar>& q, const Tensor<Scalar>& k_plus, const KeyQueue<Scalar>& queue,
                                double tau);

struct MobyConfig {
  double tau = 0.2;
  Index queue_size = 4096;
  double momentum_start = 0.99;
  double online_drop_path = 0.1;
  double target_drop_path = 0.0;
  HeadConfig heads;

  void validate() const;
};

struct StepMetrics {
  Index step = 0;
  double loss = 0.0;
  double momentum = 0.0;
  Index queue_fill = 0;
  double lr = 0.0;
};

/// Everything mutated by training: encoders, both queues, optimizer.
template <typename Scalar>
struct TrainingState {
  EncoderPair<Scalar> encoders;
  std::array<KeyQueue<Scalar>, 2> queues;
  AdamW<Scalar> optimizer;
  Index step = 0;

  TrainingState(const BackboneConfig& backbone, const MobyConfig& moby, const AdamWConfig& adamw, std::uint64_t seed);
};

/// Symmetric loss of one batch and the detached keys it produced.
template <typename Scalar>
struct MobyLoss {
  Tensor<Scalar> loss;
  Tensor<Scalar> k1;
  Tensor<Scalar> k2;
};

/// Forward half of a training step: q from the online branch, k from the
/// target branch under stop-gradient, L(q1, k2, queue2) + L(q2, k1, queue1).
/// Drop-path masks are drawn from streams keyed by (seed, step, branch, view).
template <typename Scalar>
MobyLoss<Scalar> symmetric_loss(const Tensor<Scalar>& view1, const Tensor<Scalar>& view2, EncoderPair<Scalar>& encoders,
                                const std::array<KeyQueue<Scalar>, 2>& queues, const MobyConfig& config,
                                std::uint64_t seed, Index step);

/// One MoBY iteration on a batch of view pairs [b, C, s, s].
///
/// Queries come from the online encoder, keys from the target encoder under
/// stop-gradient; loss = L(q1, k2, queue2) + L(q2, k1, queue1). After the
/// optimizer step the target is EMA-updated with the scheduled momentum,
/// then k1 and k2 are enqueued.
template <typename Scalar>
StepMetrics training_step(const Tensor<Scalar>& view1, const Tensor<Scalar>& view2, TrainingState<Scalar>& state,
                          const MobyConfig& config, const MomentumSchedule& schedule, std::uint64_t seed);

}  // namespace moby
