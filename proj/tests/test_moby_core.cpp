#include <doctest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "moby/data.hpp"
#include "moby/moby.hpp"

using namespace moby;
using moby::testing::grad_check;
using moby::testing::random_tensor;

namespace {

using T64 = Tensor<double>;

T64 unit_rows(Index rows, Index dim, Rng& rng) {
  T64 t({rows, dim});
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < dim; ++c) t.data()[r * dim + c] = rng.normal();
    t.data().segment(r * dim, dim) /= t.data().segment(r * dim, dim).matrix().norm();
  }
  return t;
}

T64 basis_rows(Index rows, Index dim, Index axis) {
  T64 t({rows, dim});
  for (Index r = 0; r < rows; ++r) t.data()[r * dim + axis] = 1.0;
  return t;
}

// -log softmax of the positive, evaluated row by row in extended precision.
long double direct_loss(const T64& q, const T64& k, const RowMatrix<double>& queue, double tau) {
  const Index b = q.dim(0), d = q.dim(1);
  long double total = 0;
  for (Index r = 0; r < b; ++r) {
    auto dot = [&](auto&& row) {
      long double s = 0;
      for (Index c = 0; c < d; ++c) s += static_cast<long double>(q.data()[r * d + c]) * static_cast<long double>(row(c));
      return s / static_cast<long double>(tau);
    };
    const long double pos = dot([&](Index c) { return k.data()[r * d + c]; });
    long double denom = std::exp(pos);
    for (Index i = 0; i < queue.rows(); ++i) denom += std::exp(dot([&](Index c) { return queue(i, c); }));
    total += -(pos - std::log(denom));
  }
  return total / static_cast<long double>(b);
}

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 12;
  cfg.depths = {1, 1};
  cfg.num_heads = {2, 4};
  cfg.window_size = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

MobyConfig tiny_moby() {
  MobyConfig cfg;
  cfg.queue_size = 16;
  cfg.heads = {32, 16};
  return cfg;
}

}  // namespace

TEST_CASE("contrastive loss with orthogonal negatives") {
  const Index k = 8, d = 16;
  for (double tau : {0.07, 0.2, 1.0}) {
    KeyQueue<double> queue(k, d);
    queue.enqueue(basis_rows(k, d, 3));
    const T64 q = basis_rows(2, d, 0);
    const double loss = contrastive_loss(q, q, queue, tau).item();
    const double expected = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + k));
    CHECK(std::abs(loss - expected) < 1e-12);
  }
}

TEST_CASE("contrastive loss with all logits equal") {
  const Index k = 4096, d = 128;
  KeyQueue<double> queue(k, d);
  queue.enqueue(basis_rows(k, d, 0));
  const T64 q = basis_rows(4, d, 0);
  const double loss = contrastive_loss(q, q, queue, 0.2).item();
  CHECK(std::abs(loss - std::log(4097.0)) < 1e-9);
  CHECK(std::abs(loss - 8.318) < 5e-4);
}

TEST_CASE("contrastive loss matches a direct softmax oracle") {
  Rng rng(1);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index b = 8, d = 16, k = 32;
    KeyQueue<double> queue(k, d);
    queue.enqueue(unit_rows(k, d, rng));
    const T64 q = unit_rows(b, d, rng), kp = unit_rows(b, d, rng);
    const double tau = rng.uniform(0.05, 1.0);
    const double got = contrastive_loss(q, kp, queue, tau).item();
    worst = std::max(worst, std::abs(static_cast<double>(direct_loss(q, kp, queue.ordered(), tau)) - got));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("contrastive loss positivity and lower bound") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Index fill = 1 + static_cast<Index>(rng.below(20));
    const double tau = rng.uniform(0.05, 1.0);
    KeyQueue<double> queue(32, 8);
    queue.enqueue(unit_rows(fill, 8, rng));
    const T64 q = unit_rows(4, 8, rng);
    const double loss = contrastive_loss(q, q, queue, tau).item();
    const double bound = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + static_cast<double>(fill) * std::exp(-1 / tau)));
    CHECK(loss > 0);
    CHECK(loss >= bound - 1e-12);
  }
}

TEST_CASE("contrastive loss on a cold queue") {
  KeyQueue<double> queue(8, 4);
  const T64 q = basis_rows(3, 4, 1);
  CHECK(contrastive_loss(q, q, queue, 0.2).item() == 0.0);
}

TEST_CASE("contrastive loss errors") {
  Rng rng(3);
  KeyQueue<double> queue(8, 4);
  queue.enqueue(unit_rows(2, 4, rng));
  const T64 q = unit_rows(2, 4, rng);
  CHECK_THROWS_AS(contrastive_loss(q, q, queue, 0.0), ConfigError);
  CHECK_THROWS_AS(contrastive_loss(q, q, queue, -0.1), ConfigError);
  CHECK_THROWS_AS(contrastive_loss(scale(q, 1.01), q, queue, 0.2), ContractError);
  CHECK_THROWS_AS(contrastive_loss(q, scale(q, 0.9), queue, 0.2), ContractError);
  T64 live = q.clone();
  live.set_requires_grad(true);
  CHECK_THROWS_AS(contrastive_loss(q, live, queue, 0.2), ContractError);
  CHECK_THROWS_AS(contrastive_loss(unit_rows(2, 5, rng), unit_rows(2, 5, rng), queue, 0.2), ShapeError);
}

TEST_CASE("contrastive loss gradient flows only into q") {
  Rng rng(4);
  KeyQueue<double> queue(8, 6);
  queue.enqueue(unit_rows(5, 6, rng));
  const T64 raw = random_tensor({3, 6}, rng);
  const T64 kp = unit_rows(3, 6, rng);
  const auto r = grad_check([&] { return contrastive_loss(l2_normalize(raw), kp, queue, 0.2); }, {raw});
  CHECK(r.rel_error < 1e-6);
  CHECK(!kp.has_grad());
}

TEST_CASE("queue is FIFO") {
  KeyQueue<double> queue(4, 2);
  auto rows = [](std::vector<double> angles) {
    T64 t({static_cast<Index>(angles.size()), 2});
    for (std::size_t i = 0; i < angles.size(); ++i) {
      t.data()[static_cast<Index>(2 * i)] = std::cos(angles[i]);
      t.data()[static_cast<Index>(2 * i + 1)] = std::sin(angles[i]);
    }
    return t;
  };
  queue.enqueue(rows({0.1, 0.2, 0.3, 0.4}));  // a b c d
  queue.enqueue(rows({0.5, 0.6}));            // e f
  CHECK(queue.fill() == 4);
  const auto ordered = queue.ordered();
  const std::vector<double> expected{0.3, 0.4, 0.5, 0.6};
  for (Index i = 0; i < 4; ++i) CHECK(std::atan2(ordered(i, 1), ordered(i, 0)) == doctest::Approx(expected[static_cast<std::size_t>(i)]));
}

TEST_CASE("queue fill and rejection") {
  Rng rng(5);
  for (Index b : {1, 3, 4, 5, 16}) {
    KeyQueue<double> queue(16, 4);
    const Index needed = (16 + b - 1) / b;
    for (Index s = 1; s <= needed + 3; ++s) {
      queue.enqueue(unit_rows(b, 4, rng));
      CHECK(queue.fill() == std::min<Index>(s * b, 16));
    }
  }
  KeyQueue<double> queue(4, 3);
  CHECK_THROWS_AS(queue.enqueue(unit_rows(5, 3, rng)), ConfigError);
  CHECK_THROWS_AS(queue.enqueue(scale(unit_rows(2, 3, rng), 2.0)), ContractError);
  T64 live = unit_rows(2, 3, rng);
  live.set_requires_grad(true);
  CHECK_THROWS_AS(queue.enqueue(live), ContractError);
  CHECK_THROWS_AS(queue.enqueue(unit_rows(2, 4, rng)), ShapeError);
  CHECK(queue.fill() == 0);
}

TEST_CASE("queue rows stay unit norm") {
  Rng rng(6);
  KeyQueue<double> queue(64, 16);
  for (int i = 0; i < 1000; ++i) queue.enqueue(unit_rows(1 + static_cast<Index>(rng.below(8)), 16, rng));
  const auto norms = queue.storage().rowwise().norm().array();
  CHECK((norms - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("queue entries are evicted after K/b steps") {
  Rng rng(7);
  const Index k = 12, b = 4;
  KeyQueue<double> queue(k, 3);
  std::vector<T64> batches;
  for (int s = 0; s < 10; ++s) {
    batches.push_back(unit_rows(b, 3, rng));
    queue.enqueue(batches.back());
    // Batch s is present for steps s .. s + K/b - 1 and gone afterwards.
    const auto rows = queue.ordered();
    for (int t = 0; t <= s; ++t) {
      bool present = false;
      for (Index i = 0; i < rows.rows(); ++i) present |= rows.row(i) == batches[static_cast<std::size_t>(t)].matrix().row(0);
      CHECK(present == (s - t < k / b));
    }
  }
}

TEST_CASE("momentum schedule") {
  CHECK(momentum_at_step(0, 100, 0.99) == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(momentum_at_step(100, 100, 0.99) == 1.0);
  CHECK(std::abs(momentum_at_step(50, 100, 0.99) - 0.995) < 1e-15);
  double prev = 0.0;
  for (Index s = 0; s <= 1000; ++s) {
    const double m = momentum_at_step(s, 1000, 0.97);
    CHECK(m >= prev);
    CHECK(m >= 0.97 - 1e-15);
    CHECK(m <= 1.0);
    prev = m;
  }
  CHECK(momentum_at_step(101, 100, 0.99) == 1.0);
  CHECK_THROWS_AS(momentum_at_step(-1, 100, 0.99), ConfigError);
  CHECK_THROWS_AS(momentum_at_step(0, 0, 0.99), ConfigError);
  MomentumSchedule sched{0.9, 10};
  CHECK(sched.at(5) == doctest::Approx(0.95));
}

TEST_CASE("encoder pair starts as an exact copy") {
  Rng rng(8);
  EncoderPair<double> pair(tiny_backbone(), HeadConfig{32, 16}, rng);
  const auto on = collect(pair.online, "");
  const auto tg = collect(pair.target, "");
  CHECK(pair.online.has_predictor());
  CHECK(!pair.target.has_predictor());
  Index matched = 0;
  for (const auto& t : tg) {
    CHECK(t.name.rfind("predictor", 0) != 0);
    CHECK(!t.value.requires_grad());
    for (const auto& o : on) {
      if (o.name == t.name) {
        CHECK((o.value.data() == t.value.data()).all());
        CHECK(!o.value.shares_storage_with(t.value));
        ++matched;
      }
    }
  }
  CHECK(matched == static_cast<Index>(tg.size()));
  Index online_non_predictor = 0;
  for (const auto& o : on) online_non_predictor += o.role == TensorRole::kParameter && o.name.rfind("predictor", 0) != 0;
  CHECK(static_cast<Index>(pair.correspondence.size()) == online_non_predictor);
}

TEST_CASE("momentum update contracts towards frozen online weights") {
  Rng rng(9);
  EncoderPair<double> pair(tiny_backbone(), HeadConfig{32, 16}, rng);
  for (auto& [src, dst] : pair.correspondence) {
    for (Index i = 0; i < dst.size(); ++i) dst.data()[i] += rng.uniform(-1, 1);
  }
  auto gap = [&] {
    double s = 0;
    for (auto& [src, dst] : pair.correspondence) s += (src.data() - dst.data()).square().sum();
    return std::sqrt(s);
  };
  double before = gap();
  for (int i = 0; i < 5; ++i) {
    pair.momentum_update(0.9);
    const double after = gap();
    CHECK(after == doctest::Approx(0.9 * before).epsilon(1e-12));
    before = after;
  }
}

TEST_CASE("training step applies the EMA and enqueues keys") {
  TrainingState<double> state(tiny_backbone(), tiny_moby(), AdamWConfig{}, 42);
  Rng data(10);
  const auto v1 = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  const auto v2 = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  const MomentumSchedule sched{0.99, 10};
  for (int s = 0; s < 3; ++s) {
    std::vector<Eigen::ArrayXd> old_target;
    for (auto& [src, dst] : state.encoders.correspondence) old_target.push_back(dst.data());
    const auto metrics = training_step(v1, v2, state, tiny_moby(), sched, 42);
    CHECK(metrics.step == s);
    CHECK(metrics.momentum == sched.at(s));
    CHECK(metrics.queue_fill == std::min<Index>(4 * (s + 1), 16));
    CHECK(metrics.lr == 1e-3);
    CHECK(std::isfinite(metrics.loss));
    if (s == 0) CHECK(metrics.loss == 0.0);  // empty queues: only the positive logit
    if (s > 0) CHECK(metrics.loss > 0.0);
    double worst = 0;
    std::size_t i = 0;
    for (auto& [src, dst] : state.encoders.correspondence) {
      const Eigen::ArrayXd expected = metrics.momentum * old_target[i++] + (1 - metrics.momentum) * src.data();
      worst = std::max(worst, (expected - dst.data()).abs().maxCoeff());
      CHECK(!dst.has_grad());
    }
    CHECK(worst < 1e-12);
    for (const auto& p : state.optimizer.parameters()) CHECK(!p.value.has_grad());
    CHECK(state.queues[0].fill() == state.queues[1].fill());
  }
  CHECK(state.step == 3);
  CHECK(state.optimizer.steps() == 3);
}

TEST_CASE("symmetric loss is invariant to swapping the views") {
  MobyConfig cfg = tiny_moby();
  cfg.online_drop_path = 0.0;
  Rng data(11);
  const auto v1 = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  const auto v2 = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  const auto qa = unit_rows(8, 16, data), qb = unit_rows(6, 16, data);
  TrainingState<double> a(tiny_backbone(), cfg, AdamWConfig{}, 7), b(tiny_backbone(), cfg, AdamWConfig{}, 7);
  a.queues[0].enqueue(qa);
  a.queues[1].enqueue(qb);
  b.queues[0].enqueue(qb);
  b.queues[1].enqueue(qa);
  const MomentumSchedule sched{0.99, 10};
  const auto ma = training_step(v1, v2, a, cfg, sched, 7);
  const auto mb = training_step(v2, v1, b, cfg, sched, 7);
  CHECK(ma.loss == mb.loss);
}

TEST_CASE("duplicated views on frozen weights match a direct evaluation") {
  MobyConfig cfg = tiny_moby();
  cfg.online_drop_path = 0.0;
  Rng data(12);
  const auto v = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  TrainingState<double> state(tiny_backbone(), cfg, AdamWConfig{}, 3);
  const auto negatives = unit_rows(10, 16, data);
  state.queues[0].enqueue(negatives);
  state.queues[1].enqueue(negatives);

  Rng unused(0);
  const auto q = l2_normalize(state.encoders.online.forward(v, 0.0, true, unused));
  const auto k = l2_normalize(state.encoders.target.forward(v, 0.0, true, unused));
  const long double oracle = 2 * direct_loss(q, k, state.queues[0].ordered(), cfg.tau);

  const auto metrics = training_step(v, v, state, cfg, MomentumSchedule{0.99, 10}, 3);
  CHECK(std::abs(metrics.loss - static_cast<double>(oracle)) < 1e-10);
}

TEST_CASE("end-to-end gradient on sampled online parameters") {
  MobyConfig cfg = tiny_moby();
  TrainingState<double> state(tiny_backbone(), cfg, AdamWConfig{}, 5);
  Rng data(13);
  state.queues[0].enqueue(unit_rows(12, 16, data));
  state.queues[1].enqueue(unit_rows(12, 16, data));
  const auto v1 = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  const auto v2 = random_tensor({4, 3, 16, 16}, data, 1.0, false);

  // One coordinate in each of 20 distinct parameter tensors, pooled into a
  // single relative error: some biases feed a batch norm and have an exactly
  // zero gradient, which a per-coordinate ratio would turn into noise.
  std::vector<T64> params;
  for (const auto& p : state.optimizer.parameters()) params.push_back(p.value);
  Rng pick(14);
  for (std::size_t i = params.size() - 1; i > 0; --i) std::swap(params[i], params[pick.below(i + 1)]);
  params.resize(20);

  CHECK(Tape<double>::active() == nullptr);
  const auto loss = [&] { return symmetric_loss(v1, v2, state.encoders, state.queues, cfg, 5, 0).loss; };
  const auto r = grad_check(loss, params, 1e-5, 1, 15);
  CHECK(r.rel_error < 1e-4);
  CHECK(r.analytic_norm > 1e-3);
  for (auto& [src, dst] : state.encoders.correspondence) CHECK(!dst.has_grad());
}

TEST_CASE("non-finite loss is reported with the first bad op") {
  TrainingState<double> state(tiny_backbone(), tiny_moby(), AdamWConfig{}, 6);
  Rng data(15);
  state.queues[0].enqueue(unit_rows(4, 16, data));
  state.queues[1].enqueue(unit_rows(4, 16, data));
  auto v = random_tensor({4, 3, 16, 16}, data, 1.0, false);
  v.data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    training_step(v, v, state, tiny_moby(), MomentumSchedule{0.99, 10}, 6);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("first non-finite op") != std::string::npos);
  }
  CHECK(state.step == 0);
  CHECK(state.optimizer.steps() == 0);
}

TEST_CASE("config validation") {
  MobyConfig cfg;
  cfg.tau = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.queue_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.target_drop_path = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(MobyConfig{}.validate());
}

TEST_CASE("float training step runs") {
  TrainingState<float> state(tiny_backbone(), tiny_moby(), AdamWConfig{}, 8);
  Tensor<float> v({4, 3, 16, 16});
  Rng data(16);
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(data.uniform(-1, 1));
  for (int s = 0; s < 3; ++s) CHECK(std::isfinite(training_step(v, v, state, tiny_moby(), MomentumSchedule{0.99, 3}, 8).loss));
}

TEST_CASE("smoke training lowers the loss") {
  // Queue of two batches so the negative count is constant after step 1.
  MobyConfig cfg = tiny_moby();
  cfg.queue_size = 32;
  const Dataset data = synthetic_shapes(4, 320, 17, 16);
  PairLoader loader(data, AugmentationPolicy::view1(), AugmentationPolicy::view2(), 16, 17);
  TrainingState<double> state(tiny_backbone(), cfg, AdamWConfig{}, 17);
  const MomentumSchedule sched{0.99, 200};
  std::vector<double> losses;
  for (Index s = 0; s < 200; ++s) {
    const auto batch = loader.batch<double>(s);
    losses.push_back(training_step(batch.view1, batch.view2, state, cfg, sched, 17).loss);
  }
  auto window_mean = [&](std::size_t from) {
    double m = 0;
    for (std::size_t i = from; i < from + 50; ++i) m += losses[i];
    return m / 50;
  };
  const double first = window_mean(0), last = window_mean(150);
  MESSAGE("initial 50-step mean " << first << ", final 50-step mean " << last);
  CHECK(last < first);
}
