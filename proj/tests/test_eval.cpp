#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "moby/eval.hpp"

using namespace moby;

namespace {

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

// Gaussian clusters around well separated class centres.
FeatureSet clusters(Index n, Index classes, Index dim, double spread, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix centres(classes, dim);
  Rng crng(12345);
  for (Index c = 0; c < classes; ++c) {
    for (Index d = 0; d < dim; ++d) centres(c, d) = 4.0 * crng.normal();
  }
  FeatureSet set{FeatureMatrix(n, dim), {}};
  for (Index i = 0; i < n; ++i) {
    const Index label = i % classes;
    for (Index d = 0; d < dim; ++d) set.features(i, d) = centres(label, d) + spread * rng.normal();
    set.labels.push_back(label);
  }
  return set;
}

std::vector<std::uint8_t> bytes_of(Backbone<double>& b) {
  std::vector<std::uint8_t> out;
  b.visit("", [&](const std::string&, Tensor<double>& t, TensorRole) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.data().size() * static_cast<Index>(sizeof(double)));
  });
  return out;
}

}  // namespace

TEST_CASE("top-1 accuracy breaks ties toward the lowest class index") {
  FeatureMatrix logits(3, 3);
  logits << 1, 1, 0,  //
      0, 2, 2,        //
      5, 0, 5;
  const std::vector<Index> labels{0, 2, 0};
  CHECK(top1_accuracy(logits, labels) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(top1_accuracy(FeatureMatrix(0, 3), std::vector<Index>{}), ContractError);
  CHECK_THROWS_AS(top1_accuracy(logits, std::vector<Index>{0}), ShapeError);
}

TEST_CASE("probe learning rate warms up linearly then follows a cosine to zero") {
  CHECK(probe_lr(1.0, 0, 4, 100) == doctest::Approx(0.25));
  CHECK(probe_lr(1.0, 3, 4, 100) == doctest::Approx(1.0));
  CHECK(probe_lr(1.0, 4, 4, 100) == doctest::Approx(1.0));
  CHECK(probe_lr(2.0, 52, 4, 100) == doctest::Approx(1.0));
  CHECK(probe_lr(1.0, 100, 4, 100) == doctest::Approx(0.0));
}

TEST_CASE("one probe step from zero weights matches the softmax gradient closed form") {
  const FeatureSet set = clusters(10, 3, 4, 1.0, 3);
  ProbeConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 10;
  cfg.momentum = 0.0;
  const double lr = 0.7;
  const LinearProbe probe = train_linear_probe({set}, 3, lr, cfg);
  // Zero logits give uniform probabilities: dL/dW = (1/c - onehot)^T X / n.
  FeatureMatrix expected_w = FeatureMatrix::Zero(3, 4);
  Eigen::RowVectorXd expected_b = Eigen::RowVectorXd::Zero(3);
  for (Index i = 0; i < 10; ++i) {
    for (Index c = 0; c < 3; ++c) {
      const double g = (1.0 / 3.0 - (set.labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0)) / 10.0;
      expected_w.row(c) -= lr * g * set.features.row(i);
      expected_b[c] -= lr * g;
    }
  }
  CHECK((probe.weight - expected_w).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((probe.bias - expected_b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a linearly separable problem is solved by the probe") {
  const FeatureSet train = clusters(400, 4, 16, 0.5, 1);
  const FeatureSet test = clusters(400, 4, 16, 0.5, 2);
  ProbeConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  const FeatureScaler scaler = FeatureScaler::fit(train.features);
  FeatureSet scaled = train;
  scaled.features = scaler.apply(train.features);
  const LinearProbe probe = train_linear_probe({scaled}, 4, 1.0, cfg);
  CHECK(top1_accuracy(probe.logits(scaler.apply(test.features)), test.labels) >= 0.99);
}

TEST_CASE("probe accuracy on label-independent features stays within a binomial bound of chance") {
  const Index n = 2000, classes = 4;
  FeatureSet train = clusters(n, classes, 8, 1.0, 5);
  FeatureSet test = clusters(n, classes, 8, 1.0, 6);
  Rng rng(99);
  // Labels drawn independently of the features.
  for (auto* s : {&train, &test}) {
    for (auto& l : s->labels) l = static_cast<Index>(rng.uniform() * classes);
  }
  ProbeConfig cfg;
  cfg.epochs = 5;
  const LinearProbe probe = train_linear_probe({train}, classes, 0.5, cfg);
  const double acc = top1_accuracy(probe.logits(test.features), test.labels);
  const double p = 1.0 / classes, sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  CHECK(std::abs(acc - p) < 4 * sigma);
}

TEST_CASE("k-NN agrees with a brute-force reference on 100 queries") {
  const FeatureSet train = clusters(300, 5, 6, 3.0, 7);
  const FeatureSet test = clusters(100, 5, 6, 3.0, 8);
  const Index k = 20;
  const double tau = 0.07;
  const auto pred = knn_predict(train.features, train.labels, test.features, 5, k, tau);
  for (Index q = 0; q < 100; ++q) {
    std::vector<std::pair<long double, Index>> sims;
    const auto a = test.features.row(q);
    for (Index t = 0; t < 300; ++t) {
      const auto b = train.features.row(t);
      long double dot = 0, na = 0, nb = 0;
      for (Index d = 0; d < 6; ++d) {
        dot += static_cast<long double>(a[d]) * b[d];
        na += static_cast<long double>(a[d]) * a[d];
        nb += static_cast<long double>(b[d]) * b[d];
      }
      sims.emplace_back(-dot / std::sqrt(na * nb), t);
    }
    std::sort(sims.begin(), sims.end());
    std::vector<long double> votes(5, 0.0L);
    for (Index j = 0; j < k; ++j) votes[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(sims[static_cast<std::size_t>(j)].second)])] += std::exp(-sims[static_cast<std::size_t>(j)].first / tau);
    const auto best = std::max_element(votes.begin(), votes.end()) - votes.begin();
    CHECK(pred[static_cast<std::size_t>(q)] == best);
  }
}

TEST_CASE("1-NN of a duplicated training point returns its label") {
  const FeatureSet train = clusters(50, 5, 6, 3.0, 9);
  for (Index i = 0; i < 50; ++i) {
    const FeatureMatrix query = train.features.row(i);
    const auto pred = knn_predict(train.features, train.labels, query, 5, 1, 0.07);
    CHECK(pred[0] == train.labels[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("evaluate leaves the backbone untouched, is deterministic and accepts a single learning rate") {
  DatasetSplit data;
  data.train = synthetic_shapes(4, 96, 11, 16);
  data.test = synthetic_shapes(4, 48, 12, 16);
  data.test.stats = data.train.stats;
  Rng init(5);
  auto backbone = make_backbone<double>(tiny_backbone(), init);
  const auto before = bytes_of(*backbone);

  ProbeConfig cfg;
  cfg.lr_grid = {0.5};
  cfg.epochs = 4;
  cfg.augment_passes = 2;
  cfg.batch_size = 32;
  const EvalReport a = evaluate(*backbone, data, cfg);
  const EvalReport b = evaluate(*backbone, data, cfg);
  CHECK(bytes_of(*backbone) == before);
  REQUIRE(a.lrs.size() == 1);
  CHECK(a.best_lr == 0.5);
  CHECK(a.top1 == b.top1);
  CHECK(a.knn_top1 == b.knn_top1);

  std::ostringstream csv;
  write_report_csv(csv, a);
  CHECK(csv.str().rfind("lr,top1,knn_top1\n", 0) == 0);
  CHECK(report_summary(a).find("k-NN") != std::string::npos);
}

TEST_CASE("evaluation rejects unlabeled data, bad configs and taped extraction") {
  DatasetSplit data;
  data.train = synthetic_shapes(4, 16, 1, 16);
  data.test = data.train;
  for (auto& r : data.train.records) r.label.reset();
  Rng init(1);
  auto backbone = make_backbone<double>(tiny_backbone(), init);
  ProbeConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(evaluate(*backbone, data, cfg), ConfigError);

  ProbeConfig bad;
  bad.lr_grid = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ProbeConfig{};
  bad.knn_tau = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  Tape<double> tape;
  std::vector<Image> imgs{eval_transform(data.test.records[0].image, 16, data.test.stats)};
  CHECK_THROWS_AS(extract_features(*backbone, imgs, 4), ContractError);
}
