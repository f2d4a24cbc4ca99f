#include "moby/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "moby/optim.hpp"

namespace moby {

void ProbeConfig::validate() const {
  if (lr_grid.empty()) throw ConfigError("probe lr grid must not be empty");
  for (double lr : lr_grid) {
    if (!(lr > 0)) throw ConfigError("probe learning rates must be positive");
  }
  if (epochs <= 0) throw ConfigError("probe epochs must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("probe warmup_fraction must lie in [0, 1)");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("probe momentum must lie in [0, 1)");
  if (batch_size <= 0 || extract_batch <= 0) throw ConfigError("probe batch sizes must be positive");
  if (augment_passes < 0) throw ConfigError("probe augment_passes must be non-negative");
  if (knn_k <= 0) throw ConfigError("knn_k must be positive");
  if (!(knn_tau > 0)) throw ConfigError("knn_tau must be positive");
}

double top1_accuracy(const FeatureMatrix& logits, std::span<const Index> labels) {
  if (logits.rows() == 0) throw ContractError("top1_accuracy needs at least one row");
  if (static_cast<Index>(labels.size()) != logits.rows()) throw ShapeError("top1_accuracy: one label per row required");
  Index correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);  // first maximum on ties
    correct += best == labels[static_cast<std::size_t>(r)];
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

template <typename Scalar>
FeatureMatrix extract_features(Backbone<Scalar>& backbone, const std::vector<Image>& images, Index batch) {
  if (Tape<Scalar>::active() != nullptr) throw ContractError("feature extraction must not run under a gradient tape");
  FeatureMatrix out(static_cast<Index>(images.size()), backbone.feature_dim());
  Rng unused(0);
  for (std::size_t begin = 0; begin < images.size(); begin += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(images.size(), begin + static_cast<std::size_t>(batch));
    const std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(begin), images.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor<Scalar> f = backbone.forward(stack_images<Scalar>(chunk), 0.0, false, unused);
    out.middleRows(static_cast<Index>(begin), static_cast<Index>(end - begin)) = f.matrix().template cast<double>();
  }
  return out;
}

namespace {

std::vector<Index> labels_of(const Dataset& data) {
  if (!data.labeled()) throw ConfigError("evaluation needs a labeled dataset");
  std::vector<Index> labels;
  for (const auto& r : data.records) labels.push_back(*r.label);
  return labels;
}

}  // namespace

template <typename Scalar>
FeatureSet eval_features(Backbone<Scalar>& backbone, const Dataset& data, Index batch) {
  FeatureSet set{FeatureMatrix(), labels_of(data)};
  std::vector<Image> images;
  for (const auto& r : data.records) images.push_back(eval_transform(r.image, data.size, data.stats));
  set.features = extract_features(backbone, images, batch);
  return set;
}

template <typename Scalar>
std::vector<FeatureSet> augmented_features(Backbone<Scalar>& backbone, const Dataset& data, Index passes,
                                           std::uint64_t seed, Index batch) {
  const auto labels = labels_of(data);
  const AugmentationPolicy policy = AugmentationPolicy::crop_flip();
  std::vector<FeatureSet> out;
  for (Index p = 0; p < passes; ++p) {
    std::vector<Image> images;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      Rng rng = Rng::derive(seed, {tag(Stream::kProbe), static_cast<std::uint64_t>(p), i});
      Image img = augment(data.records[i].image, policy, data.size, rng);
      normalize(img, data.stats);
      images.push_back(std::move(img));
    }
    out.push_back({extract_features(backbone, images, batch), labels});
  }
  return out;
}

FeatureScaler FeatureScaler::fit(const FeatureMatrix& x) {
  FeatureScaler s;
  s.mean = x.colwise().mean();
  s.stddev = ((x.rowwise() - s.mean).array().square().colwise().mean().sqrt()).max(1e-8).matrix();
  return s;
}

FeatureMatrix FeatureScaler::apply(const FeatureMatrix& x) const {
  return ((x.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
}

FeatureMatrix LinearProbe::logits(const FeatureMatrix& x) const { return (x * weight.transpose()).rowwise() + bias; }

double probe_lr(double base, Index it, Index warmup, Index total) {
  if (it < warmup) return base * static_cast<double>(it + 1) / static_cast<double>(warmup);
  const double progress = static_cast<double>(it - warmup) / static_cast<double>(std::max<Index>(total - warmup, 1));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

LinearProbe train_linear_probe(const std::vector<FeatureSet>& train, Index classes, double lr, const ProbeConfig& config) {
  config.validate();
  if (train.empty() || train.front().features.rows() == 0) throw ContractError("probe training needs features");
  if (classes < 2) throw ConfigError("probe needs at least two classes");
  const Index n = train.front().features.rows(), dim = train.front().features.cols();
  for (const auto& set : train) {
    if (set.features.rows() != n || set.features.cols() != dim) throw ShapeError("probe feature passes differ in shape");
    for (Index l : set.labels) {
      if (l < 0 || l >= classes) throw IndexError("probe label " + std::to_string(l) + " outside [0, classes)");
    }
  }

  Tensor<double> weight({classes, dim}, true);
  Tensor<double> bias({classes}, true);
  Sgd<double> sgd({{"probe.weight", weight}, {"probe.bias", bias}}, config.momentum, 0.0);
  const Index batch = std::min(config.batch_size, n);
  const Index per_epoch = (n + batch - 1) / batch;
  const Index total = per_epoch * config.epochs;
  const auto warmup = static_cast<Index>(std::ceil(config.warmup_fraction * static_cast<double>(total)));

  Index it = 0;
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    const FeatureSet& set = train[static_cast<std::size_t>(epoch) % train.size()];
    const auto order = epoch_order(n, config.seed, epoch);
    for (Index b = 0; b < per_epoch; ++b, ++it) {
      const Index begin = b * batch, rows = std::min(batch, n - begin);
      Tensor<double> x = Tensor<double>::uninitialized({rows, dim});
      std::vector<Index> y(static_cast<std::size_t>(rows));
      for (Index r = 0; r < rows; ++r) {
        const Index src = order[static_cast<std::size_t>(begin + r)];
        x.matrix().row(r) = set.features.row(src);
        y[static_cast<std::size_t>(r)] = set.labels[static_cast<std::size_t>(src)];
      }
      {
        Tape<double> tape;
        const Tensor<double> logits = add(matmul(x, transpose(weight)), bias);
        tape.backward(cross_entropy_from_logits(logits, std::span<const Index>(y)));
      }
      sgd.step(probe_lr(lr, it, warmup, total));
      sgd.zero_grad();
    }
  }
  LinearProbe probe;
  probe.weight = weight.matrix();
  probe.bias = Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), classes);
  return probe;
}

std::vector<Index> knn_predict(const FeatureMatrix& train, std::span<const Index> train_labels, const FeatureMatrix& query,
                               Index classes, Index k, double tau) {
  if (train.rows() == 0) throw ContractError("k-NN needs training features");
  if (static_cast<Index>(train_labels.size()) != train.rows()) throw ShapeError("k-NN: one label per training row required");
  const FeatureMatrix a = train.rowwise().normalized();
  const FeatureMatrix q = query.rowwise().normalized();
  const FeatureMatrix sims = q * a.transpose();
  const Index kk = std::min(k, train.rows());
  std::vector<Index> out;
  std::vector<Index> idx(static_cast<std::size_t>(train.rows()));
  for (Index r = 0; r < q.rows(); ++r) {
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
    // Highest similarity first; equal similarities keep the lower index.
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](Index x, Index y) {
      const double sx = sims(r, x), sy = sims(r, y);
      return sx > sy || (sx == sy && x < y);
    });
    Eigen::VectorXd votes = Eigen::VectorXd::Zero(classes);
    for (Index j = 0; j < kk; ++j) {
      const Index t = idx[static_cast<std::size_t>(j)];
      votes[train_labels[static_cast<std::size_t>(t)]] += std::exp(sims(r, t) / tau);
    }
    Index best = 0;
    votes.maxCoeff(&best);
    out.push_back(best);
  }
  return out;
}

double knn_accuracy(const FeatureSet& train, const FeatureSet& test, Index classes, Index k, double tau) {
  const auto pred = knn_predict(train.features, train.labels, test.features, classes, k, tau);
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

template <typename Scalar>
EvalReport evaluate(Backbone<Scalar>& backbone, const DatasetSplit& data, const ProbeConfig& config) {
  config.validate();
  const Index classes = std::max(data.train.num_classes, data.test.num_classes);
  const FeatureSet train_eval = eval_features(backbone, data.train, config.extract_batch);
  const FeatureSet test_eval = eval_features(backbone, data.test, config.extract_batch);

  std::vector<FeatureSet> train_views =
      config.augment_passes > 0 ? augmented_features(backbone, data.train, config.augment_passes, config.seed, config.extract_batch)
                                : std::vector<FeatureSet>{train_eval};
  const FeatureScaler scaler = FeatureScaler::fit(train_views.front().features);
  for (auto& v : train_views) v.features = scaler.apply(v.features);
  const FeatureMatrix test_scaled = scaler.apply(test_eval.features);

  EvalReport report;
  report.best_top1 = -1.0;
  for (double lr : config.lr_grid) {
    const LinearProbe probe = train_linear_probe(train_views, classes, lr, config);
    const double acc = top1_accuracy(probe.logits(test_scaled), test_eval.labels);
    report.lrs.push_back(lr);
    report.top1.push_back(acc);
    if (acc > report.best_top1) {
      report.best_top1 = acc;
      report.best_lr = lr;
    }
  }
  report.knn_top1 = knn_accuracy(train_eval, test_eval, classes, config.knn_k, config.knn_tau);
  return report;
}

void write_report_csv(std::ostream& out, const EvalReport& report) {
  out << "lr,top1,knn_top1\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < report.lrs.size(); ++i) out << report.lrs[i] << ',' << report.top1[i] << ',' << report.knn_top1 << '\n';
}

std::string report_summary(const EvalReport& report) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "linear probe top-1 by lr:";
  for (std::size_t i = 0; i < report.lrs.size(); ++i) s << "  " << report.lrs[i] << " -> " << 100 * report.top1[i] << "%";
  s << "\nbest: " << 100 * report.best_top1 << "% at lr " << report.best_lr << "\nk-NN top-1: " << 100 * report.knn_top1 << "%\n";
  return s.str();
}

#define MOBY_INSTANTIATE_EVAL(S)                                                                                   \
  template FeatureMatrix extract_features(Backbone<S>&, const std::vector<Image>&, Index);                         \
  template FeatureSet eval_features(Backbone<S>&, const Dataset&, Index);                                          \
  template std::vector<FeatureSet> augmented_features(Backbone<S>&, const Dataset&, Index, std::uint64_t, Index); \
  template EvalReport evaluate(Backbone<S>&, const DatasetSplit&, const ProbeConfig&);

MOBY_INSTANTIATE_EVAL(float)
MOBY_INSTANTIATE_EVAL(double)

}  // namespace moby
