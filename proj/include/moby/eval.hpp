#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moby/backbone.hpp"
#include "moby/data.hpp"

namespace moby {

using FeatureMatrix = RowMatrix<double>;

struct FeatureSet {
  FeatureMatrix features;  // [n, D]
  std::vector<Index> labels;
};

struct ProbeConfig {
  std::vector<double> lr_grid{0.5, 0.75, 1.0, 1.25};
  Index epochs = 100;
  double warmup_fraction = 0.05;
  double momentum = 0.9;
  Index batch_size = 256;
  /// Augmented copies of the training set; epoch e trains on copy e mod passes.
  /// Zero trains on centre crops only.
  Index augment_passes = 8;
  Index knn_k = 20;
  double knn_tau = 0.07;
  Index extract_batch = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Fraction of rows whose first maximal logit sits at the label.
double top1_accuracy(const FeatureMatrix& logits, std::span<const Index> labels);

/// Backbone features of already transformed images, in eval mode, never taped.
template <typename Scalar>
FeatureMatrix extract_features(Backbone<Scalar>& backbone, const std::vector<Image>& images, Index batch);

/// Centre-crop features with labels; missing labels are a config error.
template <typename Scalar>
FeatureSet eval_features(Backbone<Scalar>& backbone, const Dataset& data, Index batch);

/// `passes` copies of crop-and-flip features of the training set.
template <typename Scalar>
std::vector<FeatureSet> augmented_features(Backbone<Scalar>& backbone, const Dataset& data, Index passes,
                                           std::uint64_t seed, Index batch);

/// Per-dimension affine map fitted on training features: (x - mean) / std.
struct FeatureScaler {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd stddev;

  static FeatureScaler fit(const FeatureMatrix& x);
  FeatureMatrix apply(const FeatureMatrix& x) const;
};

struct LinearProbe {
  FeatureMatrix weight;  // [classes, D]
  Eigen::RowVectorXd bias;

  FeatureMatrix logits(const FeatureMatrix& x) const;
};

/// Learning rate at optimizer iteration `it` of `total`: linear warm-up over
/// the first `warmup` iterations, then cosine decay to zero.
double probe_lr(double base, Index it, Index warmup, Index total);

/// Momentum SGD on softmax cross-entropy, no weight decay.
LinearProbe train_linear_probe(const std::vector<FeatureSet>& train, Index classes, double lr, const ProbeConfig& config);

/// Cosine-similarity k-NN with votes weighted by exp(sim / tau).
std::vector<Index> knn_predict(const FeatureMatrix& train, std::span<const Index> train_labels, const FeatureMatrix& query,
                               Index classes, Index k, double tau);
double knn_accuracy(const FeatureSet& train, const FeatureSet& test, Index classes, Index k, double tau);

struct EvalReport {
  std::vector<double> lrs;
  std::vector<double> top1;
  double best_lr = 0.0;
  double best_top1 = 0.0;
  double knn_top1 = 0.0;
};

/// Linear probe over the lr grid plus k-NN, for a frozen backbone.
template <typename Scalar>
EvalReport evaluate(Backbone<Scalar>& backbone, const DatasetSplit& data, const ProbeConfig& config);

void write_report_csv(std::ostream& out, const EvalReport& report);
std::string report_summary(const EvalReport& report);

}  // namespace moby
