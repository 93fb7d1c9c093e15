#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "erpbench/features.hpp"
#include "erpbench/types.hpp"

namespace erpbench {

// Optimization protocol: AdamW at lr 1e-4 with cosine annealing to zero over
// max_epochs, batches of 128, early stopping on validation macro-F1 with
// patience 15, five seeds per experiment.
struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t patience = 15;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::uint64_t seed = 41;

  void validate() const {
    if (batch_size == 0 || max_epochs == 0 || patience == 0)
      throw ArgumentError("batch size, epochs and patience must be positive");
    if (patience > max_epochs) throw ArgumentError("patience must not exceed max_epochs");
    if (!(lr > 0.0)) throw ArgumentError("learning rate must be positive");
    if (weight_decay < 0.0) throw ArgumentError("weight decay must be non-negative");
  }
};

// Softmax regression over standardized features. Standardization statistics
// come from the training split only.
struct LinearModel {
  Matrix weights;  // [n_features x n_classes]
  std::vector<double> bias;
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  std::vector<std::string> class_names;

  std::size_t n_features() const { return weights.rows; }
  std::size_t n_classes() const { return weights.cols; }
};

struct MetricSet {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double auroc = 0.0;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_valid_f1 = 0.0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;  // at the returned checkpoint
};

LinearModel train_linear(const FeatureMatrix& train, const FeatureMatrix& valid,
                         const TrainConfig& cfg, TrainReport* report = nullptr);

// Row-wise softmax of standardized features x weights + bias.
Matrix predict_proba(const LinearModel& model, const FeatureMatrix& feats);

// Mean cross-entropy of the model on a feature matrix.
double cross_entropy(const LinearModel& model, const FeatureMatrix& feats);

// Accuracy (argmax, ties to the lowest class index), unweighted macro F1
// (per-class F1 is 0 when a class has no predicted and no true positives) and
// tie-aware rank-based one-vs-rest AUROC, macro-averaged; the binary case
// scores the positive class.
MetricSet compute_metrics(const Matrix& probs, const std::vector<int>& labels);

// Rank-based AUROC of one score column against binary relevance. Exposed for
// oracle cross-checks.
double auroc_binary(std::span<const double> scores, const std::vector<char>& is_positive);

}  // namespace erpbench
