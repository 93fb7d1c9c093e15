#include "erpbench/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "erpbench/rng.hpp"

namespace erpbench {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kStdGuard = 1e-12;

void softmax_row(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
}

std::size_t argmax_row(std::span<const double> row) {
  // ties resolve to the lowest class index
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std_dev;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    s.mean.assign(x.cols, 0.0);
    s.std_dev.assign(x.cols, 0.0);
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto row = x.row(r);
      for (std::size_t c = 0; c < x.cols; ++c) s.mean[c] += row[c];
    }
    for (double& m : s.mean) m /= static_cast<double>(x.rows);
    for (std::size_t r = 0; r < x.rows; ++r) {
      const auto row = x.row(r);
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double d = row[c] - s.mean[c];
        s.std_dev[c] += d * d;
      }
    }
    for (double& v : s.std_dev) {
      v = std::sqrt(v / static_cast<double>(x.rows));
      if (v < kStdGuard) v = 1.0;  // constant columns pass through centered
    }
    return s;
  }
};

double standardized(const LinearModel& m, std::span<const double> row, std::size_t c) {
  return (row[c] - m.feature_mean[c]) / m.feature_std[c];
}

// logits for one standardized row
void row_logits(const LinearModel& m, std::span<const double> row, std::span<double> out) {
  for (std::size_t k = 0; k < m.n_classes(); ++k) out[k] = m.bias[k];
  for (std::size_t c = 0; c < m.n_features(); ++c) {
    const double xv = standardized(m, row, c);
    if (xv == 0.0) continue;
    const auto w = m.weights.row(c);
    for (std::size_t k = 0; k < m.n_classes(); ++k) out[k] += xv * w[k];
  }
}

double macro_f1_from_predictions(const std::vector<std::size_t>& pred,
                                 const std::vector<int>& labels, std::size_t n_classes) {
  std::vector<double> tp(n_classes, 0.0), fp(n_classes, 0.0), fn(n_classes, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred[i];
    const std::size_t t = static_cast<std::size_t>(labels[i]);
    if (p == t) {
      tp[p] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[t] += 1.0;
    }
  }
  double f1_sum = 0.0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    f1_sum += denom > 0.0 ? 2.0 * tp[k] / denom : 0.0;
  }
  return f1_sum / static_cast<double>(n_classes);
}

}  // namespace

double auroc_binary(std::span<const double> scores, const std::vector<char>& is_positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tied scores (1-based)
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = avg;
    i = j;
  }

  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (is_positive[k]) {
      rank_sum += rank[k];
      ++n_pos;
    }
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("AUROC needs both positive and negative examples");
  return (rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

MetricSet compute_metrics(const Matrix& probs, const std::vector<int>& labels) {
  if (probs.rows != labels.size()) throw ShapeError("probability rows must match label count");
  if (probs.rows == 0) throw DataError("cannot score an empty prediction set");
  const std::size_t n_classes = probs.cols;

  std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2) throw DataError("metrics need at least two classes in the labels");
  for (const int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes)
      throw ShapeError("label index outside the probability columns");
  }

  MetricSet m;
  std::vector<std::size_t> pred(probs.rows);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < probs.rows; ++r) {
    pred[r] = argmax_row(probs.row(r));
    if (pred[r] == static_cast<std::size_t>(labels[r])) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(probs.rows);
  m.f1_macro = macro_f1_from_predictions(pred, labels, n_classes);

  if (n_classes == 2) {
    std::vector<double> scores(probs.rows);
    std::vector<char> pos(probs.rows);
    for (std::size_t r = 0; r < probs.rows; ++r) {
      scores[r] = probs.at(r, 1);
      pos[r] = labels[r] == 1 ? 1 : 0;
    }
    m.auroc = auroc_binary(scores, pos);
  } else {
    // one-vs-rest macro over the classes present in the labels
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
      if (!present.count(static_cast<int>(k))) continue;
      std::vector<double> scores(probs.rows);
      std::vector<char> pos(probs.rows);
      for (std::size_t r = 0; r < probs.rows; ++r) {
        scores[r] = probs.at(r, k);
        pos[r] = labels[r] == static_cast<int>(k) ? 1 : 0;
      }
      sum += auroc_binary(scores, pos);
      ++counted;
    }
    m.auroc = sum / static_cast<double>(counted);
  }
  return m;
}

Matrix predict_proba(const LinearModel& model, const FeatureMatrix& feats) {
  if (feats.n_features() != model.n_features())
    throw ShapeError("feature dimension does not match the model");
  Matrix probs(feats.n_rows(), model.n_classes());
  for (std::size_t r = 0; r < feats.n_rows(); ++r) {
    auto out = probs.row(r);
    row_logits(model, feats.values.row(r), out);
    softmax_row(out);
  }
  return probs;
}

double cross_entropy(const LinearModel& model, const FeatureMatrix& feats) {
  const Matrix probs = predict_proba(model, feats);
  double loss = 0.0;
  for (std::size_t r = 0; r < probs.rows; ++r) {
    const double p = probs.at(r, static_cast<std::size_t>(feats.labels[r]));
    loss -= std::log(std::max(p, 1e-300));
  }
  return loss / static_cast<double>(probs.rows);
}

LinearModel train_linear(const FeatureMatrix& train, const FeatureMatrix& valid,
                         const TrainConfig& cfg, TrainReport* report) {
  cfg.validate();
  if (train.n_rows() == 0) throw DataError("empty training split");
  if (train.n_features() != valid.n_features())
    throw ShapeError("train/validation feature dimensions differ");

  std::set<int> present(train.labels.begin(), train.labels.end());
  if (present.size() < 2)
    throw DataError("training split contains a single class");
  const std::size_t n_classes =
      train.class_names.empty()
          ? static_cast<std::size_t>(*std::max_element(train.labels.begin(), train.labels.end())) + 1
          : train.class_names.size();
  for (const auto* split : {&train, &valid}) {
    for (const int l : split->labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= n_classes)
        throw ShapeError("label index outside the class range");
    }
  }

  LinearModel model;
  model.class_names = train.class_names;
  model.weights = Matrix(train.n_features(), n_classes, 0.0);
  model.bias.assign(n_classes, 0.0);
  const Standardizer stdz = Standardizer::fit(train.values);
  model.feature_mean = stdz.mean;
  model.feature_std = stdz.std_dev;

  // pre-standardize the training matrix once
  Matrix xs(train.n_rows(), train.n_features());
  for (std::size_t r = 0; r < train.n_rows(); ++r) {
    const auto src = train.values.row(r);
    auto dst = xs.row(r);
    for (std::size_t c = 0; c < train.n_features(); ++c)
      dst[c] = (src[c] - stdz.mean[c]) / stdz.std_dev[c];
  }

  const std::size_t n_params = model.weights.size();
  std::vector<double> m_w(n_params, 0.0), v_w(n_params, 0.0);
  std::vector<double> m_b(n_classes, 0.0), v_b(n_classes, 0.0);
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t adam_step = 0;

  Rng rng(derive_stream(cfg.seed, "train_linear"));
  std::vector<std::size_t> order(train.n_rows());
  std::iota(order.begin(), order.end(), std::size_t{0});

  LinearModel best = model;
  double best_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_without_improvement = 0;

  TrainReport local_report;
  local_report.initial_train_loss = cross_entropy(model, train);

  std::vector<double> logits(n_classes);
  std::vector<double> grad_b(n_classes);
  Matrix grad_w(train.n_features(), n_classes);

  std::size_t epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const double lr_t =
        cfg.lr * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) /
                                       static_cast<double>(cfg.max_epochs)));
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, order.size());
      const double inv_batch = 1.0 / static_cast<double>(end - start);

      std::fill(grad_w.data.begin(), grad_w.data.end(), 0.0);
      std::fill(grad_b.begin(), grad_b.end(), 0.0);

      for (std::size_t i = start; i < end; ++i) {
        const std::size_t r = order[i];
        const auto x = xs.row(r);
        for (std::size_t k = 0; k < n_classes; ++k) logits[k] = model.bias[k];
        for (std::size_t c = 0; c < xs.cols; ++c) {
          const double xv = x[c];
          const auto w = model.weights.row(c);
          for (std::size_t k = 0; k < n_classes; ++k) logits[k] += xv * w[k];
        }
        softmax_row(logits);
        logits[static_cast<std::size_t>(train.labels[r])] -= 1.0;  // softmax - one-hot
        for (std::size_t k = 0; k < n_classes; ++k) grad_b[k] += logits[k] * inv_batch;
        for (std::size_t c = 0; c < xs.cols; ++c) {
          const double xv = x[c];
          if (xv == 0.0) continue;
          auto gw = grad_w.row(c);
          for (std::size_t k = 0; k < n_classes; ++k) gw[k] += xv * logits[k] * inv_batch;
        }
      }

      ++adam_step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step));
      for (std::size_t p = 0; p < n_params; ++p) {
        const double g = grad_w.data[p];
        m_w[p] = beta1 * m_w[p] + (1.0 - beta1) * g;
        v_w[p] = beta2 * v_w[p] + (1.0 - beta2) * g * g;
        const double update = (m_w[p] / bc1) / (std::sqrt(v_w[p] / bc2) + adam_eps);
        // decoupled weight decay on the weights only
        model.weights.data[p] -= lr_t * (update + cfg.weight_decay * model.weights.data[p]);
      }
      for (std::size_t k = 0; k < n_classes; ++k) {
        const double g = grad_b[k];
        m_b[k] = beta1 * m_b[k] + (1.0 - beta1) * g;
        v_b[k] = beta2 * v_b[k] + (1.0 - beta2) * g * g;
        model.bias[k] -= lr_t * (m_b[k] / bc1) / (std::sqrt(v_b[k] / bc2) + adam_eps);
      }
    }

    // early stopping on validation macro-F1
    const Matrix val_probs = predict_proba(model, valid);
    std::vector<std::size_t> val_pred(val_probs.rows);
    for (std::size_t r = 0; r < val_probs.rows; ++r) val_pred[r] = argmax_row(val_probs.row(r));
    const double f1 = macro_f1_from_predictions(val_pred, valid.labels, n_classes);
    if (f1 > best_f1) {
      best_f1 = f1;
      best = model;
      best_epoch = epoch;
      epochs_without_improvement = 0;
    } else {
      ++epochs_without_improvement;
      if (epochs_without_improvement >= cfg.patience) {
        ++epoch;
        break;
      }
    }
  }

  if (report != nullptr) {
    local_report.epochs_run = epoch;
    local_report.best_epoch = best_epoch;
    local_report.best_valid_f1 = best_f1;
    local_report.final_train_loss = cross_entropy(best, train);
    *report = local_report;
  }
  return best;
}

}  // namespace erpbench
