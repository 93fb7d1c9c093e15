#include "erpbench/features.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <thread>

namespace erpbench {

namespace {

constexpr double kEps = 1e-12;

double population_variance(std::span<const double> x, double mean) {
  double var = 0.0;
  for (const double v : x) var += (v - mean) * (v - mean);
  return var / static_cast<double>(x.size());
}

// Quantile with linear interpolation between order statistics (the numpy /
// R type-7 convention) over an already sorted vector.
double sorted_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> first_difference(std::span<const double> x) {
  std::vector<double> d(x.size() - 1);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) d[i] = x[i + 1] - x[i];
  return d;
}

}  // namespace

FeatureSet parse_feature_set(const std::string& name) {
  if (name == "eeg" || name == "eeg31") return FeatureSet::kEeg31;
  if (name == "erp" || name == "erp91") return FeatureSet::kErp91;
  throw ArgumentError("unknown feature set '" + name + "' (expected eeg or erp)");
}

std::string feature_set_name(FeatureSet set) {
  return set == FeatureSet::kEeg31 ? "eeg31" : "erp91";
}

FeatureLayout FeatureLayout::for_set(FeatureSet set) {
  FeatureLayout layout;
  layout.set_name = feature_set_name(set);
  if (set == FeatureSet::kEeg31) {
    layout.blocks = {{"time_stats", 10}, {"band_power", 11}, {"spectral", 7}, {"complexity", 3}};
    layout.per_channel_dim = 31;
  } else {
    layout.blocks = {{"pyramid", 75}, {"peaks", 4}, {"freq_complexity", 9}, {"hjorth", 3}};
    layout.per_channel_dim = 91;
  }
  return layout;
}

std::vector<std::string> feature_column_names(FeatureSet set) {
  std::vector<std::string> names;
  if (set == FeatureSet::kEeg31) {
    names = {"mean",  "median", "min", "max", "skewness", "kurtosis", "rms", "iqr", "std", "variance",
             "abs_delta", "abs_theta", "abs_alpha", "abs_beta", "total_power",
             "theta_alpha_ratio", "alpha_beta_ratio",
             "rel_delta", "rel_theta", "rel_alpha", "rel_beta",
             "spectral_centroid", "spectral_rolloff", "peak_freq", "peak_power",
             "mean_freq", "median_freq", "spectral_flatness",
             "shannon_entropy_norm", "shannon_entropy", "tsallis_entropy"};
  } else {
    static const char* kStats[5] = {"mean", "std", "rms", "line_length", "ptp"};
    const PyramidSpec spec;
    for (std::size_t level = 0; level < spec.level_segments.size(); ++level) {
      for (std::size_t seg = 0; seg < spec.level_segments[level]; ++seg) {
        for (const char* st : kStats) {
          names.push_back("pyr_l" + std::to_string(spec.level_segments[level]) + "_s" +
                          std::to_string(seg) + "_" + st);
        }
      }
    }
    const std::vector<std::string> tail = {
        "pos_peak_amp", "pos_peak_latency", "neg_peak_amp", "neg_peak_latency",
        "rel_delta", "rel_theta", "rel_alpha", "rel_beta", "total_power",
        "spectral_centroid", "spectral_flatness", "median_freq", "shannon_entropy_norm",
        "hjorth_activity", "hjorth_mobility", "hjorth_complexity"};
    names.insert(names.end(), tail.begin(), tail.end());
  }
  return names;
}

std::size_t PyramidSpec::total_segments() const {
  return std::accumulate(level_segments.begin(), level_segments.end(), std::size_t{0});
}

void PyramidSpec::validate() const {
  if (total_segments() != 15)
    throw ArgumentError("pyramid level segments must sum to 15");
  for (const std::size_t k : level_segments) {
    if (k < 1) throw ArgumentError("every pyramid level needs at least one segment");
  }
}

std::array<double, 10> time_domain_stats(std::span<const double> x) {
  if (x.size() < 2) throw LengthError("time-domain statistics need at least two samples");

  double mean = 0.0;
  double sumsq = 0.0;
  double mn = x[0], mx = x[0];
  for (const double v : x) {
    mean += v;
    sumsq += v * v;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const double n = static_cast<double>(x.size());
  mean /= n;

  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (const double v : x) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const double sd = std::sqrt(m2);

  double skew = 0.0, kurt = 0.0;
  if (sd > kEps) {
    skew = m3 / (sd * sd * sd);
    kurt = m4 / (m2 * m2) - 3.0;  // excess (Fisher) kurtosis
  }

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted_quantile(sorted, 0.5);
  const double iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
  const double rms = std::sqrt(sumsq / n);

  return {mean, median, mn, mx, skew, kurt, rms, iqr, sd, m2};
}

std::vector<double> pyramid_pool(std::span<const double> x, const PyramidSpec& spec) {
  spec.validate();
  const std::size_t max_segments =
      *std::max_element(spec.level_segments.begin(), spec.level_segments.end());
  if (x.size() < max_segments)
    throw LengthError("signal shorter than the finest pyramid level");

  std::vector<double> out;
  out.reserve(5 * spec.total_segments());

  for (const std::size_t k : spec.level_segments) {
    const std::size_t base = x.size() / k;
    const std::size_t extra = x.size() % k;  // first `extra` segments get one more sample
    std::size_t start = 0;
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t len = base + (s < extra ? 1 : 0);
      const std::span<const double> seg = x.subspan(start, len);
      start += len;

      double mean = 0.0, sumsq = 0.0;
      double mn = seg[0], mx = seg[0];
      for (const double v : seg) {
        mean += v;
        sumsq += v * v;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      mean /= static_cast<double>(len);
      const double sd = std::sqrt(std::max(0.0, population_variance(seg, mean)));
      const double rms = std::sqrt(sumsq / static_cast<double>(len));
      double line_length = 0.0;
      for (std::size_t i = 0; i + 1 < seg.size(); ++i)
        line_length += std::abs(seg[i + 1] - seg[i]);

      out.push_back(mean);
      out.push_back(sd);
      out.push_back(rms);
      out.push_back(line_length);
      out.push_back(mx - mn);
    }
  }
  return out;
}

std::array<double, 4> peak_features(std::span<const double> x) {
  if (x.empty()) throw LengthError("peak features need at least one sample");
  std::size_t argmax = 0, argmin = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[argmax]) argmax = i;
    if (x[i] < x[argmin]) argmin = i;
  }
  const double n = static_cast<double>(x.size());
  return {x[argmax], static_cast<double>(argmax) / n, x[argmin], static_cast<double>(argmin) / n};
}

std::array<double, 3> hjorth_params(std::span<const double> x) {
  if (x.size() < 3) throw LengthError("Hjorth parameters need at least three samples");

  const auto var_of = [](std::span<const double> v) {
    double mean = 0.0;
    for (const double s : v) mean += s;
    mean /= static_cast<double>(v.size());
    return population_variance(v, mean);
  };

  const double activity = var_of(x);
  if (activity < kEps) return {0.0, 0.0, 0.0};

  const std::vector<double> d1 = first_difference(x);
  const double var_d1 = var_of(d1);
  const double mobility = std::sqrt(var_d1 / activity);
  if (var_d1 < kEps) return {activity, mobility, 0.0};

  const std::vector<double> d2 = first_difference(d1);
  const double var_d2 = var_of(d2);
  const double mobility_d1 = std::sqrt(var_d2 / var_d1);
  return {activity, mobility, mobility_d1 / mobility};
}

std::vector<double> eeg_feature_vector(std::span<const double> trial_channel, double fs,
                                       const SpectralConfig& cfg) {
  const auto stats = time_domain_stats(trial_channel);
  const Psd psd = welch_psd(trial_channel, fs, cfg);
  const auto bands = band_powers(psd, cfg).as_vector();
  const auto descr = spectral_descriptors(psd, cfg).as_vector();
  const auto ent = spectral_entropies(psd, cfg);

  std::vector<double> out;
  out.reserve(31);
  out.insert(out.end(), stats.begin(), stats.end());
  out.insert(out.end(), bands.begin(), bands.end());
  out.insert(out.end(), descr.begin(), descr.end());
  out.push_back(ent.shannon_normalized);
  out.push_back(ent.shannon);
  out.push_back(ent.tsallis);
  return out;
}

std::vector<double> erp_feature_vector(std::span<const double> trial_channel, double fs,
                                       const SpectralConfig& cfg, const PyramidSpec& spec) {
  std::vector<double> out = pyramid_pool(trial_channel, spec);
  out.reserve(91);

  const auto peaks = peak_features(trial_channel);
  out.insert(out.end(), peaks.begin(), peaks.end());

  const Psd psd = welch_psd(trial_channel, fs, cfg);
  const BandPowerSet bands = band_powers(psd, cfg);
  const SpectralDescriptorSet descr = spectral_descriptors(psd, cfg);
  const EntropySet ent = spectral_entropies(psd, cfg);
  out.push_back(bands.rel_delta);
  out.push_back(bands.rel_theta);
  out.push_back(bands.rel_alpha);
  out.push_back(bands.rel_beta);
  out.push_back(bands.total);
  out.push_back(descr.centroid);
  out.push_back(descr.flatness);
  out.push_back(descr.median_freq);
  out.push_back(ent.shannon_normalized);

  const auto hjorth = hjorth_params(trial_channel);
  out.insert(out.end(), hjorth.begin(), hjorth.end());
  return out;
}

FeatureMatrix FeatureMatrix::select_rows(const std::vector<std::size_t>& rows) const {
  FeatureMatrix out;
  out.layout = layout;
  out.channels = channels;
  out.class_names = class_names;
  out.channel_labels = channel_labels;
  out.values = Matrix(rows.size(), values.cols);
  out.labels.reserve(rows.size());
  out.subject_ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= values.rows) throw ArgumentError("row index out of range");
    std::copy(values.row(r).begin(), values.row(r).end(), out.values.row(i).begin());
    out.labels.push_back(labels[r]);
    out.subject_ids.push_back(subject_ids[r]);
  }
  return out;
}

FeatureMatrix extract_features(const TrialSet& ts, FeatureSet set, const SpectralConfig& cfg,
                               const PyramidSpec& pyramid, std::size_t n_threads) {
  ts.validate();
  FeatureMatrix fm;
  fm.layout = FeatureLayout::for_set(set);
  fm.channels = ts.channels;
  fm.labels = ts.labels;
  fm.subject_ids = ts.subject_ids;
  fm.class_names = ts.class_names;
  fm.channel_labels = ts.channel_labels;
  fm.values = Matrix(ts.n_trials, fm.layout.per_channel_dim * ts.channels);

  const auto worker = [&](std::size_t first, std::size_t last) {
    for (std::size_t t = first; t < last; ++t) {
      auto row = fm.values.row(t);
      std::size_t offset = 0;
      for (std::size_t c = 0; c < ts.channels; ++c) {
        const auto ch = ts.trial_channel(t, c);
        const std::vector<double> vec = (set == FeatureSet::kEeg31)
                                            ? eeg_feature_vector(ch, ts.fs, cfg)
                                            : erp_feature_vector(ch, ts.fs, cfg, pyramid);
        std::copy(vec.begin(), vec.end(), row.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += vec.size();
      }
    }
  };

  if (n_threads == 0) n_threads = std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min(n_threads, std::max<std::size_t>(1, ts.n_trials));
  if (n_threads <= 1 || ts.n_trials < 2 * n_threads) {
    worker(0, ts.n_trials);
    return fm;
  }

  // disjoint trial ranges; rows are written without any shared state
  std::vector<std::thread> pool;
  const std::size_t chunk = (ts.n_trials + n_threads - 1) / n_threads;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < n_threads; ++w) {
    const std::size_t first = w * chunk;
    const std::size_t last = std::min(first + chunk, ts.n_trials);
    if (first >= last) break;
    pool.emplace_back([&, first, last] {
      try {
        worker(first, last);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return fm;
}

}  // namespace erpbench
