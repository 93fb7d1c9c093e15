#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "erpbench/spectral.hpp"
#include "erpbench/types.hpp"

namespace erpbench {

enum class FeatureSet { kEeg31, kErp91 };

FeatureSet parse_feature_set(const std::string& name);
std::string feature_set_name(FeatureSet set);

struct FeatureBlock {
  std::string name;
  std::size_t size = 0;
};

// Documented column layout of one feature set: ordered blocks and the
// per-channel dimensionality (31 or 91).
struct FeatureLayout {
  std::string set_name;
  std::vector<FeatureBlock> blocks;
  std::size_t per_channel_dim = 0;

  static FeatureLayout for_set(FeatureSet set);
};

// Names of the individual per-channel columns, in emission order.
std::vector<std::string> feature_column_names(FeatureSet set);

// Nested temporal segmentation; level_segments must sum to 15 so the pooled
// output stays 5 x 15 = 75 wide.
struct PyramidSpec {
  std::vector<std::size_t> level_segments = {1, 2, 4, 8};

  std::size_t total_segments() const;
  void validate() const;
};

// [mean, median, min, max, skewness, excess kurtosis, RMS, IQR,
//  population std, variance]
std::array<double, 10> time_domain_stats(std::span<const double> x);

// 5 statistics (mean, std, RMS, line length, peak-to-peak) per segment,
// ordered level-by-level, segment-by-segment, statistic-by-statistic.
std::vector<double> pyramid_pool(std::span<const double> x, const PyramidSpec& spec);

// [max value, argmax/len, min value, argmin/len]; first occurrence wins ties.
std::array<double, 4> peak_features(std::span<const double> x);

// [activity, mobility, complexity]; constant input maps to zeros.
std::array<double, 3> hjorth_params(std::span<const double> x);

// 31 values: time stats (10) + band powers (11) + spectral descriptors (7)
// + spectral entropies (3).
std::vector<double> eeg_feature_vector(std::span<const double> trial_channel, double fs,
                                       const SpectralConfig& cfg);

// 91 values: pyramid pooling (75) + peaks (4) + frequency & complexity (9)
// + Hjorth (3).
std::vector<double> erp_feature_vector(std::span<const double> trial_channel, double fs,
                                       const SpectralConfig& cfg, const PyramidSpec& spec);

// Per-trial feature vectors, channel-major: all features of channel 0, then
// channel 1, ...
struct FeatureMatrix {
  Matrix values;  // [n_trials x (per_channel_dim * channels)]
  FeatureLayout layout;
  std::size_t channels = 0;
  std::vector<int> labels;
  std::vector<std::string> subject_ids;
  std::vector<std::string> class_names;
  std::vector<std::string> channel_labels;

  std::size_t n_rows() const { return values.rows; }
  std::size_t n_features() const { return values.cols; }

  // Row subset preserving metadata.
  FeatureMatrix select_rows(const std::vector<std::size_t>& rows) const;
};

// Trials are independent, so extraction fans out over a thread pool;
// n_threads 0 picks the hardware concurrency. Output is identical for any
// thread count (each trial writes its own row).
FeatureMatrix extract_features(const TrialSet& ts, FeatureSet set, const SpectralConfig& cfg,
                               const PyramidSpec& pyramid = {}, std::size_t n_threads = 0);

}  // namespace erpbench
