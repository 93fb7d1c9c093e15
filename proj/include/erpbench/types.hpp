#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "erpbench/errors.hpp"

namespace erpbench {

// Dense row-major matrix of doubles. Small by design; all heavy lifting in the
// project is explicit loops over this storage.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
};

struct EventMarker {
  std::size_t sample_index = 0;
  std::string label;
};

// Continuous multichannel recording in microvolts. data is [channels x samples].
struct Recording {
  Matrix data;
  double fs = 0.0;
  std::vector<std::string> channel_labels;
  std::vector<EventMarker> events;
  std::string subject_id;

  std::size_t channels() const { return data.rows; }
  std::size_t samples() const { return data.cols; }
  std::span<const double> channel(std::size_t c) const { return data.row(c); }
  std::span<double> channel(std::size_t c) { return data.row(c); }

  // Checks the structural invariants; throws DataError / ArgumentError.
  void validate() const;
};

// Epoch and baseline windows in seconds relative to the event sample.
struct EpochSpec {
  double t_start = 0.0;
  double t_end = 0.0;
  double baseline_start = 0.0;
  double baseline_end = 0.0;

  void validate() const {
    if (!(t_start < t_end)) throw ArgumentError("epoch window requires t_start < t_end");
    if (!(baseline_start < baseline_end))
      throw ArgumentError("baseline window requires b_start < b_end");
    if (baseline_start < t_start || baseline_end > t_end)
      throw ArgumentError("baseline window must lie within the epoch window");
  }
};

// Epoched trials: tensor [n_trials x channels x samples], stored contiguously
// trial-major, channel-major within a trial.
struct TrialSet {
  std::size_t n_trials = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<double> data;
  std::vector<int> labels;
  std::vector<std::string> subject_ids;
  double fs = 0.0;
  std::vector<std::string> class_names;
  std::vector<std::string> channel_labels;

  std::span<double> trial_channel(std::size_t t, std::size_t c) {
    return {data.data() + (t * channels + c) * samples, samples};
  }
  std::span<const double> trial_channel(std::size_t t, std::size_t c) const {
    return {data.data() + (t * channels + c) * samples, samples};
  }

  void validate() const;
};

inline bool all_finite(std::span<const double> x) {
  for (const double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace erpbench
