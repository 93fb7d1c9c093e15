#pragma once

#include <cstddef>
#include <unordered_map>
#include <vector>

#include "erpbench/types.hpp"

namespace erpbench {

// One second-order IIR section, a0 normalized to 1.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
};

// Butterworth band-pass of total order 4 (two sections), designed by the
// bilinear transform of a 2nd-order low-pass prototype. Unity gain at the
// (warped) geometric center frequency.
std::vector<Biquad> design_bandpass(double low_hz, double high_hz, double fs);

// Second-order notch section with quality factor q (RBJ cookbook).
std::vector<Biquad> design_notch(double notch_hz, double fs, double q = 30.0);

// Zero-phase (forward-backward) filtering with odd-reflection padding and
// steady-state initial conditions. pad_len 0 picks a length from the slowest
// section pole so start-up transients decay below ~1e-12 before the signal.
std::vector<double> filtfilt(const std::vector<Biquad>& sections,
                             std::span<const double> x, std::size_t pad_len = 0);

// Pipeline operations over whole recordings. All are pure.
Recording bandpass_filter(const Recording& rec, double low_hz, double high_hz);
Recording notch_filter(const Recording& rec, double notch_hz, double q = 30.0);
Recording average_reref(const Recording& rec);
Recording interpolate_channels(const Recording& rec, const std::vector<std::size_t>& bad);
Recording resample(const Recording& rec, double target_fs);

using LabelMap = std::unordered_map<std::string, int>;

struct EpochResult {
  TrialSet trials;
  std::size_t boundary_skips = 0;   // mapped events whose window falls outside
  std::size_t unmapped_events = 0;  // events with labels absent from the map
};

// Cuts one trial per mapped event fully inside the recording and subtracts the
// per-channel baseline mean from the whole epoch.
EpochResult epoch_and_baseline(const Recording& rec, const EpochSpec& spec,
                               const LabelMap& label_map,
                               const std::vector<std::string>& class_names);

// Per-(trial, channel) normalization to zero mean / unit population std.
// Constant rows become all zeros (epsilon guard 1e-12).
TrialSet zscore_trials(const TrialSet& ts);

struct RejectResult {
  TrialSet trials;
  std::size_t rejected = 0;
};

// Drops trials whose peak-to-peak amplitude on any channel exceeds the
// threshold. Runs on raw microvolt trials, i.e. before zscore_trials.
RejectResult amplitude_reject(const TrialSet& ts, double ptp_threshold_uv);

// Shared rounding policy for sample-index arithmetic (round half up).
inline long long round_half_up(double x) {
  return static_cast<long long>(std::floor(x + 0.5));
}

}  // namespace erpbench
