#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "erpbench/errors.hpp"

namespace erpbench {

struct BandDefinition {
  std::string name;
  double f_lo = 0.0;
  double f_hi = 0.0;
};

// Welch and band parameters shared by both feature catalogs. Defaults: Hann
// taper, 128-sample segments (clamped to the signal), 50% overlap, clinical
// band edges, 0.85 roll-off, Tsallis q = 2, analysis band 0.5-45 Hz.
struct SpectralConfig {
  std::size_t segment_len = 128;
  double overlap = 0.5;
  std::string window = "hann";
  std::vector<BandDefinition> bands = {
      {"delta", 0.5, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0}, {"beta", 13.0, 30.0}};
  double rolloff_fraction = 0.85;
  double tsallis_q = 2.0;
  double total_band_lo = 0.5;
  double total_band_hi = 45.0;

  void validate() const;

  // Segment length actually used for a signal of length n.
  std::size_t effective_segment_len(std::size_t n) const {
    return std::min(segment_len, n);
  }
};

struct Psd {
  std::vector<double> freqs;  // Hz, strictly increasing
  std::vector<double> power;  // uV^2/Hz, one-sided
  double df = 0.0;
};

// Averaged periodogram over mean-detrended, Hann-tapered, overlapping
// segments; one-sided, scaled so sum(power) * df ~ signal variance.
Psd welch_psd(std::span<const double> signal, double fs, const SpectralConfig& cfg);

struct BandPowerSet {
  double abs_delta = 0.0, abs_theta = 0.0, abs_alpha = 0.0, abs_beta = 0.0;
  double total = 0.0;
  double theta_alpha_ratio = 0.0;
  double alpha_beta_ratio = 0.0;
  double rel_delta = 0.0, rel_theta = 0.0, rel_alpha = 0.0, rel_beta = 0.0;

  std::vector<double> as_vector() const {
    return {abs_delta, abs_theta,       abs_alpha,        abs_beta,  total, theta_alpha_ratio,
            alpha_beta_ratio, rel_delta, rel_theta, rel_alpha, rel_beta};
  }
};

// Trapezoidal integration of the PSD over [f_lo, f_hi] (piecewise-linear
// interpolation at the band edges). Throws BandError if the band leaves the
// PSD's frequency range.
double integrate_band(const Psd& psd, double f_lo, double f_hi);

BandPowerSet band_powers(const Psd& psd, const SpectralConfig& cfg);

struct SpectralDescriptorSet {
  double centroid = 0.0;
  double rolloff = 0.0;
  double peak_freq = 0.0;
  double peak_power = 0.0;
  double mean_freq = 0.0;  // power-weighted mean; numerically the centroid
  double median_freq = 0.0;
  double flatness = 0.0;

  std::vector<double> as_vector() const {
    return {centroid, rolloff, peak_freq, peak_power, mean_freq, median_freq, flatness};
  }
};

// All descriptors are computed over the PSD bins inside cfg's analysis band,
// which keeps the (detrended, near-zero) DC bin from skewing flatness.
SpectralDescriptorSet spectral_descriptors(const Psd& psd, const SpectralConfig& cfg);

struct EntropySet {
  double shannon = 0.0;             // nats
  double shannon_normalized = 0.0;  // shannon / ln(n_bins)
  double tsallis = 0.0;

  std::vector<double> as_vector() const { return {shannon, shannon_normalized, tsallis}; }
};

// PSD bins inside the analysis band normalized to probabilities; zero bins
// contribute nothing (p ln p -> 0 convention).
EntropySet spectral_entropies(const Psd& psd, const SpectralConfig& cfg);

}  // namespace erpbench
