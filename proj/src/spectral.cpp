#include "erpbench/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "erpbench/fft.hpp"
#include "erpbench/types.hpp"

namespace erpbench {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kEps = 1e-12;

// Indices of PSD bins inside the analysis band [lo, hi].
std::pair<std::size_t, std::size_t> band_bin_range(const Psd& psd, double lo, double hi) {
  std::size_t first = psd.freqs.size();
  std::size_t last = 0;
  for (std::size_t i = 0; i < psd.freqs.size(); ++i) {
    if (psd.freqs[i] >= lo && psd.freqs[i] <= hi) {
      first = std::min(first, i);
      last = i + 1;
    }
  }
  if (first >= last) return {0, 0};
  return {first, last};
}

}  // namespace

void SpectralConfig::validate() const {
  if (segment_len < 8) throw ArgumentError("Welch segment length must be at least 8");
  if (!(overlap >= 0.0) || !(overlap < 1.0)) throw ArgumentError("overlap must be in [0,1)");
  if (!(rolloff_fraction > 0.0) || !(rolloff_fraction < 1.0))
    throw ArgumentError("roll-off fraction must be in (0,1)");
  if (tsallis_q == 1.0) throw ArgumentError("Tsallis q must differ from 1");
  if (!(total_band_lo < total_band_hi)) throw BandError("analysis band must be non-empty");
  for (const auto& b : bands) {
    if (!(b.f_lo > 0.0) || !(b.f_lo < b.f_hi)) throw BandError("band '" + b.name + "' is degenerate");
    if (b.f_lo < total_band_lo || b.f_hi > total_band_hi)
      throw BandError("band '" + b.name + "' leaves the analysis band");
  }
  for (std::size_t i = 1; i < bands.size(); ++i) {
    if (bands[i].f_lo < bands[i - 1].f_hi) throw BandError("bands must not overlap");
  }
}

Psd welch_psd(std::span<const double> signal, double fs, const SpectralConfig& cfg) {
  cfg.validate();
  const std::size_t seg = cfg.effective_segment_len(signal.size());
  if (signal.size() < seg || seg < 8)
    throw LengthError("signal shorter than one Welch segment");

  const std::size_t overlap_samples = static_cast<std::size_t>(
      std::floor(cfg.overlap * static_cast<double>(seg)));
  const std::size_t step = std::max<std::size_t>(1, seg - overlap_samples);
  const std::size_t n_segments = 1 + (signal.size() - seg) / step;

  // periodic Hann
  std::vector<double> window(seg);
  double win_sumsq = 0.0;
  for (std::size_t i = 0; i < seg; ++i) {
    window[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(seg)));
    win_sumsq += window[i] * window[i];
  }

  const std::size_t n_bins = seg / 2 + 1;
  std::vector<double> acc(n_bins, 0.0);
  std::vector<double> buf(seg);

  for (std::size_t s = 0; s < n_segments; ++s) {
    const double* src = signal.data() + s * step;
    double mean = 0.0;
    for (std::size_t i = 0; i < seg; ++i) mean += src[i];
    mean /= static_cast<double>(seg);
    for (std::size_t i = 0; i < seg; ++i) buf[i] = (src[i] - mean) * window[i];

    const auto spec = rfft(buf);
    for (std::size_t k = 0; k < n_bins; ++k) acc[k] += std::norm(spec[k]);
  }

  Psd psd;
  psd.df = fs / static_cast<double>(seg);
  psd.freqs.resize(n_bins);
  psd.power.resize(n_bins);
  const double scale = 1.0 / (static_cast<double>(n_segments) * fs * win_sumsq);
  for (std::size_t k = 0; k < n_bins; ++k) {
    psd.freqs[k] = static_cast<double>(k) * psd.df;
    double p = acc[k] * scale;
    const bool is_dc = (k == 0);
    const bool is_nyquist = (seg % 2 == 0 && k == n_bins - 1);
    if (!is_dc && !is_nyquist) p *= 2.0;  // one-sided
    psd.power[k] = p;
  }
  return psd;
}

double integrate_band(const Psd& psd, double f_lo, double f_hi) {
  if (psd.freqs.size() < 2) throw BandError("PSD has too few bins to integrate");
  if (f_lo < psd.freqs.front() - 1e-9 || f_hi > psd.freqs.back() + 1e-9)
    throw BandError("band outside the PSD frequency range");
  if (!(f_lo < f_hi)) throw BandError("empty integration band");
  f_lo = std::max(f_lo, psd.freqs.front());
  f_hi = std::min(f_hi, psd.freqs.back());

  // linear interpolation of power at an arbitrary frequency
  const auto interp = [&](double f) {
    const auto it = std::upper_bound(psd.freqs.begin(), psd.freqs.end(), f);
    std::size_t hi = static_cast<std::size_t>(it - psd.freqs.begin());
    hi = std::clamp<std::size_t>(hi, 1, psd.freqs.size() - 1);
    const std::size_t lo = hi - 1;
    const double t = (f - psd.freqs[lo]) / (psd.freqs[hi] - psd.freqs[lo]);
    return psd.power[lo] + t * (psd.power[hi] - psd.power[lo]);
  };

  double integral = 0.0;
  double prev_f = f_lo;
  double prev_p = interp(f_lo);
  for (std::size_t i = 0; i < psd.freqs.size(); ++i) {
    const double f = psd.freqs[i];
    if (f <= f_lo) continue;
    if (f >= f_hi) break;
    integral += 0.5 * (prev_p + psd.power[i]) * (f - prev_f);
    prev_f = f;
    prev_p = psd.power[i];
  }
  integral += 0.5 * (prev_p + interp(f_hi)) * (f_hi - prev_f);
  return integral;
}

BandPowerSet band_powers(const Psd& psd, const SpectralConfig& cfg) {
  cfg.validate();
  if (cfg.bands.size() != 4)
    throw BandError("band power set expects the four canonical bands");

  BandPowerSet out;
  double abs_power[4];
  for (std::size_t i = 0; i < 4; ++i)
    abs_power[i] = integrate_band(psd, cfg.bands[i].f_lo, cfg.bands[i].f_hi);
  out.abs_delta = abs_power[0];
  out.abs_theta = abs_power[1];
  out.abs_alpha = abs_power[2];
  out.abs_beta = abs_power[3];
  out.total = integrate_band(psd, cfg.total_band_lo, cfg.total_band_hi);

  const auto guarded_ratio = [](double num, double den) {
    return den > kEps ? num / den : 0.0;
  };
  out.theta_alpha_ratio = guarded_ratio(out.abs_theta, out.abs_alpha);
  out.alpha_beta_ratio = guarded_ratio(out.abs_alpha, out.abs_beta);
  out.rel_delta = guarded_ratio(out.abs_delta, out.total);
  out.rel_theta = guarded_ratio(out.abs_theta, out.total);
  out.rel_alpha = guarded_ratio(out.abs_alpha, out.total);
  out.rel_beta = guarded_ratio(out.abs_beta, out.total);
  return out;
}

SpectralDescriptorSet spectral_descriptors(const Psd& psd, const SpectralConfig& cfg) {
  cfg.validate();
  SpectralDescriptorSet out;
  const auto [first, last] = band_bin_range(psd, cfg.total_band_lo, cfg.total_band_hi);
  if (last - first < 2) return out;

  double total = 0.0;
  double weighted = 0.0;
  double max_p = 0.0;
  std::size_t argmax = first;
  for (std::size_t i = first; i < last; ++i) {
    total += psd.power[i];
    weighted += psd.freqs[i] * psd.power[i];
    if (psd.power[i] > max_p) {
      max_p = psd.power[i];
      argmax = i;
    }
  }
  if (total <= 0.0) return out;

  out.centroid = weighted / total;
  out.mean_freq = out.centroid;
  out.peak_freq = psd.freqs[argmax];
  out.peak_power = psd.power[argmax];

  double cum = 0.0;
  bool median_set = false;
  for (std::size_t i = first; i < last; ++i) {
    cum += psd.power[i];
    if (!median_set && cum >= 0.5 * total) {
      out.median_freq = psd.freqs[i];
      median_set = true;
    }
    if (cum >= cfg.rolloff_fraction * total) {
      out.rolloff = psd.freqs[i];
      break;
    }
  }
  if (out.rolloff == 0.0) out.rolloff = psd.freqs[last - 1];

  // geometric / arithmetic mean; exact-zero bins get a relative floor so the
  // log stays defined
  const double floor = max_p * 1e-15;
  double log_sum = 0.0;
  for (std::size_t i = first; i < last; ++i)
    log_sum += std::log(std::max(psd.power[i], floor));
  const double n = static_cast<double>(last - first);
  out.flatness = std::exp(log_sum / n) / (total / n);
  return out;
}

EntropySet spectral_entropies(const Psd& psd, const SpectralConfig& cfg) {
  cfg.validate();
  EntropySet out;
  const auto [first, last] = band_bin_range(psd, cfg.total_band_lo, cfg.total_band_hi);
  if (last - first < 2) return out;

  double total = 0.0;
  for (std::size_t i = first; i < last; ++i) total += psd.power[i];
  if (total <= 0.0) return out;

  double h = 0.0;
  double q_sum = 0.0;
  for (std::size_t i = first; i < last; ++i) {
    const double p = psd.power[i] / total;
    if (p > 0.0) {
      h -= p * std::log(p);
      q_sum += std::pow(p, cfg.tsallis_q);
    }
  }
  out.shannon = h;
  out.shannon_normalized = h / std::log(static_cast<double>(last - first));
  out.tsallis = (1.0 - q_sum) / (cfg.tsallis_q - 1.0);
  return out;
}

}  // namespace erpbench
