#include "erpbench/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <set>

namespace erpbench {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require_finite(const Recording& rec) {
  if (!all_finite(rec.data.data)) throw DataError("recording contains non-finite samples");
}

std::complex<double> section_response(const Biquad& s, std::complex<double> z_inv) {
  const std::complex<double> num = s.b0 + z_inv * (s.b1 + z_inv * s.b2);
  const std::complex<double> den = 1.0 + z_inv * (s.a1 + z_inv * s.a2);
  return num / den;
}

std::complex<double> cascade_response(const std::vector<Biquad>& sections, double omega) {
  const std::complex<double> z_inv = std::exp(std::complex<double>(0.0, -omega));
  std::complex<double> h(1.0, 0.0);
  for (const auto& s : sections) h *= section_response(s, z_inv);
  return h;
}

double max_pole_radius(const std::vector<Biquad>& sections) {
  double r = 0.0;
  for (const auto& s : sections) {
    // poles of z^2 + a1 z + a2
    const std::complex<double> disc = std::sqrt(std::complex<double>(s.a1 * s.a1 - 4.0 * s.a2, 0.0));
    const std::complex<double> p1 = (-s.a1 + disc) * 0.5;
    const std::complex<double> p2 = (-s.a1 - disc) * 0.5;
    r = std::max({r, std::abs(p1), std::abs(p2)});
  }
  return r;
}

// Steady-state direct-form-II-transposed state for a unit step, scaled by x0.
// Seeding the filter with it removes most of the start-up transient.
void step_initial_state(const Biquad& s, double x0, double& z1, double& z2) {
  const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  z1 = (dc - s.b0) * x0;
  z2 = (s.b2 - s.a2 * dc) * x0;
}

void filter_in_place(const Biquad& s, std::vector<double>& x) {
  double z1 = 0.0, z2 = 0.0;
  step_initial_state(s, x.empty() ? 0.0 : x.front(), z1, z2);
  for (double& v : x) {
    const double in = v;
    const double out = s.b0 * in + z1;
    z1 = s.b1 * in - s.a1 * out + z2;
    z2 = s.b2 * in - s.a2 * out;
    v = out;
  }
}

Recording apply_zero_phase(const Recording& rec, const std::vector<Biquad>& sections) {
  Recording out = rec;
  for (std::size_t c = 0; c < rec.channels(); ++c) {
    const auto ch = rec.channel(c);
    const std::vector<double> filtered =
        filtfilt(sections, std::vector<double>(ch.begin(), ch.end()));
    std::copy(filtered.begin(), filtered.end(), out.channel(c).begin());
  }
  return out;
}

}  // namespace

void Recording::validate() const {
  if (fs <= 0.0) throw ArgumentError("sampling rate must be positive");
  if (channels() < 1) throw ArgumentError("recording needs at least one channel");
  if (channel_labels.size() != channels())
    throw ShapeError("channel label count does not match channel count");
  if (!all_finite(data.data)) throw DataError("recording contains non-finite samples");
  for (const auto& ev : events) {
    if (ev.sample_index >= samples())
      throw ArgumentError("event sample index beyond recording length");
  }
}

void TrialSet::validate() const {
  if (labels.size() != n_trials || subject_ids.size() != n_trials)
    throw ShapeError("labels/subject_ids length must equal n_trials");
  if (data.size() != n_trials * channels * samples)
    throw ShapeError("trial tensor size mismatch");
  if (fs <= 0.0) throw ArgumentError("sampling rate must be positive");
  for (const int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_names.size())
      throw ArgumentError("class index out of range");
  }
  if (!all_finite(data)) throw DataError("trial tensor contains non-finite values");
}

std::vector<Biquad> design_bandpass(double low_hz, double high_hz, double fs) {
  if (!(low_hz > 0.0) || !(low_hz < high_hz) || !(high_hz < fs / 2.0))
    throw BandError("band-pass requires 0 < low < high < fs/2");

  // Bilinear constant and pre-warped analog edge frequencies.
  const double c = 2.0 * fs;
  const double wl = c * std::tan(kPi * low_hz / fs);
  const double wh = c * std::tan(kPi * high_hz / fs);
  const double w0 = std::sqrt(wl * wh);
  const double bw = wh - wl;

  // 2nd-order Butterworth low-pass prototype pole (upper half plane); the
  // LP->BP transform turns it into two analog poles, the conjugates come from
  // the mirrored prototype pole.
  const std::complex<double> proto(-std::sqrt(0.5), std::sqrt(0.5));
  const std::complex<double> half = proto * (bw * 0.5);
  const std::complex<double> disc = std::sqrt(half * half - w0 * w0);
  const std::complex<double> analog_poles[2] = {half + disc, half - disc};

  std::vector<Biquad> sections;
  for (const auto& p : analog_poles) {
    const std::complex<double> zp = (c + p) / (c - p);
    Biquad s;
    // each section carries one zero at z=+1 and one at z=-1
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;
    s.a1 = -2.0 * zp.real();
    s.a2 = std::norm(zp);
    sections.push_back(s);
  }

  // Normalize to unit gain at the digital image of the analog center frequency.
  const double omega0 = 2.0 * std::atan(w0 / c);
  const double gain = std::abs(cascade_response(sections, omega0));
  sections.front().b0 /= gain;
  sections.front().b2 /= gain;
  return sections;
}

std::vector<Biquad> design_notch(double notch_hz, double fs, double q) {
  if (!(notch_hz > 0.0) || !(notch_hz < fs / 2.0))
    throw BandError("notch frequency must lie in (0, fs/2)");
  if (!(q > 0.0)) throw ArgumentError("notch quality factor must be positive");

  const double omega = 2.0 * kPi * notch_hz / fs;
  const double alpha = std::sin(omega) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * std::cos(omega) / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * std::cos(omega) / a0;
  s.a2 = (1.0 - alpha) / a0;
  return {s};
}

std::vector<double> filtfilt(const std::vector<Biquad>& sections,
                             std::span<const double> x, std::size_t pad_len) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  if (n == 1) return {x[0]};

  if (pad_len == 0) {
    const double r = max_pole_radius(sections);
    // decay to ~1e-12 of the entry transient
    pad_len = (r >= 1.0) ? n - 1
                         : static_cast<std::size_t>(std::ceil(-27.6 / std::log(r)));
    pad_len = std::max<std::size_t>(pad_len, 32);
  }
  pad_len = std::min(pad_len, n - 1);

  // odd reflection about both endpoints
  std::vector<double> ext(n + 2 * pad_len);
  for (std::size_t i = 0; i < pad_len; ++i)
    ext[i] = 2.0 * x[0] - x[pad_len - i];
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad_len));
  for (std::size_t i = 0; i < pad_len; ++i)
    ext[pad_len + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  for (const auto& s : sections) filter_in_place(s, ext);
  std::reverse(ext.begin(), ext.end());
  for (const auto& s : sections) filter_in_place(s, ext);
  std::reverse(ext.begin(), ext.end());

  return {ext.begin() + static_cast<std::ptrdiff_t>(pad_len),
          ext.begin() + static_cast<std::ptrdiff_t>(pad_len + n)};
}

Recording bandpass_filter(const Recording& rec, double low_hz, double high_hz) {
  require_finite(rec);
  return apply_zero_phase(rec, design_bandpass(low_hz, high_hz, rec.fs));
}

Recording notch_filter(const Recording& rec, double notch_hz, double q) {
  require_finite(rec);
  return apply_zero_phase(rec, design_notch(notch_hz, rec.fs, q));
}

Recording average_reref(const Recording& rec) {
  if (rec.channels() < 2)
    throw DataError("average re-reference of a single channel would zero it out");
  Recording out = rec;
  const std::size_t n_ch = rec.channels();
  for (std::size_t t = 0; t < rec.samples(); ++t) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n_ch; ++c) mean += rec.data.at(c, t);
    mean /= static_cast<double>(n_ch);
    for (std::size_t c = 0; c < n_ch; ++c) out.data.at(c, t) -= mean;
  }
  return out;
}

Recording interpolate_channels(const Recording& rec, const std::vector<std::size_t>& bad) {
  for (const std::size_t b : bad) {
    if (b >= rec.channels()) throw ArgumentError("bad-channel index out of range");
  }
  const std::set<std::size_t> bad_set(bad.begin(), bad.end());
  if (bad_set.size() >= rec.channels())
    throw DataError("cannot interpolate: every channel is marked bad");
  if (bad_set.empty()) return rec;

  Recording out = rec;
  const double n_good = static_cast<double>(rec.channels() - bad_set.size());
  for (std::size_t t = 0; t < rec.samples(); ++t) {
    double sum = 0.0;
    for (std::size_t c = 0; c < rec.channels(); ++c) {
      if (!bad_set.count(c)) sum += rec.data.at(c, t);
    }
    const double mean = sum / n_good;
    for (const std::size_t b : bad_set) out.data.at(b, t) = mean;
  }
  return out;
}

namespace {

double bessel_i0(double x) {
  // power series; converges quickly for the beta values used here
  double sum = 1.0, term = 1.0;
  const double x2 = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= x2 / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  return std::sin(kPi * x) / (kPi * x);
}

}  // namespace

Recording resample(const Recording& rec, double target_fs) {
  if (!(target_fs > 0.0)) throw ArgumentError("target sampling rate must be positive");
  require_finite(rec);
  if (target_fs == rec.fs) return rec;

  const std::size_t n = rec.samples();
  const long double ratio_ld =
      static_cast<long double>(target_fs) / static_cast<long double>(rec.fs);
  const std::size_t out_len = static_cast<std::size_t>(
      std::llroundl(static_cast<long double>(n) * ratio_ld));
  const double ratio = static_cast<double>(ratio_ld);

  // Kaiser-windowed sinc interpolator; cutoff at the smaller Nyquist.
  const double cutoff = std::min(1.0, ratio);  // fraction of input Nyquist
  const int zero_crossings = 32;
  const int half_width = static_cast<int>(std::ceil(zero_crossings / cutoff));
  const double beta = 8.6;
  const double i0_beta = bessel_i0(beta);

  Recording out;
  out.fs = target_fs;
  out.channel_labels = rec.channel_labels;
  out.subject_id = rec.subject_id;
  out.data = Matrix(rec.channels(), out_len);

  const auto sample_ext = [&](std::span<const double> ch, long long idx) -> double {
    // odd reflection at both ends
    const long long last = static_cast<long long>(n) - 1;
    if (idx < 0) idx = -idx;
    if (idx > last) idx = 2 * last - idx;
    if (idx < 0 || idx > last) return 0.0;  // pathologically short inputs
    return ch[static_cast<std::size_t>(idx)];
  };

  for (std::size_t c = 0; c < rec.channels(); ++c) {
    const auto ch = rec.channel(c);
    auto dst = out.channel(c);
    for (std::size_t m = 0; m < out_len; ++m) {
      const double t = static_cast<double>(m) / ratio;  // position in input samples
      const long long k0 = static_cast<long long>(std::floor(t)) - half_width + 1;
      const long long k1 = static_cast<long long>(std::floor(t)) + half_width;
      double acc = 0.0;
      for (long long k = k0; k <= k1; ++k) {
        const double dt = static_cast<double>(k) - t;
        const double u = dt / static_cast<double>(half_width);
        if (u <= -1.0 || u >= 1.0) continue;
        const double win = bessel_i0(beta * std::sqrt(1.0 - u * u)) / i0_beta;
        acc += sample_ext(ch, k) * cutoff * sinc(cutoff * dt) * win;
      }
      dst[m] = acc;
    }
  }

  out.events.reserve(rec.events.size());
  for (const auto& ev : rec.events) {
    long long idx = round_half_up(static_cast<double>(ev.sample_index) * ratio);
    idx = std::clamp<long long>(idx, 0, static_cast<long long>(out_len) - 1);
    out.events.push_back({static_cast<std::size_t>(idx), ev.label});
  }
  return out;
}

EpochResult epoch_and_baseline(const Recording& rec, const EpochSpec& spec,
                               const LabelMap& label_map,
                               const std::vector<std::string>& class_names) {
  spec.validate();
  rec.validate();
  for (const auto& [label, cls] : label_map) {
    if (cls < 0 || static_cast<std::size_t>(cls) >= class_names.size())
      throw ArgumentError("label map targets a class index outside class_names");
  }

  const long long start_off = round_half_up(spec.t_start * rec.fs);
  const long long trial_len = round_half_up((spec.t_end - spec.t_start) * rec.fs);
  const long long base_off0 = round_half_up(spec.baseline_start * rec.fs);
  const long long base_off1 = round_half_up(spec.baseline_end * rec.fs);
  if (trial_len < 1) throw ArgumentError("epoch window shorter than one sample");
  if (base_off1 <= base_off0)
    throw ArgumentError("baseline window shorter than one sample at this rate");

  EpochResult res;
  TrialSet& ts = res.trials;
  ts.channels = rec.channels();
  ts.samples = static_cast<std::size_t>(trial_len);
  ts.fs = rec.fs;
  ts.class_names = class_names;
  ts.channel_labels = rec.channel_labels;

  for (const auto& ev : rec.events) {
    const auto it = label_map.find(ev.label);
    if (it == label_map.end()) {
      ++res.unmapped_events;
      continue;
    }
    const long long ev_idx = static_cast<long long>(ev.sample_index);
    const long long t0 = ev_idx + start_off;
    const long long t1 = t0 + trial_len;
    const long long b0 = ev_idx + base_off0;
    const long long b1 = ev_idx + base_off1;
    if (t0 < 0 || t1 > static_cast<long long>(rec.samples())) {
      ++res.boundary_skips;
      continue;
    }

    for (std::size_t c = 0; c < rec.channels(); ++c) {
      const auto ch = rec.channel(c);
      double base_mean = 0.0;
      for (long long k = b0; k < b1; ++k) base_mean += ch[static_cast<std::size_t>(k)];
      base_mean /= static_cast<double>(b1 - b0);
      for (long long k = t0; k < t1; ++k)
        ts.data.push_back(ch[static_cast<std::size_t>(k)] - base_mean);
    }
    ts.labels.push_back(it->second);
    ts.subject_ids.push_back(rec.subject_id);
    ++ts.n_trials;
  }

  if (ts.n_trials == 0)
    throw EmptySetError("no mapped event produced a trial fully inside the recording");
  return res;
}

TrialSet zscore_trials(const TrialSet& ts) {
  if (!all_finite(ts.data)) throw DataError("trial tensor contains non-finite values");
  TrialSet out = ts;
  const double eps = 1e-12;
  for (std::size_t t = 0; t < ts.n_trials; ++t) {
    for (std::size_t c = 0; c < ts.channels; ++c) {
      auto row = out.trial_channel(t, c);
      double mean = 0.0;
      for (const double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      double var = 0.0;
      for (const double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      const double sd = std::sqrt(var);
      if (sd < eps) {
        std::fill(row.begin(), row.end(), 0.0);
      } else {
        for (double& v : row) v = (v - mean) / sd;
      }
    }
  }
  return out;
}

RejectResult amplitude_reject(const TrialSet& ts, double ptp_threshold_uv) {
  if (!(ptp_threshold_uv > 0.0))
    throw ArgumentError("peak-to-peak rejection threshold must be positive");

  RejectResult res;
  TrialSet& out = res.trials;
  out.channels = ts.channels;
  out.samples = ts.samples;
  out.fs = ts.fs;
  out.class_names = ts.class_names;
  out.channel_labels = ts.channel_labels;

  for (std::size_t t = 0; t < ts.n_trials; ++t) {
    bool keep = true;
    for (std::size_t c = 0; c < ts.channels && keep; ++c) {
      const auto row = ts.trial_channel(t, c);
      const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
      if (*mx - *mn > ptp_threshold_uv) keep = false;
    }
    if (!keep) {
      ++res.rejected;
      continue;
    }
    const auto row0 = ts.trial_channel(t, 0);
    out.data.insert(out.data.end(), row0.data(), row0.data() + ts.channels * ts.samples);
    out.labels.push_back(ts.labels[t]);
    out.subject_ids.push_back(ts.subject_ids[t]);
    ++out.n_trials;
  }
  return res;
}

}  // namespace erpbench
