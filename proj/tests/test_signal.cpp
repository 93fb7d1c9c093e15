#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "erpbench/rng.hpp"
#include "erpbench/signal.hpp"
#include "erpbench/spectral.hpp"
#include "oracles.hpp"

using namespace erpbench;

namespace {

Recording make_recording(std::size_t channels, std::size_t samples, double fs) {
  Recording rec;
  rec.fs = fs;
  rec.data = Matrix(channels, samples);
  for (std::size_t c = 0; c < channels; ++c) rec.channel_labels.push_back("ch" + std::to_string(c));
  rec.subject_id = "S000";
  return rec;
}

Recording tone_recording(double freq, double fs, std::size_t n) {
  Recording rec = make_recording(1, n, fs);
  const auto x = oracle::sine(freq, fs, n);
  std::copy(x.begin(), x.end(), rec.channel(0).begin());
  return rec;
}

// random superposition of sin(pi m k / (n-1)) terms; odd at both endpoints, so
// reflection padding continues it exactly and zero-phase filtering is LTI
std::vector<double> sine_basis_signal(std::size_t n, std::uint64_t seed, int terms = 8) {
  Rng rng(seed);
  std::vector<double> x(n, 0.0);
  for (int j = 0; j < terms; ++j) {
    const int m = 1 + static_cast<int>(rng.next_below(300));
    const double a = rng.next_normal();
    for (std::size_t k = 0; k < n; ++k)
      x[k] += a * std::sin(oracle::kPi * m * static_cast<double>(k) / static_cast<double>(n - 1));
  }
  return x;
}

}  // namespace

TEST_CASE("band-pass preserves a 10 Hz tone within 1%") {
  const Recording rec = tone_recording(10.0, 200.0, 2000);
  const Recording out = bandpass_filter(rec, 0.5, 45.0);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const std::vector<double> x(rec.channel(0).begin(), rec.channel(0).end());
  CHECK(oracle::rms(y) / oracle::rms(x) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("band-pass attenuates 0.1 Hz drift by at least 20 dB") {
  const Recording rec = tone_recording(0.1, 200.0, 12000);
  const Recording out = bandpass_filter(rec, 0.5, 45.0);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const std::vector<double> x(rec.channel(0).begin(), rec.channel(0).end());
  const double atten_db = -20.0 * std::log10(oracle::rms(y) / oracle::rms(x));
  CHECK(atten_db >= 20.0);
}

TEST_CASE("band-pass rejects invalid band bounds") {
  const Recording rec = tone_recording(10.0, 200.0, 500);
  CHECK_THROWS_AS(bandpass_filter(rec, 50.0, 45.0), BandError);
  CHECK_THROWS_AS(bandpass_filter(rec, 0.5, 120.0), BandError);
  CHECK_THROWS_AS(bandpass_filter(rec, 0.0, 45.0), BandError);
}

TEST_CASE("band-pass rejects non-finite input") {
  Recording rec = tone_recording(10.0, 200.0, 500);
  rec.data.at(0, 100) = std::nan("");
  CHECK_THROWS_AS(bandpass_filter(rec, 0.5, 45.0), DataError);
}

TEST_CASE("notch kills its own frequency by at least 40 dB") {
  // endpoints on zero crossings so reflection padding continues the tone
  const Recording rec = tone_recording(60.0, 200.0, 6001);
  const Recording out = notch_filter(rec, 60.0);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const std::vector<double> x(rec.channel(0).begin(), rec.channel(0).end());
  const double atten_db = -20.0 * std::log10(oracle::rms(y) / oracle::rms(x));
  CHECK(atten_db >= 40.0);
}

TEST_CASE("notch leaves a 10 Hz tone within 1%") {
  const Recording rec = tone_recording(10.0, 200.0, 6000);
  const Recording out = notch_filter(rec, 60.0);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const std::vector<double> x(rec.channel(0).begin(), rec.channel(0).end());
  CHECK(oracle::rms(y) / oracle::rms(x) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("notch at or above Nyquist is rejected") {
  const Recording rec = tone_recording(10.0, 200.0, 500);
  CHECK_THROWS_AS(notch_filter(rec, 120.0), BandError);
  CHECK_THROWS_AS(notch_filter(rec, 100.0), BandError);
}

TEST_CASE("band-pass and notch commute as zero-phase linear filters") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Recording rec = make_recording(1, 4000, 200.0);
    const auto x = sine_basis_signal(4000, 900 + seed);
    std::copy(x.begin(), x.end(), rec.channel(0).begin());

    const Recording a = notch_filter(bandpass_filter(rec, 0.5, 45.0), 60.0);
    const Recording b = bandpass_filter(notch_filter(rec, 60.0), 0.5, 45.0);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double d = a.data.at(0, k) - b.data.at(0, k);
      num += d * d;
      den += x[k] * x[k];
    }
    CHECK(std::sqrt(num / den) < 1e-6);
  }
}

TEST_CASE("average re-reference zeroes the cross-channel mean at every sample") {
  Recording rec = make_recording(5, 600, 200.0);
  Rng rng(11);
  for (double& v : rec.data.data) v = rng.next_normal() * 10.0;

  const Recording out = average_reref(rec);
  for (std::size_t t = 0; t < out.samples(); ++t) {
    double sum = 0.0;
    for (std::size_t c = 0; c < out.channels(); ++c) sum += out.data.at(c, t);
    CHECK(std::abs(sum) < 1e-9 * static_cast<double>(out.channels()));
  }

  // idempotence
  const Recording twice = average_reref(out);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    CHECK(twice.data.data[i] == doctest::Approx(out.data.data[i]).epsilon(1e-9));
}

TEST_CASE("average re-reference of two channels gives (a-b)/2 and (b-a)/2") {
  Recording rec = make_recording(2, 4, 200.0);
  const double a[4] = {1.0, 2.0, 3.0, 4.0};
  const double b[4] = {0.0, -2.0, 1.0, 8.0};
  for (std::size_t t = 0; t < 4; ++t) {
    rec.data.at(0, t) = a[t];
    rec.data.at(1, t) = b[t];
  }
  const Recording out = average_reref(rec);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(out.data.at(0, t) == doctest::Approx((a[t] - b[t]) / 2.0));
    CHECK(out.data.at(1, t) == doctest::Approx((b[t] - a[t]) / 2.0));
  }
}

TEST_CASE("average re-reference refuses a single channel") {
  const Recording rec = make_recording(1, 100, 200.0);
  CHECK_THROWS_AS(average_reref(rec), DataError);
}

TEST_CASE("bad-channel interpolation replaces with the mean of the others") {
  Recording rec = make_recording(3, 5, 200.0);
  for (std::size_t t = 0; t < 5; ++t) {
    rec.data.at(0, t) = static_cast<double>(t);
    rec.data.at(1, t) = 100.0;  // the bad one
    rec.data.at(2, t) = 2.0 * static_cast<double>(t);
  }
  const Recording out = interpolate_channels(rec, {1});
  for (std::size_t t = 0; t < 5; ++t)
    CHECK(out.data.at(1, t) == doctest::Approx(1.5 * static_cast<double>(t)));

  const Recording same = interpolate_channels(rec, {});
  CHECK(same.data.data == rec.data.data);

  CHECK_THROWS_AS(interpolate_channels(rec, {0, 1, 2}), DataError);
  CHECK_THROWS_AS(interpolate_channels(rec, {7}), ArgumentError);
}

TEST_CASE("resample length formula is exact for rational ratios") {
  for (const auto& [n, from, to] : std::vector<std::tuple<std::size_t, double, double>>{
           {2500, 500.0, 200.0}, {1000, 100.0, 200.0}, {777, 250.0, 200.0}, {123, 200.0, 300.0}}) {
    Recording rec = make_recording(1, n, from);
    const Recording out = resample(rec, to);
    const long long expected = std::llround(static_cast<double>(n) * to / from);
    CHECK(out.samples() == static_cast<std::size_t>(expected));
    CHECK(out.fs == to);
  }

  // property: round-half-up of n*p/q, computed in exact integer arithmetic
  Rng rng(606);
  for (int iter = 0; iter < 200; ++iter) {
    const std::size_t n = 1 + rng.next_below(3000);
    const unsigned long long q = 50 + rng.next_below(950);   // source rate
    const unsigned long long p = 50 + rng.next_below(950);   // target rate
    Recording rec = make_recording(1, n, static_cast<double>(q));
    const Recording out = resample(rec, static_cast<double>(p));
    const unsigned long long expected = (2ull * n * p + q) / (2ull * q);
    CHECK_MESSAGE(out.samples() == expected, "n=" << n << " " << q << "->" << p);
  }
}

TEST_CASE("downsampling 500 to 200 Hz keeps the 10 Hz Welch peak") {
  Recording rec = tone_recording(10.0, 500.0, 5000);
  const Recording out = resample(rec, 200.0);
  REQUIRE(out.samples() == 2000);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const SpectralConfig cfg;
  const Psd psd = welch_psd(y, 200.0, cfg);
  std::size_t argmax = 0;
  for (std::size_t k = 1; k < psd.power.size(); ++k) {
    if (psd.power[k] > psd.power[argmax]) argmax = k;
  }
  CHECK(std::abs(psd.freqs[argmax] - 10.0) <= psd.df + 1e-12);
}

TEST_CASE("upsampling 100 to 200 Hz doubles the length and keeps tone RMS within 2%") {
  Recording rec = tone_recording(10.0, 100.0, 1000);
  const Recording out = resample(rec, 200.0);
  REQUIRE(out.samples() == 2000);
  const std::vector<double> y(out.channel(0).begin(), out.channel(0).end());
  const std::vector<double> x(rec.channel(0).begin(), rec.channel(0).end());
  CHECK(oracle::rms(y) / oracle::rms(x) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("resample rescales event indices with round-half-up") {
  Recording rec = make_recording(1, 1000, 500.0);
  rec.events = {{0, "a"}, {499, "b"}, {999, "c"}};
  const Recording out = resample(rec, 200.0);
  REQUIRE(out.events.size() == 3);
  CHECK(out.events[0].sample_index == 0);
  CHECK(out.events[1].sample_index == 200);  // 499 * 0.4 = 199.6 -> 200
  CHECK(out.events[2].sample_index == 399);  // 999 * 0.4 = 399.6 -> 400, clamped into range
  CHECK_THROWS_AS(resample(rec, 0.0), ArgumentError);
}

TEST_CASE("epoching cuts the documented window and baseline-corrects it") {
  Recording rec = make_recording(2, 2000, 200.0);
  Rng rng(3);
  for (double& v : rec.data.data) v = rng.next_normal() + 5.0;
  rec.events = {{1000, "target"}};

  EpochSpec spec{-0.2, 0.8, -0.2, 0.0};
  const LabelMap map{{"target", 0}};
  const EpochResult res = epoch_and_baseline(rec, spec, map, {"target"});

  REQUIRE(res.trials.n_trials == 1);
  CHECK(res.trials.samples == 200);
  CHECK(res.boundary_skips == 0);
  CHECK(res.trials.subject_ids[0] == "S000");

  // trial content equals recording samples [960, 1160) minus the baseline mean
  for (std::size_t c = 0; c < 2; ++c) {
    double base = 0.0;
    for (std::size_t k = 960; k < 1000; ++k) base += rec.data.at(c, k);
    base /= 40.0;
    const auto tc = res.trials.trial_channel(0, c);
    for (std::size_t i = 0; i < 200; ++i)
      CHECK(tc[i] == doctest::Approx(rec.data.at(c, 960 + i) - base).epsilon(1e-12));

    double mean = 0.0;
    for (std::size_t i = 0; i < 40; ++i) mean += tc[i];
    CHECK(std::abs(mean / 40.0) < 1e-9);
  }
}

TEST_CASE("events too close to the edge are skipped and counted") {
  Recording rec = make_recording(1, 500, 200.0);
  rec.events = {{10, "t"}, {250, "t"}, {495, "t"}, {260, "ignored"}};
  EpochSpec spec{-0.2, 0.8, -0.2, 0.0};
  const EpochResult res = epoch_and_baseline(rec, spec, {{"t", 0}}, {"t"});
  CHECK(res.trials.n_trials == 1);
  CHECK(res.boundary_skips == 2);
  CHECK(res.unmapped_events == 1);
  // conservation: trials + boundary skips + unmapped = events
  CHECK(res.trials.n_trials + res.boundary_skips + res.unmapped_events == rec.events.size());
}

TEST_CASE("epoching with zero usable events is an error") {
  Recording rec = make_recording(1, 100, 200.0);
  rec.events = {{5, "t"}};
  EpochSpec spec{-0.2, 0.8, -0.2, 0.0};
  CHECK_THROWS_AS(epoch_and_baseline(rec, spec, {{"t", 0}}, {"t"}), EmptySetError);
  CHECK_THROWS_AS(epoch_and_baseline(rec, EpochSpec{0.8, -0.2, -0.2, 0.0}, {{"t", 0}}, {"t"}),
                  ArgumentError);
  // baseline outside the epoch window
  CHECK_THROWS_AS(epoch_and_baseline(rec, EpochSpec{-0.2, 0.8, -0.5, 0.0}, {{"t", 0}}, {"t"}),
                  ArgumentError);
}

TEST_CASE("PD-SIM style baseline strictly inside the epoch works") {
  Recording rec = make_recording(1, 2000, 200.0);
  Rng rng(17);
  for (double& v : rec.data.data) v = rng.next_normal();
  rec.events = {{1000, "t"}};
  EpochSpec spec{-0.5, 1.0, -0.3, -0.2};
  const EpochResult res = epoch_and_baseline(rec, spec, {{"t", 0}}, {"t"});
  REQUIRE(res.trials.n_trials == 1);
  CHECK(res.trials.samples == 300);
  // baseline sub-window [-0.3,-0.2) maps to trial samples [40, 60)
  const auto tc = res.trials.trial_channel(0, 0);
  double mean = 0.0;
  for (std::size_t i = 40; i < 60; ++i) mean += tc[i];
  CHECK(std::abs(mean / 20.0) < 1e-9);
}

TEST_CASE("z-scoring yields zero mean, unit population std, and is idempotent") {
  TrialSet ts;
  ts.n_trials = 4;
  ts.channels = 3;
  ts.samples = 50;
  ts.fs = 200.0;
  ts.class_names = {"a"};
  ts.labels = {0, 0, 0, 0};
  ts.subject_ids = {"s", "s", "s", "s"};
  Rng rng(8);
  ts.data.resize(4 * 3 * 50);
  for (double& v : ts.data) v = 3.0 + 7.0 * rng.next_normal();

  const TrialSet z = zscore_trials(ts);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto row = z.trial_channel(t, c);
      CHECK(std::abs(oracle::mean(row)) < 1e-9);
      CHECK(std::sqrt(oracle::population_variance(row)) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  const TrialSet zz = zscore_trials(z);
  for (std::size_t i = 0; i < z.data.size(); ++i)
    CHECK(std::abs(zz.data[i] - z.data[i]) < 1e-9);
}

TEST_CASE("z-score maps constant rows to zeros and [0,2] to [-1,1]") {
  TrialSet ts;
  ts.n_trials = 1;
  ts.channels = 2;
  ts.samples = 2;
  ts.fs = 200.0;
  ts.class_names = {"a"};
  ts.labels = {0};
  ts.subject_ids = {"s"};
  ts.data = {5.0, 5.0, 0.0, 2.0};

  const TrialSet z = zscore_trials(ts);
  CHECK(z.data[0] == 0.0);
  CHECK(z.data[1] == 0.0);
  CHECK(z.data[2] == doctest::Approx(-1.0));
  CHECK(z.data[3] == doctest::Approx(1.0));

  TrialSet bad = ts;
  bad.data[0] = std::nan("");
  CHECK_THROWS_AS(zscore_trials(bad), DataError);
}

TEST_CASE("amplitude rejection drops only trials that exceed the threshold") {
  TrialSet ts;
  ts.n_trials = 3;
  ts.channels = 1;
  ts.samples = 10;
  ts.fs = 200.0;
  ts.class_names = {"a", "b"};
  ts.labels = {0, 1, 0};
  ts.subject_ids = {"x", "y", "z"};
  ts.data.assign(30, 1.0);
  ts.data[15] = 501.0;  // trial 1 gets a 500 uV spike

  const RejectResult clean = amplitude_reject(ts, 100.0);
  CHECK(clean.rejected == 1);
  CHECK(clean.trials.n_trials == 2);
  CHECK(clean.trials.subject_ids == std::vector<std::string>{"x", "z"});
  CHECK(clean.trials.labels == std::vector<int>{0, 0});

  const RejectResult none = amplitude_reject(ts, 1000.0);
  CHECK(none.rejected == 0);
  CHECK(none.trials.data == ts.data);

  CHECK_THROWS_AS(amplitude_reject(ts, 0.0), ArgumentError);
}
