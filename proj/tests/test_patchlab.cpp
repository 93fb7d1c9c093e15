#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "erpbench/harness.hpp"
#include "erpbench/patchlab.hpp"
#include "erpbench/rng.hpp"
#include "erpbench/signal.hpp"

using namespace erpbench;
namespace fs = std::filesystem;

namespace {

TrialSet random_trials(std::size_t n_trials, std::size_t channels, std::size_t samples,
                       std::uint64_t seed, std::size_t n_classes = 2) {
  TrialSet ts;
  ts.n_trials = n_trials;
  ts.channels = channels;
  ts.samples = samples;
  ts.fs = 200.0;
  for (std::size_t k = 0; k < n_classes; ++k) ts.class_names.push_back("c" + std::to_string(k));
  Rng rng(seed);
  ts.data.resize(n_trials * channels * samples);
  for (double& v : ts.data) v = rng.next_normal();
  for (std::size_t t = 0; t < n_trials; ++t) {
    ts.labels.push_back(static_cast<int>(t % n_classes));
    ts.subject_ids.push_back("S" + std::to_string(t % 5));
  }
  return ts;
}

PatchConfig small_config(PatchStrategy strategy) {
  PatchConfig cfg;
  cfg.strategy = strategy;
  cfg.trial_samples = 24;
  cfg.channels = 3;
  cfg.patch_len = 7;  // 24 = 3*7 + 3: exercises the zero-padded tail
  cfg.d_model = 8;
  cfg.ff_dim = 12;
  cfg.n_classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("token counts match the published configurations") {
  PatchConfig cfg;
  cfg.trial_samples = 200;
  cfg.channels = 26;

  cfg.strategy = PatchStrategy::kMulti;
  cfg.patch_len = 25;
  CHECK(cfg.n_tokens() == 8);
  CHECK(cfg.patch_dim() == 650);

  cfg.strategy = PatchStrategy::kUni;
  cfg.patch_len = 100;
  CHECK(cfg.n_tokens() == 52);
  CHECK(cfg.patch_dim() == 100);

  cfg.strategy = PatchStrategy::kWhole;
  CHECK(cfg.n_tokens() == 200);
  CHECK(cfg.patch_dim() == 26);
}

TEST_CASE("token-count formulas cover ragged trailing patches") {
  PatchConfig cfg;
  cfg.trial_samples = 205;
  cfg.channels = 7;
  cfg.strategy = PatchStrategy::kMulti;
  cfg.patch_len = 25;
  CHECK(cfg.n_tokens() == 9);  // ceil(205/25)
  cfg.strategy = PatchStrategy::kUni;
  CHECK(cfg.n_tokens() == 63);  // 7 * 9

  cfg.strategy = PatchStrategy::kMulti;
  cfg.trial_samples = 10;
  cfg.patch_len = 25;
  CHECK_THROWS_AS(cfg.validate(), LengthError);
}

TEST_CASE("patch cutting lays values out as documented and zero-pads the tail") {
  TrialSet ts = random_trials(1, 2, 5, 3);
  PatchConfig cfg;
  cfg.strategy = PatchStrategy::kMulti;
  cfg.trial_samples = 5;
  cfg.channels = 2;
  cfg.patch_len = 3;
  cfg.d_model = 4;
  cfg.ff_dim = 4;

  const Matrix patches = cut_patches(ts, 0, cfg);
  REQUIRE(patches.rows == 2);
  REQUIRE(patches.cols == 6);
  // first patch: samples 0..2, time-major (t*C + c)
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t c = 0; c < 2; ++c)
      CHECK(patches.at(0, t * 2 + c) == ts.trial_channel(0, c)[t]);
  }
  // second patch: samples 3..4 then zero padding
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t c = 0; c < 2; ++c)
      CHECK(patches.at(1, t * 2 + c) == ts.trial_channel(0, c)[t + 3]);
  }
  CHECK(patches.at(1, 4) == 0.0);
  CHECK(patches.at(1, 5) == 0.0);

  // uni: tokens are channel-major
  cfg.strategy = PatchStrategy::kUni;
  const Matrix uni = cut_patches(ts, 0, cfg);
  REQUIRE(uni.rows == 4);
  CHECK(uni.at(0, 0) == ts.trial_channel(0, 0)[0]);
  CHECK(uni.at(2, 0) == ts.trial_channel(0, 1)[0]);

  // whole: one token per time point
  cfg.strategy = PatchStrategy::kWhole;
  const Matrix whole = cut_patches(ts, 0, cfg);
  REQUIRE(whole.rows == 5);
  REQUIRE(whole.cols == 2);
  CHECK(whole.at(3, 1) == ts.trial_channel(0, 1)[3]);
}

TEST_CASE("token-count formulas hold for random geometries") {
  Rng rng(404);
  for (int iter = 0; iter < 60; ++iter) {
    PatchConfig cfg;
    cfg.trial_samples = 1 + rng.next_below(64);
    cfg.channels = 1 + rng.next_below(8);
    cfg.patch_len = 1 + rng.next_below(cfg.trial_samples);
    cfg.d_model = 4;
    cfg.ff_dim = 4;
    const std::size_t windows = (cfg.trial_samples + cfg.patch_len - 1) / cfg.patch_len;

    TrialSet ts = random_trials(1, cfg.channels, cfg.trial_samples, 500 + iter);
    cfg.strategy = PatchStrategy::kMulti;
    CHECK(cut_patches(ts, 0, cfg).rows == windows);
    cfg.strategy = PatchStrategy::kUni;
    CHECK(cut_patches(ts, 0, cfg).rows == cfg.channels * windows);
    cfg.strategy = PatchStrategy::kWhole;
    CHECK(cut_patches(ts, 0, cfg).rows == cfg.trial_samples);
  }
}

TEST_CASE("tokenize projects patches and adds the positional embeddings") {
  const PatchConfig cfg = small_config(PatchStrategy::kMulti);
  const TrialSet ts = random_trials(1, cfg.channels, cfg.trial_samples, 61, cfg.n_classes);
  const PatchModel model = init_patch_model(cfg, 62);

  const Matrix tok = tokenize(model, ts, 0);
  REQUIRE(tok.rows == cfg.n_tokens());
  REQUIRE(tok.cols == cfg.d_model);

  const Matrix patches = cut_patches(ts, 0, cfg);
  for (std::size_t i = 0; i < tok.rows; ++i) {
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      double expected = model.b_proj[j] + model.pos.at(i, j);
      for (std::size_t p = 0; p < patches.cols; ++p)
        expected += patches.at(i, p) * model.w_proj.at(p, j);
      CHECK(tok.at(i, j) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention rows are probability distributions") {
  const PatchConfig cfg = small_config(PatchStrategy::kUni);
  const TrialSet ts = random_trials(2, cfg.channels, cfg.trial_samples, 11, cfg.n_classes);
  const PatchModel model = init_patch_model(cfg, 5);
  ForwardCache cache;
  forward_trial(model, ts, 0, &cache);
  for (std::size_t i = 0; i < cache.attn.rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < cache.attn.cols; ++j) {
      sum += cache.attn.at(i, j);
      CHECK(cache.attn.at(i, j) >= 0.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("with zeroed positional embeddings the pooled logits are permutation invariant") {
  const PatchConfig cfg = small_config(PatchStrategy::kMulti);
  const TrialSet ts = random_trials(1, cfg.channels, cfg.trial_samples, 21, cfg.n_classes);
  PatchModel model = init_patch_model(cfg, 9);
  std::fill(model.pos.data.begin(), model.pos.data.end(), 0.0);

  const Matrix patches = cut_patches(ts, 0, cfg);
  ForwardCache base_cache;
  const auto base = encoder_forward(model, patches, &base_cache);

  // rotate the tokens
  Matrix rotated(patches.rows, patches.cols);
  for (std::size_t i = 0; i < patches.rows; ++i) {
    const std::size_t src = (i + 1) % patches.rows;
    std::copy(patches.row(src).begin(), patches.row(src).end(), rotated.row(i).begin());
  }
  ForwardCache rot_cache;
  const auto rotated_logits = encoder_forward(model, rotated, &rot_cache);
  for (std::size_t k = 0; k < base.size(); ++k)
    CHECK(rotated_logits[k] == doctest::Approx(base[k]).epsilon(1e-9));

  // attention outputs permute along with the tokens
  for (std::size_t i = 0; i < patches.rows; ++i) {
    const std::size_t src = (i + 1) % patches.rows;
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      CHECK(rot_cache.r2.at(i, j) == doctest::Approx(base_cache.r2.at(src, j)).epsilon(1e-9));
  }
}

TEST_CASE("identical duplicate tokens produce identical per-token outputs") {
  const PatchConfig cfg = small_config(PatchStrategy::kWhole);
  PatchModel model = init_patch_model(cfg, 3);
  std::fill(model.pos.data.begin(), model.pos.data.end(), 0.0);

  Matrix tokens(cfg.n_tokens(), cfg.patch_dim());
  Rng rng(6);
  std::vector<double> proto(cfg.patch_dim());
  for (double& v : proto) v = rng.next_normal();
  for (std::size_t i = 0; i < tokens.rows; ++i)
    std::copy(proto.begin(), proto.end(), tokens.row(i).begin());

  ForwardCache cache;
  encoder_forward(model, tokens, &cache);
  for (std::size_t i = 1; i < cache.r2.rows; ++i) {
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      CHECK(cache.r2.at(i, j) == doctest::Approx(cache.r2.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  for (const PatchStrategy strategy :
       {PatchStrategy::kMulti, PatchStrategy::kUni, PatchStrategy::kWhole}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const PatchConfig cfg = small_config(strategy);
      const TrialSet ts =
          random_trials(4, cfg.channels, cfg.trial_samples, 100 + seed, cfg.n_classes);
      PatchModel model = init_patch_model(cfg, 200 + seed);
      const GradCheckReport report = grad_check(model, ts, {0, 1, 2, 3}, 1e-4);
      CHECK_MESSAGE(report.all_within_tolerance,
                    patch_strategy_name(strategy) << " seed " << seed << " worst "
                                                  << report.worst_rel_error);
      CHECK(report.worst_rel_error < 1e-4);
    }
  }
}

TEST_CASE("classifier-bias gradient equals mean(softmax - one-hot) in closed form") {
  const PatchConfig cfg = small_config(PatchStrategy::kUni);
  const TrialSet ts = random_trials(4, cfg.channels, cfg.trial_samples, 55, cfg.n_classes);
  const PatchModel model = init_patch_model(cfg, 56);

  PatchGradients grads = zero_gradients(cfg);
  patch_loss_and_gradients(model, ts, {0, 1, 2, 3}, &grads);

  std::vector<double> expected(cfg.n_classes, 0.0);
  for (const std::size_t t : {0, 1, 2, 3}) {
    auto logits = forward_trial(model, ts, t);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double& v : logits) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (std::size_t k = 0; k < cfg.n_classes; ++k) {
      expected[k] += (logits[k] / sum - (static_cast<int>(k) == ts.labels[t] ? 1.0 : 0.0)) / 4.0;
    }
  }
  for (std::size_t k = 0; k < cfg.n_classes; ++k)
    CHECK(grads.b_head[k] == doctest::Approx(expected[k]).epsilon(1e-12));
}

TEST_CASE("zero tolerance flags every tensor") {
  const PatchConfig cfg = small_config(PatchStrategy::kMulti);
  const TrialSet ts = random_trials(2, cfg.channels, cfg.trial_samples, 71, cfg.n_classes);
  PatchModel model = init_patch_model(cfg, 72);
  const GradCheckReport report = grad_check(model, ts, {0, 1}, 0.0);
  CHECK_FALSE(report.all_within_tolerance);
  for (const auto& e : report.entries) CHECK(e.flagged);
}

TEST_CASE("parameter counting is exact and matches the serialized checkpoint") {
  PatchConfig cfg;
  cfg.strategy = PatchStrategy::kMulti;
  cfg.trial_samples = 200;
  cfg.channels = 26;
  cfg.patch_len = 25;
  cfg.d_model = 64;
  cfg.ff_dim = 128;
  cfg.n_classes = 2;

  // projection-only arithmetic: 650 * 64 + 64
  CHECK(cfg.patch_dim() * cfg.d_model + cfg.d_model == 41664);

  const PatchModel model = init_patch_model(cfg, 4);
  CHECK(model.parameter_count() == param_count(cfg));

  const fs::path path = fs::temp_directory_path() / "erpbench_patch_model.bin";
  write_patch_model(model, path);
  const PatchModel back = read_patch_model(path);
  CHECK(back.parameter_count() == param_count(cfg));
  // float32 storage: compare through a float cast
  for (std::size_t i = 0; i < model.w_proj.size(); ++i)
    CHECK(back.w_proj.data[i] == static_cast<double>(static_cast<float>(model.w_proj.data[i])));

  // doubling d_model strictly increases the count
  PatchConfig wider = cfg;
  wider.d_model = 128;
  CHECK(param_count(wider) > param_count(cfg));
}

TEST_CASE("the three reference configurations stay within a 10% parameter spread") {
  PatchConfig multi;
  multi.strategy = PatchStrategy::kMulti;
  multi.trial_samples = 200;
  multi.channels = 26;
  multi.patch_len = 25;
  multi.d_model = 224;
  multi.ff_dim = 1024;
  multi.n_classes = 2;

  PatchConfig uni = multi;
  uni.strategy = PatchStrategy::kUni;
  uni.patch_len = 100;
  uni.d_model = 256;

  PatchConfig whole = multi;
  whole.strategy = PatchStrategy::kWhole;
  whole.d_model = 256;

  const std::size_t pm = param_count(multi);
  const std::size_t pu = param_count(uni);
  const std::size_t pw = param_count(whole);
  const std::size_t lo = std::min({pm, pu, pw});
  const std::size_t hi = std::max({pm, pu, pw});
  CHECK(static_cast<double>(hi - lo) / static_cast<double>(lo) <= 0.10);

  // the counts are exact integers, fixed by the reference dimensions
  CHECK(pm == 809666);
  CHECK(pu == 828418);
  CHECK(pw == 847362);
}

TEST_CASE("training separates trials with a planted peak and stays at chance without one") {
  SynthSpec spec;
  spec.name = "patch-train";
  spec.n_subjects = 8;
  spec.trials_per_subject = 30;
  spec.channels = 4;
  spec.trial_samples = 64;
  spec.fs = 200.0;
  spec.effect = "evoked_peak";
  spec.peak_latency_s = 0.16;
  spec.peak_width_s = 0.04;
  spec.effect_amplitude_uv = 30.0;  // 3 sigma of the 10 uV background
  spec.subject_jitter = 0.1;

  const TrialSet raw = synth_trials(spec, 41);
  const TrialSet all = zscore_trials(raw);

  // subject-independent split
  std::set<std::string> subjects(all.subject_ids.begin(), all.subject_ids.end());
  const SplitPlan plan = monte_carlo_split(subjects, 41);
  const auto subset = [&](const std::vector<std::string>& subs) {
    const std::set<std::string> wanted(subs.begin(), subs.end());
    TrialSet out;
    out.channels = all.channels;
    out.samples = all.samples;
    out.fs = all.fs;
    out.class_names = all.class_names;
    for (std::size_t t = 0; t < all.n_trials; ++t) {
      if (!wanted.count(all.subject_ids[t])) continue;
      const auto row = all.trial_channel(t, 0);
      out.data.insert(out.data.end(), row.data(), row.data() + all.channels * all.samples);
      out.labels.push_back(all.labels[t]);
      out.subject_ids.push_back(all.subject_ids[t]);
      ++out.n_trials;
    }
    return out;
  };
  const TrialSet train = subset(plan.train_subjects);
  const TrialSet valid = subset(plan.valid_subjects);
  const TrialSet test = subset(plan.test_subjects);

  for (const PatchStrategy strategy :
       {PatchStrategy::kMulti, PatchStrategy::kUni, PatchStrategy::kWhole}) {
    PatchConfig cfg;
    cfg.strategy = strategy;
    cfg.trial_samples = spec.trial_samples;
    cfg.channels = spec.channels;
    cfg.patch_len = strategy == PatchStrategy::kUni ? 32 : 8;
    cfg.d_model = 16;
    cfg.ff_dim = 32;
    cfg.n_classes = 2;

    TrainConfig tcfg;
    tcfg.seed = 41;
    tcfg.max_epochs = 40;
    tcfg.patience = 15;
    tcfg.lr = 3e-3;
    TrainReport report;
    const PatchModel model = train_patch_model(train, valid, cfg, tcfg, &report);
    const MetricSet m = compute_metrics(patch_predict_proba(model, test), test.labels);
    CHECK_MESSAGE(m.accuracy >= 0.9, patch_strategy_name(strategy)
                                         << " accuracy " << m.accuracy);
    CHECK(report.final_train_loss <= report.initial_train_loss);
  }

  // zero-effect control with the uni strategy
  SynthSpec none = spec;
  none.name = "patch-none";
  none.effect = "none";
  const TrialSet raw_none = zscore_trials(synth_trials(none, 41));
  PatchConfig cfg;
  cfg.strategy = PatchStrategy::kUni;
  cfg.trial_samples = spec.trial_samples;
  cfg.channels = spec.channels;
  cfg.patch_len = 32;
  cfg.d_model = 16;
  cfg.ff_dim = 32;
  cfg.n_classes = 2;
  TrainConfig tcfg;
  tcfg.seed = 41;
  tcfg.max_epochs = 15;
  tcfg.patience = 15;
  tcfg.lr = 3e-3;

  // train/test on disjoint subject groups of the null dataset
  std::set<std::string> nsubjects(raw_none.subject_ids.begin(), raw_none.subject_ids.end());
  const SplitPlan nplan = monte_carlo_split(nsubjects, 43);
  const auto nsubset = [&](const std::vector<std::string>& subs) {
    const std::set<std::string> wanted(subs.begin(), subs.end());
    TrialSet out;
    out.channels = raw_none.channels;
    out.samples = raw_none.samples;
    out.fs = raw_none.fs;
    out.class_names = raw_none.class_names;
    for (std::size_t t = 0; t < raw_none.n_trials; ++t) {
      if (!wanted.count(raw_none.subject_ids[t])) continue;
      const auto row = raw_none.trial_channel(t, 0);
      out.data.insert(out.data.end(), row.data(),
                      row.data() + raw_none.channels * raw_none.samples);
      out.labels.push_back(raw_none.labels[t]);
      out.subject_ids.push_back(raw_none.subject_ids[t]);
      ++out.n_trials;
    }
    return out;
  };
  const PatchModel null_model =
      train_patch_model(nsubset(nplan.train_subjects), nsubset(nplan.valid_subjects), cfg, tcfg);
  const TrialSet ntest = nsubset(nplan.test_subjects);
  const MetricSet m = compute_metrics(patch_predict_proba(null_model, ntest), ntest.labels);
  CHECK(m.accuracy >= 0.3);
  CHECK(m.accuracy <= 0.7);
}
