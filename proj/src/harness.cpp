#include "erpbench/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "erpbench/rng.hpp"
#include "erpbench/signal.hpp"

namespace erpbench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<std::size_t> rows_for_subjects(const FeatureMatrix& fm,
                                           const std::vector<std::string>& subjects) {
  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < fm.n_rows(); ++r) {
    if (wanted.count(fm.subject_ids[r])) rows.push_back(r);
  }
  return rows;
}

MetricSet metric_mean(const std::vector<MetricSet>& ms) {
  MetricSet out;
  for (const auto& m : ms) {
    out.accuracy += m.accuracy;
    out.f1_macro += m.f1_macro;
    out.auroc += m.auroc;
  }
  const double n = static_cast<double>(ms.size());
  out.accuracy /= n;
  out.f1_macro /= n;
  out.auroc /= n;
  return out;
}

MetricSet metric_std(const std::vector<MetricSet>& ms, const MetricSet& mean) {
  MetricSet out;
  for (const auto& m : ms) {
    out.accuracy += (m.accuracy - mean.accuracy) * (m.accuracy - mean.accuracy);
    out.f1_macro += (m.f1_macro - mean.f1_macro) * (m.f1_macro - mean.f1_macro);
    out.auroc += (m.auroc - mean.auroc) * (m.auroc - mean.auroc);
  }
  const double n = static_cast<double>(ms.size());
  out.accuracy = std::sqrt(out.accuracy / n);
  out.f1_macro = std::sqrt(out.f1_macro / n);
  out.auroc = std::sqrt(out.auroc / n);
  return out;
}

}  // namespace

SplitPlan monte_carlo_split(const std::set<std::string>& subjects, std::uint64_t seed,
                            double train_ratio, double valid_ratio) {
  if (subjects.size() < 5)
    throw ArgumentError("subject-independent split needs at least 5 subjects");
  if (!(train_ratio > 0.0) || !(valid_ratio > 0.0) || !(train_ratio + valid_ratio < 1.0))
    throw ArgumentError("split ratios must be positive and sum below 1");

  std::vector<std::string> shuffled(subjects.begin(), subjects.end());
  std::sort(shuffled.begin(), shuffled.end());
  Rng rng(derive_stream(seed, "monte_carlo_split"));
  rng.shuffle(shuffled);

  const std::size_t n = shuffled.size();
  const std::size_t n_train = static_cast<std::size_t>(
      std::floor(train_ratio * static_cast<double>(n)));
  const std::size_t n_valid = static_cast<std::size_t>(
      std::floor(valid_ratio * static_cast<double>(n)));

  SplitPlan plan;
  plan.seed = seed;
  plan.train_subjects.assign(shuffled.begin(), shuffled.begin() + n_train);
  plan.valid_subjects.assign(shuffled.begin() + n_train, shuffled.begin() + n_train + n_valid);
  plan.test_subjects.assign(shuffled.begin() + n_train + n_valid, shuffled.end());
  return plan;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }

  ExperimentConfig cfg;
  try {
    cfg.datasets = j.at("datasets").get<std::vector<std::string>>();
    cfg.feature_set = parse_feature_set(j.at("feature_set").get<std::string>());
    if (j.contains("spectral")) {
      const json& s = j.at("spectral");
      if (s.contains("segment_len"))
        cfg.spectral.segment_len = s.at("segment_len").get<std::size_t>();
      if (s.contains("overlap")) cfg.spectral.overlap = s.at("overlap").get<double>();
      if (s.contains("rolloff_fraction"))
        cfg.spectral.rolloff_fraction = s.at("rolloff_fraction").get<double>();
      if (s.contains("tsallis_q")) cfg.spectral.tsallis_q = s.at("tsallis_q").get<double>();
      if (s.contains("total_band")) {
        cfg.spectral.total_band_lo = s.at("total_band").at(0).get<double>();
        cfg.spectral.total_band_hi = s.at("total_band").at(1).get<double>();
      }
      if (s.contains("bands")) {
        cfg.spectral.bands.clear();
        for (const auto& b : s.at("bands")) {
          cfg.spectral.bands.push_back({b.at("name").get<std::string>(),
                                        b.at("f_lo").get<double>(), b.at("f_hi").get<double>()});
        }
      }
    }
    if (j.contains("pyramid_levels"))
      cfg.pyramid.level_segments = j.at("pyramid_levels").get<std::vector<std::size_t>>();
    if (j.contains("train")) {
      const json& t = j.at("train");
      if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<std::size_t>();
      if (t.contains("max_epochs")) cfg.train.max_epochs = t.at("max_epochs").get<std::size_t>();
      if (t.contains("patience")) cfg.train.patience = t.at("patience").get<std::size_t>();
      if (t.contains("lr")) cfg.train.lr = t.at("lr").get<double>();
      if (t.contains("weight_decay")) cfg.train.weight_decay = t.at("weight_decay").get<double>();
    }
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("split_ratios")) {
      cfg.train_ratio = j.at("split_ratios").at(0).get<double>();
      cfg.valid_ratio = j.at("split_ratios").at(1).get<double>();
    }
    if (j.contains("ptp_reject_uv")) cfg.ptp_reject_uv = j.at("ptp_reject_uv").get<double>();
    if (j.contains("shuffle_labels")) cfg.shuffle_labels = j.at("shuffle_labels").get<bool>();
  } catch (const json::exception& e) {
    throw IoError("experiment config " + path.string() + ": " + e.what());
  }
  cfg.spectral.validate();
  cfg.pyramid.validate();
  return cfg;
}

BenchmarkOutput run_benchmark(const ExperimentConfig& config) {
  if (config.seeds.empty()) throw ArgumentError("experiment needs at least one seed");
  BenchmarkOutput out;
  const std::string method = feature_set_name(config.feature_set) + "-linear";

  for (const std::string& dataset_path : config.datasets) {
    TrialSet trials = read_erpb(dataset_path);
    const std::string dataset_name = read_erpb_manifest(dataset_path).dataset_name;
    if (config.ptp_reject_uv > 0.0)
      trials = amplitude_reject(trials, config.ptp_reject_uv).trials;
    // mirror pipeline step 9; idempotent if the stored trials are normalized
    trials = zscore_trials(trials);

    FeatureMatrix feats =
        extract_features(trials, config.feature_set, config.spectral, config.pyramid);

    std::set<std::string> subjects(feats.subject_ids.begin(), feats.subject_ids.end());
    std::vector<MetricSet> per_seed;

    for (const std::uint64_t seed : config.seeds) {
      std::vector<int> labels = feats.labels;
      if (config.shuffle_labels) {
        // shuffle labels within each subject: keeps class priors per subject,
        // destroys the label-signal association
        for (const std::string& subj : subjects) {
          std::vector<std::size_t> rows;
          for (std::size_t r = 0; r < feats.n_rows(); ++r) {
            if (feats.subject_ids[r] == subj) rows.push_back(r);
          }
          std::vector<int> shuffled;
          shuffled.reserve(rows.size());
          for (const std::size_t r : rows) shuffled.push_back(labels[r]);
          Rng rng(derive_stream(seed, "shuffle_labels/" + dataset_name + "/" + subj));
          rng.shuffle(shuffled);
          for (std::size_t i = 0; i < rows.size(); ++i) labels[rows[i]] = shuffled[i];
        }
      }

      FeatureMatrix labeled = feats;
      labeled.labels = labels;

      const SplitPlan plan =
          monte_carlo_split(subjects, seed, config.train_ratio, config.valid_ratio);
      FeatureMatrix train = labeled.select_rows(rows_for_subjects(labeled, plan.train_subjects));
      FeatureMatrix valid = labeled.select_rows(rows_for_subjects(labeled, plan.valid_subjects));
      FeatureMatrix test = labeled.select_rows(rows_for_subjects(labeled, plan.test_subjects));
      if (test.n_rows() == 0) throw EmptySetError("test split holds no trials");

      TrainConfig tcfg = config.train;
      tcfg.seed = seed;
      const LinearModel model = train_linear(train, valid, tcfg);
      const MetricSet metrics = compute_metrics(predict_proba(model, test), test.labels);

      out.runs.push_back({dataset_name, method, seed, metrics});
      per_seed.push_back(metrics);
    }

    MethodAggregate agg;
    agg.dataset = dataset_name;
    agg.method = method;
    agg.mean = metric_mean(per_seed);
    agg.std_dev = metric_std(per_seed, agg.mean);
    agg.n_runs = per_seed.size();
    out.aggregates.push_back(agg);
  }
  return out;
}

void write_results(const BenchmarkOutput& out, const fs::path& path) {
  json j;
  json runs = json::array();
  for (const auto& r : out.runs) {
    runs.push_back({{"dataset", r.dataset},
                    {"method", r.method},
                    {"seed", r.seed},
                    {"accuracy", r.metrics.accuracy},
                    {"f1_macro", r.metrics.f1_macro},
                    {"auroc", r.metrics.auroc}});
  }
  j["runs"] = std::move(runs);
  json aggs = json::array();
  for (const auto& a : out.aggregates) {
    aggs.push_back({{"dataset", a.dataset},
                    {"method", a.method},
                    {"n_runs", a.n_runs},
                    {"mean", {{"accuracy", a.mean.accuracy},
                              {"f1_macro", a.mean.f1_macro},
                              {"auroc", a.mean.auroc}}},
                    {"std", {{"accuracy", a.std_dev.accuracy},
                             {"f1_macro", a.std_dev.f1_macro},
                             {"auroc", a.std_dev.auroc}}}});
  }
  j["aggregates"] = std::move(aggs);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

BenchmarkOutput read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }
  BenchmarkOutput out;
  try {
    for (const auto& r : j.at("runs")) {
      RunResult run;
      run.dataset = r.at("dataset").get<std::string>();
      run.method = r.at("method").get<std::string>();
      run.seed = r.at("seed").get<std::uint64_t>();
      run.metrics.accuracy = r.at("accuracy").get<double>();
      run.metrics.f1_macro = r.at("f1_macro").get<double>();
      run.metrics.auroc = r.at("auroc").get<double>();
      out.runs.push_back(std::move(run));
    }
    for (const auto& a : j.at("aggregates")) {
      MethodAggregate agg;
      agg.dataset = a.at("dataset").get<std::string>();
      agg.method = a.at("method").get<std::string>();
      agg.n_runs = a.at("n_runs").get<std::size_t>();
      agg.mean.accuracy = a.at("mean").at("accuracy").get<double>();
      agg.mean.f1_macro = a.at("mean").at("f1_macro").get<double>();
      agg.mean.auroc = a.at("mean").at("auroc").get<double>();
      agg.std_dev.accuracy = a.at("std").at("accuracy").get<double>();
      agg.std_dev.f1_macro = a.at("std").at("f1_macro").get<double>();
      agg.std_dev.auroc = a.at("std").at("auroc").get<double>();
      out.aggregates.push_back(std::move(agg));
    }
  } catch (const json::exception& e) {
    throw IoError("results file " + path.string() + ": " + e.what());
  }
  return out;
}

RankTable aggregate_and_rank(const ScoreTable& scores) {
  if (scores.empty()) throw CoverageError("no (dataset, metric) cells to rank");

  // consistent method set across every cell
  std::vector<std::string> methods;
  for (const auto& [method, value] : scores.begin()->second) methods.push_back(method);
  for (const auto& [cell, per_method] : scores) {
    if (per_method.size() != methods.size())
      throw CoverageError("cell (" + cell.first + ", " + cell.second +
                          ") covers a different method set");
    for (const auto& m : methods) {
      if (!per_method.count(m))
        throw CoverageError("cell (" + cell.first + ", " + cell.second + ") misses method '" +
                            m + "'");
    }
  }

  RankTable table;
  std::map<std::string, double> rank_sum;
  for (const auto& [cell, per_method] : scores) {
    // descending score; ties share the average of their positions
    std::vector<std::string> order = methods;
    std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
      const double sa = per_method.at(a), sb = per_method.at(b);
      if (sa != sb) return sa > sb;
      return a < b;
    });
    std::map<std::string, double> ranks;
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j < order.size() &&
             per_method.at(order[j]) == per_method.at(order[i]))
        ++j;
      const double avg = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
      i = j;
    }
    for (const auto& [method, r] : ranks) rank_sum[method] += r;
    table.entries[cell] = std::move(ranks);
  }
  const double n_cells = static_cast<double>(scores.size());
  for (const auto& [method, sum] : rank_sum) table.avg_rank[method] = sum / n_cells;
  return table;
}

ScoreTable scores_from_results(const BenchmarkOutput& out) {
  ScoreTable scores;
  for (const auto& a : out.aggregates) {
    scores[{a.dataset, "Accuracy"}][a.method] = a.mean.accuracy;
    scores[{a.dataset, "F1"}][a.method] = a.mean.f1_macro;
    scores[{a.dataset, "AUROC"}][a.method] = a.mean.auroc;
  }
  return scores;
}

ScoreTable scores_from_fixture(const PaperTableFixture& fx) {
  ScoreTable scores;
  for (const auto& d : fx.datasets) {
    for (const auto& m : fx.metrics) {
      for (const auto& method : fx.methods) scores[{d, m}][method] = fx.at(d, m, method);
    }
  }
  return scores;
}

void write_rank_table(const RankTable& table, const fs::path& path) {
  json j;
  json cells = json::array();
  for (const auto& [cell, ranks] : table.entries) {
    json c;
    c["dataset"] = cell.first;
    c["metric"] = cell.second;
    c["ranks"] = ranks;
    cells.push_back(std::move(c));
  }
  j["cells"] = std::move(cells);
  j["avg_rank"] = table.avg_rank;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void SynthSpec::validate() const {
  if (n_subjects < 5) throw ArgumentError("synthetic dataset needs at least 5 subjects");
  if (trials_per_subject < 10)
    throw ArgumentError("synthetic dataset needs at least 10 trials per subject");
  if (channels < 1) throw ArgumentError("synthetic dataset needs at least one channel");
  if (!(fs > 0.0)) throw ArgumentError("sampling rate must be positive");
  if (trial_samples < 16) throw ArgumentError("trials must span at least 16 samples");
  if (n_classes < 2) throw ArgumentError("synthetic dataset needs at least two classes");
  if (effect != "band_power" && effect != "evoked_peak" && effect != "none")
    throw ArgumentError("effect must be band_power, evoked_peak or none");
  if (!(noise_amplitude_uv > 0.0)) throw ArgumentError("noise amplitude must be positive");
  if (subject_jitter < 0.0 || subject_jitter >= 1.0)
    throw ArgumentError("subject jitter must lie in [0, 1)");
}

SynthSpec load_synth_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }
  SynthSpec spec;
  try {
    if (j.contains("name")) spec.name = j.at("name").get<std::string>();
    if (j.contains("n_subjects")) spec.n_subjects = j.at("n_subjects").get<std::size_t>();
    if (j.contains("trials_per_subject"))
      spec.trials_per_subject = j.at("trials_per_subject").get<std::size_t>();
    if (j.contains("channels")) spec.channels = j.at("channels").get<std::size_t>();
    if (j.contains("fs")) spec.fs = j.at("fs").get<double>();
    if (j.contains("trial_samples")) spec.trial_samples = j.at("trial_samples").get<std::size_t>();
    if (j.contains("n_classes")) spec.n_classes = j.at("n_classes").get<std::size_t>();
    if (j.contains("effect")) spec.effect = j.at("effect").get<std::string>();
    if (j.contains("effect_freq_hz")) spec.effect_freq_hz = j.at("effect_freq_hz").get<double>();
    if (j.contains("effect_amplitude_uv"))
      spec.effect_amplitude_uv = j.at("effect_amplitude_uv").get<double>();
    if (j.contains("peak_latency_s")) spec.peak_latency_s = j.at("peak_latency_s").get<double>();
    if (j.contains("peak_width_s")) spec.peak_width_s = j.at("peak_width_s").get<double>();
    if (j.contains("noise_amplitude_uv"))
      spec.noise_amplitude_uv = j.at("noise_amplitude_uv").get<double>();
    if (j.contains("subject_jitter")) spec.subject_jitter = j.at("subject_jitter").get<double>();
  } catch (const json::exception& e) {
    throw IoError("synth spec " + path.string() + ": " + e.what());
  }
  spec.validate();
  return spec;
}

namespace {

std::string subject_name(std::size_t idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "S%03zu", idx);
  return buf;
}

// 1/f-shaped background: random-phase sinusoid bank on a 0.5 Hz grid with
// amplitude ~ f^-1/2, scaled to the requested RMS.
void add_background(std::span<double> x, double fs, double rms, Rng& rng) {
  const double f_lo = 0.5, f_hi = 45.0, f_step = 0.5;
  double inv_f_sum = 0.0;
  for (double f = f_lo; f <= f_hi + 1e-9; f += f_step) inv_f_sum += 1.0 / f;
  const double scale = rms * std::sqrt(2.0 / inv_f_sum);
  for (double f = f_lo; f <= f_hi + 1e-9; f += f_step) {
    const double amp = scale / std::sqrt(f);
    const double phase = rng.next_uniform(0.0, 2.0 * kPi);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += amp * std::sin(2.0 * kPi * f * static_cast<double>(i) / fs + phase);
  }
}

void add_effect(std::span<double> x, const SynthSpec& spec, int label, double jitter, Rng& rng) {
  if (label == 0 || spec.effect == "none") return;
  const double amp = spec.effect_amplitude_uv * jitter * static_cast<double>(label);
  if (spec.effect == "band_power") {
    const double phase = rng.next_uniform(0.0, 2.0 * kPi);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += amp * std::sin(2.0 * kPi * spec.effect_freq_hz * static_cast<double>(i) / spec.fs +
                             phase);
  } else if (spec.effect == "evoked_peak") {
    const double t0 = spec.peak_latency_s;
    const double sigma = spec.peak_width_s;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double t = static_cast<double>(i) / spec.fs;
      const double d = (t - t0) / sigma;
      x[i] += amp * std::exp(-0.5 * d * d);
    }
  }
}

}  // namespace

TrialSet synth_trials(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  TrialSet ts;
  ts.channels = spec.channels;
  ts.samples = spec.trial_samples;
  ts.fs = spec.fs;
  for (std::size_t k = 0; k < spec.n_classes; ++k)
    ts.class_names.push_back("class" + std::to_string(k));
  for (std::size_t c = 0; c < spec.channels; ++c)
    ts.channel_labels.push_back("ch" + std::to_string(c));
  ts.data.reserve(spec.n_subjects * spec.trials_per_subject * spec.channels * spec.trial_samples);

  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const std::string subj = subject_name(s);
    Rng subj_rng(derive_stream(seed, spec.name + "/subject/" + subj));
    const double jitter = 1.0 + spec.subject_jitter * subj_rng.next_uniform(-1.0, 1.0);

    for (std::size_t t = 0; t < spec.trials_per_subject; ++t) {
      const int label = static_cast<int>(t % spec.n_classes);  // balanced classes
      for (std::size_t c = 0; c < spec.channels; ++c) {
        Rng rng(derive_stream(seed, spec.name + "/trial/" + subj + "/" + std::to_string(t) +
                                        "/" + std::to_string(c)));
        const std::size_t begin = ts.data.size();
        ts.data.resize(begin + spec.trial_samples, 0.0);
        std::span<double> x(ts.data.data() + begin, spec.trial_samples);
        add_background(x, spec.fs, spec.noise_amplitude_uv * jitter, rng);
        add_effect(x, spec, label, jitter, rng);
      }
      ts.labels.push_back(label);
      ts.subject_ids.push_back(subj);
      ++ts.n_trials;
    }
  }
  return ts;
}

void synth_dataset(const SynthSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
  const TrialSet ts = synth_trials(spec, seed);
  write_erpb(ts, out_dir, spec.name);
}

void synth_recordings(const SynthSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  // layout: lead-in gap, then trials separated by gaps; the event marker sits
  // one epoch-start offset into each trial slot so that epoch [-0.2, 0.8]
  // recovers the generated window exactly
  const std::size_t gap = static_cast<std::size_t>(std::llround(0.5 * spec.fs));
  const std::size_t pre = static_cast<std::size_t>(std::llround(0.2 * spec.fs));
  const std::size_t slot = spec.trial_samples + gap;
  const std::size_t total = gap + spec.trials_per_subject * slot;

  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const std::string subj = subject_name(s);
    Rng subj_rng(derive_stream(seed, spec.name + "/subject/" + subj));
    const double jitter = 1.0 + spec.subject_jitter * subj_rng.next_uniform(-1.0, 1.0);

    Recording rec;
    rec.fs = spec.fs;
    rec.subject_id = subj;
    for (std::size_t c = 0; c < spec.channels; ++c)
      rec.channel_labels.push_back("ch" + std::to_string(c));
    rec.data = Matrix(spec.channels, total);

    for (std::size_t c = 0; c < spec.channels; ++c) {
      Rng bg_rng(derive_stream(seed, spec.name + "/rec_bg/" + subj + "/" + std::to_string(c)));
      add_background(rec.channel(c), spec.fs, spec.noise_amplitude_uv * jitter, bg_rng);
    }

    for (std::size_t t = 0; t < spec.trials_per_subject; ++t) {
      const int label = static_cast<int>(t % spec.n_classes);
      const std::size_t start = gap + t * slot;
      for (std::size_t c = 0; c < spec.channels; ++c) {
        Rng fx_rng(derive_stream(seed, spec.name + "/rec_fx/" + subj + "/" + std::to_string(t) +
                                           "/" + std::to_string(c)));
        std::span<double> window = rec.channel(c).subspan(start, spec.trial_samples);
        add_effect(window, spec, label, jitter, fx_rng);
      }
      rec.events.push_back({start + pre, "class" + std::to_string(label)});
    }
    write_recording(rec, out_dir / subj);
  }
}

}  // namespace erpbench
