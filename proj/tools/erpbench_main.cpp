#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "erpbench/harness.hpp"
#include "erpbench/io.hpp"
#include "erpbench/patchlab.hpp"
#include "erpbench/signal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace erpbench;

namespace {

SplitPlan load_split_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  in >> j;
  SplitPlan plan;
  plan.train_subjects = j.at("train_subjects").get<std::vector<std::string>>();
  plan.valid_subjects = j.at("valid_subjects").get<std::vector<std::string>>();
  plan.test_subjects = j.at("test_subjects").get<std::vector<std::string>>();
  if (j.contains("seed")) plan.seed = j.at("seed").get<std::uint64_t>();
  return plan;
}

void save_split_plan(const SplitPlan& plan, const fs::path& path) {
  json j;
  j["train_subjects"] = plan.train_subjects;
  j["valid_subjects"] = plan.valid_subjects;
  j["test_subjects"] = plan.test_subjects;
  j["seed"] = plan.seed;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::size_t> rows_of_subjects(const FeatureMatrix& fm,
                                          const std::vector<std::string>& subjects) {
  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < fm.n_rows(); ++r) {
    if (wanted.count(fm.subject_ids[r])) rows.push_back(r);
  }
  return rows;
}

int cmd_synth(const std::string& spec_path, std::uint64_t seed, const std::string& out_dir,
              bool raw) {
  const SynthSpec spec = spec_path.empty() ? SynthSpec{} : load_synth_spec(spec_path);
  if (raw) {
    synth_recordings(spec, seed, out_dir);
    std::cout << "wrote " << spec.n_subjects << " recordings to " << out_dir << "\n";
  } else {
    synth_dataset(spec, seed, out_dir);
    std::cout << "wrote ERPB dataset (" << spec.n_subjects * spec.trials_per_subject
              << " trials) to " << out_dir << "\n";
  }
  return 0;
}

int cmd_preprocess(const std::string& in_dir, const std::string& out_dir, double notch_hz,
                   double band_lo, double band_hi, double target_fs, double epoch_t0,
                   double epoch_t1, double base_b0, double base_b1, double ptp_reject,
                   const std::vector<std::size_t>& bad_channels,
                   const std::string& dataset_name) {
  EpochSpec spec;
  spec.t_start = epoch_t0;
  spec.t_end = epoch_t1;
  spec.baseline_start = base_b0;
  spec.baseline_end = base_b1;
  spec.validate();

  const auto recs = list_recordings(in_dir);
  if (recs.empty()) throw IoError("no recordings (*.json + *.bin) found in " + in_dir);

  TrialSet all;
  std::size_t skipped = 0, unmapped = 0;
  LabelMap label_map;
  std::vector<std::string> class_names;

  // first pass: collect event labels so class indices are stable
  {
    std::set<std::string> labels;
    for (const auto& p : recs) {
      const Recording rec = read_recording(p);
      for (const auto& ev : rec.events) labels.insert(ev.label);
    }
    for (const auto& l : labels) {
      label_map[l] = static_cast<int>(class_names.size());
      class_names.push_back(l);
    }
  }

  for (const auto& p : recs) {
    Recording rec = read_recording(p);
    if (notch_hz > 0.0) rec = notch_filter(rec, notch_hz);
    rec = bandpass_filter(rec, band_lo, band_hi);
    if (!bad_channels.empty()) rec = interpolate_channels(rec, bad_channels);
    if (rec.channels() >= 2) rec = average_reref(rec);
    if (target_fs > 0.0 && target_fs != rec.fs) rec = resample(rec, target_fs);

    const EpochResult res = epoch_and_baseline(rec, spec, label_map, class_names);
    skipped += res.boundary_skips;
    unmapped += res.unmapped_events;

    if (all.n_trials == 0) {
      all = res.trials;
    } else {
      if (all.channels != res.trials.channels || all.samples != res.trials.samples)
        throw ShapeError("recordings disagree on channel count or epoch length");
      all.data.insert(all.data.end(), res.trials.data.begin(), res.trials.data.end());
      all.labels.insert(all.labels.end(), res.trials.labels.begin(), res.trials.labels.end());
      all.subject_ids.insert(all.subject_ids.end(), res.trials.subject_ids.begin(),
                             res.trials.subject_ids.end());
      all.n_trials += res.trials.n_trials;
    }
  }

  std::size_t rejected = 0;
  if (ptp_reject > 0.0) {
    const RejectResult rr = amplitude_reject(all, ptp_reject);
    rejected = rr.rejected;
    all = rr.trials;
  }
  all = zscore_trials(all);
  write_erpb(all, out_dir, dataset_name);

  std::cout << "trials: " << all.n_trials << "  boundary skips: " << skipped
            << "  unmapped events: " << unmapped << "  rejected: " << rejected << "\n";
  std::cout << "wrote " << out_dir << "\n";
  return 0;
}

int cmd_extract(const std::string& in_dir, const std::string& out_file,
                const std::string& set_name, bool print_layout, std::size_t segment_len,
                std::size_t n_threads) {
  const FeatureSet set = parse_feature_set(set_name);
  if (print_layout) {
    const FeatureLayout layout = FeatureLayout::for_set(set);
    std::cout << "set: " << layout.set_name << "  per-channel dim: " << layout.per_channel_dim
              << "\nblocks:";
    for (const auto& b : layout.blocks) std::cout << " " << b.name << "(" << b.size << ")";
    std::cout << "\ncolumns (per channel, in order):\n";
    const auto names = feature_column_names(set);
    for (std::size_t i = 0; i < names.size(); ++i)
      std::cout << "  " << i << ": " << names[i] << "\n";
    if (in_dir.empty()) return 0;
  }

  const TrialSet ts = read_erpb(in_dir);
  SpectralConfig cfg;
  if (segment_len > 0) cfg.segment_len = segment_len;
  const FeatureMatrix fm = extract_features(ts, set, cfg, {}, n_threads);
  write_features(fm, out_file);
  std::cout << "wrote " << fm.n_rows() << " x " << fm.n_features() << " features to " << out_file
            << "\n";
  return 0;
}

int cmd_train(const std::string& features_path, const std::string& split_path,
              const std::string& config_path, const std::string& out_path) {
  const FeatureMatrix all = read_features(features_path);
  const SplitPlan plan = load_split_plan(split_path);

  TrainConfig tcfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open " + config_path);
    json j;
    in >> j;
    if (j.contains("batch_size")) tcfg.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("max_epochs")) tcfg.max_epochs = j.at("max_epochs").get<std::size_t>();
    if (j.contains("patience")) tcfg.patience = j.at("patience").get<std::size_t>();
    if (j.contains("lr")) tcfg.lr = j.at("lr").get<double>();
    if (j.contains("weight_decay")) tcfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("seed")) tcfg.seed = j.at("seed").get<std::uint64_t>();
  }
  tcfg.seed = plan.seed != 0 ? plan.seed : tcfg.seed;

  const FeatureMatrix train = all.select_rows(rows_of_subjects(all, plan.train_subjects));
  const FeatureMatrix valid = all.select_rows(rows_of_subjects(all, plan.valid_subjects));
  const FeatureMatrix test = all.select_rows(rows_of_subjects(all, plan.test_subjects));

  TrainReport report;
  const LinearModel model = train_linear(train, valid, tcfg, &report);
  write_linear_model(model, out_path);

  std::cout << "epochs: " << report.epochs_run << "  best epoch: " << report.best_epoch
            << "  best valid F1: " << report.best_valid_f1 << "\n";
  if (test.n_rows() > 0) {
    const MetricSet m = compute_metrics(predict_proba(model, test), test.labels);
    std::printf("test  accuracy: %.4f  F1: %.4f  AUROC: %.4f\n", m.accuracy, m.f1_macro,
                m.auroc);
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_split(const std::string& dataset_dir, std::uint64_t seed, const std::string& out_path) {
  const ErpbManifest manifest = read_erpb_manifest(dataset_dir);
  std::set<std::string> subjects;
  for (const auto& t : manifest.trials) subjects.insert(t.subject_id);
  const SplitPlan plan = monte_carlo_split(subjects, seed);
  save_split_plan(plan, out_path);
  std::cout << "subjects " << subjects.size() << " -> " << plan.train_subjects.size() << "/"
            << plan.valid_subjects.size() << "/" << plan.test_subjects.size() << ", wrote "
            << out_path << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_path) {
  const ExperimentConfig config = load_experiment_config(config_path);
  const BenchmarkOutput out = run_benchmark(config);
  write_results(out, out_path);
  for (const auto& a : out.aggregates) {
    std::printf("%-20s %-14s acc %.4f±%.4f  F1 %.4f±%.4f  AUROC %.4f±%.4f  (n=%zu)\n",
                a.dataset.c_str(), a.method.c_str(), a.mean.accuracy, a.std_dev.accuracy,
                a.mean.f1_macro, a.std_dev.f1_macro, a.mean.auroc, a.std_dev.auroc, a.n_runs);
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_ranks(const std::string& results_path, const std::string& fixtures_path,
              const std::string& out_path) {
  ScoreTable scores;
  if (!fixtures_path.empty()) {
    scores = scores_from_fixture(load_fixture(fixtures_path));
  } else if (!results_path.empty()) {
    scores = scores_from_results(read_results(results_path));
  } else {
    throw ArgumentError("ranks needs --results or --fixtures");
  }
  const RankTable table = aggregate_and_rank(scores);

  std::vector<std::pair<double, std::string>> ordered;
  for (const auto& [method, rank] : table.avg_rank) ordered.push_back({rank, method});
  std::sort(ordered.begin(), ordered.end());
  std::cout << "average rank over " << table.entries.size() << " (dataset, metric) cells:\n";
  for (const auto& [rank, method] : ordered) std::printf("  %6.2f  %s\n", rank, method.c_str());

  if (!out_path.empty()) {
    write_rank_table(table, out_path);
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& strategy_name, std::uint64_t seed, std::size_t cases,
                  double tolerance) {
  const PatchStrategy strategy = parse_patch_strategy(strategy_name);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const std::uint64_t case_seed = seed + i;
    PatchConfig cfg;
    cfg.strategy = strategy;
    cfg.trial_samples = 24;
    cfg.channels = 3;
    cfg.patch_len = 7;  // exercises the zero-padded trailing patch
    cfg.d_model = 8;
    cfg.ff_dim = 12;
    cfg.n_classes = 3;

    SynthSpec spec;
    spec.name = "gradcheck";
    spec.n_subjects = 5;
    spec.trials_per_subject = 10;
    spec.channels = cfg.channels;
    spec.trial_samples = cfg.trial_samples;
    spec.n_classes = cfg.n_classes;
    spec.effect = "none";
    const TrialSet ts = synth_trials(spec, case_seed);

    PatchModel model = init_patch_model(cfg, case_seed);
    const GradCheckReport report = grad_check(model, ts, {0, 1, 2, 3}, tolerance);
    worst = std::max(worst, report.worst_rel_error);
    std::printf("case %2zu  worst rel err %.3e  %s\n", i, report.worst_rel_error,
                report.all_within_tolerance ? "ok" : "FLAGGED");
    if (!report.all_within_tolerance) {
      for (const auto& e : report.entries) {
        if (e.flagged) std::printf("    %-8s %.3e\n", e.tensor.c_str(), e.max_rel_error);
      }
    }
  }
  std::printf("worst over %zu cases: %.3e (tolerance %.1e)\n", cases, worst, tolerance);
  return worst <= tolerance ? 0 : 1;
}

int cmd_patchbench(const std::string& data_dir, const std::string& out_path,
                   std::size_t d_model, std::size_t ff_dim, std::size_t patch_multi,
                   std::size_t patch_uni, const std::vector<std::uint64_t>& seeds,
                   std::size_t max_epochs, double lr) {
  TrialSet trials = read_erpb(data_dir);
  trials = zscore_trials(trials);
  const std::string dataset_name = read_erpb_manifest(data_dir).dataset_name;
  std::set<std::string> subjects(trials.subject_ids.begin(), trials.subject_ids.end());

  const auto subset = [&](const std::vector<std::string>& subs) {
    const std::set<std::string> wanted(subs.begin(), subs.end());
    TrialSet out;
    out.channels = trials.channels;
    out.samples = trials.samples;
    out.fs = trials.fs;
    out.class_names = trials.class_names;
    out.channel_labels = trials.channel_labels;
    for (std::size_t t = 0; t < trials.n_trials; ++t) {
      if (!wanted.count(trials.subject_ids[t])) continue;
      const auto row = trials.trial_channel(t, 0);
      out.data.insert(out.data.end(), row.data(), row.data() + trials.channels * trials.samples);
      out.labels.push_back(trials.labels[t]);
      out.subject_ids.push_back(trials.subject_ids[t]);
      ++out.n_trials;
    }
    return out;
  };

  json rows = json::array();
  for (const char* strategy : {"multi", "uni", "whole"}) {
    PatchConfig cfg;
    cfg.strategy = parse_patch_strategy(strategy);
    cfg.trial_samples = trials.samples;
    cfg.channels = trials.channels;
    cfg.patch_len = cfg.strategy == PatchStrategy::kUni ? patch_uni : patch_multi;
    cfg.d_model = d_model;
    cfg.ff_dim = ff_dim;
    cfg.n_classes = trials.class_names.size();

    std::vector<double> f1s;
    for (const std::uint64_t seed : seeds) {
      const SplitPlan plan = monte_carlo_split(subjects, seed);
      const TrialSet train = subset(plan.train_subjects);
      const TrialSet valid = subset(plan.valid_subjects);
      const TrialSet test = subset(plan.test_subjects);

      TrainConfig tcfg;
      tcfg.seed = seed;
      tcfg.max_epochs = max_epochs;
      tcfg.patience = std::min<std::size_t>(15, max_epochs);
      tcfg.lr = lr;
      const PatchModel model = train_patch_model(train, valid, cfg, tcfg);
      const MetricSet m = compute_metrics(patch_predict_proba(model, test), test.labels);
      f1s.push_back(m.f1_macro);
      std::printf("%-6s seed %llu  F1 %.4f\n", strategy,
                  static_cast<unsigned long long>(seed), m.f1_macro);
    }
    const double mean = std::accumulate(f1s.begin(), f1s.end(), 0.0) / f1s.size();
    double var = 0.0;
    for (const double v : f1s) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / f1s.size());
    rows.push_back({{"strategy", strategy},
                    {"dataset", dataset_name},
                    {"f1_mean", mean},
                    {"f1_std", sd},
                    {"params", param_count(cfg)}});
    std::printf("%-6s mean F1 %.4f ± %.4f  (params %zu)\n", strategy, mean, sd,
                param_count(cfg));
  }

  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    out << rows.dump(2) << '\n';
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ERP preprocessing, feature extraction and benchmarking toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic ERP dataset");
  std::string synth_spec_path, synth_out = "synth_out";
  std::uint64_t synth_seed = 41;
  bool synth_raw = false;
  synth->add_option("--spec", synth_spec_path, "SynthSpec JSON (defaults used when omitted)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_flag("--raw", synth_raw, "emit continuous recordings instead of epoched trials");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "filter, re-reference, resample, epoch");
  std::string pre_in, pre_out, pre_name = "dataset";
  double pre_notch = 0.0, pre_fs = 200.0, pre_ptp = 0.0;
  std::vector<double> pre_band = {0.5, 45.0};
  std::vector<double> pre_epoch = {-0.2, 0.8};
  std::vector<double> pre_base = {-0.2, 0.0};
  std::vector<std::size_t> pre_bad;
  pre->add_option("--in", pre_in, "directory of recordings")->required();
  pre->add_option("--out", pre_out, "output ERPB directory")->required();
  pre->add_option("--notch", pre_notch, "notch frequency Hz (0 disables)");
  pre->add_option("--band", pre_band, "band-pass edges: lo hi (Hz)")->expected(2);
  pre->add_option("--fs", pre_fs, "target sampling rate Hz");
  pre->add_option("--epoch", pre_epoch, "epoch window: t0 t1 (s, relative to event)")
      ->expected(2);
  pre->add_option("--baseline", pre_base, "baseline window: b0 b1 (s)")->expected(2);
  pre->add_option("--ptp-reject", pre_ptp, "peak-to-peak rejection threshold uV (0 disables)");
  pre->add_option("--interpolate", pre_bad, "bad channel indices to interpolate");
  pre->add_option("--name", pre_name, "dataset name stored in the manifest");

  // extract
  auto* ext = app.add_subcommand("extract", "compute feature matrices from an ERPB dataset");
  std::string ext_in, ext_out, ext_set = "eeg";
  bool ext_layout = false;
  std::size_t ext_segment = 0, ext_threads = 0;
  ext->add_option("--in", ext_in, "ERPB dataset directory");
  ext->add_option("--out", ext_out, "output feature file");
  ext->add_option("--set", ext_set, "feature set: eeg (31/channel) or erp (91/channel)");
  ext->add_flag("--print-layout", ext_layout, "print the column layout");
  ext->add_option("--segment-len", ext_segment, "Welch segment length override");
  ext->add_option("--threads", ext_threads, "worker threads (0 = hardware concurrency)");

  // split
  auto* spl = app.add_subcommand("split", "write a subject-independent split plan");
  std::string spl_data, spl_out = "split.json";
  std::uint64_t spl_seed = 41;
  spl->add_option("--data", spl_data, "ERPB dataset directory")->required();
  spl->add_option("--seed", spl_seed, "split seed");
  spl->add_option("--out", spl_out, "output JSON");

  // train
  auto* trn = app.add_subcommand("train", "train the linear classifier on features");
  std::string trn_features, trn_split, trn_config, trn_out = "model.bin";
  trn->add_option("--features", trn_features, "feature file")->required();
  trn->add_option("--split", trn_split, "split plan JSON")->required();
  trn->add_option("--config", trn_config, "training config JSON");
  trn->add_option("--out", trn_out, "output model checkpoint");

  // run
  auto* run = app.add_subcommand("run", "run the full benchmark from a config");
  std::string run_config, run_out = "results.json";
  run->add_option("--config", run_config, "experiment config JSON")->required();
  run->add_option("--out", run_out, "results JSON");

  // ranks
  auto* rnk = app.add_subcommand("ranks", "average-rank aggregation of results or fixtures");
  std::string rnk_results, rnk_fixtures, rnk_out;
  rnk->add_option("--results", rnk_results, "results JSON from `run`");
  rnk->add_option("--fixtures", rnk_fixtures, "published-table fixture JSON");
  rnk->add_option("--out", rnk_out, "write the rank table JSON here");

  // gradcheck
  auto* grd = app.add_subcommand("gradcheck", "finite-difference check of the encoder backward");
  std::string grd_strategy = "multi";
  std::uint64_t grd_seed = 41;
  std::size_t grd_cases = 20;
  double grd_tol = 1e-4;
  grd->add_option("--strategy", grd_strategy, "multi|uni|whole");
  grd->add_option("--seed", grd_seed, "base seed");
  grd->add_option("--cases", grd_cases, "number of (model, batch) cases");
  grd->add_option("--tolerance", grd_tol, "max relative error allowed");

  // patchbench
  auto* pbn = app.add_subcommand("patchbench", "compare the three patch embeddings");
  std::string pbn_data, pbn_out;
  std::size_t pbn_d = 32, pbn_ff = 64, pbn_multi = 25, pbn_uni = 100, pbn_epochs = 40;
  double pbn_lr = 1e-3;
  std::vector<std::uint64_t> pbn_seeds = {41, 42, 43};
  pbn->add_option("--data", pbn_data, "ERPB dataset directory")->required();
  pbn->add_option("--out", pbn_out, "output JSON");
  pbn->add_option("--d-model", pbn_d, "embedding width");
  pbn->add_option("--ff-dim", pbn_ff, "feed-forward width");
  pbn->add_option("--patch-multi", pbn_multi, "patch length for multi-variate");
  pbn->add_option("--patch-uni", pbn_uni, "patch length for uni-variate");
  pbn->add_option("--seeds", pbn_seeds, "split/training seeds");
  pbn->add_option("--epochs", pbn_epochs, "max training epochs");
  pbn->add_option("--lr", pbn_lr, "learning rate");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_spec_path, synth_seed, synth_out, synth_raw);
    if (pre->parsed())
      return cmd_preprocess(pre_in, pre_out, pre_notch, pre_band[0], pre_band[1], pre_fs,
                            pre_epoch[0], pre_epoch[1], pre_base[0], pre_base[1], pre_ptp,
                            pre_bad, pre_name);
    if (ext->parsed())
      return cmd_extract(ext_in, ext_out, ext_set, ext_layout, ext_segment, ext_threads);
    if (spl->parsed()) return cmd_split(spl_data, spl_seed, spl_out);
    if (trn->parsed()) return cmd_train(trn_features, trn_split, trn_config, trn_out);
    if (run->parsed()) return cmd_run(run_config, run_out);
    if (rnk->parsed()) return cmd_ranks(rnk_results, rnk_fixtures, rnk_out);
    if (grd->parsed()) return cmd_gradcheck(grd_strategy, grd_seed, grd_cases, grd_tol);
    if (pbn->parsed())
      return cmd_patchbench(pbn_data, pbn_out, pbn_d, pbn_ff, pbn_multi, pbn_uni, pbn_seeds,
                            pbn_epochs, pbn_lr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
