#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "erpbench/classify.hpp"
#include "erpbench/features.hpp"
#include "erpbench/io.hpp"
#include "erpbench/spectral.hpp"

namespace erpbench {

// Subject-independent Monte Carlo split: shuffled subjects, first
// floor(r_train*n) train, next floor(r_valid*n) validation, remainder test.
struct SplitPlan {
  std::vector<std::string> train_subjects;
  std::vector<std::string> valid_subjects;
  std::vector<std::string> test_subjects;
  std::uint64_t seed = 0;
};

SplitPlan monte_carlo_split(const std::set<std::string>& subjects, std::uint64_t seed,
                            double train_ratio = 0.6, double valid_ratio = 0.2);

struct ExperimentConfig {
  std::vector<std::string> datasets;  // ERPB directories
  FeatureSet feature_set = FeatureSet::kEeg31;
  SpectralConfig spectral;
  PyramidSpec pyramid;
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {41, 42, 43, 44, 45};
  double train_ratio = 0.6;
  double valid_ratio = 0.2;
  double ptp_reject_uv = 0.0;   // 0 disables rejection
  bool shuffle_labels = false;  // per-subject label shuffle (chance-level control)
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct RunResult {
  std::string dataset;
  std::string method;
  std::uint64_t seed = 0;
  MetricSet metrics;
};

struct MethodAggregate {
  std::string dataset;
  std::string method;
  MetricSet mean;
  MetricSet std_dev;
  std::size_t n_runs = 0;
};

struct BenchmarkOutput {
  std::vector<RunResult> runs;
  std::vector<MethodAggregate> aggregates;
};

BenchmarkOutput run_benchmark(const ExperimentConfig& config);
void write_results(const BenchmarkOutput& out, const std::filesystem::path& path);
BenchmarkOutput read_results(const std::filesystem::path& path);

// Scores per (dataset, metric) cell: method -> mean value, higher is better.
using ScoreTable = std::map<std::pair<std::string, std::string>, std::map<std::string, double>>;

struct RankTable {
  // (dataset, metric) -> method -> fractional rank (1 = best, ties averaged)
  std::map<std::pair<std::string, std::string>, std::map<std::string, double>> entries;
  std::map<std::string, double> avg_rank;
};

RankTable aggregate_and_rank(const ScoreTable& scores);
ScoreTable scores_from_results(const BenchmarkOutput& out);
ScoreTable scores_from_fixture(const PaperTableFixture& fx);
void write_rank_table(const RankTable& table, const std::filesystem::path& path);

// Synthetic ERP dataset with a planted, class-dependent effect on a 1/f
// background. Fully deterministic given (spec, seed).
struct SynthSpec {
  std::string name = "synth";
  std::size_t n_subjects = 30;
  std::size_t trials_per_subject = 60;
  std::size_t channels = 8;
  double fs = 200.0;
  std::size_t trial_samples = 200;
  std::size_t n_classes = 2;
  std::string effect = "band_power";  // band_power | evoked_peak | none
  double effect_freq_hz = 10.0;
  double effect_amplitude_uv = 4.0;
  double peak_latency_s = 0.3;
  double peak_width_s = 0.05;
  double noise_amplitude_uv = 10.0;
  double subject_jitter = 0.3;  // relative per-subject amplitude spread

  void validate() const;
};

SynthSpec load_synth_spec(const std::filesystem::path& path);

TrialSet synth_trials(const SynthSpec& spec, std::uint64_t seed);
void synth_dataset(const SynthSpec& spec, std::uint64_t seed,
                   const std::filesystem::path& out_dir);

// Continuous-recording flavor of the generator (one recording per subject with
// event markers and inter-trial gaps), for exercising the preprocessing CLI.
void synth_recordings(const SynthSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& out_dir);

}  // namespace erpbench
