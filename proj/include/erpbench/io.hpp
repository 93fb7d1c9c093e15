#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "erpbench/classify.hpp"
#include "erpbench/features.hpp"
#include "erpbench/types.hpp"

namespace erpbench {

// ERPB dataset: manifest.json + trials.bin. Each trial record is
// channels x samples little-endian float32, channel-major, stored in manifest
// order at strictly increasing offsets.
inline constexpr int kErpbFormatVersion = 1;

struct ErpbTrialEntry {
  std::string subject_id;
  int class_index = 0;
  std::uint64_t byte_offset = 0;
};

struct ErpbManifest {
  int format_version = kErpbFormatVersion;
  std::string dataset_name;
  double fs = 0.0;
  std::vector<std::string> channel_labels;
  std::vector<std::string> class_names;
  std::size_t n_samples = 0;
  std::vector<ErpbTrialEntry> trials;

  std::size_t channels() const { return channel_labels.size(); }
  std::uint64_t trial_record_bytes() const {
    return static_cast<std::uint64_t>(channels()) * n_samples * 4;
  }
  std::uint64_t expected_data_bytes() const { return trial_record_bytes() * trials.size(); }
};

void write_erpb(const TrialSet& ts, const std::filesystem::path& dir,
                const std::string& dataset_name = "dataset");
TrialSet read_erpb(const std::filesystem::path& dir);
ErpbManifest read_erpb_manifest(const std::filesystem::path& dir);

// Continuous recordings for the preprocessing front end: <stem>.json header
// (fs, subject, channel labels, events) next to <stem>.bin (channel-major
// little-endian float32).
void write_recording(const Recording& rec, const std::filesystem::path& stem);
Recording read_recording(const std::filesystem::path& json_path);
// All recordings in a directory (every *.json with a sibling *.bin), sorted by
// filename.
std::vector<std::filesystem::path> list_recordings(const std::filesystem::path& dir);

// Feature files: magic "ERPBFEAT", little-endian u64 header length, JSON
// header, then the row-major float32 matrix.
void write_features(const FeatureMatrix& fm, const std::filesystem::path& path);
FeatureMatrix read_features(const std::filesystem::path& path);

// Linear-model checkpoints: magic "ERPBMODL", JSON header, float32 blob
// holding feature_mean, feature_std, weights (row-major) and bias.
void write_linear_model(const LinearModel& model, const std::filesystem::path& path);
LinearModel read_linear_model(const std::filesystem::path& path);

// Fixture of published per-(dataset, metric, method) mean scores.
struct PaperTableFixture {
  std::vector<std::string> datasets;
  std::vector<std::string> metrics;
  std::vector<std::string> methods;
  // dataset -> metric -> method -> value
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> values;

  double at(const std::string& dataset, const std::string& metric,
            const std::string& method) const;
};

// Loads and validates a fixture: every dataset must carry the same metric and
// method sets with no missing cells; the shipped table is 12 x 3 x 15.
PaperTableFixture load_fixture(const std::filesystem::path& path);

}  // namespace erpbench
