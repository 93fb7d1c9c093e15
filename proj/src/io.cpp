#include "erpbench/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace erpbench {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_f32_le(std::ostream& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  const unsigned char bytes[4] = {
      static_cast<unsigned char>(bits & 0xFF), static_cast<unsigned char>((bits >> 8) & 0xFF),
      static_cast<unsigned char>((bits >> 16) & 0xFF),
      static_cast<unsigned char>((bits >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

double read_f32_le(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw CorruptionError("unexpected end of binary stream");
  const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                             (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw CorruptionError("unexpected end of binary stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }
  return j;
}

void dump_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

// container with a magic tag, a JSON header and a float32 payload
void write_container(const fs::path& path, const char magic[8], const json& header,
                     const std::vector<const std::vector<double>*>& blobs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(magic, 8);
  const std::string header_str = header.dump();
  write_u64_le(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto* blob : blobs) {
    for (const double v : *blob) write_f32_le(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

json read_container_header(std::ifstream& in, const fs::path& path, const char magic[8]) {
  char tag[8];
  in.read(tag, 8);
  if (!in || std::memcmp(tag, magic, 8) != 0)
    throw CorruptionError(path.string() + ": bad magic tag");
  const std::uint64_t header_len = read_u64_le(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw CorruptionError(path.string() + ": truncated header");
  try {
    return json::parse(header_str);
  } catch (const json::exception& e) {
    throw CorruptionError(path.string() + ": invalid header: " + e.what());
  }
}

}  // namespace

void write_erpb(const TrialSet& ts, const fs::path& dir, const std::string& dataset_name) {
  ts.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);

  ErpbManifest manifest;
  manifest.dataset_name = dataset_name;
  manifest.fs = ts.fs;
  manifest.channel_labels = ts.channel_labels;
  if (manifest.channel_labels.size() != ts.channels) {
    manifest.channel_labels.clear();
    for (std::size_t c = 0; c < ts.channels; ++c)
      manifest.channel_labels.push_back("ch" + std::to_string(c));
  }
  manifest.class_names = ts.class_names;
  manifest.n_samples = ts.samples;

  const fs::path bin_path = dir / "trials.bin";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot write " + bin_path.string());

  const std::uint64_t record = static_cast<std::uint64_t>(ts.channels) * ts.samples * 4;
  for (std::size_t t = 0; t < ts.n_trials; ++t) {
    ErpbTrialEntry entry;
    entry.subject_id = ts.subject_ids[t];
    entry.class_index = ts.labels[t];
    entry.byte_offset = static_cast<std::uint64_t>(t) * record;
    manifest.trials.push_back(entry);
    const double* src = ts.data.data() + t * ts.channels * ts.samples;
    for (std::size_t i = 0; i < ts.channels * ts.samples; ++i) write_f32_le(bin, src[i]);
  }
  bin.close();
  if (!bin) throw IoError("write failed for " + bin_path.string());

  json j;
  j["format_version"] = manifest.format_version;
  j["dataset_name"] = manifest.dataset_name;
  j["fs"] = manifest.fs;
  j["channel_labels"] = manifest.channel_labels;
  j["class_names"] = manifest.class_names;
  j["n_samples"] = manifest.n_samples;
  json trials = json::array();
  for (const auto& t : manifest.trials) {
    trials.push_back({{"subject_id", t.subject_id},
                      {"class_index", t.class_index},
                      {"byte_offset", t.byte_offset}});
  }
  j["trials"] = std::move(trials);
  dump_json_file(j, dir / "manifest.json");
}

ErpbManifest read_erpb_manifest(const fs::path& dir) {
  const json j = load_json_file(dir / "manifest.json");
  ErpbManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kErpbFormatVersion)
      throw VersionError("unsupported ERPB format_version " + std::to_string(m.format_version));
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.fs = j.at("fs").get<double>();
    m.channel_labels = j.at("channel_labels").get<std::vector<std::string>>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.n_samples = j.at("n_samples").get<std::size_t>();

    const std::uint64_t record = m.trial_record_bytes();
    std::uint64_t expected_offset = 0;
    for (const auto& t : j.at("trials")) {
      ErpbTrialEntry entry;
      entry.subject_id = t.at("subject_id").get<std::string>();
      entry.class_index = t.at("class_index").get<int>();
      entry.byte_offset = t.at("byte_offset").get<std::uint64_t>();
      if (entry.byte_offset != expected_offset)
        throw CorruptionError("manifest trial offsets are not contiguous record multiples");
      if (entry.class_index < 0 ||
          static_cast<std::size_t>(entry.class_index) >= m.class_names.size())
        throw CorruptionError("manifest class index outside class_names");
      expected_offset += record;
      m.trials.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw CorruptionError((dir / "manifest.json").string() + ": " + e.what());
  }
  return m;
}

TrialSet read_erpb(const fs::path& dir) {
  const ErpbManifest m = read_erpb_manifest(dir);
  const fs::path bin_path = dir / "trials.bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());

  bin.seekg(0, std::ios::end);
  const std::uint64_t actual = static_cast<std::uint64_t>(bin.tellg());
  const std::uint64_t expected = m.expected_data_bytes();
  if (actual != expected) {
    throw CorruptionError("trials.bin size mismatch: expected " + std::to_string(expected) +
                          " bytes, found " + std::to_string(actual));
  }
  bin.seekg(0, std::ios::beg);

  TrialSet ts;
  ts.n_trials = m.trials.size();
  ts.channels = m.channels();
  ts.samples = m.n_samples;
  ts.fs = m.fs;
  ts.class_names = m.class_names;
  ts.channel_labels = m.channel_labels;
  ts.data.resize(ts.n_trials * ts.channels * ts.samples);
  ts.labels.reserve(ts.n_trials);
  ts.subject_ids.reserve(ts.n_trials);
  for (const auto& t : m.trials) {
    ts.labels.push_back(t.class_index);
    ts.subject_ids.push_back(t.subject_id);
  }
  for (double& v : ts.data) v = read_f32_le(bin);
  return ts;
}

void write_recording(const Recording& rec, const fs::path& stem) {
  rec.validate();
  json j;
  j["format_version"] = kErpbFormatVersion;
  j["subject_id"] = rec.subject_id;
  j["fs"] = rec.fs;
  j["channel_labels"] = rec.channel_labels;
  j["n_samples"] = rec.samples();
  json events = json::array();
  for (const auto& ev : rec.events)
    events.push_back({{"sample_index", ev.sample_index}, {"label", ev.label}});
  j["events"] = std::move(events);

  fs::path json_path = stem;
  json_path += ".json";
  fs::path bin_path = stem;
  bin_path += ".bin";
  dump_json_file(j, json_path);

  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot write " + bin_path.string());
  for (const double v : rec.data.data) write_f32_le(bin, v);
  if (!bin) throw IoError("write failed for " + bin_path.string());
}

Recording read_recording(const fs::path& json_path) {
  const json j = load_json_file(json_path);
  Recording rec;
  std::size_t n_samples = 0;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kErpbFormatVersion)
      throw VersionError("unsupported recording format_version " + std::to_string(version));

    rec.subject_id = j.at("subject_id").get<std::string>();
    rec.fs = j.at("fs").get<double>();
    rec.channel_labels = j.at("channel_labels").get<std::vector<std::string>>();
    n_samples = j.at("n_samples").get<std::size_t>();
    for (const auto& ev : j.at("events")) {
      rec.events.push_back(
          {ev.at("sample_index").get<std::size_t>(), ev.at("label").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw CorruptionError(json_path.string() + ": " + e.what());
  }

  fs::path bin_path = json_path;
  bin_path.replace_extension(".bin");
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());
  bin.seekg(0, std::ios::end);
  const std::uint64_t actual = static_cast<std::uint64_t>(bin.tellg());
  const std::uint64_t expected =
      static_cast<std::uint64_t>(rec.channel_labels.size()) * n_samples * 4;
  if (actual != expected)
    throw CorruptionError(bin_path.string() + " size mismatch: expected " +
                          std::to_string(expected) + " bytes, found " + std::to_string(actual));
  bin.seekg(0, std::ios::beg);

  rec.data = Matrix(rec.channel_labels.size(), n_samples);
  for (double& v : rec.data.data) v = read_f32_le(bin);
  return rec;
}

std::vector<fs::path> list_recordings(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    fs::path bin = entry.path();
    bin.replace_extension(".bin");
    if (fs::exists(bin)) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_features(const FeatureMatrix& fm, const fs::path& path) {
  json header;
  header["format_version"] = kErpbFormatVersion;
  header["set_name"] = fm.layout.set_name;
  json blocks = json::array();
  for (const auto& b : fm.layout.blocks) blocks.push_back({{"name", b.name}, {"size", b.size}});
  header["blocks"] = std::move(blocks);
  header["per_channel_dim"] = fm.layout.per_channel_dim;
  header["channels"] = fm.channels;
  header["channel_labels"] = fm.channel_labels;
  header["class_names"] = fm.class_names;
  header["labels"] = fm.labels;
  header["subject_ids"] = fm.subject_ids;
  header["n_rows"] = fm.values.rows;
  header["n_cols"] = fm.values.cols;
  write_container(path, "ERPBFEAT", header, {&fm.values.data});
}

FeatureMatrix read_features(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const json header = read_container_header(in, path, "ERPBFEAT");

  FeatureMatrix fm;
  std::size_t rows = 0, cols = 0;
  try {
    fm.layout.set_name = header.at("set_name").get<std::string>();
    for (const auto& b : header.at("blocks"))
      fm.layout.blocks.push_back(
          {b.at("name").get<std::string>(), b.at("size").get<std::size_t>()});
    fm.layout.per_channel_dim = header.at("per_channel_dim").get<std::size_t>();
    fm.channels = header.at("channels").get<std::size_t>();
    fm.channel_labels = header.at("channel_labels").get<std::vector<std::string>>();
    fm.class_names = header.at("class_names").get<std::vector<std::string>>();
    fm.labels = header.at("labels").get<std::vector<int>>();
    fm.subject_ids = header.at("subject_ids").get<std::vector<std::string>>();
    rows = header.at("n_rows").get<std::size_t>();
    cols = header.at("n_cols").get<std::size_t>();
  } catch (const json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  fm.values = Matrix(rows, cols);
  for (double& v : fm.values.data) v = read_f32_le(in);
  return fm;
}

void write_linear_model(const LinearModel& model, const fs::path& path) {
  json header;
  header["format_version"] = kErpbFormatVersion;
  header["model_type"] = "softmax_linear";
  header["n_features"] = model.n_features();
  header["n_classes"] = model.n_classes();
  header["class_names"] = model.class_names;
  write_container(path, "ERPBMODL", header,
                  {&model.feature_mean, &model.feature_std, &model.weights.data, &model.bias});
}

LinearModel read_linear_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const json header = read_container_header(in, path, "ERPBMODL");
  if (header.at("model_type").get<std::string>() != "softmax_linear")
    throw VersionError(path.string() + ": unexpected model type");

  LinearModel model;
  std::size_t n_features = 0, n_classes = 0;
  try {
    n_features = header.at("n_features").get<std::size_t>();
    n_classes = header.at("n_classes").get<std::size_t>();
    model.class_names = header.at("class_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  model.feature_mean.resize(n_features);
  model.feature_std.resize(n_features);
  model.weights = Matrix(n_features, n_classes);
  model.bias.resize(n_classes);
  for (double& v : model.feature_mean) v = read_f32_le(in);
  for (double& v : model.feature_std) v = read_f32_le(in);
  for (double& v : model.weights.data) v = read_f32_le(in);
  for (double& v : model.bias) v = read_f32_le(in);
  return model;
}

double PaperTableFixture::at(const std::string& dataset, const std::string& metric,
                             const std::string& method) const {
  return values.at(dataset).at(metric).at(method);
}

PaperTableFixture load_fixture(const fs::path& path) {
  const json j = load_json_file(path);
  PaperTableFixture fx;
  try {
    fx.metrics = j.at("metrics").get<std::vector<std::string>>();

    const json& values = j.at("values");
    for (const auto& [dataset, per_metric] : values.items()) {
      fx.datasets.push_back(dataset);
      for (const std::string& metric : fx.metrics) {
        if (!per_metric.contains(metric))
          throw CoverageError("fixture: dataset '" + dataset + "' misses metric '" + metric +
                              "'");
        for (const auto& [method, value] : per_metric.at(metric).items())
          fx.values[dataset][metric][method] = value.get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw CoverageError("fixture " + path.string() + ": " + e.what());
  }
  if (fx.datasets.empty()) throw CoverageError("fixture holds no datasets");

  // method set must be identical in every cell
  for (const auto& [method, value] : fx.values.begin()->second.begin()->second)
    fx.methods.push_back(method);
  std::sort(fx.methods.begin(), fx.methods.end());
  for (const auto& d : fx.datasets) {
    for (const auto& m : fx.metrics) {
      const auto& cell = fx.values.at(d).at(m);
      if (cell.size() != fx.methods.size())
        throw CoverageError("fixture: cell (" + d + ", " + m + ") misses methods");
      for (const auto& method : fx.methods) {
        if (!cell.count(method))
          throw CoverageError("fixture: cell (" + d + ", " + m + ") misses method '" + method +
                              "'");
      }
    }
  }
  return fx;
}

}  // namespace erpbench
