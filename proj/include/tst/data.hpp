#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tst/tensor.hpp"

// Dataset ingestion and the batch pipeline: line-delimited records, min-max
// normalization, generation-flag augmentation, non-sliding windowing, padding
// with shift-left targets, and record-level train/test splitting.

namespace tst::data {

using nlohmann::json;

inline constexpr std::size_t kFlagCount = 2;  // (continue, end)

struct SeriesRecord {
  std::string id;
  std::vector<std::vector<double>> measurements;  // length x feature_count
  std::map<std::string, std::string> metadata;

  std::size_t length() const { return measurements.size(); }
  std::size_t feature_count() const {
    return measurements.empty() ? 0 : measurements.front().size();
  }
};

// Sidecar schema: declares the raw feature width and the categorical
// attribute vocabularies records must respect.
struct DatasetSchema {
  std::size_t feature_count = 0;
  std::vector<std::string> feature_names;                       // optional
  std::map<std::string, std::vector<std::string>> attributes;   // name -> vocabulary

  static DatasetSchema from_json(const json& j) {
    DatasetSchema s;
    s.feature_count = j.at("feature_count").get<std::size_t>();
    if (j.contains("features")) s.feature_names = j.at("features").get<std::vector<std::string>>();
    if (j.contains("attributes")) {
      for (auto& [name, vocab] : j.at("attributes").items()) {
        s.attributes[name] = vocab.get<std::vector<std::string>>();
      }
    }
    if (s.feature_count == 0) throw DataError("schema declares zero features");
    if (!s.feature_names.empty() && s.feature_names.size() != s.feature_count) {
      throw DataError("schema feature names do not match feature_count");
    }
    return s;
  }

  json to_json() const {
    json j{{"feature_count", feature_count}};
    if (!feature_names.empty()) j["features"] = feature_names;
    json attrs = json::object();
    for (auto& [name, vocab] : attributes) attrs[name] = vocab;
    j["attributes"] = attrs;
    return j;
  }

  static DatasetSchema load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema file " + path.string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw DataError("schema file " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write schema file " + path.string());
    out << to_json().dump(2) << '\n';
  }

  void check_record(const SeriesRecord& rec, std::size_t line_no) const {
    const std::string where = "line " + std::to_string(line_no) + " (record '" + rec.id + "')";
    if (rec.measurements.empty()) throw DataError(where + ": empty measurement list");
    for (std::size_t t = 0; t < rec.measurements.size(); ++t) {
      const auto& row = rec.measurements[t];
      if (row.size() != feature_count) {
        throw DataError(where + ": row " + std::to_string(t) + " has " +
                        std::to_string(row.size()) + " values, schema declares " +
                        std::to_string(feature_count));
      }
      for (double v : row) {
        if (!std::isfinite(v)) throw DataError(where + ": non-finite measurement");
      }
    }
    for (auto& [name, value] : rec.metadata) {
      auto it = attributes.find(name);
      if (it == attributes.end()) throw DataError(where + ": unknown attribute '" + name + "'");
      if (std::find(it->second.begin(), it->second.end(), value) == it->second.end()) {
        throw DataError(where + ": value '" + value + "' not in the vocabulary of '" + name + "'");
      }
    }
  }
};

// One record per line; unknown fields (e.g. provenance) are ignored so
// generated files re-ingest directly.
inline std::vector<SeriesRecord> ingest(const std::filesystem::path& path,
                                        const DatasetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  std::vector<SeriesRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": invalid record: " + e.what());
    }
    SeriesRecord rec;
    try {
      rec.id = j.at("id").get<std::string>();
      rec.measurements = j.at("measurements").get<std::vector<std::vector<double>>>();
      if (j.contains("metadata")) {
        rec.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
      }
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    schema.check_record(rec, line_no);
    out.push_back(std::move(rec));
  }
  return out;
}

inline json record_to_json(const SeriesRecord& rec) {
  return json{{"id", rec.id}, {"measurements", rec.measurements}, {"metadata", rec.metadata}};
}

inline void write_records(const std::filesystem::path& path,
                          const std::vector<SeriesRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file " + path.string());
  for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
}

// ----------------------------------------------------------- normalization

enum class NormRange { ZeroOne, SymOne };

inline std::string range_name(NormRange r) { return r == NormRange::ZeroOne ? "unit" : "sym"; }

inline NormRange range_from_name(const std::string& s) {
  if (s == "unit") return NormRange::ZeroOne;
  if (s == "sym") return NormRange::SymOne;
  throw ConfigError("unknown normalizer range '" + s + "' (use 'unit' or 'sym')");
}

struct NormalizerStats {
  std::vector<double> mins, maxs;  // per raw feature, over the training split
  NormRange range = NormRange::ZeroOne;

  double lo() const { return range == NormRange::ZeroOne ? 0.0 : -1.0; }
  double hi() const { return 1.0; }
  std::size_t feature_count() const { return mins.size(); }

  json to_json() const {
    return json{{"range", range_name(range)}, {"mins", mins}, {"maxs", maxs}};
  }
  static NormalizerStats from_json(const json& j) {
    NormalizerStats s;
    s.range = range_from_name(j.at("range").get<std::string>());
    s.mins = j.at("mins").get<std::vector<double>>();
    s.maxs = j.at("maxs").get<std::vector<double>>();
    if (s.mins.size() != s.maxs.size()) throw DataError("normalizer min/max sizes differ");
    return s;
  }
};

inline NormalizerStats fit_normalizer(const std::vector<SeriesRecord>& train, NormRange range) {
  if (train.empty()) throw DataError("cannot fit a normalizer on an empty training set");
  const std::size_t f = train.front().feature_count();
  NormalizerStats s;
  s.range = range;
  s.mins.assign(f, std::numeric_limits<double>::infinity());
  s.maxs.assign(f, -std::numeric_limits<double>::infinity());
  for (const auto& rec : train) {
    if (rec.feature_count() != f) throw DataError("mixed feature widths in training set");
    for (const auto& row : rec.measurements) {
      for (std::size_t j = 0; j < f; ++j) {
        s.mins[j] = std::min(s.mins[j], row[j]);
        s.maxs[j] = std::max(s.maxs[j], row[j]);
      }
    }
  }
  return s;
}

// Constant features (min == max) map to the midpoint of the target range and
// denormalize back to the constant.
inline SeriesRecord normalize(const SeriesRecord& rec, const NormalizerStats& s) {
  if (rec.feature_count() != s.feature_count()) {
    throw DataError("record '" + rec.id + "' width does not match the normalizer");
  }
  const double lo = s.lo(), hi = s.hi();
  SeriesRecord out = rec;
  for (auto& row : out.measurements) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double span = s.maxs[j] - s.mins[j];
      row[j] = span == 0.0 ? 0.5 * (lo + hi)
                           : lo + (row[j] - s.mins[j]) * (hi - lo) / span;
    }
  }
  return out;
}

inline SeriesRecord denormalize(const SeriesRecord& rec, const NormalizerStats& s) {
  if (rec.feature_count() != s.feature_count()) {
    throw DataError("record '" + rec.id + "' width does not match the normalizer");
  }
  const double lo = s.lo(), hi = s.hi();
  SeriesRecord out = rec;
  for (auto& row : out.measurements) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double span = s.maxs[j] - s.mins[j];
      row[j] = span == 0.0 ? s.mins[j]
                           : s.mins[j] + (row[j] - lo) * span / (hi - lo);
    }
  }
  return out;
}

inline void save_normalizer(const std::filesystem::path& path, const NormalizerStats& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write normalizer file " + path.string());
  out << "range " << range_name(s.range) << '\n';
  out.precision(17);
  for (std::size_t j = 0; j < s.mins.size(); ++j) out << s.mins[j] << '\t' << s.maxs[j] << '\n';
}

inline NormalizerStats load_normalizer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open normalizer file " + path.string());
  NormalizerStats s;
  std::string word;
  if (!(in >> word) || word != "range" || !(in >> word)) {
    throw DataError("normalizer file " + path.string() + " is malformed");
  }
  s.range = range_from_name(word);
  double mn, mx;
  while (in >> mn >> mx) {
    s.mins.push_back(mn);
    s.maxs.push_back(mx);
  }
  return s;
}

// ------------------------------------------------- flags, windows, batches

// Appends the (continue, end) flag pair: [1,0] everywhere except the last
// real timestep, which gets [0,1].
inline SeriesRecord append_generation_flags(const SeriesRecord& rec) {
  if (rec.measurements.empty()) throw DataError("record '" + rec.id + "' has no timesteps");
  SeriesRecord out = rec;
  for (std::size_t t = 0; t < out.measurements.size(); ++t) {
    const bool last = t + 1 == out.measurements.size();
    out.measurements[t].push_back(last ? 0.0 : 1.0);
    out.measurements[t].push_back(last ? 1.0 : 0.0);
  }
  return out;
}

inline SeriesRecord strip_generation_flags(const SeriesRecord& rec) {
  SeriesRecord out = rec;
  for (auto& row : out.measurements) {
    if (row.size() < kFlagCount) throw DataError("record '" + rec.id + "' has no flag columns");
    row.resize(row.size() - kFlagCount);
  }
  return out;
}

// Non-overlapping consecutive chunks of at most `window` timesteps. A
// trailing chunk shorter than 2 timesteps is dropped (it would carry no
// supervised position after the target shift). Chunks keep the parent
// metadata; flag columns, when present, travel with their rows, so only the
// final chunk of the original record carries the end flag.
inline std::vector<SeriesRecord> window_split(const SeriesRecord& rec, std::size_t window) {
  if (window < 2) throw ConfigError("window must be at least 2 timesteps");
  std::vector<SeriesRecord> out;
  const std::size_t total = rec.length();
  for (std::size_t start = 0, w = 0; start < total; start += window, ++w) {
    const std::size_t len = std::min(window, total - start);
    if (len < 2) break;
    SeriesRecord chunk;
    chunk.id = rec.id + ":w" + std::to_string(w);
    chunk.metadata = rec.metadata;
    chunk.measurements.assign(rec.measurements.begin() + start,
                              rec.measurements.begin() + start + len);
    out.push_back(std::move(chunk));
  }
  return out;
}

// normalize + flags + windows, the standard prep before batching.
inline std::vector<SeriesRecord> make_training_view(const std::vector<SeriesRecord>& raw,
                                                    const NormalizerStats& stats,
                                                    std::size_t window) {
  std::vector<SeriesRecord> out;
  for (const auto& rec : raw) {
    for (auto& chunk : window_split(append_generation_flags(normalize(rec, stats)), window)) {
      out.push_back(std::move(chunk));
    }
  }
  return out;
}

struct Batch {
  Tensor<float> inputs;   // [B, T, F], zero-padded
  Tensor<float> targets;  // [B, T, F], inputs shifted one step left
  std::vector<std::uint8_t> loss_mask;  // [B, T] row-major; true iff t < len-1
  std::vector<std::size_t> lengths;
  std::size_t batch = 0, time = 0, features = 0;
};

// Shuffles records with the given seed, groups them into batches of at most
// `batch_size`, and pads each batch to its longest member.
inline std::vector<Batch> make_batches(const std::vector<SeriesRecord>& records,
                                       std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t b = std::min(batch_size, order.size() - begin);
    std::size_t padded = 0, features = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& rec = records[order[begin + i]];
      padded = std::max(padded, rec.length());
      features = std::max(features, rec.feature_count());
    }
    Batch batch;
    batch.batch = b;
    batch.time = padded;
    batch.features = features;
    batch.inputs = Tensor<float>(Shape{b, padded, features});
    batch.targets = Tensor<float>(Shape{b, padded, features});
    batch.loss_mask.assign(b * padded, 0);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& rec = records[order[begin + i]];
      if (rec.feature_count() != features) {
        throw DataError("record '" + rec.id + "' width differs within a batch");
      }
      const std::size_t len = rec.length();
      batch.lengths.push_back(len);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t j = 0; j < features; ++j) {
          const float v = static_cast<float>(rec.measurements[t][j]);
          batch.inputs.at({i, t, j}) = v;
          if (t > 0) batch.targets.at({i, t - 1, j}) = v;
        }
        if (t + 1 < len) batch.loss_mask[i * padded + t] = 1;
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

// Record-level split; windows derived later can never straddle the boundary.
inline std::pair<std::vector<SeriesRecord>, std::vector<SeriesRecord>> split_real(
    const std::vector<SeriesRecord>& records, double ratio, std::uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("split ratio must lie in (0, 1)");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(records.size())));
  std::pair<std::vector<SeriesRecord>, std::vector<SeriesRecord>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(records[order[i]]);
  }
  return out;
}

}  // namespace tst::data
