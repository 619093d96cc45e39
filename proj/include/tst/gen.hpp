#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tst/data.hpp"
#include "tst/model.hpp"

// Seeded autoregressive decoding with generation-flag halting. Decoding is
// greedy and runs with dropout off, so a (checkpoint, seed record, config)
// triple always produces the same sequence; diversity comes from seed choice.

namespace tst::gen {

struct GenerationConfig {
  std::size_t seed_len = 2;
  std::size_t max_len = 400;
  double stop_margin = 0.0;  // halt when end > continue + margin; ties continue
  bool use_dropout = false;  // generation runs in inference mode by default
  std::uint64_t rng_seed = 0;  // drives seed-record selection

  void validate() const {
    if (seed_len < 1 || seed_len >= max_len) {
      throw ConfigError("need 1 <= seed_len < max_len, got seed_len=" +
                        std::to_string(seed_len) + ", max_len=" + std::to_string(max_len));
    }
  }
};

inline bool stop_decision(double continue_flag, double end_flag, double margin = 0.0) {
  return end_flag > continue_flag + margin;
}

using StepFn = std::function<std::vector<float>(const std::vector<std::vector<float>>&)>;

// Core decode loop over an arbitrary next-row model: append the model's
// prediction for the next timestep until its end flag wins or max_len is
// reached. The returned sequence starts with the untouched seed rows.
inline std::vector<std::vector<float>> decode_greedy(const StepFn& step,
                                                     std::vector<std::vector<float>> seed_rows,
                                                     const GenerationConfig& cfg) {
  cfg.validate();
  if (seed_rows.empty() || seed_rows.size() != cfg.seed_len) {
    throw ConfigError("seed must contain exactly seed_len rows");
  }
  const std::size_t f = seed_rows.front().size();
  if (f < data::kFlagCount + 1) throw ConfigError("seed rows are too narrow to carry flags");
  auto rows = std::move(seed_rows);
  while (rows.size() < cfg.max_len) {
    std::vector<float> next = step(rows);
    if (next.size() != f) throw DimensionError("model emitted a row of the wrong width");
    rows.push_back(std::move(next));
    const auto& r = rows.back();
    if (stop_decision(r[f - 2], r[f - 1], cfg.stop_margin)) break;
  }
  return rows;
}

// One forward pass over the prefix; returns the prediction at the last
// position. The prefix is re-encoded in full each step.
inline std::vector<float> transformer_step(const model::ModelParams<float>& params,
                                           const model::ModelConfig& mcfg,
                                           const std::vector<std::vector<float>>& rows,
                                           std::mt19937_64* dropout_rng = nullptr) {
  const std::size_t t = rows.size();
  const std::size_t f = rows.front().size();
  Tensor<float> x(Shape{1, t, f});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < f; ++j) x.at({0, i, j}) = rows[i][j];
  model::AttentionMask mask = model::build_masks({t}, t);
  const model::Mode mode = dropout_rng ? model::Mode::Train : model::Mode::Infer;
  Tensor<float> pred =
      model::forward<float>(nullptr, params, mcfg, x, mask, mode, dropout_rng);
  std::vector<float> next(f);
  for (std::size_t j = 0; j < f; ++j) next[j] = pred.at({0, t - 1, j});
  return next;
}

struct GeneratedSequence {
  std::vector<std::vector<float>> rows;  // normalized, flags included
  std::size_t length = 0;                // includes the seed
};

inline GeneratedSequence generate_one(const model::ModelParams<float>& params,
                                      const model::ModelConfig& mcfg,
                                      const std::vector<std::vector<float>>& seed_rows,
                                      const GenerationConfig& cfg,
                                      std::mt19937_64* dropout_rng = nullptr) {
  auto rows = decode_greedy(
      [&](const std::vector<std::vector<float>>& prefix) {
        return transformer_step(params, mcfg, prefix, dropout_rng);
      },
      seed_rows, cfg);
  GeneratedSequence out;
  out.length = rows.size();
  out.rows = std::move(rows);
  return out;
}

struct SyntheticRecord {
  data::SeriesRecord record;  // denormalized, flags stripped
  std::string seed_record_id;
  std::string checkpoint_id;
};

struct ClassFilter {
  std::string attribute;
  std::string value;
  bool empty() const { return attribute.empty(); }
};

// Class-conditional synthesis: seeds are drawn uniformly with replacement
// from the real records matching the filter (all records when the filter is
// empty); each output inherits its seed's metadata verbatim.
inline std::vector<SyntheticRecord> generate_dataset(
    const model::ModelParams<float>& params, const model::ModelConfig& mcfg,
    const std::vector<data::SeriesRecord>& real_records, const data::NormalizerStats& stats,
    const ClassFilter& filter, std::size_t n, const GenerationConfig& cfg,
    const std::string& checkpoint_id = "") {
  cfg.validate();
  std::vector<const data::SeriesRecord*> candidates;
  for (const auto& rec : real_records) {
    if (!filter.empty()) {
      auto it = rec.metadata.find(filter.attribute);
      if (it == rec.metadata.end() || it->second != filter.value) continue;
    }
    if (rec.length() < cfg.seed_len) continue;
    candidates.push_back(&rec);
  }
  if (candidates.empty()) {
    throw DataError(filter.empty()
                        ? std::string("no real records long enough to seed generation")
                        : "no real records with " + filter.attribute + "=" + filter.value +
                              " to seed generation");
  }

  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  std::mt19937_64 dropout_rng(mix_seed(cfg.rng_seed, 0x9d5ull));

  std::vector<SyntheticRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const data::SeriesRecord& seed_rec = *candidates[pick(rng)];
    const data::SeriesRecord prepared =
        data::append_generation_flags(data::normalize(seed_rec, stats));
    std::vector<std::vector<float>> seed_rows;
    for (std::size_t t = 0; t < cfg.seed_len; ++t) {
      std::vector<float> row(prepared.measurements[t].size());
      for (std::size_t j = 0; j < row.size(); ++j) {
        row[j] = static_cast<float>(prepared.measurements[t][j]);
      }
      seed_rows.push_back(std::move(row));
    }
    GeneratedSequence seq =
        generate_one(params, mcfg, seed_rows, cfg, cfg.use_dropout ? &dropout_rng : nullptr);

    data::SeriesRecord normalized;
    normalized.id = "syn-" + std::to_string(i);
    normalized.metadata = seed_rec.metadata;
    for (const auto& row : seq.rows) {
      std::vector<double> vals(row.size() - data::kFlagCount);
      for (std::size_t j = 0; j < vals.size(); ++j) vals[j] = static_cast<double>(row[j]);
      normalized.measurements.push_back(std::move(vals));
    }
    SyntheticRecord syn;
    syn.record = data::denormalize(normalized, stats);
    syn.seed_record_id = seed_rec.id;
    syn.checkpoint_id = checkpoint_id;
    out.push_back(std::move(syn));
  }
  return out;
}

// Same line format as ingestion plus a provenance object, so the output is
// directly re-ingestable.
inline void write_synthetic(const std::filesystem::path& path,
                            const std::vector<SyntheticRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write synthetic dataset " + path.string());
  for (const auto& syn : records) {
    nlohmann::json j = data::record_to_json(syn.record);
    j["provenance"] = {{"seed_record_id", syn.seed_record_id},
                       {"checkpoint_id", syn.checkpoint_id}};
    out << j.dump() << '\n';
  }
}

}  // namespace tst::gen
