#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "support/testutil.hpp"
#include "tst/gen.hpp"
#include "tst/train.hpp"

using namespace tst;
using namespace tst::gen;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.input_dim = 5;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.n_blocks = 2;
  cfg.d_ff = 8;
  cfg.dropout_p = 0.0;
  cfg.max_window = 32;
  cfg.output_activation = model::Activation::Sigmoid;
  return cfg;
}

std::vector<std::vector<float>> toy_seed(std::size_t f = 5) {
  std::vector<std::vector<float>> rows;
  for (int t = 0; t < 2; ++t) {
    std::vector<float> row(f, 0.4f);
    row[f - 2] = 1.0f;  // continue
    row[f - 1] = 0.0f;  // end
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("stop decision compares end against continue") {
  CHECK(stop_decision(0.4, 0.6));
  CHECK_FALSE(stop_decision(0.6, 0.4));
  CHECK_FALSE(stop_decision(0.5, 0.5));  // ties continue
}

TEST_CASE("decoding halts when the stub model raises the end flag") {
  GenerationConfig cfg;
  cfg.seed_len = 2;
  cfg.max_len = 20;

  auto stopper = [](const std::vector<std::vector<float>>&) {
    return std::vector<float>{0.5f, 0.5f, 0.5f, 0.1f, 0.9f};
  };
  auto rows = decode_greedy(stopper, toy_seed(), cfg);
  CHECK(rows.size() == 3);  // seed_len + 1

  auto runner = [](const std::vector<std::vector<float>>&) {
    return std::vector<float>{0.5f, 0.5f, 0.5f, 0.9f, 0.1f};
  };
  auto capped = decode_greedy(runner, toy_seed(), cfg);
  CHECK(capped.size() == cfg.max_len);
}

TEST_CASE("seed rows reappear unchanged at the front of the output") {
  GenerationConfig cfg;
  cfg.seed_len = 2;
  cfg.max_len = 6;
  auto seed = toy_seed();
  seed[0][0] = 0.123f;
  seed[1][1] = 0.877f;
  auto step = [](const std::vector<std::vector<float>>&) {
    return std::vector<float>{0.2f, 0.3f, 0.4f, 0.9f, 0.1f};
  };
  auto rows = decode_greedy(step, seed, cfg);
  REQUIRE(rows.size() >= 2);
  CHECK(rows[0] == seed[0]);
  CHECK(rows[1] == seed[1]);
}

TEST_CASE("generation config is validated") {
  GenerationConfig cfg;
  cfg.seed_len = 5;
  cfg.max_len = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  GenerationConfig zero;
  zero.seed_len = 0;
  CHECK_THROWS_AS(zero.validate(), ConfigError);
}

TEST_CASE("transformer decoding emits rows inside the activation range") {
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 3);
  GenerationConfig gcfg;
  gcfg.seed_len = 2;
  gcfg.max_len = 8;
  auto seq = generate_one(params, cfg, toy_seed(), gcfg);
  CHECK(seq.length == seq.rows.size());
  CHECK(seq.length >= gcfg.seed_len);
  CHECK(seq.length <= gcfg.max_len);
  for (std::size_t t = gcfg.seed_len; t < seq.rows.size(); ++t) {
    for (float v : seq.rows[t]) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
}

TEST_CASE("generation is deterministic for fixed inputs") {
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 4);
  GenerationConfig gcfg;
  gcfg.seed_len = 2;
  gcfg.max_len = 10;
  auto a = generate_one(params, cfg, toy_seed(), gcfg);
  auto b = generate_one(params, cfg, toy_seed(), gcfg);
  REQUIRE(a.length == b.length);
  for (std::size_t t = 0; t < a.rows.size(); ++t) CHECK(a.rows[t] == b.rows[t]);
}

TEST_CASE("generate_dataset inherits metadata and stays inside feature ranges") {
  auto raw = testutil::classification_corpus(24, 9);
  auto stats = data::fit_normalizer(raw, data::NormRange::ZeroOne);
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 5);

  GenerationConfig gcfg;
  gcfg.seed_len = 2;
  gcfg.max_len = 10;
  gcfg.rng_seed = 77;

  auto synth = generate_dataset(params, cfg, raw, stats, ClassFilter{"end_event_type", "FAIL"},
                                10, gcfg, "ckpt-test");
  REQUIRE(synth.size() == 10);
  for (const auto& s : synth) {
    CHECK(s.record.metadata.at("end_event_type") == "FAIL");
    CHECK(s.record.feature_count() == 3);  // flags stripped
    CHECK(s.checkpoint_id == "ckpt-test");
    CHECK_FALSE(s.seed_record_id.empty());
    CHECK(s.record.length() >= gcfg.seed_len);
    CHECK(s.record.length() <= gcfg.max_len);
    for (const auto& row : s.record.measurements) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        CHECK(row[j] >= stats.mins[j] - 1e-5);
        CHECK(row[j] <= stats.maxs[j] + 1e-5);
      }
    }
  }
}

TEST_CASE("generate_dataset is deterministic per rng seed") {
  auto raw = testutil::classification_corpus(16, 10);
  auto stats = data::fit_normalizer(raw, data::NormRange::ZeroOne);
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 6);
  GenerationConfig gcfg;
  gcfg.seed_len = 2;
  gcfg.max_len = 9;
  gcfg.rng_seed = 5;

  auto a = generate_dataset(params, cfg, raw, stats, {}, 6, gcfg);
  auto b = generate_dataset(params, cfg, raw, stats, {}, 6, gcfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].record.measurements == b[i].record.measurements);
    CHECK(a[i].seed_record_id == b[i].seed_record_id);
  }

  gcfg.rng_seed = 6;
  auto c = generate_dataset(params, cfg, raw, stats, {}, 6, gcfg);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].seed_record_id != c[i].seed_record_id ||
        a[i].record.measurements != c[i].record.measurements) {
      differs = true;
    }
  }
  CHECK(differs);
}

TEST_CASE("generate_dataset rejects an empty class filter result") {
  auto raw = testutil::classification_corpus(8, 11);
  auto stats = data::fit_normalizer(raw, data::NormRange::ZeroOne);
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 7);
  GenerationConfig gcfg;
  CHECK_THROWS_AS(generate_dataset(params, cfg, raw, stats,
                                   ClassFilter{"end_event_type", "NOPE"}, 3, gcfg),
                  DataError);
}

TEST_CASE("synthetic records re-ingest through the standard reader") {
  testutil::TempDir dir("synth");
  auto raw = testutil::classification_corpus(12, 12);
  auto stats = data::fit_normalizer(raw, data::NormRange::ZeroOne);
  auto cfg = tiny_config();
  auto params = model::init_params<float>(cfg, 8);
  GenerationConfig gcfg;
  gcfg.seed_len = 2;
  gcfg.max_len = 8;

  auto synth = generate_dataset(params, cfg, raw, stats, {}, 5, gcfg, "ck");
  const auto file = dir.path / "synthetic.jsonl";
  write_synthetic(file, synth);
  auto loaded = data::ingest(file, testutil::classification_schema());
  REQUIRE(loaded.size() == 5);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].measurements.size() == synth[i].record.measurements.size());
  }
}
