#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "support/testutil.hpp"
#include "tst/data.hpp"
#include "tst/eval.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TST_CLI_PATH) + " " + args + " > " + log.string() +
                          " 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

json toy_model_section() {
  return json{{"input_dim", 5}, {"d_model", 8},      {"n_heads", 2},
              {"n_blocks", 2},  {"d_ff", 8},         {"dropout", 0.0},
              {"max_window", 16}, {"output_activation", "sigmoid"}};
}

json toy_train_section(std::size_t epochs) {
  return json{{"epochs", epochs},      {"batch_size", 16}, {"learning_rate", 1e-3},
              {"window", 16},          {"dropout", 0.0},   {"checkpoint_every", 1}};
}

}  // namespace

TEST_CASE("cli pipeline: train, generate, evaluate") {
  testutil::TempDir dir("cli");
  const auto log = dir.path / "run.log";

  // corpus + schema on disk
  auto corpus = testutil::classification_corpus(60, 31);
  const auto data_path = dir.path / "real.jsonl";
  const auto schema_path = dir.path / "schema.json";
  tst::data::write_records(data_path, corpus);
  testutil::classification_schema().save(schema_path);

  const auto train_out = dir.path / "train_out";
  const auto train_cfg_path = dir.path / "train.json";
  write_json(train_cfg_path,
             json{{"seed", 11},
                  {"out_dir", train_out.string()},
                  {"data",
                   {{"train_path", data_path.string()},
                    {"schema_path", schema_path.string()},
                    {"split_ratio", 0.5}}},
                  {"model", toy_model_section()},
                  {"train", toy_train_section(2)}});

  REQUIRE(run_cli("train --config " + train_cfg_path.string(), log) == 0);
  CHECK(fs::exists(train_out / "last.ckpt"));
  CHECK(fs::exists(train_out / "best.ckpt"));
  CHECK(fs::exists(train_out / "epoch_1.ckpt"));
  CHECK(fs::exists(train_out / "epoch_2.ckpt"));
  CHECK(fs::exists(train_out / "normalizer.txt"));
  CHECK(fs::exists(train_out / "run_manifest.json"));
  CHECK(fs::exists(train_out / "real_train.jsonl"));
  CHECK(fs::exists(train_out / "real_test.jsonl"));
  CHECK(count_lines(train_out / "loss_log.tsv") == 2);

  // deterministic rerun: identical loss log bytes
  const std::string first_log = slurp(train_out / "loss_log.tsv");
  const auto rerun_out = dir.path / "train_rerun";
  REQUIRE(run_cli("train --config " + train_cfg_path.string() + " --out " + rerun_out.string(),
                  log) == 0);
  CHECK(slurp(rerun_out / "loss_log.tsv") == first_log);

  // --seed overrides the config seed and changes the run
  const auto reseed_out = dir.path / "train_reseed";
  REQUIRE(run_cli("train --config " + train_cfg_path.string() + " --seed 99 --out " +
                      reseed_out.string(),
                  log) == 0);
  CHECK(slurp(reseed_out / "loss_log.tsv") != first_log);

  // generation from the trained checkpoint
  const auto gen_out = dir.path / "gen_out";
  const auto gen_cfg_path = dir.path / "gen.json";
  write_json(gen_cfg_path,
             json{{"seed", 12},
                  {"out_dir", gen_out.string()},
                  {"data",
                   {{"train_path", (train_out / "real_train.jsonl").string()},
                    {"schema_path", schema_path.string()}}},
                  {"generation",
                   {{"checkpoint", (train_out / "last.ckpt").string()},
                    {"count", 10},
                    {"seed_len", 2},
                    {"max_len", 12}}}});
  REQUIRE(run_cli("generate --config " + gen_cfg_path.string(), log) == 0);
  const auto synth_path = gen_out / "synthetic.jsonl";
  REQUIRE(fs::exists(synth_path));
  CHECK(count_lines(synth_path) == 10);

  // reruns reproduce the synthetic corpus byte for byte
  const auto gen_rerun = dir.path / "gen_rerun";
  REQUIRE(run_cli("generate --config " + gen_cfg_path.string() + " --out " + gen_rerun.string(),
                  log) == 0);
  CHECK(slurp(gen_rerun / "synthetic.jsonl") == slurp(synth_path));

  // the generated file re-ingests with zero validation errors
  auto reloaded = tst::data::ingest(synth_path, testutil::classification_schema());
  CHECK(reloaded.size() == 10);

  // class-filtered generation inherits the filter class everywhere
  const auto gen_fin = dir.path / "gen_finish";
  const auto gen_fin_cfg = dir.path / "gen_finish.json";
  write_json(gen_fin_cfg,
             json{{"seed", 12},
                  {"out_dir", gen_fin.string()},
                  {"data",
                   {{"train_path", (train_out / "real_train.jsonl").string()},
                    {"schema_path", schema_path.string()}}},
                  {"generation",
                   {{"checkpoint", (train_out / "last.ckpt").string()},
                    {"count", 6},
                    {"seed_len", 2},
                    {"max_len", 12},
                    {"class_attribute", "end_event_type"},
                    {"class_value", "FINISH"}}}});
  REQUIRE(run_cli("generate --config " + gen_fin_cfg.string(), log) == 0);
  for (const auto& rec :
       tst::data::ingest(gen_fin / "synthetic.jsonl", testutil::classification_schema())) {
    CHECK(rec.metadata.at("end_event_type") == "FINISH");
  }

  // classification evaluation over a proportion sweep
  const auto eval_out = dir.path / "eval_out";
  const auto eval_cfg_path = dir.path / "eval.json";
  write_json(eval_cfg_path,
             json{{"seed", 13},
                  {"out_dir", eval_out.string()},
                  {"data",
                   {{"train_path", (train_out / "real_train.jsonl").string()},
                    {"test_path", (train_out / "real_test.jsonl").string()},
                    {"synthetic_path", synth_path.string()},
                    {"schema_path", schema_path.string()}}},
                  {"evaluate",
                   {{"task", "classification"},
                    {"label_attribute", "end_event_type"},
                    {"proportions", {0.0, 1.0}},
                    {"epochs", 40}}}});
  REQUIRE(run_cli("evaluate --config " + eval_cfg_path.string(), log) == 0);
  CHECK(fs::exists(eval_out / "fidelity.json"));
  CHECK(fs::exists(eval_out / "accuracy_vs_proportion.tsv"));
  CHECK(fs::exists(eval_out / "f1_per_class.tsv"));
  CHECK(fs::exists(eval_out / "correlation_real.tsv"));
  CHECK(fs::exists(eval_out / "correlation_synthetic.tsv"));

  std::size_t report_count = 0;
  for (const auto& entry : fs::directory_iterator(eval_out)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("report_classification_", 0) == 0) {
      ++report_count;
      auto report = tst::eval::MetricsReport::load(entry.path());
      REQUIRE(report.classification.has_value());
      CHECK(report.classification->f1.size() == 4);
      CHECK(report.fidelity.has_value());
    }
  }
  CHECK(report_count == 2);  // one per proportion

  // fidelity-only evaluation: no downstream fields
  const auto fid_out = dir.path / "fid_out";
  auto fid_cfg = json{{"seed", 13},
                      {"out_dir", fid_out.string()},
                      {"data",
                       {{"train_path", (train_out / "real_train.jsonl").string()},
                        {"test_path", (train_out / "real_test.jsonl").string()},
                        {"synthetic_path", synth_path.string()},
                        {"schema_path", schema_path.string()}}},
                      {"evaluate", {{"task", "fidelity"}}}};
  const auto fid_cfg_path = dir.path / "fid.json";
  write_json(fid_cfg_path, fid_cfg);
  REQUIRE(run_cli("evaluate --config " + fid_cfg_path.string(), log) == 0);
  auto fidelity_report = tst::eval::MetricsReport::load(fid_out / "fidelity.json");
  CHECK(fidelity_report.fidelity.has_value());
  CHECK_FALSE(fidelity_report.classification.has_value());
  CHECK_FALSE(fidelity_report.regression_r2.has_value());
}

TEST_CASE("cli rejects missing datasets without partial outputs") {
  testutil::TempDir dir("cli-missing");
  const auto log = dir.path / "run.log";
  const auto out = dir.path / "nope_out";
  const auto cfg_path = dir.path / "train.json";
  write_json(cfg_path, json{{"seed", 1},
                            {"out_dir", out.string()},
                            {"data",
                             {{"train_path", (dir.path / "missing.jsonl").string()},
                              {"schema_path", (dir.path / "missing_schema.json").string()}}},
                            {"model", toy_model_section()},
                            {"train", toy_train_section(1)}});
  CHECK(run_cli("train --config " + cfg_path.string(), log) == 2);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("cli rejects unknown config keys") {
  testutil::TempDir dir("cli-badkey");
  const auto log = dir.path / "run.log";
  const auto cfg_path = dir.path / "bad.json";
  write_json(cfg_path, json{{"seed", 1}, {"typo_key", 5}});
  CHECK(run_cli("train --config " + cfg_path.string(), log) == 2);
  CHECK(slurp(log).find("typo_key") != std::string::npos);
}

TEST_CASE("cli generate fails cleanly on unknown classes and corrupt checkpoints") {
  testutil::TempDir dir("cli-genfail");
  const auto log = dir.path / "run.log";
  auto corpus = testutil::classification_corpus(20, 37);
  const auto data_path = dir.path / "real.jsonl";
  const auto schema_path = dir.path / "schema.json";
  tst::data::write_records(data_path, corpus);
  testutil::classification_schema().save(schema_path);

  const auto bad_ckpt = dir.path / "garbage.ckpt";
  {
    std::ofstream out(bad_ckpt, std::ios::binary);
    out << "this is not a checkpoint at all";
  }
  const auto cfg_path = dir.path / "gen.json";
  write_json(cfg_path, json{{"seed", 3},
                            {"out_dir", (dir.path / "gen_out").string()},
                            {"data",
                             {{"train_path", data_path.string()},
                              {"schema_path", schema_path.string()}}},
                            {"generation",
                             {{"checkpoint", bad_ckpt.string()}, {"count", 2}}}});
  CHECK(run_cli("generate --config " + cfg_path.string(), log) == 1);

  write_json(cfg_path, json{{"seed", 3},
                            {"out_dir", (dir.path / "gen_out").string()},
                            {"data",
                             {{"train_path", data_path.string()},
                              {"schema_path", schema_path.string()}}},
                            {"generation",
                             {{"checkpoint", (dir.path / "absent.ckpt").string()},
                              {"count", 2}}}});
  CHECK(run_cli("generate --config " + cfg_path.string(), log) == 2);
}

TEST_CASE("cli regression pipeline runs on generated synthetic data") {
  testutil::TempDir dir("cli-reg-gen");
  const auto log = dir.path / "run.log";
  auto real = testutil::regression_corpus(80, 16, 71);
  const auto data_path = dir.path / "real.jsonl";
  const auto schema_path = dir.path / "schema.json";
  tst::data::write_records(data_path, real);
  testutil::plain_schema(1).save(schema_path);

  const auto train_out = dir.path / "train_out";
  const auto train_cfg = dir.path / "train.json";
  write_json(train_cfg,
             json{{"seed", 7},
                  {"out_dir", train_out.string()},
                  {"data",
                   {{"train_path", data_path.string()},
                    {"schema_path", schema_path.string()},
                    {"split_ratio", 0.5}}},
                  {"model",
                   {{"input_dim", 3}, {"d_model", 16},    {"n_heads", 2},
                    {"n_blocks", 2},  {"d_ff", 32},       {"dropout", 0.0},
                    {"max_window", 16}, {"output_activation", "sigmoid"}}},
                  {"train",
                   {{"epochs", 200},
                    {"batch_size", 32},
                    {"learning_rate", 1e-3},
                    {"window", 16},
                    {"dropout", 0.0}}}});
  REQUIRE(run_cli("train --config " + train_cfg.string(), log) == 0);

  const auto gen_out = dir.path / "gen_out";
  const auto gen_cfg = dir.path / "gen.json";
  write_json(gen_cfg,
             json{{"seed", 8},
                  {"out_dir", gen_out.string()},
                  {"data",
                   {{"train_path", (train_out / "real_train.jsonl").string()},
                    {"schema_path", schema_path.string()}}},
                  {"generation",
                   {{"checkpoint", (train_out / "last.ckpt").string()},
                    {"count", 40},
                    {"seed_len", 2},
                    {"max_len", 16}}}});
  REQUIRE(run_cli("generate --config " + gen_cfg.string(), log) == 0);

  // every generated record must be long enough for the forecasting task
  auto synth = tst::data::ingest(gen_out / "synthetic.jsonl", testutil::plain_schema(1));
  for (const auto& rec : synth) CHECK(rec.length() >= 11);

  const auto eval_out = dir.path / "eval_out";
  const auto eval_cfg = dir.path / "eval.json";
  write_json(eval_cfg,
             json{{"seed", 9},
                  {"out_dir", eval_out.string()},
                  {"data",
                   {{"train_path", (train_out / "real_train.jsonl").string()},
                    {"test_path", (train_out / "real_test.jsonl").string()},
                    {"synthetic_path", (gen_out / "synthetic.jsonl").string()},
                    {"schema_path", schema_path.string()}}},
                  {"evaluate",
                   {{"task", "regression"},
                    {"history", 8},
                    {"horizon", 3},
                    {"proportions", {0.0, 1.0}},
                    {"mlp_epochs", 60}}}});
  REQUIRE(run_cli("evaluate --config " + eval_cfg.string(), log) == 0);
  CHECK(fs::exists(eval_out / "r2_table.tsv"));
}

TEST_CASE("cli regression evaluation emits the four-family table") {
  testutil::TempDir dir("cli-reg");
  const auto log = dir.path / "run.log";
  auto real = testutil::regression_corpus(30, 16, 41);
  auto synth = testutil::regression_corpus(20, 16, 42);
  const auto train_path = dir.path / "train.jsonl";
  const auto test_path = dir.path / "test.jsonl";
  const auto synth_path = dir.path / "synthetic.jsonl";
  const auto schema_path = dir.path / "schema.json";
  tst::data::write_records(train_path, real);
  tst::data::write_records(test_path, testutil::regression_corpus(15, 16, 43));
  tst::data::write_records(synth_path, synth);
  testutil::plain_schema(1).save(schema_path);

  const auto out = dir.path / "eval_out";
  const auto cfg_path = dir.path / "eval.json";
  write_json(cfg_path, json{{"seed", 5},
                            {"out_dir", out.string()},
                            {"data",
                             {{"train_path", train_path.string()},
                              {"test_path", test_path.string()},
                              {"synthetic_path", synth_path.string()},
                              {"schema_path", schema_path.string()}}},
                            {"evaluate",
                             {{"task", "regression"},
                              {"history", 8},
                              {"horizon", 3},
                              {"proportions", {0.0, 1.0}},
                              {"mlp_epochs", 60}}}});
  REQUIRE(run_cli("evaluate --config " + cfg_path.string(), log) == 0);
  REQUIRE(fs::exists(out / "r2_table.tsv"));
  std::ifstream table(out / "r2_table.tsv");
  std::string header;
  std::getline(table, header);
  CHECK(header == "proportion\tmlp-1\tmlp-5\tlinear\tkernel-ridge");
  std::size_t rows = 0;
  std::string row;
  while (std::getline(table, row)) ++rows;
  CHECK(rows == 2);

  // one report per (family x proportion): 4 families x 2 proportions
  std::size_t reports = 0;
  for (const auto& entry : fs::directory_iterator(out)) {
    if (entry.path().filename().string().rfind("report_regression_", 0) == 0) ++reports;
  }
  CHECK(reports == 8);
  auto report = tst::eval::MetricsReport::load(out / "report_regression_linear_p1.json");
  REQUIRE(report.regression_r2.has_value());
  CHECK(report.regression_r2->size() == 1);
  CHECK(report.run_meta.at("family") == "linear");
}

TEST_CASE("cli verify and param-count") {
  testutil::TempDir dir("cli-verify");
  const auto log = dir.path / "run.log";
  CHECK(run_cli("verify", log) == 0);
  CHECK(slurp(log).find("param_count_gcut") != std::string::npos);

  // a deliberately perturbed expected count fails, naming the check
  CHECK(run_cli("verify --expected-params 123", log) == 1);
  const std::string out = slurp(log);
  CHECK(out.find("FAIL") != std::string::npos);
  CHECK(out.find("param_count_gcut") != std::string::npos);

  CHECK(run_cli("param-count", log) == 0);
  CHECK(slurp(log).find("12635659") != std::string::npos);
}
