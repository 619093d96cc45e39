// tst: train / generate / evaluate pipeline driver plus verification
// utilities. Every command is driven by a single JSON config file; flags may
// override the scalar keys. Exit codes: 0 success, 1 runtime or verification
// failure, 2 usage/config/data error.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tst/data.hpp"
#include "tst/eval.hpp"
#include "tst/gen.hpp"
#include "tst/grad_check.hpp"
#include "tst/model.hpp"
#include "tst/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tst;

namespace {

// ----------------------------------------------------------- config file

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& section) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in config section '" + section + "'");
    }
  }
}

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path out_dir = "out";

  fs::path train_path, test_path, schema_path, synthetic_path;
  data::NormRange normalizer_range = data::NormRange::ZeroOne;
  bool normalizer_range_set = false;
  std::optional<double> split_ratio;

  model::ModelConfig model;
  training::TrainConfig train;

  gen::GenerationConfig generation;
  fs::path checkpoint_path;
  std::size_t generate_count = 100;
  gen::ClassFilter class_filter;

  std::string eval_task = "classification";
  std::string label_attribute;
  std::vector<std::string> families = eval::regressor_families();
  std::vector<double> proportions = {0.0, 0.1, 0.3, 0.5, 1.0};
  std::size_t downstream_epochs = 100;
  double classifier_lr = 0.05;
  eval::RegressionTask regression;
  std::size_t mlp_epochs = 100;
  double mlp_lr = 0.01;
  std::size_t mlp_hidden = 64;
  double ridge_lambda = 1e-6;
  double krr_lambda = 1.0;
  double krr_gamma = 0.0;

  std::string raw_text;  // exact file bytes, hashed into the manifest
};

model::ModelConfig parse_model_section(const json& j) {
  check_keys(j,
             {"input_dim", "d_model", "n_heads", "n_blocks", "d_ff", "dropout", "max_window",
              "output_activation"},
             "model");
  model::ModelConfig c;
  if (j.contains("input_dim")) c.input_dim = j.at("input_dim").get<std::size_t>();
  if (j.contains("d_model")) c.d_model = j.at("d_model").get<std::size_t>();
  if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<std::size_t>();
  if (j.contains("n_blocks")) c.n_blocks = j.at("n_blocks").get<std::size_t>();
  if (j.contains("d_ff")) c.d_ff = j.at("d_ff").get<std::size_t>();
  if (j.contains("dropout")) c.dropout_p = j.at("dropout").get<double>();
  if (j.contains("max_window")) c.max_window = j.at("max_window").get<std::size_t>();
  if (j.contains("output_activation")) {
    c.output_activation =
        model::activation_from_name(j.at("output_activation").get<std::string>());
  }
  return c;
}

training::TrainConfig parse_train_section(const json& j) {
  check_keys(j,
             {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "window",
              "dropout", "seed", "checkpoint_every", "grad_clip"},
             "train");
  training::TrainConfig c;
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
  if (j.contains("window")) c.window = j.at("window").get<std::size_t>();
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("checkpoint_every")) {
    c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  }
  if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();

  RunConfig cfg;
  cfg.raw_text = buf.str();
  json j;
  try {
    j = json::parse(cfg.raw_text);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  check_keys(j, {"seed", "out_dir", "data", "model", "train", "generation", "evaluate"},
             "top level");

  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d,
               {"train_path", "test_path", "schema_path", "synthetic_path", "normalizer_range",
                "split_ratio"},
               "data");
    if (d.contains("train_path")) cfg.train_path = d.at("train_path").get<std::string>();
    if (d.contains("test_path")) cfg.test_path = d.at("test_path").get<std::string>();
    if (d.contains("schema_path")) cfg.schema_path = d.at("schema_path").get<std::string>();
    if (d.contains("synthetic_path")) {
      cfg.synthetic_path = d.at("synthetic_path").get<std::string>();
    }
    if (d.contains("normalizer_range")) {
      cfg.normalizer_range = data::range_from_name(d.at("normalizer_range").get<std::string>());
      cfg.normalizer_range_set = true;
    }
    if (d.contains("split_ratio")) cfg.split_ratio = d.at("split_ratio").get<double>();
  }

  if (j.contains("model")) cfg.model = parse_model_section(j.at("model"));
  if (j.contains("train")) cfg.train = parse_train_section(j.at("train"));
  if (!j.contains("train") || !j.at("train").contains("seed")) cfg.train.seed = cfg.seed;

  if (j.contains("generation")) {
    const json& g = j.at("generation");
    check_keys(g,
               {"checkpoint", "count", "seed_len", "max_len", "stop_margin", "use_dropout",
                "class_attribute", "class_value"},
               "generation");
    if (g.contains("checkpoint")) cfg.checkpoint_path = g.at("checkpoint").get<std::string>();
    if (g.contains("count")) cfg.generate_count = g.at("count").get<std::size_t>();
    if (g.contains("seed_len")) cfg.generation.seed_len = g.at("seed_len").get<std::size_t>();
    if (g.contains("max_len")) cfg.generation.max_len = g.at("max_len").get<std::size_t>();
    if (g.contains("stop_margin")) cfg.generation.stop_margin = g.at("stop_margin").get<double>();
    if (g.contains("use_dropout")) cfg.generation.use_dropout = g.at("use_dropout").get<bool>();
    if (g.contains("class_attribute")) {
      cfg.class_filter.attribute = g.at("class_attribute").get<std::string>();
    }
    if (g.contains("class_value")) cfg.class_filter.value = g.at("class_value").get<std::string>();
  }
  cfg.generation.rng_seed = cfg.seed;

  if (j.contains("evaluate")) {
    const json& e = j.at("evaluate");
    check_keys(e,
               {"task", "label_attribute", "families", "proportions", "epochs", "classifier_lr",
                "history", "horizon", "mlp_epochs", "mlp_lr", "hidden", "ridge_lambda",
                "krr_lambda", "krr_gamma"},
               "evaluate");
    if (e.contains("task")) cfg.eval_task = e.at("task").get<std::string>();
    if (e.contains("label_attribute")) {
      cfg.label_attribute = e.at("label_attribute").get<std::string>();
    }
    if (e.contains("families")) cfg.families = e.at("families").get<std::vector<std::string>>();
    if (e.contains("proportions")) {
      cfg.proportions = e.at("proportions").get<std::vector<double>>();
    }
    if (e.contains("epochs")) cfg.downstream_epochs = e.at("epochs").get<std::size_t>();
    if (e.contains("classifier_lr")) cfg.classifier_lr = e.at("classifier_lr").get<double>();
    if (e.contains("history")) cfg.regression.history = e.at("history").get<std::size_t>();
    if (e.contains("horizon")) cfg.regression.horizon = e.at("horizon").get<std::size_t>();
    if (e.contains("mlp_epochs")) cfg.mlp_epochs = e.at("mlp_epochs").get<std::size_t>();
    if (e.contains("mlp_lr")) cfg.mlp_lr = e.at("mlp_lr").get<double>();
    if (e.contains("hidden")) cfg.mlp_hidden = e.at("hidden").get<std::size_t>();
    if (e.contains("ridge_lambda")) cfg.ridge_lambda = e.at("ridge_lambda").get<double>();
    if (e.contains("krr_lambda")) cfg.krr_lambda = e.at("krr_lambda").get<double>();
    if (e.contains("krr_gamma")) cfg.krr_gamma = e.at("krr_gamma").get<double>();
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::string>& out) {
  if (seed) {
    cfg.seed = *seed;
    cfg.train.seed = *seed;
    cfg.generation.rng_seed = *seed;
  }
  if (out) cfg.out_dir = *out;
}

// ------------------------------------------------------------- manifest

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// The manifest is the one output that carries a timestamp; everything else
// is a pure function of (config, seed).
void write_manifest(const fs::path& out_dir, const std::string& command, const RunConfig& cfg) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
  json j{{"command", command},
         {"config_hash", fnv1a_hex(cfg.raw_text)},
         {"seed", cfg.seed},
         {"toolkit_version", kVersion},
         {"timestamp_utc", stamp}};
  std::ofstream out(out_dir / "run_manifest.json");
  out << j.dump(2) << '\n';
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError("config is missing the " + what + " path");
  if (!fs::exists(p)) throw DataError("no such " + what + ": " + p.string());
}

data::NormRange effective_range(const RunConfig& cfg) {
  if (cfg.normalizer_range_set) {
    if (cfg.normalizer_range == data::NormRange::SymOne &&
        cfg.model.output_activation == model::Activation::Sigmoid) {
      throw ConfigError("a sigmoid head cannot reach the sym [-1,1] normalizer range");
    }
    return cfg.normalizer_range;
  }
  return cfg.model.output_activation == model::Activation::Sigmoid ? data::NormRange::ZeroOne
                                                                   : data::NormRange::SymOne;
}

// ------------------------------------------------------------- commands

int cmd_train(RunConfig cfg) {
  require_file(cfg.train_path, "dataset");
  require_file(cfg.schema_path, "schema file");
  cfg.model.validate();
  cfg.train.validate();
  if (cfg.train.window > cfg.model.max_window) {
    throw ConfigError("training window " + std::to_string(cfg.train.window) +
                      " exceeds the model window " + std::to_string(cfg.model.max_window));
  }

  const auto schema = data::DatasetSchema::load(cfg.schema_path);
  if (schema.feature_count + data::kFlagCount != cfg.model.input_dim) {
    throw ConfigError("model input_dim " + std::to_string(cfg.model.input_dim) +
                      " must equal schema features + 2 flags = " +
                      std::to_string(schema.feature_count + data::kFlagCount));
  }
  auto corpus = data::ingest(cfg.train_path, schema);

  fs::create_directories(cfg.out_dir);
  std::vector<data::SeriesRecord> train_real = std::move(corpus);
  if (cfg.split_ratio) {
    auto [train_side, test_side] = data::split_real(train_real, *cfg.split_ratio, cfg.seed);
    data::write_records(cfg.out_dir / "real_train.jsonl", train_side);
    data::write_records(cfg.out_dir / "real_test.jsonl", test_side);
    train_real = std::move(train_side);
  }

  const auto stats = data::fit_normalizer(train_real, effective_range(cfg));
  data::save_normalizer(cfg.out_dir / "normalizer.txt", stats);
  const auto windowed = data::make_training_view(train_real, stats, cfg.train.window);

  auto params = model::init_params<float>(cfg.model, cfg.seed);
  auto opt = training::AdamState<float>::zeros_like(params.parameters());

  double best_loss = std::numeric_limits<double>::infinity();
  const auto save = [&](const fs::path& name, std::uint64_t done_epochs) {
    training::save_checkpoint(
        cfg.out_dir / name,
        training::make_checkpoint(cfg.model, cfg.train, stats, params, opt, done_epochs));
  };
  auto losses = training::train(
      cfg.model, cfg.train, params, opt, windowed, 0,
      [&](std::uint64_t epoch, double loss) {
        if (loss < best_loss) {
          best_loss = loss;
          save("best.ckpt", epoch + 1);
        }
        if (cfg.train.checkpoint_every && (epoch + 1) % cfg.train.checkpoint_every == 0) {
          save("epoch_" + std::to_string(epoch + 1) + ".ckpt", epoch + 1);
        }
      });
  save("last.ckpt", cfg.train.epochs);
  training::write_loss_log(cfg.out_dir / "loss_log.tsv", losses);
  write_manifest(cfg.out_dir, "train", cfg);

  std::cout << "trained " << cfg.train.epochs << " epochs on " << windowed.size()
            << " windows; final loss " << losses.back() << "\n"
            << "checkpoints in " << cfg.out_dir.string() << "\n";
  return 0;
}

int cmd_generate(RunConfig cfg) {
  require_file(cfg.checkpoint_path, "checkpoint");
  require_file(cfg.train_path, "dataset");
  require_file(cfg.schema_path, "schema file");

  const auto ckpt = training::load_checkpoint(cfg.checkpoint_path);
  model::ModelParams<float> params;
  training::AdamState<float> opt;
  training::restore_checkpoint(ckpt, params, opt);

  const auto schema = data::DatasetSchema::load(cfg.schema_path);
  const auto reals = data::ingest(cfg.train_path, schema);

  gen::GenerationConfig gcfg = cfg.generation;
  if (gcfg.max_len > ckpt.model.max_window) gcfg.max_len = ckpt.model.max_window;
  gcfg.validate();
  if (!cfg.class_filter.empty() && !schema.attributes.count(cfg.class_filter.attribute)) {
    throw DataError("class filter names unknown attribute '" + cfg.class_filter.attribute + "'");
  }

  auto synthetic = gen::generate_dataset(params, ckpt.model, reals, ckpt.normalizer,
                                         cfg.class_filter, cfg.generate_count, gcfg,
                                         cfg.checkpoint_path.stem().string());
  fs::create_directories(cfg.out_dir);
  gen::write_synthetic(cfg.out_dir / "synthetic.jsonl", synthetic);
  write_manifest(cfg.out_dir, "generate", cfg);

  std::cout << "generated " << synthetic.size() << " records into "
            << (cfg.out_dir / "synthetic.jsonl").string() << "\n";
  return 0;
}

int cmd_evaluate(RunConfig cfg) {
  if (cfg.eval_task != "classification" && cfg.eval_task != "regression" &&
      cfg.eval_task != "fidelity") {
    throw ConfigError("unknown evaluate.task '" + cfg.eval_task +
                      "' (use classification, regression or fidelity)");
  }
  if (cfg.eval_task == "classification" && cfg.label_attribute.empty()) {
    throw ConfigError("classification evaluation needs evaluate.label_attribute");
  }
  require_file(cfg.train_path, "real train dataset");
  require_file(cfg.test_path, "real test dataset");
  require_file(cfg.synthetic_path, "synthetic dataset");
  require_file(cfg.schema_path, "schema file");

  const auto schema = data::DatasetSchema::load(cfg.schema_path);
  if (cfg.eval_task == "classification" && !schema.attributes.count(cfg.label_attribute)) {
    throw ConfigError("label attribute '" + cfg.label_attribute + "' is not in the schema");
  }
  const auto real_train = data::ingest(cfg.train_path, schema);
  const auto real_test = data::ingest(cfg.test_path, schema);
  const auto synthetic = data::ingest(cfg.synthetic_path, schema);
  if (real_train.empty() || real_test.empty() || synthetic.empty()) {
    throw DataError("evaluation needs nonempty real train, real test and synthetic datasets");
  }

  fs::create_directories(cfg.out_dir);
  const auto fidelity = eval::fidelity_report(real_train, synthetic);
  {
    eval::MetricsReport fr;
    fr.run_meta = {{"task", "fidelity"},
                   {"real_train", cfg.train_path.string()},
                   {"synthetic", cfg.synthetic_path.string()}};
    fr.fidelity = fidelity;
    fr.save(cfg.out_dir / "fidelity.json");
  }
  eval::write_corr_tsv(cfg.out_dir / "correlation_real.tsv", fidelity.real_corr);
  eval::write_corr_tsv(cfg.out_dir / "correlation_synthetic.tsv", fidelity.synthetic_corr);

  auto base_meta = [&](double p, const std::string& task) {
    std::map<std::string, std::string> meta{
        {"task", task},
        {"real_train", cfg.train_path.string()},
        {"real_test", cfg.test_path.string()},
        {"synthetic", cfg.synthetic_path.string()},
        {"synthetic_size", std::to_string(synthetic.size())},
        {"real_train_size", std::to_string(real_train.size())}};
    const auto mixed = eval::mix_datasets(synthetic, real_train, p, cfg.seed);
    meta["train_size"] = std::to_string(mixed.size());
    return meta;
  };

  if (cfg.eval_task == "fidelity") {
    write_manifest(cfg.out_dir, "evaluate", cfg);
    std::cout << "fidelity: frobenius corr distance " << fidelity.frobenius_corr_distance
              << ", length TV " << fidelity.length_tv << "\n";
    return 0;
  }

  if (cfg.eval_task == "classification") {
    const auto& vocab = schema.attributes.at(cfg.label_attribute);
    std::vector<std::pair<double, double>> acc_rows;
    std::vector<std::pair<double, eval::ClassificationScores>> f1_rows;
    for (double p : cfg.proportions) {
      const auto corpus = eval::mix_datasets(synthetic, real_train, p, cfg.seed);
      auto clf = eval::train_classifier(corpus, cfg.label_attribute, vocab,
                                        {cfg.downstream_epochs, cfg.classifier_lr});
      auto scores = eval::evaluate_classifier(clf, real_test, cfg.label_attribute);

      eval::MetricsReport report;
      report.run_meta = base_meta(p, "classification");
      report.run_meta["family"] = "mlp-1";
      report.run_meta["pooling"] = "mean";  // per-feature mean over valid timesteps
      report.mix_proportion = p;
      report.fidelity = fidelity;
      report.classification = scores;
      std::ostringstream name;
      name << "report_classification_mlp-1_p" << p << ".json";
      report.save(cfg.out_dir / name.str());

      acc_rows.emplace_back(p, scores.accuracy);
      f1_rows.emplace_back(p, scores);
      std::cout << "p=" << p << " accuracy " << scores.accuracy << "\n";
    }
    eval::write_accuracy_tsv(cfg.out_dir / "accuracy_vs_proportion.tsv", acc_rows);
    eval::write_f1_tsv(cfg.out_dir / "f1_per_class.tsv", f1_rows);
    write_manifest(cfg.out_dir, "evaluate", cfg);
    return 0;
  }

  // regression: one report per (family x proportion) plus the combined table
  auto [test_x, test_y] = eval::build_xy(real_test, cfg.regression);
  std::vector<std::pair<double, std::map<std::string, double>>> table;
  for (double p : cfg.proportions) {
    const auto corpus = eval::mix_datasets(synthetic, real_train, p, cfg.seed);
    auto [train_x, train_y] = eval::build_xy(corpus, cfg.regression);
    std::map<std::string, double> r2s;
    for (const auto& family : cfg.families) {
      std::vector<std::vector<double>> pred;
      if (family == "linear") {
        auto reg = eval::train_linear_regressor(train_x, train_y, cfg.ridge_lambda);
        for (const auto& xi : test_x) pred.push_back(reg.predict(xi));
      } else if (family == "kernel-ridge") {
        auto reg = eval::train_kernel_ridge(train_x, train_y, cfg.krr_lambda, cfg.krr_gamma);
        for (const auto& xi : test_x) pred.push_back(reg.predict(xi));
      } else if (family == "mlp-1" || family == "mlp-5") {
        eval::RegressorOptions opt;
        opt.epochs = cfg.mlp_epochs;
        opt.learning_rate = cfg.mlp_lr;
        opt.hidden = cfg.mlp_hidden;
        opt.seed = cfg.seed;
        auto reg = eval::train_mlp_regressor(train_x, train_y, family == "mlp-1" ? 1 : 5, opt);
        for (const auto& xi : test_x) pred.push_back(reg.predict(xi));
      } else {
        throw ConfigError("unknown regressor family '" + family + "'");
      }
      const double r2 = eval::r2_score(pred, test_y);
      r2s[family] = r2;

      eval::MetricsReport report;
      report.run_meta = base_meta(p, "regression");
      report.run_meta["family"] = family;
      report.mix_proportion = p;
      report.fidelity = fidelity;
      report.regression_r2 = std::map<std::string, double>{{family, r2}};
      std::ostringstream name;
      name << "report_regression_" << family << "_p" << p << ".json";
      report.save(cfg.out_dir / name.str());
    }
    table.emplace_back(p, std::move(r2s));
    std::cout << "p=" << p << " regression reports written\n";
  }
  eval::write_r2_table_tsv(cfg.out_dir / "r2_table.tsv", table);
  write_manifest(cfg.out_dir, "evaluate", cfg);
  return 0;
}

int cmd_verify(std::uint64_t expected_params) {
  std::mt19937_64 rng(20240101);
  auto random_tensor = [&rng](Shape shape, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
  };

  std::vector<GradCheckReport> reports;
  reports.push_back(grad_check(
      "matmul",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        return sum_all(t, matmul(t, in[0], in[1]));
      },
      {random_tensor({4, 5}), random_tensor({5, 3})}));
  reports.push_back(grad_check(
      "add",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        return sum_all(t, mul(t, add(t, in[0], in[1]), in[0]));
      },
      {random_tensor({3, 4}), random_tensor({3, 4})}));
  reports.push_back(grad_check(
      "mul",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        return sum_all(t, mul(t, in[0], in[1]));
      },
      {random_tensor({3, 4}), random_tensor({3, 4})}));
  reports.push_back(grad_check(
      "add_bias",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        Tensor<double> y = add_bias(t, in[0], in[1]);
        return sum_all(t, mul(t, y, y));
      },
      {random_tensor({4, 3}), random_tensor({3})}));
  reports.push_back(grad_check(
      "scale_reshape_transpose",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        Tensor<double> y = transpose(t, reshape(t, scale(t, in[0], 1.3), Shape{4, 6}), 0, 1);
        return sum_all(t, mul(t, y, y));
      },
      {random_tensor({2, 3, 4})}));
  {
    Tensor<double> relu_in(Shape{4, 4});
    std::uniform_real_distribution<double> mag(0.1, 2.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& v : relu_in.data()) v = (sign(rng) ? 1.0 : -1.0) * mag(rng);
    reports.push_back(grad_check(
        "relu",
        [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
          return sum_all(t, relu(t, in[0]));
        },
        {relu_in}));
  }
  reports.push_back(grad_check(
      "sigmoid",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        Tensor<double> y = sigmoid(t, in[0]);
        return sum_all(t, mul(t, y, y));
      },
      {random_tensor({3, 5})}));
  reports.push_back(grad_check(
      "tanh",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        Tensor<double> y = tanh_act(t, in[0]);
        return sum_all(t, mul(t, y, y));
      },
      {random_tensor({3, 5})}));
  reports.push_back(grad_check(
      "layer_norm",
      [](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
        Tensor<double> y = layer_norm(t, in[0], in[1], in[2], 1e-5);
        return sum_all(t, mul(t, y, y));
      },
      {random_tensor({2, 8}), random_tensor({8}, 0.5, 1.5), random_tensor({8})}));
  {
    BoolMask none = BoolMask::none();
    reports.push_back(grad_check(
        "masked_softmax",
        [&none](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
          Tensor<double> y = masked_softmax(t, in[0], none);
          return sum_all(t, mul(t, y, y));
        },
        {random_tensor({3, 7})}));
    BoolMask partial{{7}, {0, 1, 0, 0, 1, 0, 0}};
    reports.push_back(grad_check(
        "masked_softmax_partial",
        [&partial](GradTape<double>* t, const std::vector<Tensor<double>>& in) {
          Tensor<double> y = masked_softmax(t, in[0], partial);
          return sum_all(t, mul(t, y, y));
        },
        {random_tensor({3, 7})}));
  }
  {
    model::ModelConfig tiny;
    tiny.input_dim = 3;
    tiny.d_model = 8;
    tiny.n_heads = 2;
    tiny.n_blocks = 2;
    tiny.d_ff = 8;
    tiny.dropout_p = 0.0;
    tiny.max_window = 8;
    auto params = model::init_params<double>(tiny, 99);
    Tensor<double> inputs = random_tensor({2, 5, 3}, 0.0, 1.0);
    Tensor<double> targets = random_tensor({2, 5, 3}, 0.0, 1.0);
    std::vector<std::uint8_t> loss_mask = {1, 1, 1, 1, 0, 1, 1, 0, 0, 0};
    model::AttentionMask mask = model::build_masks({5, 3}, 5);
    reports.push_back(grad_check(
        "model_tiny",
        [&](GradTape<double>* tape, const std::vector<Tensor<double>>&) {
          Tensor<double> pred =
              model::forward(tape, params, tiny, inputs, mask, model::Mode::Train, nullptr);
          return training::masked_mse(tape, pred, targets, loss_mask);
        },
        params.parameters()));
  }

  std::vector<std::string> failures;
  for (const auto& r : reports) {
    std::cout << (r.pass ? "PASS" : "FAIL") << "  grad " << r.name << "  max_rel_err "
              << r.max_rel_error << "\n";
    if (!r.pass) failures.push_back("grad " + r.name);
  }

  const std::size_t gcut = model::count_parameters(model::ModelConfig::gcut_reference());
  const bool count_ok = gcut == expected_params;
  std::cout << (count_ok ? "PASS" : "FAIL") << "  param_count_gcut  " << gcut << " expected "
            << expected_params << "\n";
  if (!count_ok) failures.push_back("param_count_gcut");

  {
    model::ModelConfig tiny;
    tiny.input_dim = 3;
    tiny.d_model = 8;
    tiny.n_heads = 2;
    tiny.n_blocks = 1;
    tiny.d_ff = 8;
    const bool consistent =
        model::init_params<float>(tiny, 1).count() == model::count_parameters(tiny);
    std::cout << (consistent ? "PASS" : "FAIL") << "  param_count_closed_form\n";
    if (!consistent) failures.push_back("param_count_closed_form");
  }

  if (!failures.empty()) {
    std::cout << "verification failed:";
    for (const auto& f : failures) std::cout << ' ' << f;
    std::cout << "\n";
    return 1;
  }
  std::cout << "all checks passed\n";
  return 0;
}

int cmd_param_count(const std::optional<std::string>& config_path) {
  model::ModelConfig cfg = model::ModelConfig::gcut_reference();
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw ConfigError("cannot open config file " + *config_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    if (j.contains("model")) cfg = parse_model_section(j.at("model"));
  }
  cfg.validate();
  std::cout << model::count_parameters(cfg) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tst: transformer-based time-series synthesis toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;

  auto add_common = [&](CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config", config_path, "path to the JSON run config");
    if (config_required) opt->required();
    cmd->add_option("--seed", seed_override, "override the global seed");
    cmd->add_option("--out", out_override, "override the output directory");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model from a real dataset");
  add_common(train_cmd);
  auto* gen_cmd = app.add_subcommand("generate", "generate synthetic records from a checkpoint");
  add_common(gen_cmd);
  auto* eval_cmd = app.add_subcommand("evaluate", "fidelity and downstream-task evaluation");
  add_common(eval_cmd);

  auto* verify_cmd = app.add_subcommand("verify", "gradient checks and the parameter-count oracle");
  std::uint64_t expected_params = 12'635'659ull;
  verify_cmd->add_option("--expected-params", expected_params,
                         "expected parameter count for the reference configuration");

  auto* count_cmd = app.add_subcommand("param-count", "print the model parameter count");
  std::optional<std::string> count_config;
  count_cmd->add_option("--config", count_config, "config whose model section to count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(train_cmd) || app.got_subcommand(gen_cmd) ||
        app.got_subcommand(eval_cmd)) {
      RunConfig cfg = load_config(config_path);
      apply_overrides(cfg, seed_override, out_override);
      if (app.got_subcommand(train_cmd)) return cmd_train(std::move(cfg));
      if (app.got_subcommand(gen_cmd)) return cmd_generate(std::move(cfg));
      return cmd_evaluate(std::move(cfg));
    }
    if (app.got_subcommand(verify_cmd)) return cmd_verify(expected_params);
    return cmd_param_count(count_config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
