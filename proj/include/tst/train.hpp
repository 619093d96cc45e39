#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tst/data.hpp"
#include "tst/model.hpp"
#include "tst/ops.hpp"

// Masked MSE objective, Adam, the teacher-forced training loop, and the
// versioned binary checkpoint format.

namespace tst::training {

using nlohmann::json;

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t window = 400;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 keeps only last/best
  double grad_clip = 0.0;            // global-norm clip; 0 disables

  void validate() const {
    if (epochs == 0 || batch_size == 0 || window < 2) {
      throw ConfigError("epochs and batch_size must be positive, window at least 2");
    }
    if (learning_rate <= 0 || beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1 ||
        epsilon <= 0) {
      throw ConfigError("optimizer constants out of range");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  }

  json to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", learning_rate},
                {"beta1", beta1},
                {"beta2", beta2},
                {"epsilon", epsilon},
                {"window", window},
                {"dropout", dropout},
                {"seed", seed},
                {"checkpoint_every", checkpoint_every},
                {"grad_clip", grad_clip}};
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.window = j.at("window").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
    c.grad_clip = j.at("grad_clip").get<double>();
    return c;
  }
};

// ------------------------------------------------------------- masked MSE

// Mean squared error over (valid position x feature) elements only:
//   sum_{b,t in mask} |pred - target|^2 / (F * sum mask).
// Values at masked-out positions cannot influence the result.
template <typename T>
Tensor<T> masked_mse(GradTape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target,
                     const std::vector<std::uint8_t>& loss_mask) {
  detail::check_same_shape(pred.shape(), target.shape(), "masked_mse");
  if (pred.rank() != 3) {
    throw DimensionError("masked_mse expects [B,T,F], got " + shape_str(pred.shape()));
  }
  const std::size_t b = pred.dim(0), t = pred.dim(1), f = pred.dim(2);
  if (loss_mask.size() != b * t) {
    throw DimensionError("masked_mse: loss mask covers " + std::to_string(loss_mask.size()) +
                         " positions, batch has " + std::to_string(b * t));
  }
  std::size_t valid = 0;
  for (auto m : loss_mask) valid += m ? 1 : 0;
  if (valid == 0) throw DataError("degenerate batch: loss mask is empty");

  Tensor<T> mask_f(pred.shape());
  for (std::size_t i = 0; i < b * t; ++i) {
    if (!loss_mask[i]) continue;
    for (std::size_t j = 0; j < f; ++j) mask_f.data()[i * f + j] = T(1);
  }
  Tensor<T> diff = add(tape, pred, scale(tape, target, T(-1)));
  Tensor<T> sq = mul(tape, diff, diff);
  Tensor<T> total = sum_all(tape, mul(tape, sq, mask_f));
  return scale(tape, total, T(1.0 / (static_cast<double>(f) * static_cast<double>(valid))));
}

// ------------------------------------------------------------------- Adam

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<Tensor<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
};

// One Adam update from the gradients currently held by the parameters.
// A zero gradient leaves the parameter unchanged (the step counter still
// advances).
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamOptions& opt) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match the parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data();
    const auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw DimensionError("optimizer buffer shape drifted");
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double ge = static_cast<double>(g[e]);
      const double me = opt.beta1 * static_cast<double>(m[e]) + (1.0 - opt.beta1) * ge;
      const double ve = opt.beta2 * static_cast<double>(v[e]) + (1.0 - opt.beta2) * ge * ge;
      m[e] = static_cast<T>(me);
      v[e] = static_cast<T>(ve);
      const double mhat = me / bc1;
      const double vhat = ve / bc2;
      p[e] = static_cast<T>(static_cast<double>(p[e]) -
                            opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon));
    }
  }
}

template <typename T>
void clip_gradients(std::vector<Tensor<T>>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& p : params)
    for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const T s = static_cast<T>(max_norm / norm);
  for (auto& p : params)
    for (auto& g : p.grad()) g *= s;
}

// ------------------------------------------------------------ checkpoints

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  model::ModelConfig model;
  TrainConfig train;
  data::NormalizerStats normalizer;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;      // parameters
  std::vector<std::pair<std::string, Tensor<float>>> opt_tensors;  // adam m.*, v.*, step
  std::uint64_t epoch = 0;
};

namespace detail_io {

template <typename V>
void write_pod(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw CorruptionError("checkpoint truncated");
  return v;
}

inline void write_tensor_section(std::ofstream& out,
                                 const std::vector<std::pair<std::string, Tensor<float>>>& ts) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ts.size()));
  for (const auto& [name, t] : ts) {
    write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
}

inline std::vector<std::pair<std::string, Tensor<float>>> read_tensor_section(std::ifstream& in) {
  const auto count = read_pod<std::uint32_t>(in);
  std::vector<std::pair<std::string, Tensor<float>>> ts;
  ts.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CorruptionError("checkpoint truncated");
    const auto rank = read_pod<std::uint8_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in);
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw CorruptionError("checkpoint truncated");
    ts.emplace_back(std::move(name), std::move(t));
  }
  return ts;
}

}  // namespace detail_io

// Binary little-endian layout: magic, u32 version, u64 length + UTF-8 config
// text (model/train/normalizer as JSON), the parameter tensor section, the
// optimizer tensor section (same encoding), u64 epoch index. Writes go to a
// temp file renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail_io::write_pod<std::uint32_t>(out, kCheckpointVersion);
    const std::string cfg = json{{"model", ckpt.model.to_json()},
                                 {"train", ckpt.train.to_json()},
                                 {"normalizer", ckpt.normalizer.to_json()}}
                                .dump();
    detail_io::write_pod<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail_io::write_tensor_section(out, ckpt.tensors);
    detail_io::write_tensor_section(out, ckpt.opt_tensors);
    detail_io::write_pod<std::uint64_t>(out, ckpt.epoch);
    if (!out) throw Error("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  const auto version = detail_io::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto cfg_len = detail_io::read_pod<std::uint64_t>(in);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw CorruptionError("checkpoint truncated");
  Checkpoint ckpt;
  try {
    const json j = json::parse(cfg);
    ckpt.model = model::ModelConfig::from_json(j.at("model"));
    ckpt.train = TrainConfig::from_json(j.at("train"));
    ckpt.normalizer = data::NormalizerStats::from_json(j.at("normalizer"));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint config unreadable: ") + e.what());
  }
  ckpt.tensors = detail_io::read_tensor_section(in);
  ckpt.opt_tensors = detail_io::read_tensor_section(in);
  ckpt.epoch = detail_io::read_pod<std::uint64_t>(in);
  return ckpt;
}

inline Checkpoint make_checkpoint(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                                  const data::NormalizerStats& stats,
                                  const model::ModelParams<float>& params,
                                  const AdamState<float>& opt, std::uint64_t epoch) {
  Checkpoint ckpt;
  ckpt.model = mcfg;
  ckpt.train = tcfg;
  ckpt.normalizer = stats;
  ckpt.tensors = params.named();
  const auto named = params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    ckpt.opt_tensors.emplace_back("m." + named[i].first,
                                  Tensor<float>::from(named[i].second.shape(), opt.m[i]));
    ckpt.opt_tensors.emplace_back("v." + named[i].first,
                                  Tensor<float>::from(named[i].second.shape(), opt.v[i]));
  }
  ckpt.opt_tensors.emplace_back(
      "step", Tensor<float>::from(Shape{1}, {static_cast<float>(opt.step)}));
  ckpt.epoch = epoch;
  return ckpt;
}

// Rebuilds parameters and optimizer state from a loaded checkpoint.
inline void restore_checkpoint(const Checkpoint& ckpt, model::ModelParams<float>& params,
                               AdamState<float>& opt) {
  params = model::init_params<float>(ckpt.model, 0);
  auto named = params.named();
  if (named.size() != ckpt.tensors.size()) {
    throw CorruptionError("checkpoint parameter list does not match the model config");
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, stored] = ckpt.tensors[i];
    if (name != named[i].first || stored.shape() != named[i].second.shape()) {
      throw CorruptionError("unexpected checkpoint tensor '" + name + "'");
    }
    named[i].second.data() = stored.data();
  }
  auto plist = params.parameters();
  opt = AdamState<float>::zeros_like(plist);
  if (ckpt.opt_tensors.size() != 2 * named.size() + 1) {
    throw CorruptionError("checkpoint optimizer section has unexpected size");
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [mname, mten] = ckpt.opt_tensors[2 * i];
    const auto& [vname, vten] = ckpt.opt_tensors[2 * i + 1];
    if (mname != "m." + named[i].first || vname != "v." + named[i].first ||
        mten.numel() != plist[i].numel() || vten.numel() != plist[i].numel()) {
      throw CorruptionError("unexpected optimizer tensor near '" + mname + "'");
    }
    opt.m[i] = mten.data();
    opt.v[i] = vten.data();
  }
  const auto& [sname, sten] = ckpt.opt_tensors.back();
  if (sname != "step" || sten.numel() != 1) throw CorruptionError("missing optimizer step");
  opt.step = static_cast<std::uint64_t>(sten.data()[0]);
}

// ---------------------------------------------------------- training loop

// Per-epoch shuffle order and dropout stream are pure functions of
// (seed, epoch), which is what makes resume-from-checkpoint reproduce an
// uninterrupted run.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, std::uint64_t epoch) {
  return mix_seed(seed, 2 * epoch);
}
inline std::uint64_t epoch_dropout_seed(std::uint64_t seed, std::uint64_t epoch) {
  return mix_seed(seed, 2 * epoch + 1);
}

using EpochCallback = std::function<void(std::uint64_t epoch, double loss)>;

// Teacher-forced training over pre-windowed records. Returns the per-epoch
// loss log for epochs [first_epoch, cfg.epochs). The epoch loss is the
// valid-element-weighted mean over batches, i.e. the exact dataset MSE for
// that epoch's forward passes.
inline std::vector<double> train(const model::ModelConfig& mcfg_in, const TrainConfig& tcfg,
                                 model::ModelParams<float>& params, AdamState<float>& opt,
                                 const std::vector<data::SeriesRecord>& windowed,
                                 std::uint64_t first_epoch = 0,
                                 const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  model::ModelConfig mcfg = mcfg_in;
  mcfg.dropout_p = tcfg.dropout;
  mcfg.validate();
  if (windowed.empty()) throw DataError("dataset is empty after windowing");
  if (tcfg.window > mcfg.max_window) {
    throw ConfigError("training window " + std::to_string(tcfg.window) +
                      " exceeds the model window " + std::to_string(mcfg.max_window));
  }
  for (const auto& rec : windowed) {
    if (rec.feature_count() != mcfg.input_dim) {
      throw DataError("record '" + rec.id + "' has " + std::to_string(rec.feature_count()) +
                      " features, model expects " + std::to_string(mcfg.input_dim));
    }
  }

  auto plist = params.parameters();
  const AdamOptions adam{tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.epsilon};
  std::vector<double> losses;
  for (std::uint64_t epoch = first_epoch; epoch < tcfg.epochs; ++epoch) {
    auto batches = data::make_batches(windowed, tcfg.batch_size,
                                      epoch_shuffle_seed(tcfg.seed, epoch));
    std::mt19937_64 dropout_rng(epoch_dropout_seed(tcfg.seed, epoch));
    double weighted = 0.0;
    std::size_t total_valid = 0;
    for (const auto& batch : batches) {
      GradTape<float> tape;
      model::AttentionMask mask = model::build_masks(batch.lengths, batch.time);
      Tensor<float> pred = model::forward(&tape, params, mcfg, batch.inputs, mask,
                                          model::Mode::Train, &dropout_rng);
      Tensor<float> loss = masked_mse(&tape, pred, batch.targets, batch.loss_mask);
      params.zero_grad();
      tape.backward(loss);
      clip_gradients(plist, tcfg.grad_clip);
      adam_step(plist, opt, adam);

      std::size_t valid = 0;
      for (auto m : batch.loss_mask) valid += m ? 1 : 0;
      weighted += static_cast<double>(loss.data()[0]) * static_cast<double>(valid);
      total_valid += valid;
    }
    const double epoch_loss = weighted / static_cast<double>(total_valid);
    losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return losses;
}

// Plain-text loss log: one "epoch<TAB>loss" line per epoch.
inline void write_loss_log(const std::filesystem::path& path, const std::vector<double>& losses,
                           std::uint64_t first_epoch = 0) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss log " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    out << (first_epoch + i) << '\t' << losses[i] << '\n';
  }
}

}  // namespace tst::training
