#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tst/data.hpp"
#include "tst/ops.hpp"
#include "tst/train.hpp"

// Structural-fidelity statistics (cross-measurement Pearson correlation,
// length-distribution divergence) and the train-on-synthetic/test-on-real
// downstream harness with dataset mixing.

namespace tst::eval {

using nlohmann::json;

// ----------------------------------------------------------------- pearson

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DataError("pearson needs two equal-length series of at least 2 points");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    cov += dx * dy;
    vx += dx * dx;
    vy += dy * dy;
  }
  if (vx == 0.0 || vy == 0.0) throw DataError("pearson: zero-variance input");
  return cov / std::sqrt(vx * vy);
}

// -------------------------------------------------------- correlation grid

// Pearson between feature columns, pooled over all valid timesteps of all
// records. Constant features are flagged undefined rather than silently
// reported as zero.
struct CorrelationMatrix {
  std::size_t size = 0;
  std::vector<double> values;           // size x size; NaN where undefined
  std::vector<std::uint8_t> defined;    // per feature

  double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }

  json to_json() const {
    json rows = json::array();
    for (std::size_t i = 0; i < size; ++i) {
      json row = json::array();
      for (std::size_t j = 0; j < size; ++j) {
        const double v = at(i, j);
        if (std::isnan(v)) {
          row.push_back(nullptr);
        } else {
          row.push_back(v);
        }
      }
      rows.push_back(row);
    }
    return json{{"size", size}, {"values", rows}, {"defined", defined}};
  }

  static CorrelationMatrix from_json(const json& j) {
    CorrelationMatrix m;
    m.size = j.at("size").get<std::size_t>();
    m.defined = j.at("defined").get<std::vector<std::uint8_t>>();
    for (const auto& row : j.at("values")) {
      for (const auto& cell : row) {
        m.values.push_back(cell.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                          : cell.get<double>());
      }
    }
    return m;
  }
};

inline CorrelationMatrix cross_correlation_matrix(const std::vector<data::SeriesRecord>& records,
                                                  std::size_t feature_count) {
  std::vector<std::vector<double>> cols(feature_count);
  for (const auto& rec : records) {
    if (rec.feature_count() != feature_count) {
      throw DataError("record '" + rec.id + "' width does not match the correlation request");
    }
    for (const auto& row : rec.measurements) {
      for (std::size_t j = 0; j < feature_count; ++j) cols[j].push_back(row[j]);
    }
  }
  if (cols.empty() || cols[0].size() < 2) {
    throw DataError("cross correlation needs at least 2 pooled timesteps");
  }

  CorrelationMatrix m;
  m.size = feature_count;
  m.values.assign(feature_count * feature_count, std::numeric_limits<double>::quiet_NaN());
  m.defined.assign(feature_count, 1);
  for (std::size_t j = 0; j < feature_count; ++j) {
    const double first = cols[j][0];
    bool constant = true;
    for (double v : cols[j]) {
      if (v != first) {
        constant = false;
        break;
      }
    }
    if (constant) m.defined[j] = 0;
  }
  for (std::size_t i = 0; i < feature_count; ++i) {
    if (!m.defined[i]) continue;
    m.values[i * feature_count + i] = 1.0;
    for (std::size_t j = i + 1; j < feature_count; ++j) {
      if (!m.defined[j]) continue;
      const double r = pearson(cols[i], cols[j]);
      m.values[i * feature_count + j] = r;
      m.values[j * feature_count + i] = r;
    }
  }
  return m;
}

// Frobenius distance over entries defined in both matrices.
inline double frobenius_distance(const CorrelationMatrix& a, const CorrelationMatrix& b) {
  if (a.size != b.size) throw DataError("correlation matrices have different sizes");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size; ++i) {
    for (std::size_t j = 0; j < a.size; ++j) {
      if (!a.defined[i] || !a.defined[j] || !b.defined[i] || !b.defined[j]) continue;
      const double d = a.at(i, j) - b.at(i, j);
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

// Total-variation distance between normalized length histograms.
inline double length_tv_distance(const std::vector<data::SeriesRecord>& a,
                                 const std::vector<data::SeriesRecord>& b) {
  if (a.empty() || b.empty()) throw DataError("length histograms need nonempty datasets");
  std::map<std::size_t, double> pa, pb;
  for (const auto& r : a) pa[r.length()] += 1.0 / static_cast<double>(a.size());
  for (const auto& r : b) pb[r.length()] += 1.0 / static_cast<double>(b.size());
  double tv = 0.0;
  for (const auto& [len, p] : pa) tv += std::abs(p - (pb.count(len) ? pb[len] : 0.0));
  for (const auto& [len, p] : pb) {
    if (!pa.count(len)) tv += p;
  }
  return 0.5 * tv;
}

// -------------------------------------------------------- classification

struct ClassificationScores {
  double accuracy = 0.0;
  std::vector<std::string> classes;
  std::vector<double> precision, recall, f1;

  json to_json() const {
    return json{{"accuracy", accuracy},
                {"classes", classes},
                {"precision", precision},
                {"recall", recall},
                {"f1", f1}};
  }
  static ClassificationScores from_json(const json& j) {
    ClassificationScores s;
    s.accuracy = j.at("accuracy").get<double>();
    s.classes = j.at("classes").get<std::vector<std::string>>();
    s.precision = j.at("precision").get<std::vector<double>>();
    s.recall = j.at("recall").get<std::vector<double>>();
    s.f1 = j.at("f1").get<std::vector<double>>();
    return s;
  }
};

// One-vs-rest precision/recall/F1 per class plus overall accuracy.
// P + R == 0 yields F1 = 0.
inline ClassificationScores f1_and_accuracy(const std::vector<std::string>& predictions,
                                            const std::vector<std::string>& labels,
                                            const std::vector<std::string>& vocabulary) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw DataError("f1_and_accuracy needs equal-length, nonempty prediction/label lists");
  }
  ClassificationScores s;
  s.classes = vocabulary;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == labels[i]) ++correct;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(predictions.size());
  for (const auto& cls : vocabulary) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      const bool pred_is = predictions[i] == cls;
      const bool label_is = labels[i] == cls;
      if (pred_is && label_is) ++tp;
      if (pred_is && !label_is) ++fp;
      if (!pred_is && label_is) ++fn;
    }
    const double p = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f = (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(f);
  }
  return s;
}

// -------------------------------------------------------------------- R^2

// R^2 = 1 - SS_res / SS_tot; multi-output targets average the per-output R^2
// uniformly. Requires non-constant actuals.
inline double r2_score(const std::vector<std::vector<double>>& predicted,
                       const std::vector<std::vector<double>>& actual) {
  if (predicted.size() != actual.size() || predicted.size() < 2) {
    throw DataError("r2_score needs at least 2 samples with matching counts");
  }
  const std::size_t n = actual.size();
  const std::size_t k = actual.front().size();
  double sum_r2 = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += actual[i][j];
    mean /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (predicted[i].size() != k || actual[i].size() != k) {
        throw DataError("r2_score: ragged prediction/actual rows");
      }
      const double res = actual[i][j] - predicted[i][j];
      const double dev = actual[i][j] - mean;
      ss_res += res * res;
      ss_tot += dev * dev;
    }
    if (ss_tot == 0.0) throw DataError("r2_score: constant actual output " + std::to_string(j));
    sum_r2 += 1.0 - ss_res / ss_tot;
  }
  return sum_r2 / static_cast<double>(k);
}

inline double r2_score(const std::vector<double>& predicted, const std::vector<double>& actual) {
  std::vector<std::vector<double>> p, a;
  for (double v : predicted) p.push_back({v});
  for (double v : actual) a.push_back({v});
  return r2_score(p, a);
}

// ------------------------------------------------------------------ mixing

// All synthetic records plus floor(p * |real|) real records sampled without
// replacement, deterministic for a fixed seed.
inline std::vector<data::SeriesRecord> mix_datasets(const std::vector<data::SeriesRecord>& synthetic,
                                                    const std::vector<data::SeriesRecord>& real,
                                                    double proportion, std::uint64_t seed) {
  if (proportion < 0.0 || proportion > 1.0) {
    throw ConfigError("mix proportion must lie in [0, 1]");
  }
  const auto take = static_cast<std::size_t>(
      std::floor(proportion * static_cast<double>(real.size()) + 1e-9));
  std::vector<std::size_t> order(real.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<data::SeriesRecord> out = synthetic;
  for (std::size_t i = 0; i < take; ++i) out.push_back(real[order[i]]);
  return out;
}

// ------------------------------------------------------------- classifier

// Per-feature mean over the record's valid timesteps: the length-invariant
// input representation for the one-layer classifier.
inline std::vector<double> mean_pool(const data::SeriesRecord& rec) {
  std::vector<double> out(rec.feature_count(), 0.0);
  for (const auto& row : rec.measurements) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += row[j];
  }
  for (auto& v : out) v /= static_cast<double>(rec.length());
  return out;
}

struct ClassifierOptions {
  std::size_t epochs = 100;
  double learning_rate = 0.05;
};

// Single linear map to class scores trained with full-batch softmax
// cross-entropy. The zero init plus full-batch updates make training a pure
// function of the corpus.
struct LinearClassifier {
  std::vector<std::string> classes;
  std::size_t features = 0;
  std::vector<double> w;  // [C, F]
  std::vector<double> b;  // [C]

  std::vector<double> scores(const std::vector<double>& x) const {
    std::vector<double> s(classes.size(), 0.0);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      double acc = b[c];
      for (std::size_t j = 0; j < features; ++j) acc += w[c * features + j] * x[j];
      s[c] = acc;
    }
    return s;
  }

  // argmax with lowest-index tie-break
  std::size_t predict_index(const std::vector<double>& x) const {
    const auto s = scores(x);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[best]) best = c;
    }
    return best;
  }

  std::string predict(const data::SeriesRecord& rec) const {
    return classes[predict_index(mean_pool(rec))];
  }
};

inline LinearClassifier train_classifier(const std::vector<data::SeriesRecord>& corpus,
                                         const std::string& label_attribute,
                                         const std::vector<std::string>& vocabulary,
                                         const ClassifierOptions& opt = {}) {
  if (corpus.empty()) throw DataError("classifier corpus is empty");
  const std::size_t f = corpus.front().feature_count();
  const std::size_t nc = vocabulary.size();

  std::vector<std::vector<double>> xs;
  std::vector<std::size_t> ys;
  for (const auto& rec : corpus) {
    auto it = rec.metadata.find(label_attribute);
    if (it == rec.metadata.end()) {
      throw DataError("record '" + rec.id + "' lacks attribute '" + label_attribute + "'");
    }
    const auto pos = std::find(vocabulary.begin(), vocabulary.end(), it->second);
    if (pos == vocabulary.end()) {
      throw DataError("record '" + rec.id + "' has label outside the vocabulary");
    }
    xs.push_back(mean_pool(rec));
    ys.push_back(static_cast<std::size_t>(pos - vocabulary.begin()));
  }
  {
    std::vector<std::uint8_t> present(nc, 0);
    for (auto y : ys) present[y] = 1;
    std::size_t distinct = 0;
    for (auto p : present) distinct += p;
    if (distinct < 2) throw DataError("classifier corpus contains a single class");
  }

  LinearClassifier clf;
  clf.classes = vocabulary;
  clf.features = f;
  clf.w.assign(nc * f, 0.0);
  clf.b.assign(nc, 0.0);

  const double n = static_cast<double>(xs.size());
  std::vector<double> mw(nc * f, 0.0), vw(nc * f, 0.0), mb(nc, 0.0), vb(nc, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::vector<double> gw(nc * f, 0.0), gb(nc, 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto s = clf.scores(xs[i]);
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (auto& v : s) {
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t c = 0; c < nc; ++c) {
        const double p = s[c] / z;
        const double d = (p - (c == ys[i] ? 1.0 : 0.0)) / n;
        gb[c] += d;
        for (std::size_t j = 0; j < f; ++j) gw[c * f + j] += d * xs[i][j];
      }
    }
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(epoch));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(epoch));
    auto update = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v,
                      const std::vector<double>& g) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        p[i] -= opt.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      }
    };
    update(clf.w, mw, vw, gw);
    update(clf.b, mb, vb, gb);
  }
  return clf;
}

inline ClassificationScores evaluate_classifier(const LinearClassifier& clf,
                                                const std::vector<data::SeriesRecord>& real_test,
                                                const std::string& label_attribute) {
  std::vector<std::string> predictions, labels;
  for (const auto& rec : real_test) {
    predictions.push_back(clf.predict(rec));
    auto it = rec.metadata.find(label_attribute);
    if (it == rec.metadata.end()) {
      throw DataError("test record '" + rec.id + "' lacks attribute '" + label_attribute + "'");
    }
    labels.push_back(it->second);
  }
  return f1_and_accuracy(predictions, labels, clf.classes);
}

// -------------------------------------------------------------- regressors

// history-in / horizon-out forecasting on the first feature column.
struct RegressionTask {
  std::size_t history = 500;
  std::size_t horizon = 50;
};

struct RegressorOptions {
  std::size_t epochs = 100;
  double learning_rate = 0.01;
  std::size_t hidden = 64;
  std::uint64_t seed = 0;
  double ridge_lambda = 1e-6;
  double krr_lambda = 1.0;
  double krr_gamma = 0.0;  // 0 selects the 1/(history * var) heuristic
};

inline const std::vector<std::string>& regressor_families() {
  static const std::vector<std::string> fams{"mlp-1", "mlp-5", "linear", "kernel-ridge"};
  return fams;
}

// X: [N, history], Y: [N, horizon]
inline std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> build_xy(
    const std::vector<data::SeriesRecord>& records, const RegressionTask& task) {
  std::vector<std::vector<double>> x, y;
  for (const auto& rec : records) {
    if (rec.length() < task.history + task.horizon) {
      throw DataError("record '" + rec.id + "' is too short for history " +
                      std::to_string(task.history) + " + horizon " +
                      std::to_string(task.horizon));
    }
    std::vector<double> xi(task.history), yi(task.horizon);
    for (std::size_t t = 0; t < task.history; ++t) xi[t] = rec.measurements[t][0];
    for (std::size_t t = 0; t < task.horizon; ++t) {
      yi[t] = rec.measurements[task.history + t][0];
    }
    x.push_back(std::move(xi));
    y.push_back(std::move(yi));
  }
  return {std::move(x), std::move(y)};
}

namespace detail_solve {

// In-place Cholesky solve of A X = B for symmetric positive definite A
// (n x n), B (n x k).
inline std::vector<double> solve_spd(std::vector<double> a, std::vector<double> b,
                                     std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t t = 0; t < j; ++t) s -= a[i * n + t] * a[j * n + t];
      if (i == j) {
        if (s <= 0.0) throw Error("matrix not positive definite in Cholesky solve");
        a[i * n + j] = std::sqrt(s);
      } else {
        a[i * n + j] = s / a[j * n + j];
      }
    }
  }
  // forward then back substitution, column by column
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i * k + c];
      for (std::size_t t = 0; t < i; ++t) s -= a[i * n + t] * b[t * k + c];
      b[i * k + c] = s / a[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = b[i * k + c];
      for (std::size_t t = i + 1; t < n; ++t) s -= a[t * n + i] * b[t * k + c];
      b[i * k + c] = s / a[i * n + i];
    }
  }
  return b;
}

}  // namespace detail_solve

// Closed-form ridge regression with a bias column.
struct LinearRegressor {
  std::size_t history = 0, horizon = 0;
  std::vector<double> w;  // [(history+1), horizon], last row is the bias

  std::vector<double> predict(const std::vector<double>& x) const {
    std::vector<double> y(horizon, 0.0);
    for (std::size_t j = 0; j < horizon; ++j) {
      double acc = w[history * horizon + j];
      for (std::size_t t = 0; t < history; ++t) acc += x[t] * w[t * horizon + j];
      y[j] = acc;
    }
    return y;
  }
};

inline LinearRegressor train_linear_regressor(const std::vector<std::vector<double>>& x,
                                              const std::vector<std::vector<double>>& y,
                                              double lambda = 1e-6) {
  const std::size_t n = x.size();
  if (n == 0) throw DataError("linear regressor needs training samples");
  const std::size_t h = x.front().size();
  const std::size_t k = y.front().size();
  const std::size_t d = h + 1;
  std::vector<double> xtx(d * d, 0.0), xty(d * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> xi = x[i];
    xi.push_back(1.0);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) xtx[a * d + b] += xi[a] * xi[b];
      for (std::size_t c = 0; c < k; ++c) xty[a * k + c] += xi[a] * y[i][c];
    }
  }
  for (std::size_t a = 0; a < d; ++a) xtx[a * d + a] += lambda;
  LinearRegressor reg;
  reg.history = h;
  reg.horizon = k;
  reg.w = detail_solve::solve_spd(std::move(xtx), std::move(xty), d, k);
  return reg;
}

// RBF kernel ridge: k(a,b) = exp(-gamma * |a-b|^2), alpha = (K + lambda I)^{-1} Y.
struct KernelRidgeRegressor {
  std::vector<std::vector<double>> x_train;
  std::vector<double> alpha;  // [N, horizon]
  double gamma = 0.0;
  std::size_t horizon = 0;

  std::vector<double> predict(const std::vector<double>& x) const {
    std::vector<double> y(horizon, 0.0);
    for (std::size_t i = 0; i < x_train.size(); ++i) {
      double sq = 0.0;
      for (std::size_t t = 0; t < x.size(); ++t) {
        const double dlt = x[t] - x_train[i][t];
        sq += dlt * dlt;
      }
      const double kv = std::exp(-gamma * sq);
      for (std::size_t j = 0; j < horizon; ++j) y[j] += kv * alpha[i * horizon + j];
    }
    return y;
  }
};

inline KernelRidgeRegressor train_kernel_ridge(const std::vector<std::vector<double>>& x,
                                               const std::vector<std::vector<double>>& y,
                                               double lambda = 1.0, double gamma = 0.0) {
  const std::size_t n = x.size();
  if (n == 0) throw DataError("kernel ridge needs training samples");
  const std::size_t h = x.front().size();
  const std::size_t k = y.front().size();
  if (gamma <= 0.0) {
    double mean = 0.0;
    std::size_t cnt = 0;
    for (const auto& xi : x)
      for (double v : xi) {
        mean += v;
        ++cnt;
      }
    mean /= static_cast<double>(cnt);
    double var = 0.0;
    for (const auto& xi : x)
      for (double v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cnt);
    gamma = var > 0.0 ? 1.0 / (static_cast<double>(h) * var) : 1.0;
  }
  std::vector<double> gram(n * n, 0.0), ymat(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sq = 0.0;
      for (std::size_t t = 0; t < h; ++t) {
        const double dlt = x[i][t] - x[j][t];
        sq += dlt * dlt;
      }
      const double kv = std::exp(-gamma * sq);
      gram[i * n + j] = kv;
      gram[j * n + i] = kv;
    }
    gram[i * n + i] += lambda;
    for (std::size_t c = 0; c < k; ++c) ymat[i * k + c] = y[i][c];
  }
  KernelRidgeRegressor reg;
  reg.x_train = x;
  reg.gamma = gamma;
  reg.horizon = k;
  reg.alpha = detail_solve::solve_spd(std::move(gram), std::move(ymat), n, k);
  return reg;
}

// Feed-forward regressor on the numerics kernel; "mlp-1" is a plain linear
// map, "mlp-5" has four hidden ReLU layers.
struct MlpRegressor {
  std::vector<Tensor<double>> weights, biases;

  Tensor<double> forward(GradTape<double>* tape, const Tensor<double>& x) const {
    Tensor<double> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = linear(tape, h, weights[l], biases[l]);
      if (l + 1 < weights.size()) h = relu(tape, h);
    }
    return h;
  }

  std::vector<double> predict(const std::vector<double>& x) const {
    Tensor<double> xi = Tensor<double>::from(Shape{1, x.size()}, x);
    Tensor<double> y = forward(nullptr, xi);
    return y.data();
  }
};

inline MlpRegressor train_mlp_regressor(const std::vector<std::vector<double>>& x,
                                        const std::vector<std::vector<double>>& y,
                                        std::size_t n_layers, const RegressorOptions& opt) {
  const std::size_t n = x.size();
  if (n == 0) throw DataError("mlp regressor needs training samples");
  const std::size_t h = x.front().size();
  const std::size_t k = y.front().size();

  std::mt19937_64 rng(opt.seed);
  auto init = [&rng](std::size_t rows, std::size_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<double> t(Shape{rows, cols});
    for (auto& v : t.data()) v = u(rng);
    t.set_requires_grad(true);
    return t;
  };

  MlpRegressor mlp;
  std::size_t in = h;
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    mlp.weights.push_back(init(in, opt.hidden));
    mlp.biases.push_back(Tensor<double>(Shape{opt.hidden}).set_requires_grad(true));
    in = opt.hidden;
  }
  mlp.weights.push_back(init(in, k));
  mlp.biases.push_back(Tensor<double>(Shape{k}).set_requires_grad(true));

  std::vector<Tensor<double>> params;
  for (auto& w : mlp.weights) params.push_back(w);
  for (auto& b : mlp.biases) params.push_back(b);
  auto opt_state = training::AdamState<double>::zeros_like(params);
  const training::AdamOptions adam{opt.learning_rate, 0.9, 0.999, 1e-8};

  Tensor<double> xt(Shape{n, h});
  Tensor<double> yt(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < h; ++t) xt.at({i, t}) = x[i][t];
    for (std::size_t c = 0; c < k; ++c) yt.at({i, c}) = y[i][c];
  }

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    GradTape<double> tape;
    Tensor<double> pred = mlp.forward(&tape, xt);
    Tensor<double> diff = add(&tape, pred, scale(&tape, yt, -1.0));
    Tensor<double> loss = scale(&tape, sum_all(&tape, mul(&tape, diff, diff)),
                                1.0 / static_cast<double>(n * k));
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);
    training::adam_step(params, opt_state, adam);
  }
  return mlp;
}

// --------------------------------------------------------------- fidelity

struct FidelityStats {
  CorrelationMatrix real_corr, synthetic_corr;
  double frobenius_corr_distance = 0.0;
  double length_tv = 0.0;

  json to_json() const {
    return json{{"real_corr", real_corr.to_json()},
                {"synthetic_corr", synthetic_corr.to_json()},
                {"frobenius_corr_distance", frobenius_corr_distance},
                {"length_tv", length_tv}};
  }
  static FidelityStats from_json(const json& j) {
    FidelityStats f;
    f.real_corr = CorrelationMatrix::from_json(j.at("real_corr"));
    f.synthetic_corr = CorrelationMatrix::from_json(j.at("synthetic_corr"));
    f.frobenius_corr_distance = j.at("frobenius_corr_distance").get<double>();
    f.length_tv = j.at("length_tv").get<double>();
    return f;
  }
};

inline FidelityStats fidelity_report(const std::vector<data::SeriesRecord>& real,
                                     const std::vector<data::SeriesRecord>& synthetic) {
  if (real.empty() || synthetic.empty()) throw DataError("fidelity needs nonempty datasets");
  const std::size_t f = real.front().feature_count();
  FidelityStats stats;
  stats.real_corr = cross_correlation_matrix(real, f);
  stats.synthetic_corr = cross_correlation_matrix(synthetic, f);
  stats.frobenius_corr_distance = frobenius_distance(stats.real_corr, stats.synthetic_corr);
  stats.length_tv = length_tv_distance(real, synthetic);
  return stats;
}

// ----------------------------------------------------------------- report

struct MetricsReport {
  std::map<std::string, std::string> run_meta;  // dataset ids, sizes, task, family
  double mix_proportion = 0.0;
  std::optional<FidelityStats> fidelity;
  std::optional<ClassificationScores> classification;
  std::optional<std::map<std::string, double>> regression_r2;  // family -> R^2

  json to_json() const {
    json j{{"run_meta", run_meta}, {"mix_proportion", mix_proportion}};
    if (fidelity) j["fidelity"] = fidelity->to_json();
    if (classification) j["classification"] = classification->to_json();
    if (regression_r2) j["regression_r2"] = *regression_r2;
    return j;
  }

  static MetricsReport from_json(const json& j) {
    MetricsReport r;
    r.run_meta = j.at("run_meta").get<std::map<std::string, std::string>>();
    r.mix_proportion = j.at("mix_proportion").get<double>();
    if (j.contains("fidelity")) r.fidelity = FidelityStats::from_json(j.at("fidelity"));
    if (j.contains("classification")) {
      r.classification = ClassificationScores::from_json(j.at("classification"));
    }
    if (j.contains("regression_r2")) {
      r.regression_r2 = j.at("regression_r2").get<std::map<std::string, double>>();
    }
    return r;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write report " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static MetricsReport load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open report " + path.string());
    json j;
    in >> j;
    return from_json(j);
  }
};

// ------------------------------------------------------- plot-ready files

inline void write_accuracy_tsv(const std::filesystem::path& path,
                               const std::vector<std::pair<double, double>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "proportion\taccuracy\n";
  for (auto& [p, acc] : rows) out << p << '\t' << acc << '\n';
}

inline void write_f1_tsv(const std::filesystem::path& path,
                         const std::vector<std::pair<double, ClassificationScores>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "proportion\tclass\tf1\n";
  for (auto& [p, scores] : rows) {
    for (std::size_t c = 0; c < scores.classes.size(); ++c) {
      out << p << '\t' << scores.classes[c] << '\t' << scores.f1[c] << '\n';
    }
  }
}

inline void write_corr_tsv(const std::filesystem::path& path, const CorrelationMatrix& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) {
      if (j) out << '\t';
      const double v = m.at(i, j);
      if (std::isnan(v)) {
        out << "undefined";
      } else {
        out << v;
      }
    }
    out << '\n';
  }
}

// One row per mix proportion, one column per regressor family.
inline void write_r2_table_tsv(
    const std::filesystem::path& path,
    const std::vector<std::pair<double, std::map<std::string, double>>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "proportion";
  for (const auto& fam : regressor_families()) out << '\t' << fam;
  out << '\n';
  for (auto& [p, scores] : rows) {
    out << p;
    for (const auto& fam : regressor_families()) {
      out << '\t';
      auto it = scores.find(fam);
      if (it == scores.end()) {
        out << "n/a";
      } else {
        out << it->second;
      }
    }
    out << '\n';
  }
}

}  // namespace tst::eval
