#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "tst/tensor.hpp"

// Differentiable operations over Tensor<T>. Each op computes its output
// eagerly and, when a tape is supplied and any input requires a gradient,
// records a backward rule that accumulates into the inputs' grad buffers.
// Pass tape == nullptr for pure inference.
//
// Masking is additive with a large finite negative, never -inf, so forward
// results stay finite on finite inputs.

namespace tst {

inline constexpr double kMaskFill = -1e9;

namespace detail {

inline Shape leading_dims(const Shape& s, std::size_t drop) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(drop));
}

// Visits (out_flat, in_flat) pairs for a copy with dims d0 and d1 swapped.
template <typename Fn>
void for_each_transposed(const Shape& out_shape, const Shape& in_shape,
                         std::size_t d0, std::size_t d1, Fn&& fn) {
  const std::size_t r = out_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<std::size_t> idx(r, 0);
  const std::size_t n = shape_numel(out_shape);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t in_flat = 0;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t src = (i == d0) ? d1 : (i == d1) ? d0 : i;
      in_flat += idx[i] * in_strides[src];
    }
    fn(o, in_flat);
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                         shape_str(b) + " differ");
  }
}

}  // namespace detail

// ---------------------------------------------------------------- matmul

// a: [.., m, k] x b: [.., k, n] -> [.., m, n]; leading dims must be identical.
template <typename T>
Tensor<T> matmul(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.size() != sb.size()) {
    throw DimensionError("matmul: incompatible ranks for " + shape_str(sa) +
                         " x " + shape_str(sb));
  }
  const std::size_t r = sa.size();
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (sa[i] != sb[i]) {
      throw DimensionError("matmul: batch dims differ for " + shape_str(sa) +
                           " x " + shape_str(sb));
    }
  }
  const std::size_t m = sa[r - 2], k = sa[r - 1];
  const std::size_t k2 = sb[r - 2], n = sb[r - 1];
  if (k != k2) {
    throw DimensionError("matmul: inner dims disagree for " + shape_str(sa) +
                         " x " + shape_str(sb));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= sa[i];

  Shape os = sa;
  os[r - 1] = n;
  Tensor<T> out(os);
  {
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (std::size_t bt = 0; bt < batch; ++bt) {
      const T* ap = ad.data() + bt * m * k;
      const T* bp = bd.data() + bt * k * n;
      T* op = od.data() + bt * m * n;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          const T av = ap[i * k + t];
          if (av == T(0)) continue;
          for (std::size_t j = 0; j < n; ++j) op[i * n + j] += av * bp[t * n + j];
        }
      }
    }
  }

  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out, batch, m, k, n]() {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        const auto& bd = b.data();
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const T* gp = g.data() + bt * m * n;
          const T* bp = bd.data() + bt * k * n;
          T* gap = ga.data() + bt * m * k;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const T gv = gp[i * n + j];
              if (gv == T(0)) continue;
              for (std::size_t t = 0; t < k; ++t) gap[i * k + t] += gv * bp[t * n + j];
            }
        }
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        const auto& ad = a.data();
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const T* gp = g.data() + bt * m * n;
          const T* ap = ad.data() + bt * m * k;
          T* gbp = gb.data() + bt * k * n;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              const T av = ap[i * k + t];
              if (av == T(0)) continue;
              for (std::size_t j = 0; j < n; ++j) gbp[t * n + j] += av * gp[i * n + j];
            }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------- reshaping

template <typename T>
Tensor<T> reshape(GradTape<T>* tape, const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(new_shape) + " changes element count");
  }
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.data());
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() {
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(GradTape<T>* tape, const Tensor<T>& x, std::size_t d0, std::size_t d1) {
  if (d0 >= x.rank() || d1 >= x.rank()) {
    throw DimensionError("transpose: dims out of range for " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  std::swap(os[d0], os[d1]);
  Tensor<T> out(os);
  {
    const auto& xd = x.data();
    auto& od = out.data();
    detail::for_each_transposed(os, x.shape(), d0, d1,
                                [&](std::size_t o, std::size_t i) { od[o] = xd[i]; });
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    Shape in_shape = x.shape();
    tape->record(out, [x, out, os, in_shape, d0, d1]() {
      const auto& g = out.grad();
      auto& gx = x.grad();
      detail::for_each_transposed(os, in_shape, d0, d1,
                                  [&](std::size_t o, std::size_t i) { gx[i] += g[o]; });
    });
  }
  return out;
}

// ------------------------------------------------------------- pointwise

template <typename T>
Tensor<T> add(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  {
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out]() {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  {
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out]() {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        const auto& bd = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        const auto& ad = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(GradTape<T>* tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = factor * xd[i];
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, factor]() {
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

// x: [.., d] + bias: [d], broadcast over rows.
template <typename T>
Tensor<T> add_bias(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " +
                         shape_str(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) od[r * d + j] = xd[r * d + j] + bd[j];
  }
  if (tape && (x.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out, [x, bias, out, rows, d]() {
      const auto& g = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto& gb = bias.grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(GradTape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() {
      const auto& g = out.grad();
      const auto& xd = x.data();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xd[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(GradTape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) {
      const T v = xd[i];
      od[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                        : std::exp(v) / (T(1) + std::exp(v));
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() {
      const auto& g = out.grad();
      const auto& od = out.data();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * od[i] * (T(1) - od[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh_act(GradTape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::tanh(xd[i]);
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() {
      const auto& g = out.grad();
      const auto& od = out.data();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - od[i] * od[i]);
    });
  }
  return out;
}

// Inverted dropout: in training mode zeroes each element with probability p
// and scales survivors by 1/(1-p); outside training it is the identity.
template <typename T>
Tensor<T> dropout(GradTape<T>* tape, const Tensor<T>& x, double p,
                  std::mt19937_64* rng, bool training) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  if (!rng) throw ConfigError("dropout in training mode needs an rng");

  const T keep_scale = T(1.0 / (1.0 - p));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = (u(*rng) < p) ? T(0) : keep_scale;

  Tensor<T> out(x.shape());
  {
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * mask[i];
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, mask = std::move(mask)]() {
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// --------------------------------------------------------- masked softmax

// Softmax over the last dim. Masked positions get kMaskFill added before
// normalization; rows that are masked in full return the uniform
// distribution (and propagate no gradient, being constant).
template <typename T>
Tensor<T> masked_softmax(GradTape<T>* tape, const Tensor<T>& logits, const BoolMask& mask) {
  const Shape& ls = logits.shape();
  if (ls.empty()) throw DimensionError("masked_softmax: scalar input");
  const Shape& ms = mask.shape;
  if (ms.size() > ls.size()) {
    throw DimensionError("masked_softmax: mask rank exceeds logits rank");
  }
  for (std::size_t k = 0; k < ms.size(); ++k) {
    const std::size_t ldim = ls[ls.size() - ms.size() + k];
    if (ms[k] != 1 && ms[k] != ldim) {
      throw DimensionError("masked_softmax: mask " + shape_str(ms) +
                           " not broadcastable to " + shape_str(ls));
    }
  }
  if (mask.masked.size() != shape_numel(ms)) {
    throw DimensionError("masked_softmax: mask buffer does not match its shape");
  }

  const std::size_t n = ls.back();
  const std::size_t rows = logits.numel() / n;
  Tensor<T> out(ls);
  std::vector<std::uint8_t> row_uniform(rows, 0);

  const auto& xd = logits.data();
  auto& od = out.data();
  std::vector<std::size_t> lead(ls.size() - 1, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    // decompose r into the leading multi-index
    {
      std::size_t rem = r;
      for (std::size_t i = lead.size(); i-- > 0;) {
        lead[i] = rem % ls[i];
        rem /= ls[i];
      }
    }
    // broadcast offsets into the mask for this row
    std::size_t base = 0, last_stride = 0;
    {
      std::size_t stride = 1;
      for (std::size_t k = ms.size(); k-- > 0;) {
        const std::size_t ldim_index = ls.size() - ms.size() + k;
        if (ldim_index == ls.size() - 1) {
          last_stride = (ms[k] == 1) ? 0 : stride;
        } else {
          const std::size_t coord = (ms[k] == 1) ? 0 : lead[ldim_index];
          base += coord * stride;
        }
        stride *= ms[k];
      }
    }
    auto masked_at = [&](std::size_t j) -> bool {
      return mask.masked[base + j * last_stride] != 0;
    };

    const T* xp = xd.data() + r * n;
    T* op = od.data() + r * n;
    bool all_masked = true;
    for (std::size_t j = 0; j < n && all_masked; ++j)
      if (!masked_at(j)) all_masked = false;
    if (all_masked) {
      row_uniform[r] = 1;
      const T uni = T(1) / T(n);
      for (std::size_t j = 0; j < n; ++j) op[j] = uni;
      continue;
    }
    T mx = std::numeric_limits<T>::lowest();
    for (std::size_t j = 0; j < n; ++j) {
      const T v = xp[j] + (masked_at(j) ? T(kMaskFill) : T(0));
      if (v > mx) mx = v;
    }
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T v = xp[j] + (masked_at(j) ? T(kMaskFill) : T(0));
      op[j] = std::exp(v - mx);
      sum += op[j];
    }
    for (std::size_t j = 0; j < n; ++j) op[j] /= sum;
  }

  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [logits, out, rows, n, row_uniform = std::move(row_uniform)]() {
      const auto& g = out.grad();
      const auto& yd = out.data();
      auto& gx = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (row_uniform[r]) continue;
        const T* yp = yd.data() + r * n;
        const T* gp = g.data() + r * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += gp[j] * yp[j];
        T* gxp = gx.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gxp[j] += yp[j] * (gp[j] - dot);
      }
    });
  }
  return out;
}

// -------------------------------------------------------------- layer norm

// Per-last-dimension standardization (population variance) followed by an
// affine transform with gain and bias.
template <typename T>
Tensor<T> layer_norm(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  if (eps <= T(0)) throw ConfigError("layer_norm eps must be positive");
  const Shape& xs = x.shape();
  if (xs.empty() || gain.rank() != 1 || bias.rank() != 1 ||
      gain.dim(0) != xs.back() || bias.dim(0) != xs.back()) {
    throw DimensionError("layer_norm: x " + shape_str(xs) + ", gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t d = xs.back();
  const std::size_t rows = x.numel() / d;

  Tensor<T> out(xs);
  std::vector<T> means(rows), invs(rows);
  {
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xp = xd.data() + r * d;
      T mean = T(0);
      for (std::size_t j = 0; j < d; ++j) mean += xp[j];
      mean /= T(d);
      T var = T(0);
      for (std::size_t j = 0; j < d; ++j) {
        const T c = xp[j] - mean;
        var += c * c;
      }
      var /= T(d);
      const T inv = T(1) / std::sqrt(var + eps);
      means[r] = mean;
      invs[r] = inv;
      T* op = od.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) op[j] = (xp[j] - mean) * inv * gd[j] + bd[j];
    }
  }

  if (tape && (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out, [x, gain, bias, out, rows, d, means = std::move(means),
                       invs = std::move(invs)]() {
      const auto& g = out.grad();
      const auto& xd = x.data();
      const auto& gd = gain.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xp = xd.data() + r * d;
        const T* gp = g.data() + r * d;
        const T inv = invs[r];
        const T mean = means[r];
        if (gain.requires_grad() || bias.requires_grad()) {
          auto* ggain = gain.requires_grad() ? gain.grad().data() : nullptr;
          auto* gbias = bias.requires_grad() ? bias.grad().data() : nullptr;
          for (std::size_t j = 0; j < d; ++j) {
            if (ggain) ggain[j] += gp[j] * (xp[j] - mean) * inv;
            if (gbias) gbias[j] += gp[j];
          }
        }
        if (x.requires_grad()) {
          T s1 = T(0), s2 = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxhat = gp[j] * gd[j];
            const T xhat = (xp[j] - mean) * inv;
            s1 += dxhat;
            s2 += dxhat * xhat;
          }
          s1 /= T(d);
          s2 /= T(d);
          T* gxp = x.grad().data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const T dxhat = gp[j] * gd[j];
            const T xhat = (xp[j] - mean) * inv;
            gxp[j] += inv * (dxhat - s1 - xhat * s2);
          }
        }
      }
    });
  }
  return out;
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(GradTape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  {
    const auto& xd = x.data();
    T acc = T(0);
    for (std::size_t i = 0; i < xd.size(); ++i) acc += xd[i];
    out.data()[0] = acc;
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() {
      const T g = out.grad()[0];
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// ------------------------------------------------------------------ linear

// x: [.., in] -> [.., out] through weight [in, out] plus bias [out].
template <typename T>
Tensor<T> linear(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: x " + shape_str(x.shape()) + ", w " +
                         shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), outw = w.dim(1);
  const std::size_t rows = x.numel() / in;
  Tensor<T> flat = reshape(tape, x, Shape{rows, in});
  Tensor<T> y = add_bias(tape, matmul(tape, flat, w), b);
  Shape os = x.shape();
  os.back() = outw;
  return reshape(tape, y, std::move(os));
}

}  // namespace tst
