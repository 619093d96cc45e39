#pragma once

#include <string>
#include <vector>

#include "tst/ops.hpp"
#include "tst/tensor.hpp"

// Finite-difference verification of backward rules. The check runs the op at
// 64-bit precision, computes analytic gradients through the tape, then probes
// every input element with a central difference of step h and reports the
// worst relative error, err = |analytic - numeric| / max(1, |analytic|, |numeric|).

namespace tst {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-4;

// build_loss: (GradTape<double>*, inputs) -> scalar Tensor<double>. It must be
// a pure function of the input values so the probe evaluations are meaningful.
template <typename Fn>
GradCheckReport grad_check(const std::string& name, Fn&& build_loss,
                           std::vector<Tensor<double>> inputs,
                           double tolerance = kGradCheckTolerance,
                           double step = kGradCheckStep) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  GradTape<double> tape;
  Tensor<double> loss = build_loss(&tape, inputs);
  if (loss.numel() != 1) {
    throw DimensionError("grad_check: loss must be scalar, got " +
                         shape_str(loss.shape()));
  }
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  auto eval = [&]() {
    GradTape<double>* no_tape = nullptr;
    return build_loss(no_tape, inputs).data()[0];
  };

  GradCheckReport report{name, 0.0, false};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& buf = inputs[i].data();
    for (std::size_t e = 0; e < buf.size(); ++e) {
      const double saved = buf[e];
      buf[e] = saved + step;
      const double f_plus = eval();
      buf[e] = saved - step;
      const double f_minus = eval();
      buf[e] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[i][e];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_error) report.max_rel_error = rel;
    }
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

}  // namespace tst
