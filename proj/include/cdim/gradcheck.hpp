#pragma once

#include "cdim/tape.hpp"

namespace cdim {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
};

/**
 * Compares the reverse-mode gradient of a scalar function with central
 * differences (f(x + h e_i) - f(x - h e_i)) / 2h.
 *
 * `f` must be callable as f(Var<U>) -> Var<U> for U = T and U = double.
 * The analytic gradient is taken at precision T; the finite differences
 * are always evaluated in double so that float builds are measured against
 * a reference that is not itself dominated by float rounding.
 *
 * Relative error per coordinate is |g - n| / max(|g|, |n|, floor) with
 * floor = max(1e-8, scale_floor * max_i |g_i|). A nonzero `scale_floor`
 * keeps coordinates whose gradient is orders of magnitude below the rest
 * of the tensor from being judged on rounding noise alone. When
 * `coordinates` is empty every coordinate is checked.
 */
template <typename T, typename F>
GradCheckResult gradient_check(F&& f, const Tensor<T>& input, double h = 1e-3,
                               std::span<const std::size_t> coordinates = {},
                               double scale_floor = 0.0) {
  std::vector<T> analytic;
  {
    Tape<T> tape;
    Var<T> x = tape.variable(input);
    Var<T> y = f(x);
    tape.backward(y);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  std::vector<std::size_t> all;
  if (coordinates.empty()) {
    all.resize(input.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coordinates = all;
  }
  double largest = 0;
  for (T g : analytic) largest = std::max(largest, std::abs(static_cast<double>(g)));
  const double floor = std::max(1e-8, scale_floor * largest);
  const Tensor<double> base = input.template cast<double>();
  auto eval = [&](std::size_t i, double delta) {
    Tensor<double> x = base;
    x[i] += delta;
    Tape<double> tape;
    return f(tape.constant(std::move(x))).value().item();
  };
  GradCheckResult r;
  for (std::size_t i : coordinates) {
    const double numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h);
    const double g = static_cast<double>(analytic.at(i));
    const double err =
        std::abs(g - numeric) / std::max({std::abs(g), std::abs(numeric), floor});
    if (err > r.max_relative_error || r.checked == 0) {
      r.max_relative_error = std::max(err, r.max_relative_error);
      r.worst_index = i;
      r.analytic_at_worst = g;
      r.numeric_at_worst = numeric;
    }
    ++r.checked;
  }
  return r;
}

}  // namespace cdim
