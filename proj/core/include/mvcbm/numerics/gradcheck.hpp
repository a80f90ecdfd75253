#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/tape.hpp"
#include "mvcbm/rng.hpp"

namespace mvcbm::num {

// Evaluates `loss(tape, params)` (which must return a scalar Var) and its
// exact gradient with respect to every leaf of params.
template <typename T, typename LossFn>
std::pair<T, GradTree<T>> compute_gradients(const ParamTree<T>& params, LossFn&& loss, Mode mode = Mode::kTrain,
                                            std::uint64_t seed = 0) {
  Tape<T> tape(mode, seed);
  Var<T> out = loss(tape, params);
  const T value = out.value()(0, 0);
  if (!std::isfinite(static_cast<double>(value))) throw NonFiniteError("loss", "");
  tape.backward(out);
  GradTree<T> grads = tape.gradients(params);
  for (const auto& leaf : grads.leaves()) {
    if (!leaf.value.allFinite()) throw NonFiniteError(leaf.name, "gradient");
  }
  return {value, std::move(grads)};
}

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::int64_t worst_index = -1;
  std::size_t coordinates_checked = 0;
};

// Compares analytic gradients against central differences with step eps,
// refined by one Richardson step, (4 D(eps/2) - D(eps)) / 3, which removes
// the O(eps^2) truncation term. Trees with more than `max_coordinates`
// trainable entries are checked on a random subsample of that many
// coordinates. The loss must be a deterministic function of the parameters;
// dropout masks are fixed by `seed`. Relative error uses max(|a|, |n|, 1e-8).
template <typename LossFn>
FiniteDiffReport finite_diff_report(const ParamTree<double>& params, LossFn&& loss, double eps = 1e-3,
                                    std::size_t max_coordinates = 400, std::uint64_t seed = 0,
                                    Mode mode = Mode::kTrain) {
  auto [value, grads] = compute_gradients<double>(params, loss, mode, seed);
  (void)value;
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    for (Eigen::Index j = 0; j < params[i].value.size(); ++j) coords.emplace_back(i, j);
  }
  if (coords.size() > max_coordinates) {
    std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ULL);
    std::shuffle(coords.begin(), coords.end(), gen);
    coords.resize(max_coordinates);
  }
  ParamTree<double> work = params;
  auto eval = [&]() {
    Tape<double> tape(mode, seed);
    return loss(tape, static_cast<const ParamTree<double>&>(work)).value()(0, 0);
  };
  FiniteDiffReport report;
  for (const auto& [leaf, j] : coords) {
    double& x = work[leaf].value.data()[j];
    const double saved = x;
    auto central = [&](double h) {
      x = saved + h;
      const double up = eval();
      x = saved - h;
      const double down = eval();
      x = saved;
      return (up - down) / (2.0 * h);
    };
    const double coarse = central(eps);
    const double fine = central(0.5 * eps);
    const double numeric = (4.0 * fine - coarse) / 3.0;
    const double analytic = grads[leaf].value.data()[j];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic - numeric) / denom;
    if (report.worst_index < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_leaf = params[leaf].name;
      report.worst_index = j;
    }
    ++report.coordinates_checked;
  }
  return report;
}

template <typename LossFn>
double finite_diff_check(const ParamTree<double>& params, LossFn&& loss, double eps = 1e-3,
                         std::size_t max_coordinates = 400, std::uint64_t seed = 0) {
  return finite_diff_report(params, std::forward<LossFn>(loss), eps, max_coordinates, seed).max_rel_error;
}

}  // namespace mvcbm::num
