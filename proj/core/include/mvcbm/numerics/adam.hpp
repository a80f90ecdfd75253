#pragma once

#include <cmath>
#include <cstdint>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/param_tree.hpp"

namespace mvcbm::num {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  ParamTree<T> m;
  ParamTree<T> v;
  std::int64_t t = 0;

  static AdamState zeros_like(const ParamTree<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

// One bias-corrected Adam update, in place. Non-trainable leaves are skipped.
template <typename T>
void adam_step(ParamTree<T>& params, const GradTree<T>& grads, AdamState<T>& state, const AdamOptions& opt) {
  if (!params.same_structure(grads) || !params.same_structure(state.m) || !params.same_structure(state.v)) {
    throw ShapeError("adam_step: parameter, gradient, and moment trees differ in structure");
  }
  if (!(opt.lr > 0.0)) throw InvalidArgument("adam_step: learning rate must be positive");
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const T b1 = static_cast<T>(opt.beta1);
  const T b2 = static_cast<T>(opt.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(opt.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(opt.beta2, t)));
  const T lr = static_cast<T>(opt.lr);
  const T eps = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto g = grads[i].value.array();
    auto m = state.m[i].value.array();
    auto v = state.v[i].value.array();
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    params[i].value.array() -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

}  // namespace mvcbm::num
