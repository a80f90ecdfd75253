#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/ops.hpp"
#include "mvcbm/rng.hpp"

namespace mvcbm::num {

enum class LayerKind { kLinear, kRelu, kSigmoid, kTanh, kDropout, kBatchNorm, kLstm };

struct LayerSpec {
  LayerKind kind = LayerKind::kLinear;
  std::int64_t in = 0;
  std::int64_t out = 0;
  double rate = 0.0;  // dropout only

  static LayerSpec linear(std::int64_t in, std::int64_t out) { return {LayerKind::kLinear, in, out, 0.0}; }
  static LayerSpec relu(std::int64_t dim) { return {LayerKind::kRelu, dim, dim, 0.0}; }
  static LayerSpec sigmoid(std::int64_t dim) { return {LayerKind::kSigmoid, dim, dim, 0.0}; }
  static LayerSpec tanh(std::int64_t dim) { return {LayerKind::kTanh, dim, dim, 0.0}; }
  static LayerSpec dropout(std::int64_t dim, double rate) { return {LayerKind::kDropout, dim, dim, rate}; }
  static LayerSpec batch_norm(std::int64_t dim) { return {LayerKind::kBatchNorm, dim, dim, 0.0}; }
  static LayerSpec lstm(std::int64_t in, std::int64_t hidden) { return {LayerKind::kLstm, in, hidden, 0.0}; }

  bool operator==(const LayerSpec&) const = default;
};

std::string to_string(LayerKind kind);

inline std::string layer_prefix(std::size_t index) { return "layer" + std::to_string(index) + "."; }

inline void validate_specs(std::span<const LayerSpec> specs) {
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    if (s.in < 0 || s.out < 0 || (s.kind != LayerKind::kLinear && s.kind != LayerKind::kLstm && s.in != s.out)) {
      throw ShapeError("layer " + std::to_string(k) + " has invalid dimensions");
    }
    if (s.kind == LayerKind::kDropout && (s.rate < 0.0 || s.rate >= 1.0)) {
      throw InvalidArgument("layer " + std::to_string(k) + ": dropout rate must lie in [0, 1)");
    }
    if (k > 0 && specs[k - 1].out != s.in) {
      throw ShapeError("layer " + std::to_string(k) + " expects " + std::to_string(s.in) + " inputs but layer " +
                       std::to_string(k - 1) + " produces " + std::to_string(specs[k - 1].out));
    }
  }
}

// Allocates and initializes parameters for a layer stack. Linear weights are
// Kaiming-uniform with bound sqrt(6 / fan_in), biases zero; LSTM matrices and
// bias are uniform(-1/sqrt(h), 1/sqrt(h)); batch-norm starts at gamma = 1,
// beta = 0 with running mean 0 and variance 1.
template <typename T>
ParamTree<T> build_mlp(std::span<const LayerSpec> specs, Rng& rng) {
  validate_specs(specs);
  ParamTree<T> tree;
  auto fill_uniform = [&rng](Matrix<T>& m, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng.engine()));
  };
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    const std::string p = layer_prefix(k);
    switch (s.kind) {
      case LayerKind::kLinear: {
        auto& w = tree.add(p + "weight", {s.out, s.in});
        fill_uniform(w.value, s.in > 0 ? std::sqrt(6.0 / static_cast<double>(s.in)) : 0.0);
        tree.add(p + "bias", {s.out});
        break;
      }
      case LayerKind::kBatchNorm: {
        tree.add(p + "gamma", {s.out}).value.setOnes();
        tree.add(p + "beta", {s.out});
        tree.add(p + "running_mean", {s.out}, false);
        tree.add(p + "running_var", {s.out}, false).value.setOnes();
        break;
      }
      case LayerKind::kLstm: {
        const double bound = s.out > 0 ? 1.0 / std::sqrt(static_cast<double>(s.out)) : 0.0;
        fill_uniform(tree.add(p + "w_ih", {4 * s.out, s.in}).value, bound);
        fill_uniform(tree.add(p + "w_hh", {4 * s.out, s.out}).value, bound);
        fill_uniform(tree.add(p + "bias", {4 * s.out}).value, bound);
        break;
      }
      default:
        break;
    }
  }
  return tree;
}

// Runs a layer stack built by build_mlp. Rows of x are independent samples,
// except for an LSTM layer, which consumes `segments` of rows and emits one
// row per segment. Leaf names are looked up under `prefix`.
template <typename T>
Var<T> forward_layers(Tape<T>& tape, const ParamTree<T>& params, std::span<const LayerSpec> specs, Var<T> x,
                      const Segments* segments = nullptr, const BatchNormOptions& bn = {},
                      std::string_view prefix = {}) {
  if (!specs.empty() && x.cols() != specs.front().in) {
    throw ShapeError("input has " + std::to_string(x.cols()) + " features, first layer expects " +
                     std::to_string(specs.front().in));
  }
  Var<T> h = x;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    const std::string p = std::string(prefix) + layer_prefix(k);
    switch (s.kind) {
      case LayerKind::kLinear:
        h = linear(h, tape.param(params, p + "weight"), tape.param(params, p + "bias"));
        break;
      case LayerKind::kRelu:
        h = relu(h);
        break;
      case LayerKind::kSigmoid:
        h = sigmoid(h);
        break;
      case LayerKind::kTanh:
        h = tanh(h);
        break;
      case LayerKind::kDropout:
        h = dropout(h, s.rate);
        break;
      case LayerKind::kBatchNorm: {
        BatchNormStats<T> stats{&params, params.index_of(p + "running_mean"), params.index_of(p + "running_var")};
        h = batch_norm(h, tape.param(params, p + "gamma"), tape.param(params, p + "beta"), stats, bn);
        break;
      }
      case LayerKind::kLstm:
        if (segments == nullptr) throw InvalidArgument("lstm layer needs a segment layout");
        h = lstm_last_hidden(h, *segments, tape.param(params, p + "w_ih"), tape.param(params, p + "w_hh"),
                             tape.param(params, p + "bias"));
        break;
    }
  }
  return h;
}

// Evaluation-mode forward pass without gradient bookkeeping by the caller.
template <typename T>
Matrix<T> apply_layers(const ParamTree<T>& params, std::span<const LayerSpec> specs, const Matrix<T>& x,
                       const Segments* segments = nullptr) {
  Tape<T> tape(Mode::kEval);
  return forward_layers(tape, params, specs, tape.constant(x), segments).value();
}

}  // namespace mvcbm::num
