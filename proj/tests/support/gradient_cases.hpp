#pragma once

// Randomized finite-difference instances, one family per differentiable
// kernel. Shared by the unit tests and the acceptance runner.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvcbm/numerics/gradcheck.hpp"
#include "mvcbm/numerics/layers.hpp"
#include "mvcbm/numerics/ops.hpp"

namespace mvcbm::testutil {

struct GradientCase {
  std::string kernel;
  std::function<num::FiniteDiffReport(std::uint64_t seed)> run;
};

namespace gc_detail {

using num::LayerSpec;
using num::Matrix;
using num::ParamTree;
using num::Tape;
using num::Var;
using MatD = Matrix<double>;

inline MatD normal(std::mt19937_64& gen, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  std::normal_distribution<double> d(0.0, s);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(gen);
  return m;
}

inline int pick(std::mt19937_64& gen, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); }

// Projects to a few random directions and squares, so every output
// coordinate matters and the loss is not linear in it.
inline Var<double> readout(Var<double> out, const MatD& proj) {
  return num::sum_squares(num::linear(out, out.tape->constant(proj)));
}

inline num::Segments random_segments(std::mt19937_64& gen, int batch, int max_len) {
  std::vector<int> lens(static_cast<std::size_t>(batch));
  for (auto& l : lens) l = pick(gen, 1, max_len);
  return num::Segments::from_lengths(lens);
}

// Input held as a parameter so the gradient w.r.t. data is checked too.
inline ParamTree<double> with_input(std::mt19937_64& gen, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  ParamTree<double> p;
  p.add("x", {r, c}).value = normal(gen, r, c, s);
  return p;
}

}  // namespace gc_detail

inline std::vector<GradientCase> gradient_cases() {
  using namespace gc_detail;
  std::vector<GradientCase> cases;

  cases.push_back({"linear", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 8), in = pick(gen, 1, 7), out = pick(gen, 1, 6);
                     auto p = with_input(gen, n, in);
                     p.add("w", {out, in}).value = normal(gen, out, in);
                     p.add("b", {out}).value = normal(gen, 1, out);
                     const MatD proj = normal(gen, 2, out);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::linear(t.param(ps, "x"), t.param(ps, "w"), t.param(ps, "b")), proj);
                     });
                   }});

  cases.push_back({"relu", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 8), d = pick(gen, 1, 6);
                     auto p = with_input(gen, n, d);
                     // keep entries away from the kink so +-eps never crosses it
                     auto& x = p.at("x").value;
                     for (Eigen::Index i = 0; i < x.size(); ++i) {
                       double& v = x.data()[i];
                       v = (v < 0 ? -1.0 : 1.0) * (0.05 + std::abs(v));
                     }
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::relu(t.param(ps, "x")), proj);
                     });
                   }});

  cases.push_back({"sigmoid", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 8), d = pick(gen, 1, 6);
                     auto p = with_input(gen, n, d, 2.0);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::sigmoid(t.param(ps, "x")), proj);
                     });
                   }});

  cases.push_back({"tanh", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 8), d = pick(gen, 1, 6);
                     auto p = with_input(gen, n, d, 1.5);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::tanh(t.param(ps, "x")), proj);
                     });
                   }});

  cases.push_back({"dropout", [](std::uint64_t seed) {
                     // The mask is a function of the tape seed, fixed across the
                     // perturbed evaluations.
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 2, 8), d = pick(gen, 2, 6);
                     auto p = with_input(gen, n, d);
                     const double rate = std::uniform_real_distribution<double>(0.05, 0.6)(gen);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(
                         p,
                         [&](Tape<double>& t, const ParamTree<double>& ps) {
                           return readout(num::dropout(t.param(ps, "x"), rate), proj);
                         },
                         1e-3, 400, seed);
                   }});

  cases.push_back({"batch_norm_train", [](std::uint64_t seed) {
                     // Batch statistics make the output invariant to shifting or
                     // scaling a column, so raw inputs (and a purely linear layer
                     // in front) carry structurally near-zero gradients that sit
                     // below rounding noise. Checked as in the encoder instead:
                     // linear -> tanh -> batch norm.
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 4, 10), in = pick(gen, 2, 4), d = pick(gen, 1, 5);
                     std::vector<LayerSpec> specs{LayerSpec::linear(in, d), LayerSpec::tanh(d), LayerSpec::batch_norm(d)};
                     Rng rng(seed);
                     auto p = num::build_mlp<double>(specs, rng);
                     p.at("layer0.bias").value = normal(gen, 1, d, 0.5);
                     p.at("layer2.gamma").value = normal(gen, 1, d);
                     p.at("layer2.beta").value = normal(gen, 1, d);
                     const MatD x = normal(gen, n, in);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::forward_layers(t, ps, std::span<const LayerSpec>(specs), t.constant(x)),
                                      proj);
                     });
                   }});

  cases.push_back({"batch_norm_eval", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 6), d = pick(gen, 1, 5);
                     auto p = with_input(gen, n, d);
                     p.add("gamma", {d}).value = normal(gen, 1, d);
                     p.add("beta", {d}).value = normal(gen, 1, d);
                     p.add("mean", {d}, false).value = normal(gen, 1, d);
                     p.add("var", {d}, false).value = normal(gen, 1, d).array().abs() + 0.5;
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(
                         p,
                         [&](Tape<double>& t, const ParamTree<double>& ps) {
                           num::BatchNormStats<double> stats{&ps, ps.index_of("mean"), ps.index_of("var")};
                           return readout(num::batch_norm(t.param(ps, "x"), t.param(ps, "gamma"),
                                                          t.param(ps, "beta"), stats),
                                          proj);
                         },
                         1e-3, 400, seed, num::Mode::kEval);
                   }});

  cases.push_back({"segment_mean", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int b = pick(gen, 1, 5), d = pick(gen, 1, 5);
                     const auto segs = random_segments(gen, b, 4);
                     auto p = with_input(gen, segs.total(), d);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::segment_mean(t.param(ps, "x"), segs), proj);
                     });
                   }});

  cases.push_back({"lstm", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int b = pick(gen, 1, 4), d = pick(gen, 1, 4), h = pick(gen, 1, 4);
                     const auto segs = random_segments(gen, b, 4);
                     std::vector<LayerSpec> specs{LayerSpec::lstm(d, h)};
                     Rng rng(seed);
                     auto p = num::build_mlp<double>(specs, rng);
                     p.add("x", {segs.total(), d}).value = normal(gen, segs.total(), d);
                     const MatD proj = normal(gen, 2, h);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::forward_layers(t, ps, std::span<const LayerSpec>(specs), t.param(ps, "x"),
                                                          &segs),
                                      proj);
                     });
                   }});

  cases.push_back({"concat_cols", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 6), da = pick(gen, 1, 4), db = pick(gen, 0, 4);
                     auto p = with_input(gen, n, da);
                     p.add("y", {n, db}).value = normal(gen, n, db);
                     const MatD proj = normal(gen, 2, da + db);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return readout(num::concat_cols(t.param(ps, "x"), t.param(ps, "y")), proj);
                     });
                   }});

  cases.push_back({"weighted_bce", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 8), k = pick(gen, 1, 5);
                     auto p = with_input(gen, n, k, 2.0);
                     std::uniform_real_distribution<double> u(0.0, 1.0);
                     MatD q(n, k);
                     for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = u(gen) < 0.3 ? std::round(u(gen)) : u(gen);
                     const bool broadcast = u(gen) < 0.5;
                     MatD w(n, broadcast ? 1 : k);
                     for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.1 + u(gen);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       return num::weighted_bce(num::sigmoid(t.param(ps, "x")), q, w);
                     });
                   }});

  cases.push_back({"affine_combination", [](std::uint64_t seed) {
                     std::mt19937_64 gen(seed);
                     const int n = pick(gen, 1, 6), d = pick(gen, 1, 5);
                     auto p = with_input(gen, n, d);
                     p.add("y", {n, d}).value = normal(gen, n, d);
                     const double a = normal(gen, 1, 1)(0, 0), b = normal(gen, 1, 1)(0, 0), c = normal(gen, 1, 1)(0, 0);
                     const MatD proj = normal(gen, 2, d);
                     return num::finite_diff_report(p, [&](Tape<double>& t, const ParamTree<double>& ps) {
                       auto x = t.param(ps, "x");
                       auto y = t.param(ps, "y");
                       return num::axpby(readout(num::axpby(x, a, y, b) - num::scale(y, c), proj), 1.0,
                                         num::sum(x + y), 0.5);
                     });
                   }});

  cases.push_back({"three_layer_net", [](std::uint64_t seed) {
                     // encoder -> fusion -> sigmoid head -> weighted BCE, with a
                     // random activation mix
                     std::mt19937_64 gen(seed);
                     const int d = pick(gen, 2, 6), h1 = pick(gen, 2, 6), h2 = pick(gen, 2, 5), k = pick(gen, 1, 3);
                     const bool use_lstm = pick(gen, 0, 1) == 1;
                     const auto segs = random_segments(gen, pick(gen, 4, 6), 3);
                     std::vector<LayerSpec> enc{LayerSpec::linear(d, h1), LayerSpec::tanh(h1), LayerSpec::batch_norm(h1),
                                                LayerSpec::linear(h1, h2)};
                     std::vector<LayerSpec> fuse;
                     if (use_lstm) fuse.push_back(LayerSpec::lstm(h2, h2));
                     std::vector<LayerSpec> head{LayerSpec::linear(h2, k), LayerSpec::sigmoid(k)};
                     Rng rng(seed);
                     ParamTree<double> p;
                     p.append("enc.", num::build_mlp<double>(enc, rng));
                     p.append("fuse.", num::build_mlp<double>(fuse, rng));
                     p.append("head.", num::build_mlp<double>(head, rng));
                     const MatD x = normal(gen, segs.total(), d);
                     const MatD y = (normal(gen, segs.count(), k).array() > 0.0).cast<double>();
                     const MatD w = MatD::Constant(segs.count(), 1, 1.0 / static_cast<double>(segs.count()));
                     return num::finite_diff_report(
                         p,
                         [&](Tape<double>& t, const ParamTree<double>& ps) {
                           auto hv = num::forward_layers(t, ps, std::span<const LayerSpec>(enc), t.constant(x),
                                                         nullptr, {}, "enc.");
                           auto fused = use_lstm ? num::forward_layers(t, ps, std::span<const LayerSpec>(fuse), hv,
                                                                       &segs, {}, "fuse.")
                                                 : num::segment_mean(hv, segs);
                           auto out = num::forward_layers(t, ps, std::span<const LayerSpec>(head), fused, nullptr,
                                                          {}, "head.");
                           return num::weighted_bce(out, y, w);
                         },
                         1e-3, 400, seed);
                   }});

  return cases;
}

}  // namespace mvcbm::testutil
