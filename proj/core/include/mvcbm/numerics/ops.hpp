#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/tape.hpp"

namespace mvcbm::num {

// Row ranges of a packed view matrix: sample b owns rows
// [offsets[b], offsets[b+1]). Every sample owns at least one row.
struct Segments {
  std::vector<Eigen::Index> offsets{0};

  Eigen::Index count() const { return static_cast<Eigen::Index>(offsets.size()) - 1; }
  Eigen::Index begin(Eigen::Index b) const { return offsets[b]; }
  Eigen::Index length(Eigen::Index b) const { return offsets[b + 1] - offsets[b]; }
  Eigen::Index total() const { return offsets.back(); }
  Eigen::Index max_length() const {
    Eigen::Index m = 0;
    for (Eigen::Index b = 0; b < count(); ++b) m = std::max(m, length(b));
    return m;
  }

  static Segments from_lengths(const std::vector<int>& lengths) {
    Segments s;
    s.offsets.reserve(lengths.size() + 1);
    for (int len : lengths) {
      if (len < 1) throw InvalidArgument("every sample needs at least one view");
      s.offsets.push_back(s.offsets.back() + len);
    }
    return s;
  }
};

namespace detail {

// Id the next recorded node will get; lets a backward closure refer to the
// output of its own op.
template <typename T>
Var<T> next_var(Tape<T>& tape) {
  return Var<T>{&tape, static_cast<int>(tape.node_count())};
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw InvalidArgument("variables live on different tapes");
}

}  // namespace detail

// y = x W^T + b, with W of shape (out, in) and b of length out.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt) {
  detail::same_tape(x, w);
  Tape<T>& tape = *x.tape;
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.cols() != wv.cols()) {
    throw ShapeError("linear: input has " + std::to_string(xv.cols()) + " features, weight expects " +
                     std::to_string(wv.cols()));
  }
  Matrix<T> out(xv.rows(), wv.rows());
  out.noalias() = xv * wv.transpose();
  if (!b) {
    return tape.record(std::move(out), {x, w}, [x, w](const Matrix<T>& g) {
      Tape<T>& t = *x.tape;
      if (t.requires_grad(x)) t.grad_buffer(x).noalias() += g * w.value();
      if (t.requires_grad(w)) t.grad_buffer(w).noalias() += g.transpose() * x.value();
    });
  }
  const Var<T> bias = *b;
  detail::same_tape(x, bias);
  if (bias.value().size() != wv.rows()) throw ShapeError("linear: bias length mismatch");
  out.rowwise() += bias.value().row(0);
  return tape.record(std::move(out), {x, w, bias}, [x, w, bias](const Matrix<T>& g) {
    Tape<T>& t = *x.tape;
    if (t.requires_grad(x)) t.grad_buffer(x).noalias() += g * w.value();
    if (t.requires_grad(w)) t.grad_buffer(w).noalias() += g.transpose() * x.value();
    if (t.requires_grad(bias)) t.grad_buffer(bias).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Matrix<T> out = x.value().cwiseMax(T(0));
  return x.tape->record(std::move(out), {x}, [x](const Matrix<T>& g) {
    x.tape->grad_buffer(x).array() += (x.value().array() > T(0)).select(g.array(), T(0));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Var<T> y = detail::next_var(tape);
  Matrix<T> out = (T(1) + (-x.value().array()).exp()).inverse().matrix();
  return tape.record(std::move(out), {x}, [x, y](const Matrix<T>& g) {
    const auto s = y.value().array();
    x.tape->grad_buffer(x).array() += g.array() * s * (T(1) - s);
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Var<T> y = detail::next_var(tape);
  Matrix<T> out = x.value().array().tanh().matrix();
  return tape.record(std::move(out), {x}, [x, y](const Matrix<T>& g) {
    const auto th = y.value().array();
    x.tape->grad_buffer(x).array() += g.array() * (T(1) - th.square());
  });
}

// Inverted dropout; identity outside training mode or when rate == 0.
template <typename T>
Var<T> dropout(Var<T> x, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw InvalidArgument("dropout rate must lie in [0, 1)");
  Tape<T>& tape = *x.tape;
  if (!tape.training() || rate == 0.0) return x;
  const auto& xv = x.value();
  Matrix<T> mask(xv.rows(), xv.cols());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = unif(tape.rng()) < rate ? T(0) : keep_scale;
  }
  Matrix<T> out = xv.cwiseProduct(mask);
  return tape.record(std::move(out), {x}, [x, mask = std::move(mask)](const Matrix<T>& g) {
    x.tape->grad_buffer(x).array() += g.array() * mask.array();
  });
}

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Running statistics of one batch-norm layer, stored as non-trainable leaves.
template <typename T>
struct BatchNormStats {
  const ParamTree<T>* tree = nullptr;
  std::size_t mean_leaf = 0;
  std::size_t var_leaf = 0;
};

// Normalizes each column over the rows of x. Training mode uses the batch
// statistics and stages an exponential update of the running statistics;
// evaluation mode uses the running statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormStats<T>& stats,
                  const BatchNormOptions& opts = {}) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  Tape<T>& tape = *x.tape;
  const auto& xv = x.value();
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) throw ShapeError("batch_norm: width mismatch");
  const T eps = static_cast<T>(opts.eps);
  const auto& running_mean = (*stats.tree)[stats.mean_leaf].value;
  const auto& running_var = (*stats.tree)[stats.var_leaf].value;

  Matrix<T> mean(1, d);
  Matrix<T> inv_std(1, d);
  if (tape.training()) {
    mean = xv.colwise().mean();
    Matrix<T> centered = xv.rowwise() - mean.row(0);
    Matrix<T> var = centered.array().square().colwise().sum().matrix() / static_cast<T>(n);
    inv_std = (var.array() + eps).rsqrt().matrix();
    const T m = static_cast<T>(opts.momentum);
    tape.stage_buffer(*stats.tree, stats.mean_leaf, ((T(1) - m) * running_mean.array() + m * mean.array()).matrix());
    if (n > 1) {
      const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
      tape.stage_buffer(*stats.tree, stats.var_leaf,
                        ((T(1) - m) * running_var.array() + m * unbias * var.array()).matrix());
    }
  } else {
    mean = running_mean;
    inv_std = (running_var.array() + eps).rsqrt().matrix();
  }
  Matrix<T> xhat = (xv.rowwise() - mean.row(0)).array().rowwise() * inv_std.row(0).array();
  Matrix<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const bool batch_stats = tape.training();
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), inv_std, batch_stats, n](const Matrix<T>& g) {
                       Tape<T>& t = *x.tape;
                       const auto gam = gamma.value().row(0).array();
                       if (t.requires_grad(gamma)) {
                         t.grad_buffer(gamma).row(0) += g.cwiseProduct(xhat).colwise().sum();
                       }
                       if (t.requires_grad(beta)) t.grad_buffer(beta).row(0) += g.colwise().sum();
                       if (!t.requires_grad(x)) return;
                       Matrix<T> gx = g.array().rowwise() * gam;  // d loss / d xhat
                       if (batch_stats) {
                         const Matrix<T> sum_g = gx.colwise().sum();
                         const Matrix<T> sum_gx = gx.cwiseProduct(xhat).colwise().sum();
                         const T inv_n = T(1) / static_cast<T>(n);
                         gx = ((gx.rowwise() - sum_g.row(0) * inv_n).array() -
                               xhat.array().rowwise() * (sum_gx.row(0).array() * inv_n))
                                  .matrix();
                       }
                       t.grad_buffer(x).array() += gx.array().rowwise() * inv_std.row(0).array();
                     });
}

// Per-segment arithmetic mean of the rows of x. Each column is summed in
// ascending value order, so the result is bit-identical under any
// permutation of rows within a segment.
template <typename T>
Var<T> segment_mean(Var<T> x, const Segments& segs) {
  const auto& xv = x.value();
  if (segs.total() != xv.rows()) throw ShapeError("segment_mean: segment layout does not cover the input");
  const Eigen::Index d = xv.cols();
  Matrix<T> out(segs.count(), d);
  std::vector<T> buf;
  for (Eigen::Index b = 0; b < segs.count(); ++b) {
    const Eigen::Index start = segs.begin(b);
    const Eigen::Index len = segs.length(b);
    if (len < 1) throw InvalidArgument("segment_mean: empty segment");
    buf.resize(static_cast<std::size_t>(len));
    for (Eigen::Index j = 0; j < d; ++j) {
      for (Eigen::Index r = 0; r < len; ++r) buf[static_cast<std::size_t>(r)] = xv(start + r, j);
      std::sort(buf.begin(), buf.end());
      T acc = T(0);
      for (T v : buf) acc += v;
      out(b, j) = acc / static_cast<T>(len);
    }
  }
  return x.tape->record(std::move(out), {x}, [x, segs](const Matrix<T>& g) {
    auto& gx = x.tape->grad_buffer(x);
    for (Eigen::Index b = 0; b < segs.count(); ++b) {
      const T inv = T(1) / static_cast<T>(segs.length(b));
      for (Eigen::Index r = 0; r < segs.length(b); ++r) gx.row(segs.begin(b) + r) += inv * g.row(b);
    }
  });
}

// Single-layer LSTM run over each segment in row order; returns the hidden
// state after the last row of every segment. Gate order i, f, g, o with
// w_ih (4H x D), w_hh (4H x H), and one bias of length 4H.
template <typename T>
Var<T> lstm_last_hidden(Var<T> x, const Segments& segs, Var<T> w_ih, Var<T> w_hh, Var<T> bias) {
  detail::same_tape(x, w_ih);
  detail::same_tape(x, w_hh);
  detail::same_tape(x, bias);
  Tape<T>& tape = *x.tape;
  const auto& xv = x.value();
  const Eigen::Index hidden = w_hh.value().cols();
  if (w_ih.value().rows() != 4 * hidden || w_hh.value().rows() != 4 * hidden || bias.value().size() != 4 * hidden) {
    throw ShapeError("lstm: gate matrices must have 4*hidden rows");
  }
  if (w_ih.value().cols() != xv.cols()) throw ShapeError("lstm: input width mismatch");
  if (segs.total() != xv.rows()) throw ShapeError("lstm: segment layout does not cover the input");

  struct Step {
    std::vector<Eigen::Index> active;  // sample indices with a row at this step
    Matrix<T> x;                       // gathered inputs
    Matrix<T> h_prev, c_prev;
    Matrix<T> gates;                   // activated i, f, g, o
    Matrix<T> tanh_c;
  };
  auto steps = std::make_shared<std::vector<Step>>();
  const Eigen::Index batch = segs.count();
  const Eigen::Index max_len = segs.max_length();
  Matrix<T> h = Matrix<T>::Zero(batch, hidden);
  Matrix<T> c = Matrix<T>::Zero(batch, hidden);
  const auto& wi = w_ih.value();
  const auto& wh = w_hh.value();
  const auto bvec = bias.value().row(0);

  for (Eigen::Index t = 0; t < max_len; ++t) {
    Step s;
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (segs.length(b) > t) s.active.push_back(b);
    }
    const auto n = static_cast<Eigen::Index>(s.active.size());
    s.x.resize(n, xv.cols());
    s.h_prev.resize(n, hidden);
    s.c_prev.resize(n, hidden);
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::Index b = s.active[static_cast<std::size_t>(k)];
      s.x.row(k) = xv.row(segs.begin(b) + t);
      s.h_prev.row(k) = h.row(b);
      s.c_prev.row(k) = c.row(b);
    }
    s.gates.resize(n, 4 * hidden);
    s.gates.noalias() = s.x * wi.transpose();
    s.gates.noalias() += s.h_prev * wh.transpose();
    s.gates.rowwise() += bvec;
    auto ga = s.gates.array();
    ga.leftCols(2 * hidden) = (T(1) + (-ga.leftCols(2 * hidden)).exp()).inverse();
    ga.middleCols(2 * hidden, hidden) = ga.middleCols(2 * hidden, hidden).tanh();
    ga.rightCols(hidden) = (T(1) + (-ga.rightCols(hidden)).exp()).inverse();
    Matrix<T> c_new = (ga.middleCols(hidden, hidden) * s.c_prev.array() +
                       ga.leftCols(hidden) * ga.middleCols(2 * hidden, hidden))
                          .matrix();
    s.tanh_c = c_new.array().tanh().matrix();
    Matrix<T> h_new = (ga.rightCols(hidden) * s.tanh_c.array()).matrix();
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::Index b = s.active[static_cast<std::size_t>(k)];
      h.row(b) = h_new.row(k);
      c.row(b) = c_new.row(k);
    }
    steps->push_back(std::move(s));
  }

  return tape.record(std::move(h), {x, w_ih, w_hh, bias},
                     [x, w_ih, w_hh, bias, segs, steps, hidden](const Matrix<T>& g_out) {
                       Tape<T>& tp = *x.tape;
                       const Eigen::Index batch = segs.count();
                       Matrix<T> dh = g_out;
                       Matrix<T> dc = Matrix<T>::Zero(batch, hidden);
                       const bool need_x = tp.requires_grad(x);
                       const bool need_wi = tp.requires_grad(w_ih);
                       const bool need_wh = tp.requires_grad(w_hh);
                       const bool need_b = tp.requires_grad(bias);
                       const auto& wi = w_ih.value();
                       const auto& wh = w_hh.value();
                       for (auto t = static_cast<Eigen::Index>(steps->size()) - 1; t >= 0; --t) {
                         const Step& s = (*steps)[static_cast<std::size_t>(t)];
                         const auto n = static_cast<Eigen::Index>(s.active.size());
                         Matrix<T> dh_t(n, hidden);
                         Matrix<T> dc_t(n, hidden);
                         for (Eigen::Index k = 0; k < n; ++k) {
                           const Eigen::Index b = s.active[static_cast<std::size_t>(k)];
                           dh_t.row(k) = dh.row(b);
                           dc_t.row(k) = dc.row(b);
                         }
                         const auto ga = s.gates.array();
                         const auto i_g = ga.leftCols(hidden);
                         const auto f_g = ga.middleCols(hidden, hidden);
                         const auto g_g = ga.middleCols(2 * hidden, hidden);
                         const auto o_g = ga.rightCols(hidden);
                         const auto tc = s.tanh_c.array();
                         Matrix<T> dgates(n, 4 * hidden);
                         auto dga = dgates.array();
                         const Matrix<T> dc_total =
                             (dc_t.array() + dh_t.array() * o_g * (T(1) - tc.square())).matrix();
                         const auto dct = dc_total.array();
                         dga.leftCols(hidden) = dct * g_g * i_g * (T(1) - i_g);
                         dga.middleCols(hidden, hidden) = dct * s.c_prev.array() * f_g * (T(1) - f_g);
                         dga.middleCols(2 * hidden, hidden) = dct * i_g * (T(1) - g_g.square());
                         dga.rightCols(hidden) = dh_t.array() * tc * o_g * (T(1) - o_g);

                         if (need_wi) tp.grad_buffer(w_ih).noalias() += dgates.transpose() * s.x;
                         if (need_wh) tp.grad_buffer(w_hh).noalias() += dgates.transpose() * s.h_prev;
                         if (need_b) tp.grad_buffer(bias).row(0) += dgates.colwise().sum();
                         if (need_x) {
                           Matrix<T> dx(n, wi.cols());
                           dx.noalias() = dgates * wi;
                           auto& gx = tp.grad_buffer(x);
                           for (Eigen::Index k = 0; k < n; ++k) {
                             const Eigen::Index b = s.active[static_cast<std::size_t>(k)];
                             gx.row(segs.begin(b) + t) += dx.row(k);
                           }
                         }
                         Matrix<T> dh_prev(n, hidden);
                         dh_prev.noalias() = dgates * wh;
                         const Matrix<T> dc_prev = (dct * f_g).matrix();
                         for (Eigen::Index k = 0; k < n; ++k) {
                           const Eigen::Index b = s.active[static_cast<std::size_t>(k)];
                           dh.row(b) = dh_prev.row(k);
                           dc.row(b) = dc_prev.row(k);
                         }
                       }
                     });
}

// [a, b] along columns.
template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row count mismatch");
  Matrix<T> out(av.rows(), av.cols() + bv.cols());
  out.leftCols(av.cols()) = av;
  out.rightCols(bv.cols()) = bv;
  const Eigen::Index split = av.cols();
  return a.tape->record(std::move(out), {a, b}, [a, b, split](const Matrix<T>& g) {
    Tape<T>& t = *a.tape;
    if (t.requires_grad(a)) t.grad_buffer(a) += g.leftCols(split);
    if (t.requires_grad(b)) t.grad_buffer(b) += g.rightCols(g.cols() - split);
  });
}

// sum_ij w_ij * BCE(p_ij, q_ij) with BCE(p, q) = -[q log p + (1 - q) log(1 - p)]
// and p clamped to [1e-7, 1 - 1e-7]. Targets q may be soft. `weights` is
// either the shape of p or a single column broadcast across p's columns.
template <typename T>
Var<T> weighted_bce(Var<T> probs, const Matrix<std::type_identity_t<T>>& targets,
                    const Matrix<std::type_identity_t<T>>& weights) {
  const auto& pv = probs.value();
  if (targets.rows() != pv.rows() || targets.cols() != pv.cols()) throw ShapeError("weighted_bce: target shape");
  const bool broadcast = weights.cols() == 1 && pv.cols() != 1;
  if (weights.rows() != pv.rows() || (!broadcast && weights.cols() != pv.cols())) {
    throw ShapeError("weighted_bce: weight shape");
  }
  static constexpr T lo = static_cast<T>(1e-7);
  static constexpr T hi = static_cast<T>(1) - static_cast<T>(1e-7);
  Matrix<T> w = broadcast ? Matrix<T>(weights.replicate(1, pv.cols())) : weights;
  const auto pc = pv.array().max(lo).min(hi);
  const auto q = targets.array();
  T loss = -(w.array() * (q * pc.log() + (T(1) - q) * (T(1) - pc).log())).sum();
  Matrix<T> out(1, 1);
  out(0, 0) = loss;
  return probs.tape->record(std::move(out), {probs}, [probs, targets, w = std::move(w)](const Matrix<T>& g) {
    const auto p = probs.value().array();
    const auto q = targets.array();
    const auto inside = (p > lo) && (p < hi);
    const auto d = w.array() * ((T(1) - q) / (T(1) - p) - q / p);
    probs.tape->grad_buffer(probs).array() += g(0, 0) * inside.select(d, T(0));
  });
}

// ca * a + cb * b for equally shaped a and b.
template <typename T>
Var<T> axpby(Var<T> a, T ca, Var<T> b, T cb) {
  detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("axpby: shape mismatch");
  Matrix<T> out = ca * a.value() + cb * b.value();
  return a.tape->record(std::move(out), {a, b}, [a, ca, b, cb](const Matrix<T>& g) {
    Tape<T>& t = *a.tape;
    if (t.requires_grad(a)) t.grad_buffer(a) += ca * g;
    if (t.requires_grad(b)) t.grad_buffer(b) += cb * g;
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Matrix<T> out = c * a.value();
  return a.tape->record(std::move(out), {a}, [a, c](const Matrix<T>& g) { a.tape->grad_buffer(a) += c * g; });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return axpby(a, T(1), b, T(1));
}

template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return axpby(a, T(1), b, T(-1));
}

// Sum of all entries, as a 1x1 result.
template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](const Matrix<T>& g) { a.tape->grad_buffer(a).array() += g(0, 0); });
}

template <typename T>
Var<T> sum_squares(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.tape->record(std::move(out), {a},
                        [a](const Matrix<T>& g) { a.tape->grad_buffer(a) += (T(2) * g(0, 0)) * a.value(); });
}

}  // namespace mvcbm::num
