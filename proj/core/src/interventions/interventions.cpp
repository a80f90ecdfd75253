#include "mvcbm/interventions/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm::interv {

void InterventionSpec::validate(std::size_t concept_count) const {
  std::set<std::size_t> seen;
  for (auto k : indices) {
    if (k >= concept_count) {
      throw InvalidArgument("concept index " + std::to_string(k) + " out of range (K=" +
                            std::to_string(concept_count) + ")");
    }
    if (!seen.insert(k).second) throw InvalidArgument("concept index " + std::to_string(k) + " repeated");
  }
  if (values && static_cast<std::size_t>(values->cols()) != indices.size()) {
    throw ShapeError("intervention has " + std::to_string(indices.size()) + " indices but " +
                     std::to_string(values->cols()) + " value columns");
  }
}

Matrix<float> replace_concepts(const Matrix<float>& c_hat, std::span<const std::size_t> indices,
                               const Matrix<float>& values) {
  if (values.rows() != c_hat.rows() || static_cast<std::size_t>(values.cols()) != indices.size()) {
    throw ShapeError("replacement values must be " + std::to_string(c_hat.rows()) + " x " +
                     std::to_string(indices.size()));
  }
  Matrix<float> out = c_hat;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= static_cast<std::size_t>(c_hat.cols())) throw InvalidArgument("concept index out of range");
    out.col(static_cast<Eigen::Index>(indices[j])) = values.col(static_cast<Eigen::Index>(j));
  }
  return out;
}

Matrix<float> intervene(const model::AnyModel& m, const model::Outputs& base, const InterventionSpec& spec,
                        const Matrix<float>* ground_truth) {
  spec.validate(static_cast<std::size_t>(base.c_hat.cols()));
  if (spec.indices.empty()) return base.y_hat;
  Matrix<float> values;
  if (spec.values) {
    values = *spec.values;
  } else {
    if (ground_truth == nullptr) throw InvalidArgument("intervention is missing replacement values");
    if (ground_truth->rows() != base.c_hat.rows() || ground_truth->cols() != base.c_hat.cols()) {
      throw ShapeError("ground-truth concepts do not match the predictions");
    }
    values.resize(base.c_hat.rows(), static_cast<Eigen::Index>(spec.indices.size()));
    for (std::size_t j = 0; j < spec.indices.size(); ++j) {
      values.col(static_cast<Eigen::Index>(j)) = ground_truth->col(static_cast<Eigen::Index>(spec.indices[j]));
    }
  }
  return model::target_from_concepts(m, replace_concepts(base.c_hat, spec.indices, values), base.z_hat);
}

Matrix<float> intervene(const model::AnyModel& m, const model::ViewBatch& batch, const InterventionSpec& spec) {
  const auto base = model::forward(m, batch.pack());
  return intervene(m, base, spec, batch.concepts ? &*batch.concepts : nullptr);
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void SweepCurve::summarize() {
  for (auto& p : points) {
    p.median = quantile(p.auroc, 0.5);
    p.q25 = quantile(p.auroc, 0.25);
    p.q75 = quantile(p.auroc, 0.75);
  }
}

std::vector<nlohmann::json> SweepCurve::records() const {
  std::vector<nlohmann::json> out;
  for (const auto& p : points) {
    out.push_back({{"size", p.size},
                   {"median", p.median},
                   {"q25", p.q25},
                   {"q75", p.q75},
                   {"auroc", p.auroc},
                   {"aupr", p.aupr}});
  }
  return out;
}

SweepCurve intervention_sweep(const model::AnyModel& m, const MultiviewDataset& test,
                              std::span<const std::size_t> sizes, int trials_per_size, Rng& rng) {
  if (trials_per_size < 1) throw InvalidArgument("need at least one trial per size");
  const MultiviewDataset view = model::eval_view(m, test);
  const auto rows = model::all_rows(view);
  const auto base = model::predict(m, view, rows);
  const Matrix<float> truth = model::concept_matrix(view, rows);
  const auto k = static_cast<std::size_t>(base.c_hat.cols());
  const auto labels = view.label_vector();
  SweepCurve curve;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] > k) throw InvalidArgument("intervention size " + std::to_string(sizes[i]) + " exceeds K");
    if (i > 0 && sizes[i] <= prev) throw InvalidArgument("intervention sizes must be strictly increasing");
    prev = sizes[i];
    SweepPoint p;
    p.size = sizes[i];
    for (int t = 0; t < trials_per_size; ++t) {
      std::vector<std::size_t> all(k);
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::shuffle(all.begin(), all.end(), rng.engine());
      InterventionSpec spec{{all.begin(), all.begin() + static_cast<std::ptrdiff_t>(sizes[i])}, std::nullopt};
      std::sort(spec.indices.begin(), spec.indices.end());
      const auto y = metrics::to_vector(intervene(m, base, spec, &truth));
      p.auroc.push_back(metrics::auroc(y, labels));
      p.aupr.push_back(metrics::aupr(y, labels));
    }
    curve.points.push_back(std::move(p));
  }
  curve.summarize();
  return curve;
}

SweepCurve pool(std::span<const SweepCurve> curves) {
  SweepCurve out;
  if (curves.empty()) return out;
  out.points = curves.front().points;
  for (std::size_t c = 1; c < curves.size(); ++c) {
    if (curves[c].points.size() != out.points.size()) throw ShapeError("sweep curves have different sizes");
    for (std::size_t i = 0; i < out.points.size(); ++i) {
      const auto& p = curves[c].points[i];
      if (p.size != out.points[i].size) throw ShapeError("sweep curves have different sizes");
      out.points[i].auroc.insert(out.points[i].auroc.end(), p.auroc.begin(), p.auroc.end());
      out.points[i].aupr.insert(out.points[i].aupr.end(), p.aupr.begin(), p.aupr.end());
    }
  }
  out.summarize();
  return out;
}

MultiviewDataset shuffle_views(const MultiviewDataset& ds, Rng& rng) {
  MultiviewDataset out(ds.max_views(), ds.view_dim(), ds.concept_count());
  const std::size_t p = ds.view_dim();
  std::vector<float> buf;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int v = ds.view_count(i);
    std::vector<std::size_t> order(static_cast<std::size_t>(v));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    buf.resize(static_cast<std::size_t>(v) * p);
    for (std::size_t j = 0; j < order.size(); ++j) {
      const auto src = ds.view(i, order[j]);
      std::copy(src.begin(), src.end(), buf.begin() + static_cast<std::ptrdiff_t>(j * p));
    }
    out.add_sample(buf, v, ds.concepts(i), ds.label(i), ds.split(i));
  }
  return out;
}

namespace {

void accumulate(metrics::MetricSet& acc, const metrics::MetricSet& x) {
  acc.auroc += x.auroc;
  acc.aupr += x.aupr;
  acc.brier += x.brier;
}

void divide(metrics::MetricSet& acc, double n) {
  acc.auroc /= n;
  acc.aupr /= n;
  acc.brier /= n;
}

}  // namespace

ShuffleComparison shuffled_view_eval(const model::AnyModel& m, const MultiviewDataset& test, Rng& rng, int repeats) {
  if (repeats < 1) throw InvalidArgument("need at least one shuffle repeat");
  ShuffleComparison out;
  out.ordered = metrics::evaluate(m, test);
  for (int r = 0; r < repeats; ++r) {
    const auto rep = metrics::evaluate(m, shuffle_views(test, rng));
    if (r == 0) {
      out.shuffled = rep;
      continue;
    }
    accumulate(out.shuffled.target, rep.target);
    for (std::size_t k = 0; k < rep.concepts.size(); ++k) accumulate(out.shuffled.concepts[k], rep.concepts[k]);
  }
  if (repeats > 1) {
    divide(out.shuffled.target, repeats);
    for (auto& c : out.shuffled.concepts) divide(c, repeats);
  }
  out.shuffled.condition["shuffled"] = true;
  out.shuffled.condition["repeats"] = repeats;
  return out;
}

}  // namespace mvcbm::interv
