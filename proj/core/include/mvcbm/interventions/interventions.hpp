#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/metrics/metrics.hpp"
#include "mvcbm/model/models.hpp"

namespace mvcbm::interv {

using num::Matrix;

// Concept indices to overwrite and, optionally, the values to write
// (B x |S|, columns in `indices` order). Without values the batch's
// ground-truth concepts are used.
struct InterventionSpec {
  std::vector<std::size_t> indices;
  std::optional<Matrix<float>> values;

  void validate(std::size_t concept_count) const;
};

// c_hat with the columns in spec.indices replaced by `values` (B x |S|).
Matrix<float> replace_concepts(const Matrix<float>& c_hat, std::span<const std::size_t> indices,
                               const Matrix<float>& values);

// Target prediction after the intervention; the representation of an
// SSMVCBM is left as predicted.
Matrix<float> intervene(const model::AnyModel& m, const model::Outputs& base, const InterventionSpec& spec,
                        const Matrix<float>* ground_truth = nullptr);
Matrix<float> intervene(const model::AnyModel& m, const model::ViewBatch& batch, const InterventionSpec& spec);

struct SweepPoint {
  std::size_t size = 0;
  std::vector<double> auroc;  // one per trial (and model seed, after pooling)
  std::vector<double> aupr;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

struct SweepCurve {
  std::vector<SweepPoint> points;

  // Recomputes median and quartiles of each point's AUROC values.
  void summarize();
  std::vector<nlohmann::json> records() const;
};

// Linear-interpolation quantile of v at q in [0, 1].
double quantile(std::vector<double> v, double q);

// For each size and trial, one uniformly drawn subset shared by every sample
// of `test` (seen through model::eval_view) is set to its ground truth.
SweepCurve intervention_sweep(const model::AnyModel& m, const MultiviewDataset& test,
                              std::span<const std::size_t> sizes, int trials_per_size, Rng& rng);
// Pools trials of curves with identical sizes (e.g. across model seeds).
SweepCurve pool(std::span<const SweepCurve> curves);

// Every sample's views in a uniformly random order.
MultiviewDataset shuffle_views(const MultiviewDataset& ds, Rng& rng);

struct ShuffleComparison {
  metrics::EvalReport ordered;
  metrics::EvalReport shuffled;  // metrics averaged over repeats
};

ShuffleComparison shuffled_view_eval(const model::AnyModel& m, const MultiviewDataset& test, Rng& rng,
                                     int repeats = 1);

}  // namespace mvcbm::interv
