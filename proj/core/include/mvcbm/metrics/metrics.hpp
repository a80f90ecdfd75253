#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/model/models.hpp"

namespace mvcbm::metrics {

using num::Matrix;

// Probability that a random positive scores above a random negative, ties
// counting one half. Labels are 0/1.
double auroc(std::span<const double> scores, std::span<const double> labels);
// Average precision: sum over descending distinct thresholds of
// (R_n - R_{n-1}) * P_n.
double aupr(std::span<const double> scores, std::span<const double> labels);
// Mean squared error between probabilities and 0/1 labels.
double brier(std::span<const double> probs, std::span<const double> labels);
// Smallest FPR among thresholds reaching TPR >= level, for each level in (0, 1].
std::vector<double> fpr_at_tpr(std::span<const double> scores, std::span<const double> labels,
                               std::span<const double> levels);

struct CondCorr {
  double median = 0.0;
  std::size_t pairs = 0;     // (i, j, class) triples in the median
  std::size_t excluded = 0;  // triples dropped for a zero-variance column
};

// median over (i, j, class) of |Pearson(C[:, i], Z[:, j])| within each class
// of y. Every class present needs at least 3 samples.
CondCorr median_abs_cond_corr(const Matrix<double>& c_hat, const Matrix<double>& z_hat,
                              std::span<const double> labels);

struct MetricSet {
  double auroc = 0.0;
  double aupr = 0.0;
  double brier = 0.0;
};

struct EvalReport {
  std::size_t samples = 0;
  MetricSet target;
  // One entry per concept output; empty for models without concepts.
  std::vector<MetricSet> concepts;
  std::vector<std::pair<double, double>> fpr_at_tpr;  // (level, fpr)
  nlohmann::json condition = nlohmann::json::object();

  double mean_concept_auroc() const;
  // One JSON record per metric, each carrying the condition fields.
  std::vector<nlohmann::json> records() const;
};

void to_json(nlohmann::json& j, const EvalReport& r);

MetricSet metric_set(std::span<const double> probs, std::span<const double> labels);

// Evaluates a model on every sample of ds, seen through model::eval_view.
EvalReport evaluate(const model::AnyModel& m, const MultiviewDataset& ds,
                    std::span<const double> tpr_levels = {});

std::vector<double> to_vector(const Matrix<float>& column);

}  // namespace mvcbm::metrics
