#include "mvcbm/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm::metrics {

namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts check_binary(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  Counts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1.0) {
      ++c.pos;
    } else if (labels[i] == 0.0) {
      ++c.neg;
    } else {
      throw InvalidArgument("labels must be 0 or 1");
    }
    if (!std::isfinite(scores[i])) throw InvalidArgument("scores must be finite");
  }
  return c;
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// (tp, fp) after each block of tied scores, in descending score order.
std::vector<std::pair<std::size_t, std::size_t>> step_points(std::span<const double> scores,
                                                             std::span<const double> labels) {
  const auto order = descending_order(scores);
  std::vector<std::pair<std::size_t, std::size_t>> pts;
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] == 1.0) {
      ++tp;
    } else {
      ++fp;
    }
    if (r + 1 == order.size() || scores[order[r + 1]] != scores[order[r]]) pts.emplace_back(tp, fp);
  }
  return pts;
}

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const double> labels) {
  const Counts c = check_binary(scores, labels);
  if (c.pos == 0 || c.neg == 0) throw InvalidArgument("auroc needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum of positives, with tied blocks sharing their mean rank.
  double rank2_pos = 0.0;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start;
    while (end < order.size() && scores[order[end]] == scores[order[start]]) ++end;
    const double rank2 = static_cast<double>(start + 1 + end);  // 2 * mean of ranks start+1 .. end
    for (std::size_t r = start; r < end; ++r) {
      if (labels[order[r]] == 1.0) rank2_pos += rank2;
    }
    start = end;
  }
  const double p = static_cast<double>(c.pos);
  const double n = static_cast<double>(c.neg);
  return (rank2_pos - p * (p + 1.0)) / (2.0 * p * n);
}

double aupr(std::span<const double> scores, std::span<const double> labels) {
  const Counts c = check_binary(scores, labels);
  if (c.pos == 0) throw InvalidArgument("aupr needs at least one positive");
  const double p = static_cast<double>(c.pos);
  double ap = 0.0;
  std::size_t prev_tp = 0;
  for (const auto& [tp, fp] : step_points(scores, labels)) {
    if (tp != prev_tp) {
      ap += (static_cast<double>(tp - prev_tp) / p) * (static_cast<double>(tp) / static_cast<double>(tp + fp));
      prev_tp = tp;
    }
  }
  return ap;
}

double brier(std::span<const double> probs, std::span<const double> labels) {
  check_binary(probs, labels);
  if (probs.empty()) throw InvalidArgument("brier of an empty sample");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0.0 || probs[i] > 1.0) throw InvalidArgument("probabilities must lie in [0, 1]");
    const double d = probs[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(probs.size());
}

std::vector<double> fpr_at_tpr(std::span<const double> scores, std::span<const double> labels,
                               std::span<const double> levels) {
  const Counts c = check_binary(scores, labels);
  if (c.pos == 0 || c.neg == 0) throw InvalidArgument("fpr_at_tpr needs both classes");
  const auto pts = step_points(scores, labels);
  std::vector<double> out;
  out.reserve(levels.size());
  for (double level : levels) {
    if (!(level > 0.0 && level <= 1.0)) throw InvalidArgument("TPR levels must lie in (0, 1]");
    // FPR grows along the step curve, so the first point reaching the level is the minimum.
    double best = 1.0;
    for (const auto& [tp, fp] : pts) {
      if (static_cast<double>(tp) >= level * static_cast<double>(c.pos)) {
        best = static_cast<double>(fp) / static_cast<double>(c.neg);
        break;
      }
    }
    out.push_back(best);
  }
  return out;
}

CondCorr median_abs_cond_corr(const Matrix<double>& c_hat, const Matrix<double>& z_hat,
                              std::span<const double> labels) {
  const auto n = static_cast<std::size_t>(c_hat.rows());
  if (static_cast<std::size_t>(z_hat.rows()) != n || labels.size() != n) {
    throw ShapeError("concepts, representations, and labels differ in length");
  }
  if (c_hat.cols() < 1 || z_hat.cols() < 1) throw InvalidArgument("need at least one concept and one representation");
  CondCorr out;
  std::vector<double> values;
  for (double cls : {0.0, 1.0}) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
    }
    if (rows.empty()) continue;
    if (rows.size() < 3) {
      throw InvalidArgument("class " + std::to_string(static_cast<int>(cls)) + " has fewer than 3 samples");
    }
    const Matrix<double> cs = c_hat(rows, Eigen::all);
    const Matrix<double> zs = z_hat(rows, Eigen::all);
    const Matrix<double> cc = cs.rowwise() - cs.colwise().mean();
    const Matrix<double> zc = zs.rowwise() - zs.colwise().mean();
    const Eigen::RowVectorXd c_ss = cc.colwise().squaredNorm();
    const Eigen::RowVectorXd z_ss = zc.colwise().squaredNorm();
    const Matrix<double> cov = cc.transpose() * zc;
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
      for (Eigen::Index j = 0; j < cov.cols(); ++j) {
        if (c_ss(i) == 0.0 || z_ss(j) == 0.0) {
          ++out.excluded;
          continue;
        }
        values.push_back(std::min(1.0, std::abs(cov(i, j)) / std::sqrt(c_ss(i) * z_ss(j))));
      }
    }
  }
  if (values.empty() && out.excluded == 0) throw InvalidArgument("labels must be 0 or 1");
  out.pairs = values.size();
  out.median = values.empty() ? std::nan("") : median_of(std::move(values));
  return out;
}

double EvalReport::mean_concept_auroc() const {
  if (concepts.empty()) return std::nan("");
  double s = 0.0;
  for (const auto& c : concepts) s += c.auroc;
  return s / static_cast<double>(concepts.size());
}

std::vector<nlohmann::json> EvalReport::records() const {
  std::vector<nlohmann::json> out;
  auto add = [&](const std::string& variable, const std::string& metric, double value) {
    nlohmann::json r = condition;
    r["variable"] = variable;
    r["metric"] = metric;
    r["value"] = value;
    r["samples"] = samples;
    out.push_back(std::move(r));
  };
  auto add_set = [&](const std::string& variable, const MetricSet& m) {
    add(variable, "auroc", m.auroc);
    add(variable, "aupr", m.aupr);
    add(variable, "brier", m.brier);
  };
  add_set("target", target);
  for (std::size_t k = 0; k < concepts.size(); ++k) add_set("concept_" + std::to_string(k), concepts[k]);
  if (!concepts.empty()) add("concepts", "mean_auroc", mean_concept_auroc());
  for (const auto& [level, fpr] : fpr_at_tpr) {
    nlohmann::json r = condition;
    r["variable"] = "target";
    r["metric"] = "fpr_at_tpr";
    r["tpr"] = level;
    r["value"] = fpr;
    r["samples"] = samples;
    out.push_back(std::move(r));
  }
  return out;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto set = [](const MetricSet& m) { return nlohmann::json{{"auroc", m.auroc}, {"aupr", m.aupr}, {"brier", m.brier}}; };
  j = {{"samples", r.samples}, {"target", set(r.target)}, {"condition", r.condition}};
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : r.concepts) concepts.push_back(set(c));
  j["concepts"] = concepts;
  if (!r.concepts.empty()) j["mean_concept_auroc"] = r.mean_concept_auroc();
  if (!r.fpr_at_tpr.empty()) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& [level, fpr] : r.fpr_at_tpr) f.push_back({{"tpr", level}, {"fpr", fpr}});
    j["fpr_at_tpr"] = f;
  }
}

MetricSet metric_set(std::span<const double> probs, std::span<const double> labels) {
  return {auroc(probs, labels), aupr(probs, labels), brier(probs, labels)};
}

std::vector<double> to_vector(const Matrix<float>& column) {
  std::vector<double> v(static_cast<std::size_t>(column.size()));
  for (Eigen::Index i = 0; i < column.size(); ++i) v[static_cast<std::size_t>(i)] = column.data()[i];
  return v;
}

EvalReport evaluate(const model::AnyModel& m, const MultiviewDataset& ds, std::span<const double> tpr_levels) {
  const MultiviewDataset view = model::eval_view(m, ds);
  const auto rows = model::all_rows(view);
  const auto out = model::predict(m, view, rows);
  EvalReport r;
  r.samples = view.size();
  const auto y = view.label_vector();
  r.target = metric_set(to_vector(out.y_hat), y);
  if (model::has_concepts(model::meta_of(m).family)) {
    if (static_cast<std::size_t>(out.c_hat.cols()) != view.concept_count()) {
      throw ShapeError("model predicts " + std::to_string(out.c_hat.cols()) + " concepts, data has " +
                       std::to_string(view.concept_count()));
    }
    for (Eigen::Index k = 0; k < out.c_hat.cols(); ++k) {
      r.concepts.push_back(metric_set(to_vector(out.c_hat.col(k)), view.concept_column(static_cast<std::size_t>(k))));
    }
  }
  if (!tpr_levels.empty()) {
    const auto f = fpr_at_tpr(to_vector(out.y_hat), y, tpr_levels);
    for (std::size_t i = 0; i < f.size(); ++i) r.fpr_at_tpr.emplace_back(tpr_levels[i], f[i]);
  }
  const auto& meta = model::meta_of(m);
  r.condition = {{"family", model::to_string(meta.family)},
                 {"fusion", model::to_string(model::config_of(m).fusion)},
                 {"k_obs", meta.concept_columns.size()},
                 {"seed", meta.seed}};
  return r;
}

}  // namespace mvcbm::metrics
