#include "mvcbm/serve/serve.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mvcbm/model/model_io.hpp"

namespace mvcbm::serve {

namespace {

using nlohmann::json;

const std::set<std::string> kPredictKeys{"sample", "views"};
const std::set<std::string> kInterveneKeys{"sample", "views", "interventions"};

[[noreturn]] void bad(const std::string& code, const std::string& message, const std::string& field = {}) {
  throw RequestError(400, code, message, field);
}

std::size_t index_field(const json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) bad("bad_request", "must be a non-negative integer", field);
  return v.get<std::size_t>();
}

}  // namespace

Response error_response(int status, const std::string& code, const std::string& message, const std::string& field) {
  json e{{"code", code}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return {status, json{{"error", e}}};
}

void to_json(nlohmann::json& j, const ConceptHistogram& h) {
  json classes = json::array();
  for (std::size_t c = 0; c < h.counts.size(); ++c) classes.push_back({{"label", c}, {"counts", h.counts[c]}});
  j = {{"concept", h.concept_index}, {"column", h.column}, {"edges", h.edges}, {"classes", classes}};
}

std::vector<ConceptHistogram> concept_histograms(const AnyModel& m, const MultiviewDataset& train, int bins) {
  if (bins < 1) throw InvalidArgument("histograms need at least one bin");
  std::vector<ConceptHistogram> out;
  if (!model::has_concepts(model::meta_of(m).family) || train.empty()) return out;
  const auto view = model::eval_view(m, train);
  const auto pred = model::predict(m, view, model::all_rows(view));
  const auto& cols = model::meta_of(m).concept_columns;
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) edges[static_cast<std::size_t>(b)] = static_cast<double>(b) / bins;
  for (Eigen::Index k = 0; k < pred.c_hat.cols(); ++k) {
    ConceptHistogram h;
    h.concept_index = static_cast<std::size_t>(k);
    h.column = cols.empty() ? h.concept_index : cols[h.concept_index];
    h.edges = edges;
    h.counts.assign(2, std::vector<std::int64_t>(static_cast<std::size_t>(bins), 0));
    for (Eigen::Index i = 0; i < pred.c_hat.rows(); ++i) {
      const double v = pred.c_hat(i, k);
      const auto b = std::clamp(static_cast<int>(std::floor(v * bins)), 0, bins - 1);
      ++h.counts[view.label(static_cast<std::size_t>(i))][static_cast<std::size_t>(b)];
    }
    out.push_back(std::move(h));
  }
  return out;
}

Service::Service(AnyModel model, const MultiviewDataset& data, ServeOptions opts)
    : model_(std::move(model)), opts_(opts) {
  if (opts_.page_size < 1) throw InvalidArgument("page size must be positive");
  const auto& cfg = model::config_of(model_);
  if (data.view_dim() != static_cast<std::size_t>(cfg.view_dim)) {
    throw ShapeError("dataset views have width " + std::to_string(data.view_dim()) + ", model expects " +
                     std::to_string(cfg.view_dim));
  }
  max_views_ = data.max_views();
  test_rows_ = data.indices(Split::kTest);
  test_ = model::eval_view(model_, data.only(Split::kTest));
  histograms_ = concept_histograms(model_, data.only(Split::kTrain), opts_.bins);
  const auto& meta = model::meta_of(model_);
  info_ = {{"family", model::to_string(meta.family)},
           {"fusion", model::to_string(cfg.fusion)},
           {"K", cfg.concept_count},
           {"J", model::rep_dim_of(model_)},
           {"digest", model::config_digest(model_)},
           {"concept_columns", meta.concept_columns},
           {"view_dim", cfg.view_dim},
           {"max_views", max_views_},
           {"seed", meta.seed},
           {"train_config", meta.train_config},
           {"test_samples", test_.size()},
           {"page_size", opts_.page_size}};
}

Query Service::parse(const nlohmann::json& request, bool interventions) const {
  if (!request.is_object()) bad("bad_request", "request body must be a JSON object");
  const auto& keys = interventions ? kInterveneKeys : kPredictKeys;
  for (const auto& [key, _] : request.items()) {
    if (!keys.contains(key)) bad("bad_request", "unknown field", key);
  }
  const bool has_sample = request.contains("sample");
  if (has_sample == request.contains("views")) bad("bad_request", "give exactly one of 'sample' and 'views'");

  Query q;
  const std::size_t p = test_.view_dim();
  if (has_sample) {
    const auto id = index_field(request.at("sample"), "sample");
    if (id >= test_.size()) {
      throw RequestError(404, "unknown_sample", "no test sample " + std::to_string(id), "sample");
    }
    q.sample = id;
    const std::vector<std::size_t> row{id};
    q.batch = model::make_batch(test_, row);
  } else {
    const auto& views = request.at("views");
    if (!views.is_array() || views.empty()) bad("shape_mismatch", "views must be a non-empty array", "views");
    if (views.size() > max_views_) {
      bad("shape_mismatch", "at most " + std::to_string(max_views_) + " views accepted", "views");
    }
    const std::size_t used = std::min(views.size(), test_.max_views());
    q.batch.view_dim = p;
    q.batch.values = Matrix<float>::Zero(1, static_cast<Eigen::Index>(test_.max_views() * p));
    for (std::size_t v = 0; v < views.size(); ++v) {
      const std::string field = "views[" + std::to_string(v) + "]";
      const auto& view = views[v];
      if (!view.is_array() || view.size() != p) {
        bad("shape_mismatch", "each view needs " + std::to_string(p) + " numbers", field);
      }
      for (std::size_t f = 0; f < p; ++f) {
        if (!view[f].is_number() || !std::isfinite(view[f].get<double>())) {
          bad("bad_value", "views must hold finite numbers", field + "[" + std::to_string(f) + "]");
        }
        if (v < used) q.batch.values(0, static_cast<Eigen::Index>(v * p + f)) = view[f].get<float>();
      }
    }
    q.batch.lengths = {static_cast<int>(used)};
  }

  if (interventions && request.contains("interventions")) {
    const auto& list = request.at("interventions");
    if (!list.is_array()) bad("invalid_intervention", "interventions must be an array", "interventions");
    const auto k = static_cast<std::size_t>(model::config_of(model_).concept_count);
    if (!model::has_concepts(model::meta_of(model_).family) && !list.empty()) {
      bad("invalid_intervention", "model has no concepts", "interventions");
    }
    std::set<std::size_t> seen;
    Matrix<float> values(1, static_cast<Eigen::Index>(list.size()));
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string field = "interventions[" + std::to_string(i) + "]";
      const auto& item = list[i];
      if (!item.is_object() || !item.contains("concept")) bad("invalid_intervention", "needs a concept index", field);
      for (const auto& [key, _] : item.items()) {
        if (key != "concept" && key != "value") bad("invalid_intervention", "unknown field", field + "." + key);
      }
      const auto c = index_field(item.at("concept"), field + ".concept");
      if (c >= k) bad("invalid_intervention", "concept index out of range", field + ".concept");
      if (!seen.insert(c).second) bad("invalid_intervention", "concept given twice", field + ".concept");
      double value = 0.0;
      if (item.contains("value")) {
        const auto& v = item.at("value");
        if (!v.is_number() || !(v.get<double>() >= 0.0 && v.get<double>() <= 1.0)) {
          bad("invalid_intervention", "value must be a number in [0, 1]", field + ".value");
        }
        value = v.get<double>();
      } else if (q.sample) {
        value = (*q.batch.concepts)(0, static_cast<Eigen::Index>(c));
      } else {
        bad("invalid_intervention", "value required for raw views", field + ".value");
      }
      q.spec.indices.push_back(c);
      values(0, static_cast<Eigen::Index>(i)) = static_cast<float>(value);
      q.overrides.emplace_back(c, static_cast<double>(static_cast<float>(value)));
    }
    q.spec.values = values;
  }
  return q;
}

model::Outputs Service::run(const Query& q) const {
  model::Outputs out = model::forward(model_, q.batch.pack());
  if (!q.spec.indices.empty()) out.y_hat = interv::intervene(model_, out, q.spec);
  return out;
}

nlohmann::json Service::render(const Query& q, const model::Outputs& out) const {
  const auto& cols = model::meta_of(model_).concept_columns;
  std::vector<bool> overridden(static_cast<std::size_t>(out.c_hat.cols()), false);
  std::vector<double> used(static_cast<std::size_t>(out.c_hat.cols()));
  for (Eigen::Index k = 0; k < out.c_hat.cols(); ++k) used[static_cast<std::size_t>(k)] = out.c_hat(0, k);
  json applied = json::array();
  for (const auto& [k, v] : q.overrides) {
    overridden[k] = true;
    used[k] = v;
    applied.push_back({{"concept", k}, {"value", v}});
  }
  json concepts = json::array();
  if (model::has_concepts(model::meta_of(model_).family)) {
    for (std::size_t k = 0; k < used.size(); ++k) {
      concepts.push_back({{"index", k},
                          {"column", cols.empty() ? k : cols[k]},
                          {"probability", static_cast<double>(out.c_hat(0, static_cast<Eigen::Index>(k)))},
                          {"value", used[k]},
                          {"overridden", static_cast<bool>(overridden[k])}});
    }
  }
  json body{{"sample", q.sample ? json(*q.sample) : json(nullptr)},
            {"concepts", concepts},
            {"target", static_cast<double>(out.y_hat(0, 0))},
            {"interventions", applied},
            {"model", {{"family", info_["family"]}, {"fusion", info_["fusion"]}, {"digest", info_["digest"]}}}};
  return body;
}

Response Service::predict(const nlohmann::json& request) const {
  try {
    const Query q = parse(request, false);
    return {200, render(q, run(q))};
  } catch (const RequestError& e) {
    return error_response(e.status(), e.code(), e.what(), e.field());
  }
}

Response Service::intervene(const nlohmann::json& request) const {
  try {
    const Query q = parse(request, true);
    return {200, render(q, run(q))};
  } catch (const RequestError& e) {
    return error_response(e.status(), e.code(), e.what(), e.field());
  }
}

Response Service::histograms() const { return {200, json{{"bins", opts_.bins}, {"histograms", histograms_}}}; }

Response Service::samples(std::size_t page) const {
  const std::size_t n = test_.size();
  const std::size_t pages = (n + opts_.page_size - 1) / opts_.page_size;
  json list = json::array();
  if (page < pages) {
    const std::size_t end = std::min(n, (page + 1) * opts_.page_size);
    for (std::size_t i = page * opts_.page_size; i < end; ++i) {
      const auto c = test_.concepts(i);
      list.push_back({{"id", i},
                      {"row", test_rows_[i]},
                      {"views", test_.view_count(i)},
                      {"has_concepts", true},
                      {"has_label", true},
                      {"concepts", std::vector<int>(c.begin(), c.end())},
                      {"label", test_.label(i)}});
    }
  }
  return {200, json{{"page", page}, {"page_size", opts_.page_size}, {"pages", pages}, {"total", n}, {"samples", list}}};
}

Response Service::model_info() const { return {200, info_}; }

}  // namespace mvcbm::serve
