#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/error.hpp"
#include "mvcbm/interventions/interventions.hpp"
#include "mvcbm/model/models.hpp"

namespace httplib {
class Server;
}

namespace mvcbm::serve {

using model::AnyModel;
using num::Matrix;

struct ServeOptions {
  std::size_t page_size = 50;
  int bins = 20;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

// Error body: {"error": {"code", "message", "field"?}}.
Response error_response(int status, const std::string& code, const std::string& message,
                        const std::string& field = {});

struct ConceptHistogram {
  std::size_t concept_index = 0;
  std::size_t column = 0;  // dataset column
  std::vector<double> edges;
  // counts[c][b]: training samples of target class c with activation in bin b
  std::vector<std::vector<std::int64_t>> counts;
};

void to_json(nlohmann::json& j, const ConceptHistogram& h);

// Activations of the training split, binned uniformly on [0, 1] per target
// class; 1.0 falls into the last bin.
std::vector<ConceptHistogram> concept_histograms(const AnyModel& m, const MultiviewDataset& train, int bins);

// A parsed /predict or /intervene body.
struct Query {
  std::optional<std::size_t> sample;  // test-split position
  model::ViewBatch batch;             // one row, as seen by the model
  interv::InterventionSpec spec;
  std::vector<std::pair<std::size_t, double>> overrides;  // as requested
};

// Holds an immutable (model, dataset, histograms) snapshot; every handler is
// a pure function of it and the request.
class Service {
 public:
  Service(AnyModel model, const MultiviewDataset& data, ServeOptions opts = {});

  Response predict(const nlohmann::json& request) const;
  Response intervene(const nlohmann::json& request) const;
  Response histograms() const;
  Response samples(std::size_t page) const;
  Response model_info() const;

  // Parses a request; with `interventions` false the key is rejected.
  Query parse(const nlohmann::json& request, bool interventions) const;
  // Library results the handlers serialize: concept outputs and target.
  model::Outputs run(const Query& q) const;

  const AnyModel& model() const { return model_; }
  const MultiviewDataset& test_view() const { return test_; }
  std::size_t test_size() const { return test_.size(); }

 private:
  nlohmann::json render(const Query& q, const model::Outputs& out) const;

  AnyModel model_;
  MultiviewDataset test_;  // through model::eval_view
  ServeOptions opts_;
  nlohmann::json histograms_;
  nlohmann::json info_;
  std::vector<std::size_t> test_rows_;  // positions in the full dataset
  std::size_t max_views_ = 0;           // accepted in raw requests
};

// Thrown by Service::parse; carries the HTTP status and error code.
class RequestError : public Error {
 public:
  RequestError(int status, std::string code, const std::string& message, std::string field = {})
      : Error(message), status_(status), code_(std::move(code)), field_(std::move(field)) {}

  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int status_;
  std::string code_;
  std::string field_;
};

// POST /predict, POST /intervene, GET /histograms, GET /samples?page=N,
// GET /model.
void register_routes(httplib::Server& server, const Service& service);
// Blocks until the server stops.
void run_server(const Service& service, const std::string& host, int port);

}  // namespace mvcbm::serve
