#include "mvcbm/serve/serve.hpp"

#include <httplib.h>

namespace mvcbm::serve {

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_header("Access-Control-Allow-Origin", "*");
  res.set_content(r.body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& handler) {
  try {
    send(res, handler());
  } catch (const RequestError& e) {
    send(res, error_response(e.status(), e.code(), e.what(), e.field()));
  } catch (const std::exception& e) {
    send(res, error_response(500, "internal", e.what()));
  }
}

nlohmann::json body_of(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw RequestError(400, "malformed_json", e.what());
  }
}

}  // namespace

void register_routes(httplib::Server& server, const Service& service) {
  server.Post("/predict", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.predict(body_of(req)); });
  });
  server.Post("/intervene", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.intervene(body_of(req)); });
  });
  server.Get("/histograms", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return service.histograms(); });
  });
  server.Get("/model", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return service.model_info(); });
  });
  server.Get("/samples", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::size_t page = 0;
      if (req.has_param("page")) {
        const auto text = req.get_param_value("page");
        std::size_t used = 0;
        try {
          page = std::stoul(text, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != text.size() || text.front() == '-') {
          throw RequestError(400, "bad_request", "page must be a non-negative integer", "page");
        }
      }
      return service.samples(page);
    });
  });
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.status = 204;
  });
}

void run_server(const Service& service, const std::string& host, int port) {
  httplib::Server server;
  register_routes(server, service);
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace mvcbm::serve
