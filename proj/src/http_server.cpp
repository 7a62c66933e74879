#include <atomic>
#include <cstdio>

#include "httplib.h"
#include "tap/service.hpp"

namespace tap::service {
namespace {

std::atomic<httplib::Server*> g_server{nullptr};

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

const char* reason(int status) {
  switch (status) {
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    default: return status >= 500 ? "internal_error" : "bad_request";
  }
}

}  // namespace

bool run_server(const Service& service, const ServerOptions& options) {
  httplib::Server server;
  const int workers = std::max(1, options.workers);
  server.new_task_queue = [workers] { return new httplib::ThreadPool(static_cast<std::size_t>(workers)); };
  // Base64 inflates by 4/3; leave room for the JSON around the image.
  server.set_payload_max_length(service.config().max_image_bytes / 3 * 4 + (1u << 20));
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

  server.Get("/api/info", [&](const httplib::Request&, httplib::Response& res) { send(res, service.info()); });
  server.Post("/api/predict",
              [&](const httplib::Request& req, httplib::Response& res) { send(res, service.predict(req.body)); });
  server.Post("/api/explain",
              [&](const httplib::Request& req, httplib::Response& res) { send(res, service.explain(req.body)); });
  server.Get("/api/corpus/thumbnail", [&](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("id")) {
      send(res, error_response(400, "missing_parameter", "id is required", "id"));
      return;
    }
    std::optional<std::string> element;
    if (req.has_param("element")) element = req.get_param_value("element");
    const Response r = service.thumbnail(req.get_param_value("id"), element);
    if (r.status == 200) res.set_header("Cache-Control", "public, max-age=31536000, immutable");
    send(res, r);
  });
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  if (!options.static_dir.empty()) server.set_mount_point("/", options.static_dir);

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const Response r = error_response(res.status, reason(res.status), "HTTP " + std::to_string(res.status));
      res.set_content(r.body, r.content_type);
    }
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, error_response(500, "internal_error", what));
  });

  if (!server.bind_to_port(options.host, options.port)) return false;
  g_server = &server;
  std::fprintf(stderr, "serving on http://%s:%d\n", options.host.c_str(), options.port);
  const bool ok = server.listen_after_bind();
  g_server = nullptr;
  return ok;
}

void stop_server() {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace tap::service
