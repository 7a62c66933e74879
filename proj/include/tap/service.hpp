#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>

#include "tap/attribution.hpp"
#include "tap/dataset.hpp"
#include "tap/model.hpp"
#include "tap/retrieval.hpp"

namespace tap::service {

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

struct ServiceConfig {
  int default_steps = 128;
  int max_steps = 1024;
  int default_k = 5;
  int max_k = 50;
  double default_area_fraction = 0.25;
  // Ranked regions returned per explain response; the heatmap uses all.
  int max_regions = 100;
  int max_image_side = 4096;
  std::size_t max_image_bytes = 10u << 20;
  // Concurrent attribution jobs.
  int attribution_workers = 2;
  // Used when the service builds its own index from a mounted corpus.
  retrieval::Cuts cuts;
  std::string colormap = "blue_white_red";

  // Throws Error{"invalid_config"}.
  void validate() const;
};

// Request handlers behind the HTTP endpoints. Every method is safe to call
// concurrently; state is fixed once the server starts.
class Service {
 public:
  explicit Service(ServiceConfig config = {});

  void set_model(std::shared_ptr<const model::Classifier> model);
  void set_index(std::shared_ptr<const retrieval::EmbeddingIndex> index);
  void set_corpus(std::shared_ptr<const data::Corpus> corpus);

  const ServiceConfig& config() const { return config_; }
  bool has_model() const { return model_ != nullptr; }
  const std::string& fingerprint() const { return fingerprint_; }

  Response info() const;
  Response predict(const std::string& body) const;
  Response explain(const std::string& body) const;
  Response thumbnail(const std::string& id, const std::optional<std::string>& element) const;

 private:
  ServiceConfig config_;
  attr::Colormap colormap_;
  std::shared_ptr<const model::Classifier> model_;
  std::string fingerprint_;
  std::shared_ptr<const retrieval::EmbeddingIndex> index_;
  std::shared_ptr<const data::Corpus> corpus_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::string> thumbnails_;
};

// 4xx/5xx body: {"code", "message", "field"}.
Response error_response(int status, const std::string& code, const std::string& message,
                        const std::string& field = {});

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  int workers = 4;
  // Directory of static files served at "/" (optional).
  std::string static_dir;
};

// Blocks serving HTTP until stop_server() or process exit. Returns false if
// the socket cannot be bound.
bool run_server(const Service& service, const ServerOptions& options);
void stop_server();

}  // namespace tap::service
