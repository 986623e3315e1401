#pragma once

#include "pomnet/predictors.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace pomnet {

struct ServiceOptions {
  std::chrono::seconds session_ttl{3600};
  std::size_t max_image_bytes = 8u << 20;
  bool cors = false;
};

struct SupportSession {
  std::string id;
  std::string category;
  std::vector<std::string> keypoint_names;
  std::vector<ProcessedSample> supports;
  std::chrono::steady_clock::time_point created_at;
};

struct ServiceResponse {
  int status = 200;
  std::string body;  // JSON
};

// Request handling for the annotator backend, independent of the transport.
// Thread-safe; the model is only read.
class InferenceService {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  InferenceService(std::shared_ptr<const PomNet<float>> model, std::string model_id, ServiceOptions options = {},
                   Clock clock = [] { return std::chrono::steady_clock::now(); });

  ServiceResponse health() const;
  // {"category", "keypoint_names", "supports": [{"image": base64, "keypoints": [[x, y(, v)], ...]}]}
  ServiceResponse register_support(const std::string& body);
  // {"session_id", "image": base64}
  ServiceResponse predict(const std::string& body);

  std::size_t session_count();
  const ServiceOptions& options() const { return options_; }

 private:
  std::shared_ptr<const SupportSession> find(const std::string& id);
  std::string new_session_id();
  void purge_locked(std::chrono::steady_clock::time_point now);

  std::shared_ptr<const PomNet<float>> model_;
  PomNetPredictor predictor_;
  std::string model_id_;
  ServiceOptions options_;
  Clock clock_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const SupportSession>> sessions_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_;
};

// HTTP binding: GET /api/health, POST /api/support, POST /api/predict.
class HttpServer {
 public:
  explicit HttpServer(InferenceService& service);
  ~HttpServer();
  // Binds (port 0 picks a free port) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pomnet
