#include "pomnet/service.hpp"

#include "pomnet/image.hpp"
#include "pomnet/random.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <random>

namespace pomnet {

using nlohmann::ordered_json;

namespace {

ServiceResponse error(int status, const std::string& kind, const std::string& detail) {
  return {status, ordered_json{{"error", kind}, {"detail", detail}}.dump()};
}

struct RequestError {
  int status;
  std::string kind;
  std::string detail;
};

std::vector<std::uint8_t> decode_payload(const ordered_json& field, std::size_t limit, const std::string& what) {
  if (!field.is_string()) throw RequestError{400, "malformed_request", what + " must be a base64 string"};
  const auto& text = field.get_ref<const std::string&>();
  if (text.size() / 4 * 3 > limit + 3)
    throw RequestError{413, "payload_too_large", what + " exceeds " + std::to_string(limit) + " bytes"};
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(text);
  } catch (const std::exception& e) {
    throw RequestError{400, "malformed_request", what + ": " + e.what()};
  }
  if (bytes.size() > limit)
    throw RequestError{413, "payload_too_large", what + " exceeds " + std::to_string(limit) + " bytes"};
  return bytes;
}

}  // namespace

InferenceService::InferenceService(std::shared_ptr<const PomNet<float>> model, std::string model_id,
                                   ServiceOptions options, Clock clock)
    : model_(model),
      predictor_(std::move(model), model_id),
      model_id_(std::move(model_id)),
      options_(options),
      clock_(std::move(clock)),
      salt_(std::random_device{}() ^ (static_cast<std::uint64_t>(std::random_device{}()) << 32)) {}

ServiceResponse InferenceService::health() const {
  return {200, ordered_json{{"status", "ok"}, {"model_id", model_id_}}.dump()};
}

std::string InferenceService::new_session_id() {
  const std::uint64_t n = ++counter_;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(mix64(salt_ ^ n)),
                static_cast<unsigned long long>(mix64(n + salt_)));
  return buf;
}

void InferenceService::purge_locked(std::chrono::steady_clock::time_point now) {
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->created_at >= options_.session_ttl) it = sessions_.erase(it);
    else ++it;
  }
}

std::size_t InferenceService::session_count() {
  std::lock_guard lock(mutex_);
  purge_locked(clock_());
  return sessions_.size();
}

std::shared_ptr<const SupportSession> InferenceService::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  purge_locked(clock_());
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

ServiceResponse InferenceService::register_support(const std::string& body) {
  try {
    ordered_json req;
    try {
      req = ordered_json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw RequestError{400, "malformed_request", std::string("body is not JSON: ") + e.what()};
    }
    if (!req.is_object() || !req.contains("supports") || !req["supports"].is_array() || req["supports"].empty())
      throw RequestError{400, "malformed_request", "expected a non-empty 'supports' array"};

    auto session = std::make_shared<SupportSession>();
    session->category = req.value("category", std::string("custom"));
    const int L = model_->config().slot_count;
    int J = -1;
    std::vector<std::uint8_t> labeled;
    const auto& supports = req["supports"];
    for (std::size_t s = 0; s < supports.size(); ++s) {
      const auto& sup = supports[s];
      const std::string where = "supports[" + std::to_string(s) + "]";
      if (!sup.is_object() || !sup.contains("image") || !sup.contains("keypoints") || !sup["keypoints"].is_array())
        throw RequestError{400, "malformed_request", where + " needs 'image' and 'keypoints'"};
      const auto bytes = decode_payload(sup["image"], options_.max_image_bytes, where + ".image");
      auto image = std::make_shared<Image>();
      try {
        *image = decode_image(bytes);
      } catch (const std::exception& e) {
        throw RequestError{400, "malformed_request", where + ".image: " + e.what()};
      }
      InstanceAnnotation inst;
      inst.id = static_cast<int>(s);
      inst.image = image;
      inst.width = image->width;
      inst.height = image->height;
      for (const auto& k : sup["keypoints"]) {
        if (!k.is_array() || k.size() < 2 || k.size() > 3 || !k[0].is_number() || !k[1].is_number() ||
            (k.size() == 3 && !k[2].is_number_integer()))
          throw RequestError{400, "malformed_request", where + ".keypoints entries must be [x, y] or [x, y, v]"};
        Keypoint kp{k[0].get<double>(), k[1].get<double>(), k.size() == 3 ? k[2].get<int>() : 2};
        if (kp.visibility < 0 || kp.visibility > 2)
          throw RequestError{400, "malformed_request", where + ": visibility must be 0, 1 or 2"};
        if (kp.visibility > 0 && (kp.x < 0 || kp.y < 0 || kp.x > image->width - 1 || kp.y > image->height - 1))
          throw RequestError{400, "malformed_request", where + ": keypoint outside the image"};
        inst.keypoints.push_back(kp);
      }
      const int n = static_cast<int>(inst.keypoints.size());
      if (J < 0) {
        J = n;
        labeled.assign(J, 0);
      }
      if (n != J)
        throw RequestError{400, "malformed_request",
                           where + " has " + std::to_string(n) + " keypoints, expected " + std::to_string(J)};
      for (int j = 0; j < J; ++j) labeled[j] |= inst.keypoints[j].visibility > 0;
      session->supports.push_back(preprocess(inst, *image, model_->config().geometry(), false, 0));
    }
    if (J < 1) throw RequestError{400, "malformed_request", "supports carry no keypoints"};
    if (J > L)
      throw RequestError{400, "malformed_request",
                         std::to_string(J) + " keypoints exceed the model's " + std::to_string(L) + " slots"};
    for (int j = 0; j < J; ++j)
      if (!labeled[j])
        throw RequestError{400, "malformed_request", "keypoint " + std::to_string(j) + " is unlabeled in every support"};
    if (req.contains("keypoint_names")) {
      try {
        session->keypoint_names = req["keypoint_names"].get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception&) {
        throw RequestError{400, "malformed_request", "keypoint_names must be a list of strings"};
      }
      if (static_cast<int>(session->keypoint_names.size()) != J)
        throw RequestError{400, "malformed_request", "keypoint_names length differs from the keypoint count"};
    } else {
      for (int j = 0; j < J; ++j) session->keypoint_names.push_back("kp" + std::to_string(j + 1));
    }

    std::lock_guard lock(mutex_);
    const auto now = clock_();
    purge_locked(now);
    session->created_at = now;
    session->id = new_session_id();
    sessions_[session->id] = session;
    return {200, ordered_json{{"session_id", session->id}, {"num_keypoints", J}}.dump()};
  } catch (const RequestError& e) {
    return error(e.status, e.kind, e.detail);
  } catch (const std::exception& e) {
    return error(400, "malformed_request", e.what());
  }
}

ServiceResponse InferenceService::predict(const std::string& body) {
  try {
    const auto start = std::chrono::steady_clock::now();
    ordered_json req;
    try {
      req = ordered_json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw RequestError{400, "malformed_request", std::string("body is not JSON: ") + e.what()};
    }
    if (!req.is_object() || !req.contains("session_id") || !req["session_id"].is_string() || !req.contains("image"))
      throw RequestError{400, "malformed_request", "expected 'session_id' and 'image'"};
    const auto session = find(req["session_id"].get<std::string>());
    if (!session) throw RequestError{404, "unknown_session", "no live session " + req["session_id"].get<std::string>()};
    const auto bytes = decode_payload(req["image"], options_.max_image_bytes, "image");
    Image image;
    try {
      image = decode_image(bytes);
    } catch (const std::exception& e) {
      throw RequestError{422, "undecodable_image", e.what()};
    }
    InstanceAnnotation inst;
    inst.image = std::make_shared<Image>(image);
    inst.width = image.width;
    inst.height = image.height;
    inst.keypoints.assign(session->keypoint_names.size(), Keypoint{});
    const ProcessedSample query = preprocess(inst, image, model_->config().geometry(), false, 0);
    const auto estimates = predictor_.estimate(session->supports, query);

    ordered_json kps = ordered_json::array();
    for (std::size_t j = 0; j < estimates.size(); ++j) {
      const auto& e = *estimates[j];
      kps.push_back({{"name", session->keypoint_names[j]},
                     {"x", e.x},
                     {"y", e.y},
                     {"confidence", std::clamp(e.confidence, 0.0, 1.0)}});
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return {200, ordered_json{{"session_id", session->id}, {"keypoints", kps}, {"model_id", model_id_}, {"timing_ms", ms}}
                     .dump()};
  } catch (const RequestError& e) {
    return error(e.status, e.kind, e.detail);
  } catch (const std::exception& e) {
    return error(500, "internal_error", e.what());
  }
}

struct HttpServer::Impl {
  InferenceService* service;
  httplib::Server server;
};

HttpServer::HttpServer(InferenceService& service) : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto& srv = impl_->server;
  const bool cors = service.options().cors;
  // base64 inflates by 4/3; leave room for the JSON around it
  srv.set_payload_max_length(service.options().max_image_bytes * 3 / 2 + (64u << 10));
  auto reply = [cors](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    if (cors) res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body, "application/json");
  };
  srv.Get("/api/health", [&service, reply](const httplib::Request&, httplib::Response& res) { reply(res, service.health()); });
  srv.Post("/api/support", [&service, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.register_support(req.body));
  });
  srv.Post("/api/predict", [&service, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.predict(req.body));
  });
  if (cors) {
    srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
  }
  srv.set_error_handler([cors](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* kind = res.status == 413 ? "payload_too_large" : res.status == 404 ? "not_found" : "http_error";
    if (cors) res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(ordered_json{{"error", kind}, {"detail", "HTTP " + std::to_string(res.status)}}.dump(),
                    "application/json");
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace pomnet
