#include "pomnet/image.hpp"
#include "pomnet/service.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <thread>

using namespace pomnet;
using nlohmann::json;

namespace {

struct Fixture {
  SynthDataset ds;
  std::shared_ptr<PomNet<float>> model = std::make_shared<PomNet<float>>(ModelConfig::tiny(), 61);
  std::chrono::steady_clock::time_point now{};
  InferenceService service;

  explicit Fixture(ServiceOptions opt = {})
      : ds(testutil::small_synth({"triangle", "pentagon"}, 6, 62, 72)),
        service(model, "test-model", opt, [this] { return now; }) {}

  const InstanceAnnotation& inst(int i) const { return ds.annotations.instances[i]; }
  std::string b64(int i) const { return base64_encode(encode_png(*inst(i).image)); }

  json support_entry(int i) const {
    json kps = json::array();
    for (const auto& k : inst(i).keypoints) kps.push_back({k.x, k.y, k.visibility});
    return {{"image", b64(i)}, {"keypoints", kps}};
  }
  json support_body(std::vector<int> ids) const {
    json sup = json::array();
    for (int i : ids) sup.push_back(support_entry(i));
    return {{"category", "shape"}, {"supports", sup}};
  }
  std::string register_ok(std::vector<int> ids) {
    const auto r = service.register_support(support_body(ids).dump());
    REQUIRE(r.status == 200);
    return json::parse(r.body)["session_id"];
  }
  ServiceResponse predict(const std::string& session, int i) {
    return service.predict(json{{"session_id", session}, {"image", b64(i)}}.dump());
  }
};

json without_timing(const std::string& body) {
  auto j = json::parse(body);
  j.erase("timing_ms");
  return j;
}

// Image with the whole canvas as bbox, as the service sees it.
ProcessedSample whole_image(const InstanceAnnotation& src, const ModelConfig& c) {
  InstanceAnnotation inst = src;
  inst.bbox.reset();
  return preprocess(inst, *inst.image, c.geometry(), false, 0);
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("health reports the model id") {
  Fixture fx;
  const auto r = fx.service.health();
  CHECK(r.status == 200);
  const auto j = json::parse(r.body);
  CHECK(j["status"] == "ok");
  CHECK(j["model_id"] == "test-model");
}

TEST_CASE("registering supports") {
  Fixture fx;
  SUBCASE("one image with three keypoints") {
    const auto r = fx.service.register_support(fx.support_body({0}).dump());
    CHECK(r.status == 200);
    CHECK(json::parse(r.body)["num_keypoints"] == 3);
    CHECK(fx.service.session_count() == 1);
  }
  SUBCASE("identical payloads get distinct sessions") {
    CHECK(fx.register_ok({0, 1}) != fx.register_ok({0, 1}));
    CHECK(fx.service.session_count() == 2);
  }
  SUBCASE("supports disagreeing on keypoint count are rejected") {
    const auto r = fx.service.register_support(fx.support_body({0, 6}).dump());
    CHECK(r.status == 400);
    const auto j = json::parse(r.body);
    CHECK(j["error"] == "malformed_request");
    CHECK(j["detail"].get<std::string>().find("expected 3") != std::string::npos);
  }
  SUBCASE("malformed payloads are rejected") {
    CHECK(fx.service.register_support("not json").status == 400);
    CHECK(fx.service.register_support(R"({"supports": []})").status == 400);
    auto body = fx.support_body({0});
    body["supports"][0]["keypoints"][1] = {1e4, 5.0};
    CHECK(fx.service.register_support(body.dump()).status == 400);
    body = fx.support_body({0});
    body["supports"][0]["image"] = base64_encode(std::vector<std::uint8_t>{1, 2, 3, 4});
    CHECK(fx.service.register_support(body.dump()).status == 400);
    body = fx.support_body({0});
    body["keypoint_names"] = {"a", "b"};
    CHECK(fx.service.register_support(body.dump()).status == 400);
    CHECK(fx.service.session_count() == 0);
  }
}

TEST_CASE("oversize images are refused with 413") {
  ServiceOptions opt;
  opt.max_image_bytes = 256;
  Fixture fx(opt);
  const auto r = fx.service.register_support(fx.support_body({0}).dump());
  CHECK(r.status == 413);
  CHECK(json::parse(r.body)["error"] == "payload_too_large");
}

TEST_CASE("prediction errors") {
  Fixture fx;
  const auto id = fx.register_ok({0});
  CHECK(fx.predict("nope", 1).status == 404);
  const auto bad = fx.service.predict(json{{"session_id", id}, {"image", base64_encode(std::vector<std::uint8_t>(64, 7))}}.dump());
  CHECK(bad.status == 422);
  CHECK(json::parse(bad.body)["error"] == "undecodable_image");
  CHECK(fx.service.predict(R"({"image": "AAAA"})").status == 400);
}

TEST_CASE("sessions expire after the TTL") {
  ServiceOptions opt;
  opt.session_ttl = std::chrono::seconds(60);
  Fixture fx(opt);
  const auto id = fx.register_ok({0});
  fx.now += std::chrono::seconds(59);
  CHECK(fx.predict(id, 1).status == 200);
  fx.now += std::chrono::seconds(1);
  CHECK(fx.predict(id, 1).status == 404);
  CHECK(fx.service.session_count() == 0);
}

TEST_CASE("predictions are deterministic, sized to J and do not touch the model") {
  Fixture fx;
  const auto before = capture_params(fx.model->params());
  const auto id = fx.register_ok({0, 2});
  const auto a = fx.predict(id, 1);
  const auto b = fx.predict(id, 1);
  REQUIRE(a.status == 200);
  CHECK(without_timing(a.body) == without_timing(b.body));
  const auto j = json::parse(a.body);
  CHECK(j["keypoints"].size() == 3);
  CHECK(j["model_id"] == "test-model");
  CHECK(j["timing_ms"].get<double>() >= 0.0);
  for (const auto& k : j["keypoints"]) {
    CHECK(k["confidence"].get<double>() >= 0.0);
    CHECK(k["confidence"].get<double>() <= 1.0);
  }
  const auto after = capture_params(fx.model->params());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].data == after[i].data);
}

TEST_CASE("concurrent predictions on one session agree") {
  Fixture fx;
  const auto id = fx.register_ok({0});
  const auto reference = without_timing(fx.predict(id, 3).body);
  std::vector<std::thread> threads;
  std::vector<int> mismatches(4, 0);
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 3; ++i) {
        fx.register_ok({1});
        if (without_timing(fx.predict(id, 3).body) != reference) ++mismatches[t];
      }
    });
  for (auto& th : threads) th.join();
  for (int m : mismatches) CHECK(m == 0);
  CHECK(fx.service.session_count() == 13);
}

TEST_CASE("response coordinates map back onto the decoded heatmap peaks") {
  Fixture fx;
  const auto id = fx.register_ok({0, 1});
  for (int q : {2, 3, 4}) {
    const auto j = json::parse(fx.predict(id, q).body);
    const auto s0 = whole_image(fx.inst(0), fx.model->config());
    const auto s1 = whole_image(fx.inst(1), fx.model->config());
    const auto query = whole_image(fx.inst(q), fx.model->config());
    const auto peaks = decode_heatmaps(fx.model->predict(EpisodeInput{{&s0, &s1}, &query}));
    for (int k = 0; k < 3; ++k) {
      const Point2 hm = query.to_heatmap({j["keypoints"][k]["x"].get<double>(), j["keypoints"][k]["y"].get<double>()});
      CHECK(std::abs(hm.x - peaks[k].x) <= 1e-3);
      CHECK(std::abs(hm.y - peaks[k].y) <= 1e-3);
    }
  }
}

TEST_CASE("HTTP end to end") {
  ServiceOptions opt;
  opt.cors = true;
  Fixture fx(opt);
  HttpServer server(fx.service);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen(); });
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(60, 0);

  auto health = client.Get("/api/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  auto reg = client.Post("/api/support", fx.support_body({0}).dump(), "application/json");
  REQUIRE(reg);
  CHECK(reg->status == 200);
  const std::string id = json::parse(reg->body)["session_id"];

  auto pred = client.Post("/api/predict", json{{"session_id", id}, {"image", fx.b64(1)}}.dump(), "application/json");
  REQUIRE(pred);
  CHECK(pred->status == 200);
  CHECK(without_timing(pred->body) == without_timing(fx.predict(id, 1).body));

  auto missing = client.Post("/api/predict", json{{"session_id", "x"}, {"image", fx.b64(1)}}.dump(), "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"] == "unknown_session");

  auto nowhere = client.Get("/api/nothing");
  REQUIRE(nowhere);
  CHECK(nowhere->status == 404);
  CHECK(json::parse(nowhere->body).contains("error"));

  server.stop();
  loop.join();
}

}  // TEST_SUITE
