#include "pomnet/errors.hpp"
#include "pomnet/evaluate.hpp"
#include "pomnet/predictors.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>

using namespace pomnet;

namespace {

PckCount pck_oracle(const std::vector<Point2>& pred, const std::vector<Keypoint>& gt, const BBox& b, double sigma) {
  PckCount c;
  const double d = std::max(b.w, b.h);
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (gt[j].visibility == 0) continue;
    c.evaluated += 1;
    const double dx = pred[j].x - gt[j].x, dy = pred[j].y - gt[j].y;
    if (std::sqrt(dx * dx + dy * dy) / d <= sigma) c.correct += 1;
  }
  return c;
}

struct Case {
  std::vector<Point2> pred;
  std::vector<Keypoint> gt;
  BBox box;
};

Case random_case(Rng& rng) {
  Case c;
  c.box = {rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(5, 120), rng.uniform(5, 120)};
  const int J = 1 + static_cast<int>(rng.index(12));
  for (int j = 0; j < J; ++j) {
    const Keypoint k{c.box.x + rng.uniform(0, c.box.w), c.box.y + rng.uniform(0, c.box.h),
                     static_cast<int>(rng.index(3))};
    c.gt.push_back(k);
    const double r = rng.uniform(0, 0.5) * c.box.longest_side(), a = rng.uniform(0, 6.283185307179586);
    c.pred.push_back({k.x + r * std::cos(a), k.y + r * std::sin(a)});
  }
  return c;
}

// Fails on queries whose id is a multiple of `every`; never when every is 0.
class FlakyPredictor : public Predictor {
 public:
  explicit FlakyPredictor(int every) : every_(every) {}
  std::string name() const override { return "flaky"; }
  std::vector<std::optional<Point2>> predict(const Episode& ep, const std::vector<ProcessedSample>& s,
                                             const ProcessedSample& q) const override {
    if (every_ > 0 && ep.query->id % every_ == 0) throw std::runtime_error("flaky");
    return OraclePredictor().predict(ep, s, q);
  }

 private:
  int every_;
};

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("hand example and the sigma boundary") {
  const std::vector<Keypoint> gt = {{10, 20, 2}};
  const BBox box{0, 0, 100, 60};
  const std::vector<Point2> near = {{10, 10}};
  CHECK(pck(near, gt, box, 0.2) == PckCount{1, 1});
  CHECK(pck(near, gt, box, 0.09) == PckCount{0, 1});
  const std::vector<Point2> edge = {{10, 40}};
  CHECK(pck(edge, gt, box, 0.2) == PckCount{1, 1});
  const std::vector<Keypoint> gt345 = {{3, 4, 1}};
  const std::vector<Point2> origin = {{0, 0}};
  CHECK(pck(origin, gt345, BBox{0, 0, 10, 25}, 0.2) == PckCount{1, 1});
  CHECK(pck(origin, gt345, BBox{0, 0, 10, 25}, std::nextafter(0.2, 0.0)) == PckCount{0, 1});
}

TEST_CASE("invisible keypoints are excluded and missing predictions are wrong") {
  const std::vector<Keypoint> gt = {{10, 10, 0}, {20, 20, 1}, {30, 30, 2}};
  const std::vector<std::optional<Point2>> pred = {Point2{500, 500}, std::nullopt, Point2{30, 30}};
  CHECK(pck(pred, gt, BBox{0, 0, 50, 50}, 0.2) == PckCount{1, 2});
  CHECK_THROWS_AS(pck(pred, gt, BBox{0, 0, 0, 50}, 0.2), ValidationError);
}

TEST_CASE("pck agrees with a brute-force count on 1000 random cases") {
  Rng rng(31);
  for (int t = 0; t < 1000; ++t) {
    const auto c = random_case(rng);
    const double sigma = rng.uniform(0.01, 1.0);
    CHECK(pck(c.pred, c.gt, c.box, sigma) == pck_oracle(c.pred, c.gt, c.box, sigma));
  }
}

TEST_CASE("pck is invariant to translation and uniform scaling") {
  Rng rng(32);
  for (int t = 0; t < 300; ++t) {
    auto c = random_case(rng);
    const auto base = pck(c.pred, c.gt, c.box, 0.2);
    const double tx = rng.uniform(-200, 200), ty = rng.uniform(-200, 200), s = rng.uniform(0.1, 10);
    Case moved = c, scaled = c;
    for (auto& p : moved.pred) p = {p.x + tx, p.y + ty};
    for (auto& k : moved.gt) k = {k.x + tx, k.y + ty, k.visibility};
    moved.box.x += tx;
    moved.box.y += ty;
    for (auto& p : scaled.pred) p = {p.x * s, p.y * s};
    for (auto& k : scaled.gt) k = {k.x * s, k.y * s, k.visibility};
    scaled.box = {c.box.x * s, c.box.y * s, c.box.w * s, c.box.h * s};
    CHECK(pck(moved.pred, moved.gt, moved.box, 0.2) == base);
    CHECK(pck(scaled.pred, scaled.gt, scaled.box, 0.2) == base);
  }
}

TEST_CASE("pck is monotone in sigma") {
  Rng rng(33);
  for (int t = 0; t < 300; ++t) {
    const auto c = random_case(rng);
    const double a = rng.uniform(0, 1), b = rng.uniform(0, 1);
    const auto lo = pck(c.pred, c.gt, c.box, std::min(a, b) + 1e-9);
    const auto hi = pck(c.pred, c.gt, c.box, std::max(a, b) + 1e-9);
    CHECK(lo.correct <= hi.correct);
    CHECK(lo.evaluated == hi.evaluated);
  }
}

TEST_CASE("pck config validation") {
  PckConfig c;
  c.sigma = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.sigma = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.sigma = 0.2;
  c.episodes_per_category = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("oracle predictor scores 1 on every category") {
  const auto ds = testutil::small_synth({"triangle", "square", "hexagon"}, 8, 34, 64, {"square", "hexagon"});
  PckConfig pc;
  pc.episodes_per_category = 20;
  const auto r = evaluate(OraclePredictor(), ds.annotations, ds.split, pc);
  REQUIRE(r.per_category.size() == 2);
  for (const auto& [id, c] : r.per_category) {
    CHECK(c.pck == 1.0);
    CHECK(c.count > 0);
  }
  CHECK(r.mean == 1.0);
}

TEST_CASE("random predictor matches a Monte-Carlo disc-area oracle") {
  auto ds = testutil::small_synth({"triangle", "square"}, 80, 35, 64, {"triangle", "square"});
  for (auto& inst : ds.annotations.instances) inst.bbox = BBox{0, 0, 64, 64};
  PckConfig pc;
  pc.episodes_per_category = 1000;
  pc.seed = 3;
  const auto r = evaluate(RandomPredictor(8), ds.annotations, ds.split, pc);

  // Expected hit rate for each evaluated keypoint: fraction of the box
  // within 0.2 * 64 of it, estimated with independent draws.
  Rng rng(36);
  double expected = 0;
  long long evaluated = 0;
  for (int cat : ds.split.test) {
    for (int e = 0; e < pc.episodes_per_category; ++e) {
      const auto ep = sample_episode(ds.split, ds.annotations, cat, 1, evaluation_episode_seed(pc.seed, cat, e));
      for (const auto& k : ep.query->keypoints) {
        if (k.visibility == 0) continue;
        int hit = 0;
        const int draws = 200;
        for (int i = 0; i < draws; ++i)
          if (std::hypot(rng.uniform(0, 64) - k.x, rng.uniform(0, 64) - k.y) <= 0.2 * 64) ++hit;
        expected += static_cast<double>(hit) / draws;
        ++evaluated;
      }
    }
  }
  long long correct = 0, count = 0;
  for (const auto& [id, c] : r.per_category) {
    correct += c.correct;
    count += c.count;
  }
  CHECK(count == evaluated);
  const double got = static_cast<double>(correct) / count;
  MESSAGE("random pck " << got << ", disc-area oracle " << expected / evaluated);
  CHECK(std::abs(got - expected / evaluated) <= 0.02);
}

TEST_CASE("evaluation is deterministic and the mean is unweighted") {
  const auto ds = testutil::small_synth({"triangle", "square", "star5"}, 8, 37, 64, {"triangle", "star5"});
  PckConfig pc;
  pc.episodes_per_category = 30;
  pc.seed = 4;
  const auto a = evaluate(RandomPredictor(2), ds.annotations, ds.split, pc);
  const auto b = evaluate(RandomPredictor(2), ds.annotations, ds.split, pc);
  CHECK(a.to_json() == b.to_json());
  double sum = 0;
  for (const auto& [id, c] : a.per_category) {
    CHECK(c.pck >= 0.0);
    CHECK(c.pck <= 1.0);
    CHECK(c.pck == static_cast<double>(c.correct) / c.count);
    sum += c.pck;
  }
  CHECK(std::abs(a.mean - sum / a.per_category.size()) <= 1e-12);
  // triangle and star5 differ in keypoint count, so the pooled rate differs
  // from the per-category mean in general
  CHECK(a.per_category.at(synth_category_id("triangle")).count != a.per_category.at(synth_category_id("star5")).count);
  pc.seed = 5;
  CHECK(evaluate(RandomPredictor(2), ds.annotations, ds.split, pc).to_json() != a.to_json());
}

TEST_CASE("too many failed episodes is an error") {
  const auto ds = testutil::small_synth({"triangle", "square"}, 10, 38, 64, {"square"});
  PckConfig pc;
  pc.episodes_per_category = 50;
  CHECK_THROWS_AS(evaluate(FlakyPredictor(5), ds.annotations, ds.split, pc), EvaluationError);
  const auto ok = evaluate(FlakyPredictor(0), ds.annotations, ds.split, pc);
  CHECK(ok.failed_episodes == 0);
}

TEST_CASE("result JSON carries the reported fields") {
  const auto ds = testutil::small_synth({"triangle", "square"}, 8, 39, 64, {"square"});
  PckConfig pc;
  pc.episodes_per_category = 5;
  pc.shots = 5;
  const auto j = nlohmann::json::parse(evaluate(OraclePredictor(), ds.annotations, ds.split, pc).to_json());
  for (const char* k : {"sigma", "K", "per_category", "mean", "seed", "episodes_per_category"}) CHECK(j.contains(k));
  CHECK(j["K"] == 5);
  CHECK(j["per_category"][std::to_string(synth_category_id("square"))]["pck"] == 1.0);
}

}  // TEST_SUITE
