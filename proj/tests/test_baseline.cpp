#include "pomnet/errors.hpp"
#include "pomnet/predictors.hpp"
#include "pomnet/protonet.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace pomnet;

namespace {

struct Fixture {
  SynthDataset ds;
  std::vector<ProcessedSample> samples;
  ProtoNet<double> net{ModelConfig::tiny(), 17};

  Fixture() {
    ds = testutil::small_synth({"hexagon"}, 6, 51, 80);
    for (const auto& inst : ds.annotations.instances)
      samples.push_back(preprocess(inst, *inst.image, net.config().geometry(), false, 0));
  }
};

std::vector<double> to_vec(ag::Var<double> v) { return {v.value().begin(), v.value().end()}; }

// Rows of the [1, C, h, w] feature map picked at the given cells, as [J, C].
PrototypeSet<double> cell_prototypes(ag::Graph<double>& g, ag::Var<double> f, const std::vector<int>& cells) {
  const int C = f.dim(1), P = f.dim(2) * f.dim(3);
  const auto fv = f.value();
  std::vector<double> rows;
  for (int cell : cells)
    for (int c = 0; c < C; ++c) rows.push_back(fv[static_cast<std::size_t>(c) * P + cell]);
  PrototypeSet<double> out;
  out.vectors = g.constant({static_cast<int>(cells.size()), C}, std::move(rows));
  out.valid.assign(cells.size(), 1);
  return out;
}

// Nearest cell by an explicit double loop over squared distances.
int nearest_oracle(const std::vector<double>& f, int C, int P, const std::vector<double>& proto) {
  int best = 0;
  double best_d = INFINITY;
  for (int p = 0; p < P; ++p) {
    double d = 0;
    for (int c = 0; c < C; ++c) d += std::pow(f[static_cast<std::size_t>(c) * P + p] - proto[c], 2);
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

}  // namespace

TEST_SUITE("baseline") {

TEST_CASE("stage-3 features of the tiny config") {
  Fixture fx;
  ag::Graph<double> g(false);
  const auto f = fx.net.stage_features(g, fx.samples[0]);
  CHECK(f.shape() == ag::Shape{1, 64, 8, 8});
  CHECK(fx.net.feature_size() == 8);
}

TEST_CASE("a prototype taken from a query cell is matched back to that cell") {
  Fixture fx;
  ag::Graph<double> g(false);
  const auto f = fx.net.stage_features(g, fx.samples[1]);
  const std::vector<int> cells = {0, 9, 27, 36, 63, 45};
  const auto protos = cell_prototypes(g, f, cells);
  const auto est = fx.net.match_prototypes(protos, f);
  REQUIRE(est.size() == cells.size());
  for (std::size_t j = 0; j < cells.size(); ++j) {
    REQUIRE(est[j].has_value());
    CHECK(fx.net.nearest_cell({est[j]->x, est[j]->y}) == cells[j]);
    CHECK(est[j]->confidence > 0.0);
    CHECK(est[j]->confidence <= 1.0);
  }
}

TEST_CASE("identical prototypes give identical predictions") {
  Fixture fx;
  ag::Graph<double> g(false);
  const auto f = fx.net.stage_features(g, fx.samples[2]);
  const auto q = fx.net.stage_features(g, fx.samples[3]);
  const auto protos = cell_prototypes(g, f, {20, 20, 41});
  const auto est = fx.net.match_prototypes(protos, q);
  CHECK(est[0]->x == est[1]->x);
  CHECK(est[0]->y == est[1]->y);
  CHECK(est[0]->confidence == est[1]->confidence);
}

TEST_CASE("similarity argmax agrees with a double-loop nearest-cell search") {
  Fixture fx;
  Rng rng(52);
  ag::Graph<double> g(false);
  for (int t = 0; t < 5; ++t) {
    const auto& s = fx.samples[t];
    const auto f = fx.net.stage_features(g, s);
    const int C = f.dim(1), P = f.dim(2) * f.dim(3);
    const auto fv = to_vec(f);
    const auto protos = fx.net.build_prototypes(g, {&fx.samples[(t + 1) % 6]});
    const auto pv = to_vec(protos.vectors);
    const auto sim = to_vec(fx.net.similarity(protos, f));
    const auto est = fx.net.match_prototypes(protos, f);
    for (int j = 0; j < static_cast<int>(protos.valid.size()); ++j) {
      const std::vector<double> proto(pv.begin() + j * C, pv.begin() + (j + 1) * C);
      const int want = nearest_oracle(fv, C, P, proto);
      const auto row = sim.begin() + static_cast<std::ptrdiff_t>(j) * P;
      CHECK(std::max_element(row, row + P) - row == want);
      double d2 = 0;
      for (int c = 0; c < C; ++c) d2 += std::pow(fv[static_cast<std::size_t>(c) * P + want] - proto[c], 2);
      CHECK(row[want] == doctest::Approx(-std::sqrt(d2)).epsilon(1e-9));
      CHECK(est[j].has_value());
    }
  }
}

TEST_CASE("matching is invariant to a common shift of features and prototypes") {
  Fixture fx;
  Rng rng(53);
  ag::Graph<double> g(false);
  const auto f = fx.net.stage_features(g, fx.samples[0]);
  const auto protos = fx.net.build_prototypes(g, {&fx.samples[4]});
  const int C = f.dim(1), P = f.dim(2) * f.dim(3), J = static_cast<int>(protos.valid.size());
  const auto shift = testutil::normal_vector(C, rng, 5.0);
  auto fv = to_vec(f);
  auto pv = to_vec(protos.vectors);
  for (int c = 0; c < C; ++c) {
    for (int p = 0; p < P; ++p) fv[static_cast<std::size_t>(c) * P + p] += shift[c];
    for (int j = 0; j < J; ++j) pv[static_cast<std::size_t>(j) * C + c] += shift[c];
  }
  PrototypeSet<double> moved{g.constant(protos.vectors.shape(), pv), protos.valid};
  const auto a = fx.net.match_prototypes(protos, f);
  const auto b = fx.net.match_prototypes(moved, g.constant(f.shape(), fv));
  for (int j = 0; j < J; ++j) {
    CHECK(a[j]->x == b[j]->x);
    CHECK(a[j]->y == b[j]->y);
    CHECK(a[j]->confidence == doctest::Approx(b[j]->confidence).epsilon(1e-9));
  }
}

TEST_CASE("prototype construction") {
  Fixture fx;
  ag::Graph<double> g(false);
  const auto one = to_vec(fx.net.build_prototypes(g, {&fx.samples[0]}).vectors);

  SUBCASE("K copies of one support equal the 1-shot prototype") {
    const auto five = fx.net.build_prototypes(g, std::vector<const ProcessedSample*>(5, &fx.samples[0]));
    const auto v = to_vec(five.vectors);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == doctest::Approx(one[i]).epsilon(1e-12));
  }

  SUBCASE("K = 3 equals the masked mean of single-support prototypes") {
    auto s = fx.samples;
    s[1].visibility[0] = 0;
    s[2].visibility[0] = 0;
    s[2].visibility[3] = 0;
    const std::vector<const ProcessedSample*> sup = {&s[0], &s[1], &s[2]};
    const auto set = fx.net.build_prototypes(g, sup);
    const int J = s[0].num_keypoints(), C = 64;
    std::vector<double> sum(static_cast<std::size_t>(J) * C, 0.0);
    std::vector<int> n(J, 0);
    for (const auto* p : sup) {
      const auto single = fx.net.build_prototypes(g, {p});
      const auto v = to_vec(single.vectors);
      for (int j = 0; j < J; ++j) {
        if (!p->valid_mask()[j]) continue;
        ++n[j];
        for (int c = 0; c < C; ++c) sum[j * C + c] += v[j * C + c];
      }
    }
    const auto got = to_vec(set.vectors);
    for (int j = 0; j < J; ++j) {
      CHECK(set.valid[j] == 1);
      for (int c = 0; c < C; ++c) CHECK(std::abs(got[j * C + c] - sum[j * C + c] / n[j]) <= 1e-9);
    }
    CHECK(n[0] == 1);
    CHECK(n[3] == 2);
  }

  SUBCASE("support order does not matter") {
    const auto a = to_vec(fx.net.build_prototypes(g, {&fx.samples[0], &fx.samples[1], &fx.samples[2]}).vectors);
    const auto b = to_vec(fx.net.build_prototypes(g, {&fx.samples[2], &fx.samples[0], &fx.samples[1]}).vectors);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }

  SUBCASE("a keypoint valid in no support has no prediction") {
    auto s = fx.samples;
    s[0].visibility[2] = 0;
    s[1].visibility[2] = 0;
    EpisodeInput in;
    in.supports = {&s[0], &s[1]};
    in.query = &s[3];
    const auto est = fx.net.predict(in);
    CHECK_FALSE(est[2].has_value());
    CHECK(est[1].has_value());
  }

  SUBCASE("empty or inconsistent supports are rejected") {
    CHECK_THROWS_AS(fx.net.build_prototypes(g, {}), ContractViolation);
    auto odd = fx.samples[1];
    odd.keypoints_hm.pop_back();
    odd.visibility.pop_back();
    CHECK_THROWS_AS(fx.net.build_prototypes(g, {&fx.samples[0], &odd}), ContractViolation);
  }
}

TEST_CASE("nearest_cell picks the closest feature cell centre") {
  Fixture fx;
  Rng rng(54);
  const double step = 15.0 / 7.0;
  for (int t = 0; t < 500; ++t) {
    const Point2 p{rng.uniform(0, 15), rng.uniform(0, 15)};
    int best = 0;
    double bd = INFINITY;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double d = std::hypot(p.x - x * step, p.y - y * step);
        if (d < bd) {
          bd = d;
          best = y * 8 + x;
        }
      }
    CHECK(fx.net.nearest_cell(p) == best);
  }
}

TEST_CASE("cosine similarity is scaled and bounded") {
  ProtoNet<double> net(ModelConfig::tiny(), 17, true);
  Fixture fx;
  ag::Graph<double> g(false);
  const auto f = net.stage_features(g, fx.samples[0]);
  const auto sim = to_vec(net.similarity(net.build_prototypes(g, {&fx.samples[1]}), f));
  for (double s : sim) {
    CHECK(s <= ProtoNet<double>::kCosineScale + 1e-9);
    CHECK(s >= -ProtoNet<double>::kCosineScale - 1e-9);
  }
}

TEST_CASE("training loss gradients match finite differences") {
  Fixture fx;
  EpisodeInput in;
  in.supports = {&fx.samples[0], &fx.samples[1]};
  in.query = &fx.samples[2];
  std::vector<ag::Parameter<double>*> params;
  for (std::size_t i = 0; i < fx.net.params().count(); ++i) params.push_back(&fx.net.params().at(i));
  const auto report = testutil::check_gradients(
      params, [&](ag::Graph<double>& g) { return fx.net.training_loss(g, in); }, 4, 55);
  for (const auto& [name, r] : report) {
    CAPTURE(name);
    CHECK(r.rel_error <= 1e-4);
    CHECK(r.analytic_norm > 0.0);
  }
}

TEST_CASE("training loss is skipped when no query keypoint is supervised") {
  Fixture fx;
  auto q = fx.samples[2];
  std::fill(q.visibility.begin(), q.visibility.end(), 0);
  EpisodeInput in;
  in.supports = {&fx.samples[0]};
  in.query = &q;
  ag::Graph<double> g;
  CHECK_FALSE(fx.net.training_loss(g, in).valid());
}

}  // TEST_SUITE
