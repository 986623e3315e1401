#include "pomnet/checkpoint.hpp"
#include "pomnet/errors.hpp"
#include "pomnet/loss.hpp"
#include "pomnet/optimizer.hpp"
#include "pomnet/trainer.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace pomnet;

namespace {

HeatmapStack random_stack(int J, Resolution r, Rng& rng) {
  HeatmapStack h(J, r);
  for (double& v : h.values) v = rng.uniform(0, 1);
  return h;
}

// Direct sum over supervised channels, rows and columns.
double mse_oracle(const HeatmapStack& p, const HeatmapStack& t, const std::vector<std::uint8_t>& sup) {
  double acc = 0;
  int js = 0;
  for (int j = 0; j < p.joints; ++j) {
    if (!sup[j]) continue;
    ++js;
    for (int y = 0; y < p.resolution.height; ++y)
      for (int x = 0; x < p.resolution.width; ++x) acc += std::pow(p.at(j, y, x) - t.at(j, y, x), 2);
  }
  return acc / (js * p.resolution.height * p.resolution.width);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> log_losses(const std::filesystem::path& p) {
  std::vector<double> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (!j.at("loss").is_null()) out.push_back(j.at("loss").get<double>());
  }
  return out;
}

TrainConfig quick_config(const std::filesystem::path& dir, int epochs, int episodes, int batch) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.episodes_per_epoch = episodes;
  tc.batch_size = batch;
  tc.lr_decay_epochs = {};
  tc.val_every = 0;
  tc.seed = 5;
  tc.checkpoint_dir = dir;
  return tc;
}

std::vector<float> flat_params(EpisodicLearner& l) {
  std::vector<float> out;
  for (const auto& t : capture_params(l.params())) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("mse_loss is zero when prediction equals target") {
  Rng rng(1);
  const auto t = random_stack(3, {8, 8}, rng);
  const auto r = mse_loss(t, t, {1, 1, 1});
  CHECK(r.loss == 0.0);
  CHECK(r.supervised == 3);
}

TEST_CASE("constant offset gives c squared") {
  Rng rng(2);
  const auto t = random_stack(4, {6, 5}, rng);
  auto p = t;
  for (double& v : p.values) v += 0.3;
  const auto r = mse_loss(p, t, {1, 0, 1, 1});
  CHECK(r.loss == doctest::Approx(0.09).epsilon(1e-12));
  CHECK(r.per_keypoint[1] == 0.0);
  CHECK(r.per_keypoint[0] == doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("mse_loss matches a triple-loop sum") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_stack(2, {4, 4}, rng);
    const auto g = random_stack(2, {4, 4}, rng);
    std::vector<std::uint8_t> sup = {static_cast<std::uint8_t>(rng.index(2)), 1};
    if (rng.index(2)) std::swap(sup[0], sup[1]);
    const auto r = mse_loss(p, g, sup);
    CHECK(std::abs(r.loss - mse_oracle(p, g, sup)) <= 1e-9);
    const double mean = std::accumulate(r.per_keypoint.begin(), r.per_keypoint.end(), 0.0) / r.supervised;
    CHECK(std::abs(r.loss - mean) <= 1e-12);
    CHECK(r.loss >= 0.0);
  }
}

TEST_CASE("no supervised keypoint is an error") {
  Rng rng(4);
  const auto t = random_stack(2, {4, 4}, rng);
  CHECK_THROWS_AS(mse_loss(t, t, {0, 0}), TrainingError);
  CHECK_THROWS_AS(mse_loss(t, random_stack(3, {4, 4}, rng), {1, 1}), TrainingError);
}

TEST_CASE("unsupervised channels do not affect the loss") {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    auto p = random_stack(4, {5, 5}, rng);
    const auto g = random_stack(4, {5, 5}, rng);
    const std::vector<std::uint8_t> sup = {1, 0, 1, 0};
    const double before = mse_loss(p, g, sup).loss;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        p.at(1, y, x) = rng.normal() * 100;
        p.at(3, y, x) = rng.normal() * 100;
      }
    CHECK(mse_loss(p, g, sup).loss == before);
  }
}

TEST_CASE("loss is invariant to a joint permutation") {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const int J = 5;
    const auto p = random_stack(J, {4, 6}, rng);
    const auto g = random_stack(J, {4, 6}, rng);
    std::vector<std::uint8_t> sup(J);
    for (auto& s : sup) s = static_cast<std::uint8_t>(rng.index(2));
    sup[rng.index(J)] = 1;
    std::vector<int> perm(J);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = J - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    HeatmapStack pp(J, p.resolution), gp(J, g.resolution);
    std::vector<std::uint8_t> sp(J);
    for (int j = 0; j < J; ++j) {
      sp[j] = sup[perm[j]];
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) {
          pp.at(j, y, x) = p.at(perm[j], y, x);
          gp.at(j, y, x) = g.at(perm[j], y, x);
        }
    }
    CHECK(mse_loss(pp, gp, sp).loss == doctest::Approx(mse_loss(p, g, sup).loss).epsilon(1e-12));
  }
}

TEST_CASE("first Adam step moves each parameter by at most lr against the gradient") {
  ParamStore<float> store;
  Rng rng(7);
  auto& p = store.add("w", {64});
  for (float& v : p.value) v = static_cast<float>(rng.normal());
  const auto before = p.value;
  p.grad.resize(64);
  for (float& g : p.grad) g = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-4, 2)));
  Adam adam(store);
  const double lr = 1e-3;
  adam.step(lr);
  for (std::size_t i = 0; i < 64; ++i) {
    const double delta = static_cast<double>(p.value[i]) - before[i];
    CHECK(std::abs(delta) <= lr * (1 + 1e-4));
    CHECK(delta * p.grad[i] <= 0.0);
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("step decay reproduces the 1e-3, 1e-4, 1e-5 schedule") {
  const std::vector<int> decay = {170, 200};
  CHECK(step_decay_lr(1e-3, decay, 0.1, 0) == doctest::Approx(1e-3));
  CHECK(step_decay_lr(1e-3, decay, 0.1, 169) == doctest::Approx(1e-3));
  CHECK(step_decay_lr(1e-3, decay, 0.1, 170) == doctest::Approx(1e-4));
  CHECK(step_decay_lr(1e-3, decay, 0.1, 199) == doctest::Approx(1e-4));
  CHECK(step_decay_lr(1e-3, decay, 0.1, 200) == doctest::Approx(1e-5));
  CHECK(step_decay_lr(1e-3, decay, 0.1, 209) == doctest::Approx(1e-5));
  const auto full = TrainConfig::full();
  CHECK(full.epochs == 210);
  CHECK(full.lr_decay_epochs == decay);
}

TEST_CASE("train config validation and JSON round trip") {
  TrainConfig c;
  c.lr_decay_epochs = {10, 5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.lr_decay_epochs = {40};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.lr_decay_epochs = {30};
  c.base_lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.base_lr = 5e-4;
  c.seed = 17;
  c.shots = 5;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(TrainConfig::from_json("{\"epochs\": 3, \"lr_decay_epochs\": [1]}").epochs == 3);
  CHECK_THROWS_AS(TrainConfig::from_json("{\"epochs\": \"x\"}"), ConfigError);
}

TEST_CASE("checkpoints reject corruption and mismatched models") {
  const auto dir = testutil::scratch_dir("train_ckpt");
  auto learner = make_learner("pomnet", ModelConfig::tiny(), 3);
  Checkpoint ck;
  ck.config = learner->config();
  ck.params = capture_params(learner->params());
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  CHECK(checkpoint_id(back) == checkpoint_id(ck));
  CHECK(back.params.size() == ck.params.size());

  const auto bytes = read_file(dir / "a.ckpt");
  std::ofstream(dir / "b.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.ckpt"), CheckpointError);
  std::ofstream(dir / "c.ckpt", std::ios::binary) << "XX" << bytes.substr(2);
  CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);

  auto proto = make_learner("protonet", ModelConfig::tiny(), 3);
  CHECK_THROWS_AS(restore_params(proto->params(), back.params), CheckpointError);
  CHECK_THROWS_AS(make_learner("resnet", ModelConfig::tiny(), 3), ConfigError);
}

TEST_CASE("training needs K+1 instances per category") {
  SynthConfig sc;
  sc.families = {{"triangle", 3}, {"square", 3}};
  sc.image_size = 64;
  sc.k_max = 2;
  const auto ds = generate_synthetic(sc, 8);
  auto learner = make_learner("pomnet", ModelConfig::tiny(), 1);
  auto tc = quick_config({}, 1, 2, 1);
  tc.shots = 3;
  CHECK_THROWS_AS(train(*learner, ds.annotations, ds.split, tc), SamplingError);
}

TEST_CASE("loss falls during 500 steps on one category") {
  const auto ds = testutil::small_synth({"triangle"}, 40, 11, 64);
  auto learner = make_learner("pomnet", ModelConfig::tiny(), 2);
  const auto dir = testutil::scratch_dir("train_decrease");
  auto tc = quick_config(dir, 1, 1000, 2);
  const auto r = train(*learner, ds.annotations, ds.split, tc);
  CHECK(r.steps == 500);
  const auto losses = log_losses(dir / "metrics.ndjson");
  REQUIRE(losses.size() >= 400);
  const double first = std::accumulate(losses.begin(), losses.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(losses.end() - 50, losses.end(), 0.0) / 50;
  MESSAGE("first 50 mean " << first << ", last 50 mean " << last);
  CHECK(last < 0.25 * first);
}

TEST_CASE("same seed gives identical logs and parameters") {
  const auto ds = testutil::small_synth({"triangle", "square", "hexagon"}, 8, 12, 64, {"hexagon"});
  std::string logs[2];
  std::vector<float> params[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = testutil::scratch_dir("train_det_" + std::to_string(run));
    auto learner = make_learner("pomnet", ModelConfig::tiny(), 9);
    train(*learner, ds.annotations, ds.split, quick_config(dir, 2, 12, 4));
    logs[run] = read_file(dir / "metrics.ndjson");
    params[run] = flat_params(*learner);
  }
  CHECK(!logs[0].empty());
  CHECK(logs[0] == logs[1]);
  CHECK(params[0] == params[1]);
}

TEST_CASE("resuming from an epoch checkpoint matches an uninterrupted run") {
  const auto ds = testutil::small_synth({"triangle", "square", "hexagon"}, 8, 13, 64, {"hexagon"});
  for (const std::string kind : {"pomnet", "protonet"}) {
    CAPTURE(kind);
    const auto full_dir = testutil::scratch_dir("train_full_" + kind);
    auto a = make_learner(kind, ModelConfig::tiny(), 4);
    auto tc = quick_config(full_dir, 3, 8, 4);
    tc.lr_decay_epochs = {2};
    const auto ra = train(*a, ds.annotations, ds.split, tc);
    CHECK(ra.checkpoints.size() == 3);

    const auto resume_dir = testutil::scratch_dir("train_resume_" + kind);
    std::filesystem::copy_file(epoch_checkpoint_path(full_dir, 0), resume_dir / "start.ckpt");
    std::ofstream(resume_dir / "metrics.ndjson") << read_file(full_dir / "metrics.ndjson");
    auto b = make_learner(kind, ModelConfig::tiny(), 99);
    auto tb = tc;
    tb.checkpoint_dir = resume_dir;
    const auto rb = train(*b, ds.annotations, ds.split, tb, resume_dir / "start.ckpt");
    CHECK(rb.epochs_completed == 3);
    CHECK(rb.steps == ra.steps);
    CHECK(flat_params(*a) == flat_params(*b));
    CHECK(read_file(full_dir / "metrics.ndjson") == read_file(resume_dir / "metrics.ndjson"));
    CHECK(rb.last_epoch_loss == ra.last_epoch_loss);

    auto other = make_learner(kind == "pomnet" ? "protonet" : "pomnet", ModelConfig::tiny(), 4);
    CHECK_THROWS_AS(train(*other, ds.annotations, ds.split, tb, resume_dir / "start.ckpt"), CheckpointError);
  }
}

}  // TEST_SUITE
