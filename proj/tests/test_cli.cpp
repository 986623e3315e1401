#include "test_util.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(POMNET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared synthetic dataset, written once.
const fs::path& dataset() {
  static const fs::path dir = [] {
    const auto d = testutil::scratch_dir("cli_data");
    const int rc = run("synth --out " + (d / "ds").string() +
                           " --families triangle,square,pentagon --instances 12 --image-size 64"
                           " --val square --test pentagon --seed 3",
                       d / "synth.log");
    REQUIRE(rc == 0);
    return d / "ds";
  }();
  return dir;
}

const char* kTrainConfig = R"({
  "model": "tiny",
  "train": {"epochs": 2, "episodes_per_epoch": 8, "batch_size": 4, "lr_decay_epochs": [1],
            "val_every": 1, "val_episodes": 3}
})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth writes one annotation per instance") {
  const auto dir = testutil::scratch_dir("cli_synth");
  REQUIRE(run("synth --out " + (dir / "ds").string() + " --families triangle,square --instances 50", dir / "log") == 0);
  const auto ann = json::parse(read_file(dir / "ds" / "annotations.json"));
  CHECK(ann["annotations"].size() == 100);
  CHECK(ann["categories"].size() == 2);
  CHECK(fs::exists(dir / "ds" / "split.json"));
}

TEST_CASE("eval with the oracle predictor reports 1.0") {
  const auto dir = testutil::scratch_dir("cli_oracle");
  REQUIRE(run("eval --predictor oracle --data " + dataset().string() + " --episodes 10 --out " +
                  (dir / "r.json").string(),
              dir / "log") == 0);
  const auto r = json::parse(read_file(dir / "r.json"));
  CHECK(r["mean"] == 1.0);
  CHECK(r["episodes_per_category"] == 10);
}

TEST_CASE("usage errors exit with 2 and runtime failures with 1") {
  const auto dir = testutil::scratch_dir("cli_errors");
  CHECK(run("", dir / "a") == 2);
  CHECK(run("frobnicate", dir / "b") == 2);
  CHECK(run("synth", dir / "c") == 2);
  CHECK(run("eval --data " + dataset().string(), dir / "d") == 2);
  CHECK(run("eval --predictor oracle --sigma 3 --data " + dataset().string(), dir / "e") == 2);
  CHECK(run("train --data " + dataset().string() + " --seed 1 --model resnet", dir / "f") == 2);
  CHECK(run("eval --predictor oracle --data " + (dir / "missing").string(), dir / "g") == 1);
  CHECK(read_file(dir / "g").find("error") != std::string::npos);
  CHECK(run("synth --out " + (dir / "x").string() + " --families dodecagon", dir / "h") == 1);
  CHECK(run("eval --checkpoint " + (dir / "none.ckpt").string() + " --data " + dataset().string(), dir / "i") == 1);
}

TEST_CASE("train then eval twice with one seed gives identical files") {
  const auto dir = testutil::scratch_dir("cli_det");
  std::ofstream(dir / "config.json") << kTrainConfig;
  std::string logs[2], results[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = dir / ("run" + std::to_string(i));
    REQUIRE(run("train --config " + (dir / "config.json").string() + " --data " + dataset().string() +
                    " --seed 7 --out " + out.string(),
                dir / "train.log") == 0);
    REQUIRE(run("eval --checkpoint " + (out / "last.ckpt").string() + " --data " + dataset().string() +
                    " --episodes 5 --k 1 --seed 2 --out " + (out / "result.json").string(),
                dir / "eval.log") == 0);
    logs[i] = read_file(out / "metrics.ndjson");
    results[i] = read_file(out / "result.json");
  }
  CHECK(!logs[0].empty());
  CHECK(logs[0] == logs[1]);
  CHECK(results[0] == results[1]);
  int lines = 0, with_val = 0;
  std::stringstream ss(logs[0]);
  for (std::string line; std::getline(ss, line); ++lines) {
    const auto rec = json::parse(line);
    for (const char* k : {"step", "epoch", "loss", "lr"}) CHECK(rec.contains(k));
    with_val += rec.contains("val_pck");
  }
  CHECK(lines == 4);
  CHECK(with_val == 2);
  CHECK(json::parse(results[0])["predictor"]["name"] == "pomnet");
}

TEST_CASE("predict reads a support file and writes J keypoints") {
  const auto dir = testutil::scratch_dir("cli_predict");
  std::ofstream(dir / "config.json") << kTrainConfig;
  REQUIRE(run("train --config " + (dir / "config.json").string() + " --data " + dataset().string() +
                  " --seed 1 --epochs 1 --out " + (dir / "ckpt").string(),
              dir / "train.log") == 0);
  const auto ann = json::parse(read_file(dataset() / "annotations.json"));
  json sup = json::array();
  std::string query;
  for (const auto& a : ann["annotations"]) {
    if (a["category_id"] != ann["annotations"][0]["category_id"]) continue;
    std::string file;
    for (const auto& im : ann["images"])
      if (im["id"] == a["image_id"]) file = im["file"];
    if (sup.empty()) sup.push_back({{"image", (dataset() / file).string()}, {"keypoints", a["keypoints"]}});
    else query = (dataset() / file).string();
  }
  std::ofstream(dir / "support.json") << json{{"supports", sup}, {"keypoint_names", {"a", "b", "c"}}}.dump();
  REQUIRE(run("predict --checkpoint " + (dir / "ckpt" / "last.ckpt").string() + " --support " +
                  (dir / "support.json").string() + " --query " + query + " --out " + (dir / "p.json").string(),
              dir / "predict.log") == 0);
  const auto p = json::parse(read_file(dir / "p.json"));
  REQUIRE(p["keypoints"].size() == 3);
  CHECK(p["keypoints"][0]["name"] == "a");
  CHECK(p["keypoints"][2]["x"].is_number());
  CHECK(run("predict --checkpoint " + (dir / "ckpt" / "last.ckpt").string() + " --support " +
                (dir / "support.json").string() + " --query " + (dir / "none.png").string(),
            dir / "bad.log") == 1);
}

TEST_CASE("serve answers health checks until terminated") {
  const auto dir = testutil::scratch_dir("cli_serve");
  std::ofstream(dir / "config.json") << kTrainConfig;
  REQUIRE(run("train --config " + (dir / "config.json").string() + " --data " + dataset().string() +
                  " --seed 1 --epochs 1 --out " + (dir / "ckpt").string(),
              dir / "train.log") == 0);
  int fds[2];
  REQUIRE(pipe(fds) == 0);
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    dup2(fds[1], STDOUT_FILENO);
    close(fds[0]);
    const std::string ckpt = (dir / "ckpt" / "last.ckpt").string();
    execl(POMNET_CLI_PATH, POMNET_CLI_PATH, "serve", "--checkpoint", ckpt.c_str(), "--port", "0", "--cors",
          static_cast<char*>(nullptr));
    _exit(127);
  }
  close(fds[1]);
  std::string line;
  char ch;
  while (read(fds[0], &ch, 1) == 1 && ch != '\n') line += ch;
  close(fds[0]);
  const auto colon = line.rfind(':');
  REQUIRE(colon != std::string::npos);
  const int port = std::stoi(line.substr(colon + 1));
  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/api/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body)["status"] == "ok");
  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
}

}  // TEST_SUITE
