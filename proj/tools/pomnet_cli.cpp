#include "pomnet/checkpoint.hpp"
#include "pomnet/errors.hpp"
#include "pomnet/evaluate.hpp"
#include "pomnet/predictors.hpp"
#include "pomnet/service.hpp"
#include "pomnet/synth.hpp"
#include "pomnet/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace pomnet;
using nlohmann::ordered_json;

namespace {

// Flag combinations CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// --data accepts a dataset directory or an annotation file.
AnnotationSet load_data(const std::filesystem::path& data) {
  auto set = load_annotations(std::filesystem::is_directory(data) ? data / "annotations.json" : data);
  set.preload_images();
  return set;
}

DatasetSplit load_split_for(const std::filesystem::path& data, const std::string& split) {
  if (!split.empty()) return load_split(split);
  if (std::filesystem::is_directory(data)) return load_split(data / "split.json");
  throw UsageError("--split is required when --data is a file");
}

struct SynthArgs {
  std::string out, families, val, test, config;
  int instances = 50;
  int image_size = 96;
  std::uint64_t seed = 0;
};

void run_synth(const SynthArgs& a) {
  SynthConfig cfg;
  if (!a.config.empty()) cfg = SynthConfig::from_json(read_text(a.config));
  if (!a.families.empty()) {
    cfg.families.clear();
    for (const auto& f : split_list(a.families)) cfg.families.push_back({f, a.instances});
  } else if (a.config.empty()) {
    for (const auto& f : synth_family_names()) cfg.families.push_back({f, a.instances});
  }
  if (a.config.empty()) cfg.image_size = a.image_size;
  if (!a.val.empty()) cfg.val_families = split_list(a.val);
  if (!a.test.empty()) cfg.test_families = split_list(a.test);
  const SynthDataset ds = generate_synthetic(cfg, a.seed);
  write_synthetic(ds, a.out);
  std::cout << "wrote " << ds.annotations.instances.size() << " annotations in " << ds.annotations.categories.size()
            << " categories to " << a.out << "\n";
}

struct TrainArgs {
  std::string config, data, split, out, resume, model = "pomnet";
  std::uint64_t seed = 0;
  int epochs = 0, episodes = 0;
};

void run_train(const TrainArgs& a) {
  ModelConfig model = ModelConfig::desk();
  TrainConfig tc = TrainConfig::desk();
  std::string kind = a.model;
  bool cosine = false;
  if (!a.config.empty()) {
    const auto j = ordered_json::parse(read_text(a.config));
    if (j.contains("model")) {
      model = j["model"].is_string() ? ModelConfig::preset(j["model"].get<std::string>())
                                     : ModelConfig::from_json(j["model"].dump());
    }
    if (j.contains("train")) tc = TrainConfig::from_json(j["train"].dump());
    kind = j.value("kind", kind);
    cosine = j.value("cosine", cosine);
  }
  tc.seed = a.seed;
  if (a.epochs > 0) {
    tc.epochs = a.epochs;
    std::erase_if(tc.lr_decay_epochs, [&](int e) { return e >= tc.epochs; });
  }
  if (a.episodes > 0) tc.episodes_per_epoch = a.episodes;
  if (!a.out.empty()) tc.checkpoint_dir = a.out;
  if (tc.checkpoint_dir.empty()) throw UsageError("an output directory is required (--out or train.checkpoint_dir)");
  const AnnotationSet pool = load_data(a.data);
  const DatasetSplit split = load_split_for(a.data, a.split);
  auto learner = make_learner(kind, model, tc.seed, cosine);
  std::optional<std::filesystem::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  const TrainResult r = train(*learner, pool, split, tc, resume);
  std::cout << "trained " << learner->kind() << " for " << r.epochs_completed << " epochs (" << r.steps
            << " steps); last epoch loss " << r.last_epoch_loss << "\n";
  if (!r.checkpoints.empty()) std::cout << "checkpoint: " << r.checkpoints.back().string() << "\n";
}

struct EvalArgs {
  std::string checkpoint, data, split, out, predictor, categories = "test";
  double sigma = 0.2;
  int episodes = 100, k = 1;
  std::uint64_t seed = 0;
};

void run_eval(const EvalArgs& a) {
  std::unique_ptr<Predictor> predictor;
  if (a.predictor == "oracle") predictor = std::make_unique<OraclePredictor>();
  else if (a.predictor == "random") predictor = std::make_unique<RandomPredictor>(a.seed);
  else if (a.checkpoint.empty()) throw UsageError("--checkpoint or --predictor is required");
  else predictor = load_predictor(a.checkpoint);

  const AnnotationSet pool = load_data(a.data);
  const DatasetSplit split = load_split_for(a.data, a.split);
  std::vector<int> cats;
  if (a.categories == "test") cats = split.test;
  else if (a.categories == "val") cats = split.val;
  else if (a.categories == "train") cats = split.train;
  else
    for (const auto& c : split_list(a.categories)) cats.push_back(std::stoi(c));
  PckConfig pc;
  pc.sigma = a.sigma;
  pc.episodes_per_category = a.episodes;
  pc.shots = a.k;
  pc.seed = a.seed;
  const PckResult r = evaluate(*predictor, pool, split, cats, pc);
  const std::string text = r.to_json() + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
}

struct PredictArgs {
  std::string checkpoint, support, query, out;
};

void run_predict(const PredictArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  PomNetPredictor predictor(pomnet_from_checkpoint(ckpt), checkpoint_id(ckpt));
  const auto geometry = predictor.geometry();
  const std::filesystem::path base = std::filesystem::path(a.support).parent_path();
  const auto j = ordered_json::parse(read_text(a.support));
  if (!j.contains("supports") || !j["supports"].is_array() || j["supports"].empty())
    throw ParseError(a.support + ": expected a non-empty 'supports' array");
  std::vector<ProcessedSample> supports;
  std::size_t J = 0;
  for (std::size_t s = 0; s < j["supports"].size(); ++s) {
    const auto& e = j["supports"][s];
    const std::string where = a.support + ": supports[" + std::to_string(s) + "]";
    if (!e.contains("image") || !e.contains("keypoints")) throw ParseError(where + " needs 'image' and 'keypoints'");
    auto image = std::make_shared<Image>(read_image(base / e["image"].get<std::string>()));
    InstanceAnnotation inst;
    inst.id = static_cast<int>(s);
    inst.image = image;
    inst.width = image->width;
    inst.height = image->height;
    const auto flat = e["keypoints"].get<std::vector<double>>();
    if (flat.size() % 3 != 0) throw ValidationError(where + ": keypoints must be x, y, v triplets");
    for (std::size_t i = 0; i < flat.size(); i += 3)
      inst.keypoints.push_back({flat[i], flat[i + 1], static_cast<int>(flat[i + 2])});
    if (e.contains("bbox")) {
      const auto b = e["bbox"].get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError(where + ": bbox must be [x, y, w, h]");
      inst.bbox = BBox{b[0], b[1], b[2], b[3]};
    }
    if (s == 0) J = inst.keypoints.size();
    if (inst.keypoints.size() != J) throw ValidationError(where + ": keypoint count differs from supports[0]");
    supports.push_back(preprocess(inst, *image, geometry, false, 0));
  }
  const Image qimg = read_image(a.query);
  InstanceAnnotation q;
  q.image = std::make_shared<Image>(qimg);
  q.width = qimg.width;
  q.height = qimg.height;
  q.keypoints.assign(J, Keypoint{});
  const ProcessedSample query = preprocess(q, qimg, geometry, false, 0);
  const auto est = predictor.estimate(supports, query);
  const auto names = j.value("keypoint_names", std::vector<std::string>{});
  ordered_json kps = ordered_json::array();
  for (std::size_t i = 0; i < est.size(); ++i) {
    ordered_json k;
    k["name"] = i < names.size() ? names[i] : "kp" + std::to_string(i + 1);
    if (est[i]) {
      k["x"] = est[i]->x;
      k["y"] = est[i]->y;
      k["confidence"] = std::clamp(est[i]->confidence, 0.0, 1.0);
    } else {
      k["x"] = nullptr;
      k["y"] = nullptr;
      k["confidence"] = 0.0;
    }
    kps.push_back(k);
  }
  const ordered_json out{{"query", a.query}, {"model_id", checkpoint_id(ckpt)}, {"keypoints", kps}};
  const std::string text = out.dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
}

struct ServeArgs {
  std::string checkpoint, host = "127.0.0.1";
  int port = 8080;
  bool cors = false;
  int ttl = 3600;
};

HttpServer* g_server = nullptr;

void run_serve(const ServeArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  ServiceOptions opts;
  opts.cors = a.cors;
  opts.session_ttl = std::chrono::seconds(a.ttl);
  InferenceService service(pomnet_from_checkpoint(ckpt), checkpoint_id(ckpt), opts);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  if (port < 0) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(a.port));
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cout << "serving " << checkpoint_id(ckpt) << " on http://" << a.host << ":" << port << std::endl;
  server.listen();
  g_server = nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Category-agnostic pose estimation toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic multi-category dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--families", sa.families, "Comma-separated shape families (default: all)");
  synth->add_option("--instances", sa.instances, "Instances per family")->check(CLI::PositiveNumber);
  synth->add_option("--image-size", sa.image_size, "Square image side in pixels");
  synth->add_option("--val", sa.val, "Comma-separated validation families");
  synth->add_option("--test", sa.test, "Comma-separated test (novel) families");
  synth->add_option("--config", sa.config, "Generator config JSON");
  synth->add_option("--seed", sa.seed, "Random seed");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Episodic training");
  trn->add_option("--config", ta.config, "JSON with optional 'model', 'train', 'kind', 'cosine'");
  trn->add_option("--data", ta.data, "Dataset directory or annotation file")->required();
  trn->add_option("--split", ta.split, "Split JSON (default: <data>/split.json)");
  trn->add_option("--seed", ta.seed, "Random seed")->required();
  trn->add_option("--out", ta.out, "Checkpoint and metric-log directory");
  trn->add_option("--model", ta.model, "pomnet or protonet")->check(CLI::IsMember({"pomnet", "protonet"}));
  trn->add_option("--resume", ta.resume, "Resume from an epoch checkpoint");
  trn->add_option("--epochs", ta.epochs, "Override epoch count")->check(CLI::PositiveNumber);
  trn->add_option("--episodes", ta.episodes, "Override episodes per epoch")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Episodic PCK evaluation");
  ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint");
  ev->add_option("--predictor", ea.predictor, "Reference predictor instead of a checkpoint")
      ->check(CLI::IsMember({"oracle", "random"}));
  ev->add_option("--data", ea.data, "Dataset directory or annotation file")->required();
  ev->add_option("--split", ea.split, "Split JSON (default: <data>/split.json)");
  ev->add_option("--categories", ea.categories, "test, val, train or comma-separated ids");
  ev->add_option("--sigma", ea.sigma, "PCK threshold")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--episodes", ea.episodes, "Episodes per category")->check(CLI::PositiveNumber);
  ev->add_option("--k", ea.k, "Shots per episode")->check(CLI::PositiveNumber);
  ev->add_option("--seed", ea.seed, "Random seed");
  ev->add_option("--out", ea.out, "Result JSON path");

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Predict query keypoints from annotated supports");
  pr->add_option("--checkpoint", pa.checkpoint, "Model checkpoint")->required();
  pr->add_option("--support", pa.support, "Support JSON")->required();
  pr->add_option("--query", pa.query, "Query image")->required();
  pr->add_option("--out", pa.out, "Output JSON path");

  ServeArgs va;
  auto* sv = app.add_subcommand("serve", "HTTP inference service for the annotator");
  sv->add_option("--checkpoint", va.checkpoint, "Model checkpoint")->required();
  sv->add_option("--host", va.host, "Bind address");
  sv->add_option("--port", va.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  sv->add_flag("--cors", va.cors, "Allow cross-origin requests");
  sv->add_option("--ttl", va.ttl, "Session lifetime in seconds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) run_synth(sa);
    else if (*trn) run_train(ta);
    else if (*ev) run_eval(ea);
    else if (*pr) run_predict(pa);
    else if (*sv) run_serve(va);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
