#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "instformer/cli/commands.hpp"
#include "instformer/cli/config.hpp"
#include "instformer/cli/pipeline.hpp"
#include "instformer/core/checkpoint.hpp"
#include "instformer/core/errors.hpp"

namespace fs = std::filesystem;
using namespace instformer;
using namespace instformer::cli;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& rel = "") const { return (rel.empty() ? path : path / rel).string(); }
};

// tiny-but-real configuration: everything wired, schedules minimal
void write_test_config(const fs::path& where, const fs::path& root, int stage1_steps = 12,
                       int vlm_steps = 8) {
  nlohmann::json j = {
      {"corpus", {{"num_videos", 8}, {"frames_per_video", 8}, {"max_instances_per_frame", 4}, {"seed", 7}}},
      {"train",
       {{"vlm_steps", vlm_steps},
        {"vlm_batch", 6},
        {"stage1_steps", stage1_steps},
        {"stage1_batch", 1},
        {"stage2_steps", 10},
        {"seed", 0}}},
      {"paths",
       {{"corpus", (root / "corpus").string()},
        {"vlm_checkpoint", (root / "out" / "vlm.ckpt").string()},
        {"stage1_checkpoint", (root / "out" / "stage1.ckpt").string()},
        {"stage2_checkpoint", (root / "out" / "stage2.ckpt").string()}}}};
  std::ofstream f(where);
  f << j.dump(2);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("gen-data: determinism, schema, config errors" * doctest::timeout(120)) {
  TempDir tmp("instformer_cli_gen");
  write_test_config(tmp.path / "config.json", tmp.path);

  CHECK(run({"gen-data", "--config", tmp.str("config.json"), "--out", tmp.str("c1")}) == 0);
  CHECK(run({"gen-data", "--config", tmp.str("config.json"), "--out", tmp.str("c2")}) == 0);
  CHECK(slurp(tmp.path / "c1" / "manifest.json") == slurp(tmp.path / "c2" / "manifest.json"));
  CHECK(slurp(tmp.path / "c1" / "video_0" / "frames.u8") == slurp(tmp.path / "c2" / "video_0" / "frames.u8"));

  // different seed changes the corpus
  CHECK(run({"gen-data", "--config", tmp.str("config.json"), "--out", tmp.str("c3"), "--seed", "9"}) == 0);
  CHECK(slurp(tmp.path / "c1" / "video_0" / "frames.u8") != slurp(tmp.path / "c3" / "video_0" / "frames.u8"));

  // manifest validates against the loader (schema check)
  auto manifest = datakit::load_manifest(tmp.str("c1"));
  CHECK(manifest.videos.size() == 8);
  CHECK(manifest.vocab.size() == 16);
  CHECK(manifest.spec.seed == 7);

  // missing config file -> exit 2
  CHECK(run({"gen-data", "--config", tmp.str("missing.json")}) == 2);
  // missing required flag -> usage error -> exit 2
  CHECK(run({"gen-data"}) == 2);

  // invalid config content -> exit 2
  std::ofstream bad(tmp.path / "bad.json");
  bad << "{\"corpus\": {\"seen_fraction\": 7}}";
  bad.close();
  CHECK(run({"gen-data", "--config", tmp.str("bad.json")}) == 2);
}

TEST_CASE("pretrain-vlm: zero steps equals init, determinism, annotation audit" * doctest::timeout(300)) {
  TempDir tmp("instformer_cli_vlm");
  write_test_config(tmp.path / "config.json", tmp.path);
  REQUIRE(run({"gen-data", "--config", tmp.str("config.json")}) == 0);

  // the pretraining path must not depend on instance/tracking annotations:
  // remove every annotations.json before running it
  for (auto& e : fs::recursive_directory_iterator(tmp.path / "corpus"))
    if (e.path().filename() == "annotations.json") fs::remove(e.path());

  // zero training steps: checkpoint equals initialization
  {
    nlohmann::json j = nlohmann::json::parse(slurp(tmp.path / "config.json"));
    j["train"]["vlm_steps"] = 0;
    std::ofstream f(tmp.path / "config0.json");
    f << j.dump();
  }
  REQUIRE(run({"pretrain-vlm", "--config", tmp.str("config0.json"), "--out", tmp.str("o0")}) == 0);
  auto loaded = tinyvlm::TinyVlm::load(tmp.str("o0") + "/vlm.ckpt");
  auto cfg = load_config(tmp.str("config0.json"));
  tinyvlm::TinyVlmConfig vcfg;
  vcfg.frame_h = cfg.corpus.height;
  vcfg.frame_w = cfg.corpus.width;
  auto fresh = tinyvlm::TinyVlm::init(vcfg, datakit::default_category_names(), 0);
  for (const auto& [name, v] : fresh.pm.params) {
    const auto& got = loaded.pm.get(name)->val;
    REQUIRE(got.size() == v->val.size());
    for (size_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == doctest::Approx(double(float(v->val[i]))));
  }

  // same seed twice: byte-identical checkpoints
  REQUIRE(run({"pretrain-vlm", "--config", tmp.str("config.json"), "--out", tmp.str("oa")}) == 0);
  REQUIRE(run({"pretrain-vlm", "--config", tmp.str("config.json"), "--out", tmp.str("ob")}) == 0);
  CHECK(slurp(tmp.path / "oa" / "vlm.ckpt") == slurp(tmp.path / "ob" / "vlm.ckpt"));

  // the recorded zero-shot accuracy matches an offline recompute
  auto report = nlohmann::json::parse(slurp(tmp.path / "oa" / "vlm_report.json"));
  auto vlm = tinyvlm::TinyVlm::load(tmp.str("oa") + "/vlm.ckpt");
  double recomputed = tinyvlm::zero_shot_accuracy(vlm, 200, core::Rng::derive(0, 0xea1ULL));
  CHECK(report["zero_shot_top1"].get<double>() == doctest::Approx(recomputed).epsilon(1e-9));
}

TEST_CASE("train/infer/eval: exit codes, freeze audit, parity, determinism" * doctest::timeout(600)) {
  TempDir tmp("instformer_cli_train");
  write_test_config(tmp.path / "config.json", tmp.path);
  REQUIRE(run({"gen-data", "--config", tmp.str("config.json")}) == 0);

  // stage 1 without the VLM checkpoint -> exit 2
  CHECK(run({"train", "--stage", "1", "--config", tmp.str("config.json"), "--out", tmp.str("out")}) == 2);

  REQUIRE(run({"pretrain-vlm", "--config", tmp.str("config.json"), "--out", tmp.str("out")}) == 0);
  REQUIRE(run({"train", "--stage", "1", "--config", tmp.str("config.json"), "--out", tmp.str("out")}) == 0);
  CHECK(fs::exists(tmp.path / "out" / "train_log.jsonl"));
  CHECK(fs::exists(tmp.path / "out" / "train_log_stage1.jsonl"));

  // freeze audit: stage-1 checkpoint carries bit-identical base VLM tensors
  auto vlm_ck = core::Checkpoint::load(tmp.str("out") + "/vlm.ckpt");
  auto s1_ck = core::Checkpoint::load(tmp.str("out") + "/stage1.ckpt");
  int vlm_tensors = 0;
  for (const auto& [name, t] : vlm_ck.tensors) {
    REQUIRE(s1_ck.has(name));
    REQUIRE(vlm_ck.raw_bytes(name) == s1_ck.raw_bytes(name));
    ++vlm_tensors;
  }
  CHECK(vlm_tensors > 10);
  bool has_lora = false, has_proposal = false;
  for (const auto& [name, t] : s1_ck.tensors) {
    has_lora |= name.rfind("instclip.lora.", 0) == 0;
    has_proposal |= name.rfind("proposal.", 0) == 0;
  }
  CHECK(has_lora);
  CHECK(has_proposal);

  // stage 2, then inference in rollout mode
  REQUIRE(run({"train", "--stage", "2", "--config", tmp.str("config.json"), "--out", tmp.str("out")}) == 0);

  // rollout inference demands a stage-2 checkpoint
  CHECK(run({"infer", "--config", tmp.str("config.json"), "--checkpoint", tmp.str("out") + "/stage1.ckpt",
             "--split", "eval", "--out", tmp.str("p_bad")}) == 2);

  REQUIRE(run({"infer", "--config", tmp.str("config.json"), "--checkpoint", tmp.str("out") + "/stage2.ckpt",
               "--split", "eval", "--out", tmp.str("p1")}) == 0);
  REQUIRE(run({"infer", "--config", tmp.str("config.json"), "--checkpoint", tmp.str("out") + "/stage2.ckpt",
               "--split", "eval", "--out", tmp.str("p2")}) == 0);

  // eval-mode rerun is bit-identical; track ids unique per video; schema loads
  auto manifest = datakit::load_manifest(tmp.str("corpus"));
  for (int id : manifest.video_ids("eval")) {
    std::string name = "video_" + std::to_string(id) + ".json";
    CHECK(slurp(tmp.path / "p1" / name) == slurp(tmp.path / "p2" / name));
    auto j = nlohmann::json::parse(slurp(tmp.path / "p1" / name));
    std::set<int> ids;
    for (const auto& t : j["tracks"]) {
      CHECK(ids.insert(t["id"].get<int>()).second);  // unique
      CHECK(t.contains("category_index"));
      CHECK(t.contains("score"));
      CHECK(t.contains("span"));
      CHECK(t.contains("masks"));
    }
  }

  // eval via CLI equals calling the metrics module directly
  REQUIRE(run({"eval", "--config", tmp.str("config.json"), "--predictions", tmp.str("p1"), "--split", "eval",
               "--out", tmp.str("ev")}) == 0);
  auto metrics_json = nlohmann::json::parse(slurp(tmp.path / "ev" / "metrics.json"));
  auto cfg = load_config(tmp.str("config.json"));
  auto gts = load_split_gt(tmp.str("corpus"), manifest, "eval");
  auto preds = load_predictions(tmp.str("p1"), manifest.video_ids("eval"), 64, 64);
  auto direct = metrics::evaluate(preds, gts, manifest.vocab);
  CHECK(metrics_json["ap_all"].get<double>() == doctest::Approx(direct.ap_all).epsilon(1e-12));
  CHECK(metrics_json["ar10_all"].get<double>() == doctest::Approx(direct.ar10_all).epsilon(1e-12));
  CHECK(metrics_json["id_switches"].get<int>() == direct.id_switches);
  CHECK(metrics_json.contains("config"));  // resolved config embedded

  // deterministic training: rerun stage 1 into a second directory
  REQUIRE(run({"train", "--stage", "1", "--config", tmp.str("config.json"), "--out", tmp.str("out_b")}) == 0);
  CHECK(slurp(tmp.path / "out" / "stage1.ckpt") == slurp(tmp.path / "out_b" / "stage1.ckpt"));

  // report command produces plots and the summary table
  REQUIRE(run({"report", "--metrics", tmp.str("ev") + "/metrics.json", "--label", "smoke", "--train-log",
               tmp.str("out") + "/train_log_stage1.jsonl", "--out", tmp.str("rep")}) == 0);
  CHECK(fs::exists(tmp.path / "rep" / "ap_bars.svg"));
  CHECK(fs::exists(tmp.path / "rep" / "loss_curves.svg"));
  CHECK(fs::exists(tmp.path / "rep" / "summary.md"));
  auto svg = slurp(tmp.path / "rep" / "ap_bars.svg");
  CHECK(svg.find("<svg") != std::string::npos);
}

TEST_CASE("perfect and empty predictions bracket the eval pipeline") {
  TempDir tmp("instformer_cli_brackets");
  write_test_config(tmp.path / "config.json", tmp.path);
  REQUIRE(run({"gen-data", "--config", tmp.str("config.json")}) == 0);
  auto manifest = datakit::load_manifest(tmp.str("corpus"));
  auto eval_ids = manifest.video_ids("eval");

  // hand-write predictions straight from ground truth, and an empty set
  fs::create_directories(tmp.path / "perfect");
  fs::create_directories(tmp.path / "empty");
  for (int id : eval_ids) {
    auto clip = datakit::load_video(tmp.str("corpus"), manifest, id, false);
    auto gt = metrics::gt_from_clip(clip);
    metrics::VideoPredictions pred;
    pred.video_id = id;
    for (const auto& g : gt.tracks) {
      metrics::PredTrack t;
      t.id = g.identity;
      t.category = g.category;
      t.score = 0.9;
      t.objectness = 0.9;
      t.masks = g.masks;
      pred.tracks.push_back(t);
    }
    std::ofstream f(tmp.path / "perfect" / ("video_" + std::to_string(id) + ".json"));
    f << predictions_to_json(pred).dump() << "\n";
    metrics::VideoPredictions none;
    none.video_id = id;
    std::ofstream g(tmp.path / "empty" / ("video_" + std::to_string(id) + ".json"));
    g << predictions_to_json(none).dump() << "\n";
  }

  REQUIRE(run({"eval", "--config", tmp.str("config.json"), "--predictions", tmp.str("perfect"), "--split",
               "eval", "--out", tmp.str("ev_perfect")}) == 0);
  auto perfect = nlohmann::json::parse(slurp(tmp.path / "ev_perfect" / "metrics.json"));
  CHECK(perfect["ap_all"].get<double>() == doctest::Approx(1.0));
  CHECK(perfect["id_switches"].get<int>() == 0);

  REQUIRE(run({"eval", "--config", tmp.str("config.json"), "--predictions", tmp.str("empty"), "--split",
               "eval", "--out", tmp.str("ev_empty")}) == 0);
  auto empty = nlohmann::json::parse(slurp(tmp.path / "ev_empty" / "metrics.json"));
  CHECK(empty["ap_all"].get<double>() == 0.0);
}
