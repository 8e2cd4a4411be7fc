#include "instformer/cli/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "instformer/cli/config.hpp"
#include "instformer/cli/pipeline.hpp"
#include "instformer/cli/report.hpp"
#include "instformer/core/errors.hpp"
#include "instformer/core/log.hpp"

#include "CLI11.hpp"

namespace fs = std::filesystem;

namespace instformer::cli {

using namespace instformer::core;

namespace {

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

void write_train_log(const fs::path& out_dir, int stage, const std::vector<TrainLogEntry>& log) {
  auto dump = [&](const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const auto& e : log) {
      f << nlohmann::json{{"step", e.step}, {"loss", e.loss}, {"seg", e.seg},
                          {"sc", e.sc},     {"cls", e.cls},   {"lr", e.lr}}
               .dump()
        << "\n";
    }
  };
  dump(out_dir / "train_log.jsonl");
  dump(out_dir / ("train_log_stage" + std::to_string(stage) + ".jsonl"));
}

int cmd_gen_data(const std::string& config_path, const std::string& out, std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.corpus.seed = *seed;
  std::string dir = out.empty() ? cfg.paths.corpus : out;
  datakit::generate_corpus(cfg.corpus, dir);
  info("corpus written to " + dir);
  return 0;
}

int cmd_pretrain_vlm(const std::string& config_path, const std::string& out, std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.train.seed = *seed;
  auto manifest = datakit::load_manifest(cfg.paths.corpus);

  tinyvlm::TinyVlmConfig vcfg;
  vcfg.embed_dim = cfg.model.embed_dim;
  vcfg.layers = cfg.model.vlm_layers;
  vcfg.patch = cfg.model.patch;
  vcfg.frame_h = cfg.corpus.height;
  vcfg.frame_w = cfg.corpus.width;
  vcfg.normalize_class_similarity = cfg.model.normalize_class_similarity;

  tinyvlm::PretrainConfig pcfg;
  pcfg.steps = cfg.train.vlm_steps;
  pcfg.batch = cfg.train.vlm_batch;
  pcfg.lr = cfg.train.vlm_lr;
  pcfg.seed = cfg.train.seed;

  tinyvlm::PretrainReport rep;
  auto vlm = tinyvlm::clip_pretrain(manifest.vocab.names, vcfg, pcfg, &rep);
  vlm.freeze();

  fs::path out_dir = out.empty() ? fs::path("out") : fs::path(out);
  fs::create_directories(out_dir);
  nlohmann::json report{{"zero_shot_top1", rep.zero_shot_top1},
                        {"final_loss", rep.final_loss},
                        {"steps", rep.steps},
                        {"config", config_to_json(cfg)}};
  vlm.save((out_dir / "vlm.ckpt").string(), {{"config", config_to_json(cfg)}, {"report", report}});
  write_json_file(out_dir / "vlm_report.json", report);
  info("vlm checkpoint written; zero-shot top1 = " + std::to_string(rep.zero_shot_top1));
  return 0;
}

int cmd_train(const std::string& config_path, int stage, const std::string& out, std::optional<uint64_t> seed) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.train.seed = *seed;
  fs::path out_dir = out.empty() ? fs::path("out") : fs::path(out);
  fs::create_directories(out_dir);

  if (stage == 1) {
    if (!fs::exists(cfg.paths.vlm_checkpoint))
      throw ConfigError("stage 1 requires the frozen VLM checkpoint at " + cfg.paths.vlm_checkpoint);
    auto vlm = tinyvlm::TinyVlm::load(cfg.paths.vlm_checkpoint);
    Stage1Report rep;
    auto model = train_stage1(cfg, vlm, cfg.paths.corpus, &rep);
    write_train_log(out_dir, 1, rep.log);
    nlohmann::json report{{"final_loss", rep.final_loss},
                          {"cls_accuracy", rep.cls_accuracy},
                          {"config", config_to_json(cfg)}};
    save_stage1(model, (out_dir / "stage1.ckpt").string(), {{"report", report}});
    write_json_file(out_dir / "stage1_report.json", report);
    info("stage-1 checkpoint written; train-split cls accuracy = " + std::to_string(rep.cls_accuracy));
    return 0;
  }
  if (stage == 2) {
    if (!fs::exists(cfg.paths.stage1_checkpoint))
      throw ConfigError("stage 2 requires the stage-1 checkpoint at " + cfg.paths.stage1_checkpoint);
    auto model = load_stage1(cfg.paths.stage1_checkpoint);
    model.cfg.train = cfg.train;  // schedules may differ from the stage-1 run
    model.cfg.loss = cfg.loss;
    Stage2Report rep;
    auto rnn = train_stage2(model, cfg.paths.corpus, &rep);
    write_train_log(out_dir, 2, rep.log);
    nlohmann::json report{{"final_loss", rep.final_loss}, {"config", config_to_json(cfg)}};
    save_stage2(model, rnn, (out_dir / "stage2.ckpt").string(), {{"report", report}});
    write_json_file(out_dir / "stage2_report.json", report);
    info("stage-2 checkpoint written");
    return 0;
  }
  throw ConfigError("train: stage must be 1 or 2");
}

int cmd_infer(const std::string& config_path, const std::string& checkpoint, const std::string& split,
              const std::string& out) {
  RunConfig file_cfg = load_config(config_path);
  std::string out_dir = out.empty() ? "predictions" : out;

  Checkpoint ck = Checkpoint::load(checkpoint);
  std::string kind = ck.meta.value("kind", "");
  if (kind != "stage1" && kind != "stage2")
    throw ConfigError("infer: checkpoint must be a stage-1 or stage-2 artifact");

  if (file_cfg.tracker.mode == "rollout") {
    if (kind != "stage2")
      throw ConfigError("infer: rollout tracker mode requires a stage-2 checkpoint");
    auto model = load_stage2(checkpoint);
    model.stage1.cfg.tracker = file_cfg.tracker;
    run_inference(model.stage1, &model.rollout, file_cfg.paths.corpus, split, out_dir);
  } else {
    auto model = load_stage1(checkpoint);
    model.cfg.tracker = file_cfg.tracker;
    run_inference(model, nullptr, file_cfg.paths.corpus, split, out_dir);
  }
  info("predictions written to " + out_dir);
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& predictions, const std::string& split,
             const std::string& out) {
  RunConfig cfg = load_config(config_path);
  auto manifest = datakit::load_manifest(cfg.paths.corpus);
  auto gts = load_split_gt(cfg.paths.corpus, manifest, split);
  auto preds = load_predictions(predictions, manifest.video_ids(split), cfg.corpus.height, cfg.corpus.width);
  auto report = metrics::evaluate(preds, gts, manifest.vocab);

  fs::path out_dir = out.empty() ? fs::path("eval") : fs::path(out);
  fs::create_directories(out_dir);
  nlohmann::json j = metrics::report_to_json(report);
  j["config"] = config_to_json(cfg);
  write_json_file(out_dir / "metrics.json", j);

  nlohmann::json pr = nlohmann::json::array();
  for (auto [recall, precision] : report.pr_curve50) pr.push_back({recall, precision});
  write_json_file(out_dir / "pr_curve.json", nlohmann::json{{"iou", 0.5}, {"points", pr}});
  info("metrics written to " + (out_dir / "metrics.json").string());
  return 0;
}

int cmd_report(const std::vector<std::string>& metrics_files, const std::vector<std::string>& labels,
               const std::vector<std::string>& train_logs, const std::string& out) {
  if (metrics_files.empty()) throw ConfigError("report: need at least one --metrics file");
  fs::path out_dir = out.empty() ? fs::path("report") : fs::path(out);
  fs::create_directories(out_dir);

  std::vector<std::pair<std::string, nlohmann::json>> entries;
  for (size_t i = 0; i < metrics_files.size(); ++i) {
    std::ifstream f(metrics_files[i]);
    if (!f) throw IoError("cannot open metrics file: " + metrics_files[i]);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw IoError("corrupt metrics file: " + metrics_files[i]);
    std::string label =
        i < labels.size() ? labels[i] : fs::path(metrics_files[i]).parent_path().filename().string();
    if (label.empty()) label = "run" + std::to_string(i);
    entries.emplace_back(label, std::move(j));
  }

  // seen/unseen AP bars per run
  std::vector<std::pair<std::string, double>> bars;
  for (const auto& [label, j] : entries) {
    bars.emplace_back(label + " seen", j.value("ap_seen", 0.0));
    bars.emplace_back(label + " unseen", j.value("ap_uncommon", 0.0));
  }
  write_bar_chart_svg((out_dir / "ap_bars.svg").string(), "video AP by split", bars);

  // PR curves when a sibling pr_curve.json exists
  std::vector<Series> pr_series;
  for (size_t i = 0; i < metrics_files.size(); ++i) {
    fs::path pr_path = fs::path(metrics_files[i]).parent_path() / "pr_curve.json";
    std::ifstream f(pr_path);
    if (!f) continue;
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) continue;
    Series s;
    s.label = entries[i].first;
    for (const auto& p : j["points"]) s.points.emplace_back(p[0].get<double>(), p[1].get<double>());
    pr_series.push_back(std::move(s));
  }
  if (!pr_series.empty())
    write_line_chart_svg((out_dir / "pr_curves.svg").string(), "precision-recall at IoU 0.5", "recall",
                         "precision", pr_series);

  std::vector<Series> loss_series;
  for (const auto& log : train_logs) {
    std::ifstream f(log);
    if (!f) throw IoError("cannot open train log: " + log);
    Series s;
    s.label = fs::path(log).stem().string();
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      s.points.emplace_back(j.value("step", 0), j.value("loss", 0.0));
    }
    loss_series.push_back(std::move(s));
  }
  if (!loss_series.empty())
    write_line_chart_svg((out_dir / "loss_curves.svg").string(), "training loss", "step", "loss", loss_series);

  std::ofstream md(out_dir / "summary.md");
  if (!md) throw IoError("cannot write summary.md");
  md << "| run | AP | AP50 | AP75 | AP seen | AP unseen | AP cls-agn | AR@10 | ID switches |\n";
  md << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& [label, j] : entries) {
    md << "| " << label << " | " << j.value("ap_all", 0.0) << " | " << j.value("ap50_all", 0.0) << " | "
       << j.value("ap75_all", 0.0) << " | " << j.value("ap_seen", 0.0) << " | " << j.value("ap_uncommon", 0.0)
       << " | " << j.value("ap_class_agnostic", 0.0) << " | " << j.value("ar10_all", 0.0) << " | "
       << j.value("id_switches", 0) << " |\n";
  }
  info("report written to " + out_dir.string());
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"instformer: open-vocabulary video instance segmentation at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out, split = "eval", checkpoint, predictions;
  std::optional<uint64_t> seed;
  int stage = 1;
  std::vector<std::string> metrics_files, labels, train_logs;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration JSON")->required();
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--seed", seed, "seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen);
  auto* pre = app.add_subcommand("pretrain-vlm", "pretrain and freeze the toy VLM");
  add_common(pre);
  auto* train = app.add_subcommand("train", "run a training stage");
  add_common(train);
  train->add_option("--stage", stage, "training stage (1 or 2)")->required();
  auto* infer = app.add_subcommand("infer", "run online inference over a corpus split");
  add_common(infer);
  infer->add_option("--checkpoint", checkpoint, "stage-1 or stage-2 checkpoint")->required();
  infer->add_option("--split", split, "train | eval | all");
  auto* eval = app.add_subcommand("eval", "evaluate prediction files against ground truth");
  add_common(eval);
  eval->add_option("--predictions", predictions, "directory with video_<id>.json files")->required();
  eval->add_option("--split", split, "train | eval | all");
  auto* report = app.add_subcommand("report", "emit SVG plots and a summary table");
  report->add_option("--metrics", metrics_files, "metrics.json files")->required();
  report->add_option("--label", labels, "labels aligned with --metrics");
  report->add_option("--train-log", train_logs, "train_log.jsonl files");
  report->add_option("--out", out, "output directory");
  report->add_option("--seed", seed, "accepted for interface symmetry");

  std::vector<const char*> argv;
  argv.push_back("instformer");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out, seed);
    if (pre->parsed()) return cmd_pretrain_vlm(config_path, out, seed);
    if (train->parsed()) return cmd_train(config_path, stage, out, seed);
    if (infer->parsed()) return cmd_infer(config_path, checkpoint, split, out);
    if (eval->parsed()) return cmd_eval(config_path, predictions, split, out);
    if (report->parsed()) return cmd_report(metrics_files, labels, train_logs, out);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace instformer::cli
