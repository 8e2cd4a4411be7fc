#pragma once

#include <optional>
#include <string>
#include <vector>

#include "instformer/cli/config.hpp"
#include "instformer/instclip/instclip.hpp"
#include "instformer/metrics/metrics.hpp"
#include "instformer/proposal/proposal.hpp"
#include "instformer/tinyvlm/tinyvlm.hpp"
#include "instformer/tracker/tracker.hpp"

namespace instformer::cli {

// The trained stage-1 bundle: proposal net plus the adapted encoder around
// the frozen VLM. Stage 2 adds the rollout net on top.
struct Stage1Model {
  proposal::ProposalNet net;
  instclip::InstClip ic;
  RunConfig cfg;
};

struct Stage2Model {
  Stage1Model stage1;
  tracker::RolloutNet rollout;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0, seg = 0, sc = 0, cls = 0, lr = 0;
};

struct Stage1Report {
  double final_loss = 0;
  double cls_accuracy = 0;  // seen-category frame-level probe on the train split
  std::vector<TrainLogEntry> log;
};

struct Stage2Report {
  double final_loss = 0;
  std::vector<TrainLogEntry> log;
};

// Stage 1: proposal net + LoRA + instance/register tokens on SEEN categories
// only (segmentation + margin contrastive + classification CE); the VLM base
// stays frozen throughout.
Stage1Model train_stage1(const RunConfig& cfg, const tinyvlm::TinyVlm& frozen_vlm,
                         const std::string& corpus_dir, Stage1Report* report);

// Stage 2: rollout RNN on ground-truth-aligned tracking-token sequences with
// the temporal contrastive loss; every other tensor is frozen.
tracker::RolloutNet train_stage2(const Stage1Model& model, const std::string& corpus_dir,
                                 Stage2Report* report);

void save_stage1(const Stage1Model& model, const std::string& path, const nlohmann::json& extra_meta = {});
Stage1Model load_stage1(const std::string& path);  // frozen
void save_stage2(const Stage1Model& model, const tracker::RolloutNet& rollout, const std::string& path,
                 const nlohmann::json& extra_meta = {});
Stage2Model load_stage2(const std::string& path);  // frozen

// Online per-video inference: propose -> guidance -> instclip -> classify ->
// associate, then per-track aggregation. `mode` comes from cfg.tracker.mode;
// minvis-clip classifies gray-filled masked crops through the frozen VLM and
// matches on queries only.
metrics::VideoPredictions infer_video(const Stage1Model& model, const tracker::RolloutNet* rollout,
                                      const datakit::VideoClip& clip);

// Runs inference over one corpus split and writes predictions/video_<id>.json
// files plus a predictions_manifest.json.
void run_inference(const Stage1Model& model, const tracker::RolloutNet* rollout,
                   const std::string& corpus_dir, const std::string& split, const std::string& out_dir,
                   int workers = 0);

std::vector<metrics::VideoPredictions> load_predictions(const std::string& pred_dir,
                                                        const std::vector<int>& video_ids, int h, int w);
nlohmann::json predictions_to_json(const metrics::VideoPredictions& pred);

// Ground truth for a corpus split, ordered by video id.
std::vector<metrics::VideoGt> load_split_gt(const std::string& corpus_dir,
                                            const datakit::CorpusManifest& manifest,
                                            const std::string& split);

}  // namespace instformer::cli
