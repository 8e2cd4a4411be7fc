#pragma once

#include <string>
#include <vector>

#include "instformer/datakit/datakit.hpp"
#include "instformer/instclip/instclip.hpp"
#include "instformer/tracker/tracker.hpp"

#include "json.hpp"

namespace instformer::cli {

struct ModelConfig {
  int num_queries = 8;
  int embed_dim = 64;
  int vlm_layers = 4;
  int patch = 8;
  int decoder_layers = 3;
  int tracker_hidden = 128;  // C_h = 2C
  bool normalize_class_similarity = true;
};

struct LossConfig {
  double lambda_sc = 0.1;
  double alpha_margin = 0.8;
  double w_bce = 2.0;
  double w_dice = 2.0;
  double w_obj = 1.0;
  double w_cls = 2.0;
  double w_distill = 2.0;  // instance-token alignment to frozen crop embeddings
  double tau_tc = 0.3;
  std::string tc_target = "current";  // or "previous": Eq.-6's literal subscript
  std::string tc_form = "softmax";    // or "binary"
};

struct GuidanceConfig {
  std::string mode = "soft";  // or "hard"
  double b_low = -10.0;
};

struct TrackerConfig {
  std::string mode = "rollout";  // rollout | previous | minvis-clip
  double theta_match = 0.3;
  double theta_birth = 0.5;
  int max_misses = 3;
  std::string category_rule = "mean_prob";  // or "vote": per-frame majority
  double nms_iou = 0.45;  // pre-association duplicate suppression; 1.0 disables
};

struct TrainConfig {
  int vlm_steps = 240;
  int vlm_batch = 10;
  double vlm_lr = 1.5e-3;
  int stage1_steps = 2600;
  int stage1_batch = 2;
  double stage1_lr = 1.5e-3;
  // fraction of stage-1 steps that train masks/objectness only, before the
  // classification CE joins; guidance needs usable masks to be informative
  double stage1_mask_warmup = 0.3;
  double stage1_adapter_lr = 1.5e-3;  // LoRA + token learning rate
  bool stage1_augment = true;          // photometric + flip/shift jitter
  double stage1_adapter_decay = 1e-4;  // decoupled decay keeps adapters near zero-shot
  double tau_cls_train = 0.1;          // softer CE temperature for adapter training
  int stage2_steps = 200;
  int stage2_batch = 2;  // videos per step
  double stage2_lr = 1e-3;
  uint64_t seed = 0;
};

struct PathsConfig {
  std::string corpus = "corpus";
  std::string vlm_checkpoint = "out/vlm.ckpt";
  std::string stage1_checkpoint = "out/stage1.ckpt";
  std::string stage2_checkpoint = "out/stage2.ckpt";
};

struct RunConfig {
  datakit::CorpusSpec corpus;
  ModelConfig model;
  LossConfig loss;
  GuidanceConfig guidance;
  TrackerConfig tracker;
  TrainConfig train;
  PathsConfig paths;

  instclip::LoraConfig lora;

  void validate() const;  // throws ConfigError on inconsistent dims/values
};

RunConfig default_config();
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

}  // namespace instformer::cli
