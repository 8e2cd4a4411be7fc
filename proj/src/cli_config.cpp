#include "instformer/cli/config.hpp"

#include <fstream>

#include "instformer/core/errors.hpp"

namespace instformer::cli {

using core::ConfigError;
using nlohmann::json;

void RunConfig::validate() const {
  datakit::validate_spec(corpus);
  if (model.num_queries < 1) throw ConfigError("model.num_queries must be >= 1");
  if (model.embed_dim < 8) throw ConfigError("model.embed_dim must be >= 8");
  if (corpus.height % model.patch != 0 || corpus.width % model.patch != 0)
    throw ConfigError("frame size must be divisible by model.patch");
  if (model.tracker_hidden < 1) throw ConfigError("model.tracker_hidden must be >= 1");
  if (loss.alpha_margin < -1.0 || loss.alpha_margin > 1.0)
    throw ConfigError("loss.alpha_margin must lie in [-1, 1]");
  if (loss.tau_tc <= 0) throw ConfigError("loss.tau_tc must be positive");
  if (loss.tc_target != "current" && loss.tc_target != "previous")
    throw ConfigError("loss.tc_target must be 'current' or 'previous'");
  if (loss.tc_form != "softmax" && loss.tc_form != "binary")
    throw ConfigError("loss.tc_form must be 'softmax' or 'binary'");
  instclip::guidance_mode_from_string(guidance.mode);  // throws on junk
  if (tracker.mode != "rollout" && tracker.mode != "previous" && tracker.mode != "minvis-clip")
    throw ConfigError("tracker.mode must be rollout | previous | minvis-clip");
  if (tracker.max_misses < 0) throw ConfigError("tracker.max_misses must be >= 0");
  if (train.stage1_mask_warmup < 0.0 || train.stage1_mask_warmup > 1.0)
    throw ConfigError("train.stage1_mask_warmup must lie in [0, 1]");
  if (tracker.category_rule != "mean_prob" && tracker.category_rule != "vote")
    throw ConfigError("tracker.category_rule must be 'mean_prob' or 'vote'");
  if (lora.rank < 1 || lora.rank > model.embed_dim) throw ConfigError("lora.rank must lie in [1, embed_dim]");
  for (const auto& tag : lora.placement)
    if (tag != "q" && tag != "k" && tag != "v" && tag != "o" && tag != "ffn")
      throw ConfigError("lora.placement entries must be of q|k|v|o|ffn");
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.corpus.category_names = datakit::default_category_names();
  return cfg;
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig cfg = default_config();
  if (j.contains("corpus")) {
    const auto& c = j["corpus"];
    maybe(c, "num_videos", cfg.corpus.num_videos);
    maybe(c, "frames_per_video", cfg.corpus.frames_per_video);
    maybe(c, "height", cfg.corpus.height);
    maybe(c, "width", cfg.corpus.width);
    maybe(c, "max_instances_per_frame", cfg.corpus.max_instances_per_frame);
    maybe(c, "category_names", cfg.corpus.category_names);
    maybe(c, "seen_fraction", cfg.corpus.seen_fraction);
    maybe(c, "occlusion_rate", cfg.corpus.occlusion_rate);
    if (c.contains("motion_speed")) {
      cfg.corpus.motion_speed_min = c["motion_speed"][0].get<double>();
      cfg.corpus.motion_speed_max = c["motion_speed"][1].get<double>();
    }
    maybe(c, "seed", cfg.corpus.seed);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    maybe(m, "num_queries", cfg.model.num_queries);
    maybe(m, "embed_dim", cfg.model.embed_dim);
    maybe(m, "vlm_layers", cfg.model.vlm_layers);
    maybe(m, "patch", cfg.model.patch);
    maybe(m, "decoder_layers", cfg.model.decoder_layers);
    maybe(m, "tracker_hidden", cfg.model.tracker_hidden);
    maybe(m, "normalize_class_similarity", cfg.model.normalize_class_similarity);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    maybe(l, "lambda_sc", cfg.loss.lambda_sc);
    maybe(l, "alpha_margin", cfg.loss.alpha_margin);
    maybe(l, "w_bce", cfg.loss.w_bce);
    maybe(l, "w_dice", cfg.loss.w_dice);
    maybe(l, "w_obj", cfg.loss.w_obj);
    maybe(l, "w_cls", cfg.loss.w_cls);
    maybe(l, "w_distill", cfg.loss.w_distill);
    maybe(l, "tau_tc", cfg.loss.tau_tc);
    maybe(l, "tc_target", cfg.loss.tc_target);
    maybe(l, "tc_form", cfg.loss.tc_form);
  }
  if (j.contains("guidance")) {
    maybe(j["guidance"], "mode", cfg.guidance.mode);
    maybe(j["guidance"], "b_low", cfg.guidance.b_low);
  }
  if (j.contains("lora")) {
    maybe(j["lora"], "placement", cfg.lora.placement);
    maybe(j["lora"], "rank", cfg.lora.rank);
    maybe(j["lora"], "scale", cfg.lora.scale);
  }
  if (j.contains("tracker")) {
    const auto& t = j["tracker"];
    maybe(t, "mode", cfg.tracker.mode);
    maybe(t, "theta_match", cfg.tracker.theta_match);
    maybe(t, "theta_birth", cfg.tracker.theta_birth);
    maybe(t, "max_misses", cfg.tracker.max_misses);
    maybe(t, "category_rule", cfg.tracker.category_rule);
    maybe(t, "nms_iou", cfg.tracker.nms_iou);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    maybe(t, "vlm_steps", cfg.train.vlm_steps);
    maybe(t, "vlm_batch", cfg.train.vlm_batch);
    maybe(t, "vlm_lr", cfg.train.vlm_lr);
    maybe(t, "stage1_steps", cfg.train.stage1_steps);
    maybe(t, "stage1_batch", cfg.train.stage1_batch);
    maybe(t, "stage1_lr", cfg.train.stage1_lr);
    maybe(t, "stage1_mask_warmup", cfg.train.stage1_mask_warmup);
    maybe(t, "stage1_adapter_lr", cfg.train.stage1_adapter_lr);
    maybe(t, "stage1_augment", cfg.train.stage1_augment);
    maybe(t, "stage1_adapter_decay", cfg.train.stage1_adapter_decay);
    maybe(t, "tau_cls_train", cfg.train.tau_cls_train);
    maybe(t, "stage2_steps", cfg.train.stage2_steps);
    maybe(t, "stage2_batch", cfg.train.stage2_batch);
    maybe(t, "stage2_lr", cfg.train.stage2_lr);
    maybe(t, "seed", cfg.train.seed);
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    maybe(p, "corpus", cfg.paths.corpus);
    maybe(p, "vlm_checkpoint", cfg.paths.vlm_checkpoint);
    maybe(p, "stage1_checkpoint", cfg.paths.stage1_checkpoint);
    maybe(p, "stage2_checkpoint", cfg.paths.stage2_checkpoint);
  }
  cfg.validate();
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  return json{
      {"corpus",
       {{"num_videos", cfg.corpus.num_videos},
        {"frames_per_video", cfg.corpus.frames_per_video},
        {"height", cfg.corpus.height},
        {"width", cfg.corpus.width},
        {"max_instances_per_frame", cfg.corpus.max_instances_per_frame},
        {"category_names", cfg.corpus.category_names},
        {"seen_fraction", cfg.corpus.seen_fraction},
        {"occlusion_rate", cfg.corpus.occlusion_rate},
        {"motion_speed", {cfg.corpus.motion_speed_min, cfg.corpus.motion_speed_max}},
        {"seed", cfg.corpus.seed}}},
      {"model",
       {{"num_queries", cfg.model.num_queries},
        {"embed_dim", cfg.model.embed_dim},
        {"vlm_layers", cfg.model.vlm_layers},
        {"patch", cfg.model.patch},
        {"decoder_layers", cfg.model.decoder_layers},
        {"tracker_hidden", cfg.model.tracker_hidden},
        {"normalize_class_similarity", cfg.model.normalize_class_similarity}}},
      {"loss",
       {{"lambda_sc", cfg.loss.lambda_sc},
        {"alpha_margin", cfg.loss.alpha_margin},
        {"w_bce", cfg.loss.w_bce},
        {"w_dice", cfg.loss.w_dice},
        {"w_obj", cfg.loss.w_obj},
        {"w_cls", cfg.loss.w_cls},
        {"w_distill", cfg.loss.w_distill},
        {"tau_tc", cfg.loss.tau_tc},
        {"tc_target", cfg.loss.tc_target},
        {"tc_form", cfg.loss.tc_form}}},
      {"guidance", {{"mode", cfg.guidance.mode}, {"b_low", cfg.guidance.b_low}}},
      {"lora", {{"placement", cfg.lora.placement}, {"rank", cfg.lora.rank}, {"scale", cfg.lora.scale}}},
      {"tracker",
       {{"mode", cfg.tracker.mode},
        {"theta_match", cfg.tracker.theta_match},
        {"theta_birth", cfg.tracker.theta_birth},
        {"max_misses", cfg.tracker.max_misses},
        {"category_rule", cfg.tracker.category_rule},
        {"nms_iou", cfg.tracker.nms_iou}}},
      {"train",
       {{"vlm_steps", cfg.train.vlm_steps},
        {"vlm_batch", cfg.train.vlm_batch},
        {"vlm_lr", cfg.train.vlm_lr},
        {"stage1_steps", cfg.train.stage1_steps},
        {"stage1_batch", cfg.train.stage1_batch},
        {"stage1_lr", cfg.train.stage1_lr},
        {"stage1_mask_warmup", cfg.train.stage1_mask_warmup},
        {"stage1_adapter_lr", cfg.train.stage1_adapter_lr},
        {"stage1_augment", cfg.train.stage1_augment},
        {"stage1_adapter_decay", cfg.train.stage1_adapter_decay},
        {"tau_cls_train", cfg.train.tau_cls_train},
        {"stage2_steps", cfg.train.stage2_steps},
        {"stage2_batch", cfg.train.stage2_batch},
        {"stage2_lr", cfg.train.stage2_lr},
        {"seed", cfg.train.seed}}},
      {"paths",
       {{"corpus", cfg.paths.corpus},
        {"vlm_checkpoint", cfg.paths.vlm_checkpoint},
        {"stage1_checkpoint", cfg.paths.stage1_checkpoint},
        {"stage2_checkpoint", cfg.paths.stage2_checkpoint}}}};
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path);
  return config_from_json(j);
}

}  // namespace instformer::cli
