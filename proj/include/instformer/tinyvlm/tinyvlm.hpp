#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "instformer/core/autograd.hpp"
#include "instformer/core/checkpoint.hpp"
#include "instformer/datakit/datakit.hpp"

namespace instformer::tinyvlm {

// Optional per-projection adapter hook. Callers (the instance-guidance
// encoder) return the additive delta for the projection named `tensor`, or
// nullptr for "no adapter here". Keeps this module free of adapter details.
using AdapterFn = std::function<core::Var(const std::string& tensor, const core::Var& x)>;

struct TinyVlmConfig {
  int embed_dim = 64;  // C, shared by vision and text heads
  int layers = 4;      // L
  int patch = 8;
  int mlp_ratio = 4;
  int frame_h = 64;
  int frame_w = 64;
  double tau_init = 0.07;
  // CLIP-convention flag: L2-normalize both sides of the classification dot
  // product (resolves the Eq.-4 ambiguity; see README).
  bool normalize_class_similarity = true;
  std::vector<std::string> templates = {"a photo of a {name}", "an image of a {name}",
                                        "a video frame of a {name}", "a picture of a {name}"};

  int patches_per_frame() const { return (frame_h / patch) * (frame_w / patch); }
};

// Patch-embedding + L-layer transformer vision encoder, a table-based text
// embedder with prompt ensembling, and a learned contrastive temperature.
// Pretrained once on single-object crops of every category, then frozen.
struct TinyVlm {
  TinyVlmConfig cfg;
  core::ParamMap pm;
  std::vector<std::string> vocab_names;     // category names, index-aligned with crop rendering
  std::vector<std::string> tokens;          // closed token set
  std::map<std::string, int> token_index;

  static TinyVlm init(const TinyVlmConfig& cfg, const std::vector<std::string>& vocab_names, uint64_t seed);
  static TinyVlm load(const std::string& path);  // loads frozen
  void save(const std::string& path, const nlohmann::json& extra_meta = {}) const;
  void freeze() { pm.freeze(); }

  // Embeds/recovers tensors plus the "vlm_*" meta keys, so composite
  // checkpoints (stage 1/2) can carry the frozen backbone.
  void to_checkpoint(core::Checkpoint& ck) const;
  static TinyVlm from_checkpoint(const core::Checkpoint& ck);  // frozen

  core::Var param(const std::string& name) const { return pm.get(name); }
  double temperature() const { return pm.get("vlm.logit_temp")->val[0]; }
};

// --- text side ---
std::vector<int> tokenize(const TinyVlm& vlm, const std::string& text);
// Single-template embedding: token lookup, mean pool, linear projection,
// L2 normalization.
core::Var text_embedding(const TinyVlm& vlm, const std::string& category_name, const std::string& tmpl);
// Prompt ensembling: per-template embeddings averaged, then renormalized.
core::Var embed_text(const TinyVlm& vlm, const std::string& category_name,
                     const std::vector<std::string>& templates);
// Rows = ensembled unit embeddings of each name, using cfg.templates.
core::Var vocabulary_embeddings(const TinyVlm& vlm, const std::vector<std::string>& names);

// --- vision side ---
// Normalized patch matrix [P, patch*patch*3] of an H*W*3 uint8 frame,
// row-major patch order.
core::Var frame_to_patch_matrix(const TinyVlmConfig& cfg, const uint8_t* frame);
// Linear patch projection only (no positional term): [P, C].
core::Var patch_embed(const TinyVlm& vlm, const core::Var& patch_matrix);
// One post-LN transformer block over token rows; `bias` is an additive
// attention bias (may hold -inf), `adapter` hooks LoRA deltas in.
core::Var encoder_block(const TinyVlm& vlm, int layer, const core::Var& x,
                        const std::vector<double>* bias = nullptr, const AdapterFn* adapter = nullptr);
// Full image tower on [class | patches]: returns the unit-norm projected
// class embedding [1, C].
core::Var image_embedding(const TinyVlm& vlm, const uint8_t* frame);

// --- contrastive objective ---
// Symmetric InfoNCE over matched rows; tau is a positive scalar variable.
core::Var infonce_loss(const core::Var& image_embs, const core::Var& text_embs, const core::Var& tau);

// --- pretraining ---
struct PretrainConfig {
  int steps = 240;
  int batch = 10;
  double lr = 1.5e-3;
  uint64_t seed = 0;
  int eval_crops = 200;
};

struct PretrainReport {
  int steps = 0;
  double final_loss = 0.0;
  double zero_shot_top1 = 0.0;
};

// Trains on single-object crops drawn from ALL categories (the pretraining
// stream mirrors broad VLM pretraining and never touches video annotations).
TinyVlm clip_pretrain(const std::vector<std::string>& vocab_names, const TinyVlmConfig& cfg,
                      const PretrainConfig& pcfg, PretrainReport* report = nullptr);

// Zero-shot crop classification accuracy on freshly rendered crops.
double zero_shot_accuracy(const TinyVlm& vlm, int crops, uint64_t seed);

}  // namespace instformer::tinyvlm
