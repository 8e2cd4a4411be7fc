#pragma once

#include <string>
#include <vector>

#include "instformer/core/autograd.hpp"
#include "instformer/tinyvlm/tinyvlm.hpp"

namespace instformer::instclip {

enum class GuidanceMode { kSoft, kHard };

GuidanceMode guidance_mode_from_string(const std::string& s);
std::string to_string(GuidanceMode mode);

// Additive attention bias over the [register | N instance | P vision] token
// layout. Entries live in [-inf, 0]; -inf blocks attention exactly.
struct GuidanceBias {
  int n = 0;  // instance tokens
  int p = 0;  // vision tokens
  std::vector<double> bias;

  int dim() const { return 1 + n + p; }
  double at(int row, int col) const { return bias[size_t(row) * dim() + col]; }
};

// Pools sigmoid(mask_logits) over the patch grid and fills the structural
// template: instances see themselves, the register and (weighted) their own
// region; the register and vision tokens never see instances, which keeps
// the frozen vision stream byte-compatible with plain encoding.
GuidanceBias build_guidance_mask(const std::vector<double>& mask_logits, int n, int h, int w, int patch,
                                 GuidanceMode mode, double b_low = -10.0);

struct LoraConfig {
  std::vector<std::string> placement = {"q", "v"};  // of {q,k,v,o,ffn}
  int rank = 4;
  double scale = 1.0;
};

// One adapted projection: y = x W + scale * (x A^T) B^T, with B zero-initialized
// so adapted output starts equal to the base output.
struct LoraAdapter {
  core::Var down;  // A: [rank, in]
  core::Var up;    // B: [out, rank]
  double scale = 1.0;
};

LoraAdapter make_lora_adapter(core::ParamMap& pm, const std::string& name, int in_dim, int out_dim,
                              int rank, double scale, core::Rng& rng);
core::Var lora_apply(const core::Var& w, const LoraAdapter& adapter, const core::Var& x);
// Merged weight W' = W + scale * (B A)^T under the row-vector convention.
core::Var lora_merge(const core::Var& w, const LoraAdapter& adapter);

struct InstClipConfig {
  GuidanceMode mode = GuidanceMode::kSoft;
  double b_low = -10.0;
  LoraConfig lora;
};

// The instance-guidance encoder: a frozen TinyVLM plus LoRA adapters and the
// learnable instance/register tokens. The instance token is a single shared
// embedding broadcast to N slots, so the guidance mask is the only symmetry
// breaker between slots (initialized from the frozen class token).
struct InstClip {
  tinyvlm::TinyVlm vlm;  // frozen weights, shared storage
  InstClipConfig cfg;
  core::ParamMap pm;     // instclip.* tensors: tokens + adapters

  static InstClip init(tinyvlm::TinyVlm vlm, const InstClipConfig& cfg, uint64_t seed);
  tinyvlm::AdapterFn adapter_fn() const;
};

struct InstanceTokenSet {
  core::Var instance_tokens;  // [N, C], L2-normalized rows, index-aligned with proposals
  core::Var register_token;   // [1, C] after the final layer norm
  core::Var vision_tokens;    // [P, C] after the final layer norm
};

// Single forward pass of the guided encoder for all N instances.
InstanceTokenSet instclip_forward(const InstClip& ic, const uint8_t* frame, const GuidanceBias& bias);

struct Classification {
  std::vector<int> categories;  // per-row argmax, lowest index on ties
  core::Var probs;              // [N, K]
};

// probs = softmax((I E^T) / tau) rowwise; optionally renormalizes both sides
// (the CLIP convention, on by default via TinyVlmConfig).
Classification classify_instances(const core::Var& instance_tokens, const core::Var& text_embeddings,
                                  double tau, bool renormalize);

// Cross-entropy of classify_instances probabilities against target categories;
// the stage-1 training signal for adapters and tokens.
core::Var classification_loss(const core::Var& instance_tokens, const std::vector<int>& targets,
                              const core::Var& text_embeddings, double tau, bool renormalize);

}  // namespace instformer::instclip
