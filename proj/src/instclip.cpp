#include "instformer/instclip/instclip.hpp"

#include <cmath>
#include <limits>

#include "instformer/core/errors.hpp"

namespace instformer::instclip {

using namespace instformer::core;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

GuidanceMode guidance_mode_from_string(const std::string& s) {
  if (s == "soft") return GuidanceMode::kSoft;
  if (s == "hard" || s == "binary") return GuidanceMode::kHard;
  throw ConfigError("unknown guidance mode: " + s);
}

std::string to_string(GuidanceMode mode) { return mode == GuidanceMode::kSoft ? "soft" : "hard"; }

GuidanceBias build_guidance_mask(const std::vector<double>& mask_logits, int n, int h, int w, int patch,
                                 GuidanceMode mode, double b_low) {
  if (h % patch != 0 || w % patch != 0) throw ShapeError("build_guidance_mask: frame not divisible by patch");
  if (int64_t(mask_logits.size()) != int64_t(n) * h * w)
    throw ShapeError("build_guidance_mask: logits size mismatch");
  const int gy = h / patch, gx = w / patch;
  const int p = gy * gx;

  GuidanceBias gb;
  gb.n = n;
  gb.p = p;
  const int d = gb.dim();
  gb.bias.assign(size_t(d) * d, 0.0);
  auto at = [&](int r, int c) -> double& { return gb.bias[size_t(r) * d + c]; };

  // structural template
  for (int j = 0; j < n; ++j) at(0, 1 + j) = -kInf;  // register never reads instances
  for (int v = 0; v < p; ++v)
    for (int j = 0; j < n; ++j) at(1 + n + v, 1 + j) = -kInf;  // vision never reads instances
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) at(1 + i, 1 + j) = -kInf;  // instances isolated from each other

  // pooled foreground probability a(i, patch) drives the instance->vision bias
  for (int i = 0; i < n; ++i) {
    const double* logits = mask_logits.data() + size_t(i) * h * w;
    int best_patch = 0;
    double best_a = -1.0;
    bool any_open = false;
    for (int py = 0; py < gy; ++py) {
      for (int px = 0; px < gx; ++px) {
        double a = 0;
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x) {
            double z = logits[size_t(py * patch + y) * w + (px * patch + x)];
            a += z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          }
        a /= double(patch) * patch;
        int pi = py * gx + px;
        if (a > best_a) {
          best_a = a;
          best_patch = pi;  // lowest index wins ties via strict >
        }
        if (mode == GuidanceMode::kSoft) {
          at(1 + i, 1 + n + pi) = b_low * (1.0 - a);
        } else {
          bool open = a >= 0.5;
          at(1 + i, 1 + n + pi) = open ? 0.0 : -kInf;
          any_open = any_open || open;
        }
      }
    }
    if (mode == GuidanceMode::kHard && !any_open) at(1 + i, 1 + n + best_patch) = 0.0;  // fallback
  }
  return gb;
}

LoraAdapter make_lora_adapter(core::ParamMap& pm, const std::string& name, int in_dim, int out_dim,
                              int rank, double scale, core::Rng& rng) {
  if (rank < 1 || rank > std::min(in_dim, out_dim))
    throw ConfigError("lora rank " + std::to_string(rank) + " exceeds projection dims");
  LoraAdapter ad;
  ad.down = pm.add(name + ".a", {rank, in_dim}, init_normal(rng, int64_t(rank) * in_dim, 0.02));
  ad.up = pm.add(name + ".b", {out_dim, rank}, init_zeros(int64_t(out_dim) * rank));
  ad.scale = scale;
  return ad;
}

core::Var lora_apply(const core::Var& w, const LoraAdapter& adapter, const core::Var& x) {
  Var base = matmul(x, w);
  Var delta = scale(matmul(matmul(x, transpose(adapter.down)), transpose(adapter.up)), adapter.scale);
  return add(base, delta);
}

core::Var lora_merge(const core::Var& w, const LoraAdapter& adapter) {
  Var delta = scale(matmul(transpose(adapter.down), transpose(adapter.up)), adapter.scale);
  return add(w, delta);
}

namespace {

// which projection tensors a placement tag touches, with their (in, out) dims
struct Target {
  std::string suffix;  // relative to "vlm.layerN."
  int in, out;
};

std::vector<Target> placement_targets(const std::string& tag, int c, int hidden) {
  if (tag == "q") return {{"attn.wq", c, c}};
  if (tag == "k") return {{"attn.wk", c, c}};
  if (tag == "v") return {{"attn.wv", c, c}};
  if (tag == "o") return {{"attn.wo", c, c}};
  if (tag == "ffn") return {{"mlp.w1", c, hidden}, {"mlp.w2", hidden, c}};
  throw ConfigError("unknown lora placement tag: " + tag);
}

}  // namespace

InstClip InstClip::init(tinyvlm::TinyVlm vlm, const InstClipConfig& cfg, uint64_t seed) {
  InstClip ic;
  ic.vlm = std::move(vlm);
  ic.cfg = cfg;

  const int c = ic.vlm.cfg.embed_dim;
  const int hidden = c * ic.vlm.cfg.mlp_ratio;
  // tokens start from the frozen class token
  const auto& cls = ic.vlm.param("vlm.class_token");
  ic.pm.add("instclip.inst_token", {1, c}, cls->val);
  ic.pm.add("instclip.reg_token", {1, c}, cls->val);

  Rng rng(Rng::derive(seed, 0x10aaULL));
  for (int l = 0; l < ic.vlm.cfg.layers; ++l) {
    for (const auto& tag : cfg.lora.placement) {
      for (const auto& target : placement_targets(tag, c, hidden)) {
        std::string name = "instclip.lora.layer" + std::to_string(l) + "." + target.suffix;
        make_lora_adapter(ic.pm, name, target.in, target.out, cfg.lora.rank, cfg.lora.scale, rng);
      }
    }
  }
  return ic;
}

tinyvlm::AdapterFn InstClip::adapter_fn() const {
  const auto* self = this;
  return [self](const std::string& tensor, const Var& x) -> Var {
    // tensor is "vlm.layerN.<suffix>"; adapters are keyed by the same suffix
    if (tensor.rfind("vlm.layer", 0) != 0) return nullptr;
    std::string key = "instclip.lora." + tensor.substr(4);
    if (!self->pm.has(key + ".a")) return nullptr;
    LoraAdapter ad{self->pm.get(key + ".a"), self->pm.get(key + ".b"), self->cfg.lora.scale};
    return scale(matmul(matmul(x, transpose(ad.down)), transpose(ad.up)), ad.scale);
  };
}

InstanceTokenSet instclip_forward(const InstClip& ic, const uint8_t* frame, const GuidanceBias& bias) {
  const auto& vlm = ic.vlm;
  const int n = bias.n;
  if (bias.p != vlm.cfg.patches_per_frame())
    throw ShapeError("instclip_forward: guidance grid does not match the patch grid");

  Var patches = tinyvlm::patch_embed(vlm, tinyvlm::frame_to_patch_matrix(vlm.cfg, frame));
  patches = add(patches, vlm.param("vlm.pos_embed"));
  Var inst = repeat_row(ic.pm.get("instclip.inst_token"), n);
  Var x = concat_rows({ic.pm.get("instclip.reg_token"), inst, patches});

  auto adapter = ic.adapter_fn();
  for (int l = 0; l < vlm.cfg.layers; ++l) {
    x = tinyvlm::encoder_block(vlm, l, x, &bias.bias, &adapter);
    for (double v : x->val)
      if (!std::isfinite(v))
        throw NumericError("instclip_forward: non-finite activation after layer " + std::to_string(l));
  }
  x = layer_norm_rows(x, vlm.param("vlm.final_ln.g"), vlm.param("vlm.final_ln.b"));

  InstanceTokenSet out;
  out.register_token = slice_rows(x, 0, 1);
  Var inst_final = slice_rows(x, 1, 1 + n);
  out.instance_tokens = l2_normalize_rows(matmul(inst_final, vlm.param("vlm.vision_proj.w")));
  out.vision_tokens = slice_rows(x, 1 + n, 1 + n + bias.p);
  return out;
}

Classification classify_instances(const core::Var& instance_tokens, const core::Var& text_embeddings,
                                  double tau, bool renormalize) {
  if (text_embeddings->shape.size() != 2 || text_embeddings->shape[0] == 0)
    throw ConfigError("classify_instances: empty vocabulary");
  if (instance_tokens->shape.size() != 2 || instance_tokens->shape[1] != text_embeddings->shape[1])
    throw ShapeError("classify_instances: embedding width mismatch");
  if (tau <= 0) throw ConfigError("classify_instances: temperature must be positive");

  Var tokens = renormalize ? l2_normalize_rows(instance_tokens) : instance_tokens;
  Var vocab = renormalize ? l2_normalize_rows(text_embeddings) : text_embeddings;
  Var logits = scale(matmul(tokens, transpose(vocab)), 1.0 / tau);
  Classification out;
  out.probs = softmax_rows(logits);
  const int n = out.probs->shape[0], k = out.probs->shape[1];
  out.categories.assign(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (out.probs->val[size_t(i) * k + j] > out.probs->val[size_t(i) * k + best]) best = j;
    out.categories[size_t(i)] = best;
  }
  return out;
}

core::Var classification_loss(const core::Var& instance_tokens, const std::vector<int>& targets,
                              const core::Var& text_embeddings, double tau, bool renormalize) {
  Var tokens = renormalize ? l2_normalize_rows(instance_tokens) : instance_tokens;
  Var vocab = renormalize ? l2_normalize_rows(text_embeddings) : text_embeddings;
  Var logits = scale(matmul(tokens, transpose(vocab)), 1.0 / tau);
  return cross_entropy_rows(logits, targets);
}

}  // namespace instformer::instclip
