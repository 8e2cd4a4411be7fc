#include "instformer/tinyvlm/tinyvlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>

#include "instformer/core/errors.hpp"

namespace instformer::tinyvlm {

using namespace instformer::core;

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    char c = char(std::tolower(static_cast<unsigned char>(ch)));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string expand_template(const std::string& tmpl, const std::string& name) {
  std::string out = tmpl;
  const std::string key = "{name}";
  auto pos = out.find(key);
  if (pos == std::string::npos) return out + " " + name;
  out.replace(pos, key.size(), name);
  return out;
}

}  // namespace

TinyVlm TinyVlm::init(const TinyVlmConfig& cfg, const std::vector<std::string>& vocab_names, uint64_t seed) {
  if (cfg.frame_h % cfg.patch != 0 || cfg.frame_w % cfg.patch != 0)
    throw ShapeError("tinyvlm: frame size not divisible by patch size");
  TinyVlm vlm;
  vlm.cfg = cfg;
  vlm.vocab_names = vocab_names;

  // Closed token set: category words plus template words, sorted for
  // determinism.
  std::set<std::string> words;
  for (const auto& n : vocab_names)
    for (const auto& w : split_words(n)) words.insert(w);
  for (const auto& t : cfg.templates)
    for (const auto& w : split_words(expand_template(t, "x"))) words.insert(w);
  vlm.tokens.assign(words.begin(), words.end());
  for (size_t i = 0; i < vlm.tokens.size(); ++i) vlm.token_index[vlm.tokens[i]] = int(i);

  Rng rng(Rng::derive(seed, 0x71f1ULL));
  const int c = cfg.embed_dim;
  const int p = cfg.patch;
  const int np = cfg.patches_per_frame();
  const int hidden = c * cfg.mlp_ratio;
  const double wstd = 0.02;

  auto& pm = vlm.pm;
  pm.add("vlm.patch_proj.w", {p * p * 3, c}, init_normal(rng, int64_t(p) * p * 3 * c, wstd * 4));
  pm.add("vlm.patch_proj.b", {1, c}, init_zeros(c));
  pm.add("vlm.pos_embed", {np, c}, init_normal(rng, int64_t(np) * c, wstd));
  pm.add("vlm.class_token", {1, c}, init_normal(rng, c, wstd));
  for (int l = 0; l < cfg.layers; ++l) {
    std::string base = "vlm.layer" + std::to_string(l) + ".";
    for (const char* proj : {"wq", "wk", "wv", "wo"})
      pm.add(base + "attn." + proj, {c, c}, init_normal(rng, int64_t(c) * c, 0.08));
    for (const char* b : {"bq", "bk", "bv", "bo"}) pm.add(base + "attn." + b, {1, c}, init_zeros(c));
    pm.add(base + "ln1.g", {1, c}, std::vector<double>(size_t(c), 1.0));
    pm.add(base + "ln1.b", {1, c}, init_zeros(c));
    pm.add(base + "mlp.w1", {c, hidden}, init_normal(rng, int64_t(c) * hidden, 0.08));
    pm.add(base + "mlp.b1", {1, hidden}, init_zeros(hidden));
    pm.add(base + "mlp.w2", {hidden, c}, init_normal(rng, int64_t(hidden) * c, 0.08));
    pm.add(base + "mlp.b2", {1, c}, init_zeros(c));
    pm.add(base + "ln2.g", {1, c}, std::vector<double>(size_t(c), 1.0));
    pm.add(base + "ln2.b", {1, c}, init_zeros(c));
  }
  pm.add("vlm.final_ln.g", {1, c}, std::vector<double>(size_t(c), 1.0));
  pm.add("vlm.final_ln.b", {1, c}, init_zeros(c));
  pm.add("vlm.vision_proj.w", {c, c}, init_normal(rng, int64_t(c) * c, 0.08));
  pm.add("vlm.text_embed", {int(vlm.tokens.size()), c},
         init_normal(rng, int64_t(vlm.tokens.size()) * c, 0.2));
  pm.add("vlm.text_proj.w", {c, c}, init_normal(rng, int64_t(c) * c, 0.08));
  pm.add("vlm.logit_temp", {1}, {cfg.tau_init});
  return vlm;
}

void TinyVlm::to_checkpoint(core::Checkpoint& ck) const {
  for (const auto& [name, v] : pm.params) ck.put(name, v);
  ck.meta["vlm_config"] = {{"embed_dim", cfg.embed_dim},
                           {"layers", cfg.layers},
                           {"patch", cfg.patch},
                           {"mlp_ratio", cfg.mlp_ratio},
                           {"frame_h", cfg.frame_h},
                           {"frame_w", cfg.frame_w},
                           {"tau_init", cfg.tau_init},
                           {"normalize_class_similarity", cfg.normalize_class_similarity},
                           {"templates", cfg.templates}};
  ck.meta["vlm_tokens"] = tokens;
  ck.meta["vocab_names"] = vocab_names;
}

TinyVlm TinyVlm::from_checkpoint(const core::Checkpoint& ck) {
  TinyVlm vlm;
  const auto& j = ck.meta.at("vlm_config");
  vlm.cfg.embed_dim = j.at("embed_dim").get<int>();
  vlm.cfg.layers = j.at("layers").get<int>();
  vlm.cfg.patch = j.at("patch").get<int>();
  vlm.cfg.mlp_ratio = j.at("mlp_ratio").get<int>();
  vlm.cfg.frame_h = j.at("frame_h").get<int>();
  vlm.cfg.frame_w = j.at("frame_w").get<int>();
  vlm.cfg.tau_init = j.at("tau_init").get<double>();
  vlm.cfg.normalize_class_similarity = j.at("normalize_class_similarity").get<bool>();
  vlm.cfg.templates = j.at("templates").get<std::vector<std::string>>();
  vlm.tokens = ck.meta.at("vlm_tokens").get<std::vector<std::string>>();
  vlm.vocab_names = ck.meta.at("vocab_names").get<std::vector<std::string>>();
  for (size_t i = 0; i < vlm.tokens.size(); ++i) vlm.token_index[vlm.tokens[i]] = int(i);
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("vlm.", 0) == 0) vlm.pm.params[name] = make_var(t.first, t.second, false);
  return vlm;
}

void TinyVlm::save(const std::string& path, const nlohmann::json& extra_meta) const {
  Checkpoint ck;
  to_checkpoint(ck);
  ck.meta["kind"] = "tinyvlm";
  for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  ck.save(path);
}

TinyVlm TinyVlm::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "tinyvlm") throw IoError("not a tinyvlm checkpoint: " + path);
  return from_checkpoint(ck);
}

// ---------------------------------------------------------------------- text

std::vector<int> tokenize(const TinyVlm& vlm, const std::string& text) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    auto it = vlm.token_index.find(w);
    if (it == vlm.token_index.end()) throw VocabularyError("unknown token: '" + w + "'");
    ids.push_back(it->second);
  }
  if (ids.empty()) throw VocabularyError("empty text after tokenization");
  return ids;
}

core::Var text_embedding(const TinyVlm& vlm, const std::string& category_name, const std::string& tmpl) {
  auto ids = tokenize(vlm, expand_template(tmpl, category_name));
  Var rows = embedding(vlm.param("vlm.text_embed"), ids);
  Var pooled = scale(matmul(make_const({1, int(ids.size())}, std::vector<double>(ids.size(), 1.0)), rows),
                     1.0 / double(ids.size()));
  Var projected = matmul(pooled, vlm.param("vlm.text_proj.w"));
  return l2_normalize_rows(projected);
}

core::Var embed_text(const TinyVlm& vlm, const std::string& category_name,
                     const std::vector<std::string>& templates) {
  if (templates.empty()) throw ConfigError("embed_text: need at least one template");
  std::vector<Var> per_template;
  per_template.reserve(templates.size());
  for (const auto& t : templates) per_template.push_back(text_embedding(vlm, category_name, t));
  Var stacked = concat_rows(per_template);
  Var avg = scale(
      matmul(make_const({1, int(templates.size())}, std::vector<double>(templates.size(), 1.0)), stacked),
      1.0 / double(templates.size()));
  return l2_normalize_rows(avg);
}

core::Var vocabulary_embeddings(const TinyVlm& vlm, const std::vector<std::string>& names) {
  std::vector<Var> rows;
  rows.reserve(names.size());
  for (const auto& n : names) rows.push_back(embed_text(vlm, n, vlm.cfg.templates));
  return concat_rows(rows);
}

// -------------------------------------------------------------------- vision

core::Var frame_to_patch_matrix(const TinyVlmConfig& cfg, const uint8_t* frame) {
  const int p = cfg.patch, w = cfg.frame_w;
  const int gy = cfg.frame_h / p, gx = w / p;
  std::vector<double> data(size_t(gy) * gx * p * p * 3, 0.0);
  size_t out = 0;
  for (int py = 0; py < gy; ++py) {
    for (int px = 0; px < gx; ++px) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          const uint8_t* src = frame + (size_t(py * p + y) * w + (px * p + x)) * 3;
          for (int ch = 0; ch < 3; ++ch) data[out++] = double(src[ch]) / 255.0 * 2.0 - 1.0;
        }
      }
    }
  }
  return make_const({gy * gx, p * p * 3}, std::move(data));
}

core::Var patch_embed(const TinyVlm& vlm, const core::Var& patch_matrix) {
  return add(matmul(patch_matrix, vlm.param("vlm.patch_proj.w")), vlm.param("vlm.patch_proj.b"));
}

core::Var encoder_block(const TinyVlm& vlm, int layer, const core::Var& x, const std::vector<double>* bias,
                        const AdapterFn* adapter) {
  const std::string base = "vlm.layer" + std::to_string(layer) + ".";
  const double inv_sqrt_d = 1.0 / std::sqrt(double(vlm.cfg.embed_dim));

  auto adapt = [&](const std::string& tensor, const Var& input, Var base_out) {
    if (adapter && *adapter) {
      Var delta = (*adapter)(tensor, input);
      if (delta) base_out = add(base_out, delta);
    }
    return base_out;
  };

  Var q = adapt(base + "attn.wq", x, add(matmul(x, vlm.param(base + "attn.wq")), vlm.param(base + "attn.bq")));
  Var k = adapt(base + "attn.wk", x, add(matmul(x, vlm.param(base + "attn.wk")), vlm.param(base + "attn.bk")));
  Var v = adapt(base + "attn.wv", x, add(matmul(x, vlm.param(base + "attn.wv")), vlm.param(base + "attn.bv")));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Var probs = softmax_rows(scores, bias);
  Var attended = matmul(probs, v);
  Var o = adapt(base + "attn.wo", attended,
                add(matmul(attended, vlm.param(base + "attn.wo")), vlm.param(base + "attn.bo")));
  Var h = layer_norm_rows(add(x, o), vlm.param(base + "ln1.g"), vlm.param(base + "ln1.b"));

  Var m = adapt(base + "mlp.w1", h, add(matmul(h, vlm.param(base + "mlp.w1")), vlm.param(base + "mlp.b1")));
  m = vgelu(m);
  m = adapt(base + "mlp.w2", m, add(matmul(m, vlm.param(base + "mlp.w2")), vlm.param(base + "mlp.b2")));
  return layer_norm_rows(add(h, m), vlm.param(base + "ln2.g"), vlm.param(base + "ln2.b"));
}

core::Var image_embedding(const TinyVlm& vlm, const uint8_t* frame) {
  Var patches = patch_embed(vlm, frame_to_patch_matrix(vlm.cfg, frame));
  patches = add(patches, vlm.param("vlm.pos_embed"));
  Var x = concat_rows({vlm.param("vlm.class_token"), patches});
  for (int l = 0; l < vlm.cfg.layers; ++l) x = encoder_block(vlm, l, x);
  x = layer_norm_rows(x, vlm.param("vlm.final_ln.g"), vlm.param("vlm.final_ln.b"));
  Var cls = slice_rows(x, 0, 1);
  return l2_normalize_rows(matmul(cls, vlm.param("vlm.vision_proj.w")));
}

// --------------------------------------------------------------- contrastive

core::Var infonce_loss(const core::Var& image_embs, const core::Var& text_embs, const core::Var& tau) {
  if (image_embs->shape.size() != 2 || image_embs->shape != text_embs->shape)
    throw ShapeError("infonce_loss: embeddings must share a [B,C] shape");
  int b = image_embs->shape[0];
  if (b == 0) throw ShapeError("infonce_loss: empty batch");
  if (tau->val[0] <= 0.0) throw ConfigError("infonce_loss: temperature must be positive");
  Var logits = mul(matmul(image_embs, transpose(text_embs)), reciprocal(tau));
  std::vector<int> diag(size_t(b), 0);
  std::iota(diag.begin(), diag.end(), 0);
  Var i2t = cross_entropy_rows(logits, diag);
  Var t2i = cross_entropy_rows(transpose(logits), diag);
  return scale(add(i2t, t2i), 0.5);
}

// --------------------------------------------------------------- pretraining

TinyVlm clip_pretrain(const std::vector<std::string>& vocab_names, const TinyVlmConfig& cfg,
                      const PretrainConfig& pcfg, PretrainReport* report) {
  TinyVlm vlm = TinyVlm::init(cfg, vocab_names, pcfg.seed);
  const int k = int(vocab_names.size());
  const int batch = std::min(pcfg.batch, k);

  Rng rng(Rng::derive(pcfg.seed, 0xc11bULL));
  Adam opt;
  opt.lr = pcfg.lr;

  double last_loss = 0.0;
  std::vector<int> order(size_t(k), 0);
  std::iota(order.begin(), order.end(), 0);
  for (int step = 0; step < pcfg.steps; ++step) {
    // cosine decay to 10% of the base rate
    double t = pcfg.steps > 1 ? double(step) / double(pcfg.steps - 1) : 0.0;
    opt.lr = pcfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * t)));
    rng.shuffle(order);  // distinct categories per batch: no false negatives
    std::vector<Var> img_rows, txt_rows;
    for (int i = 0; i < batch; ++i) {
      int cat = order[size_t(i)];
      auto crop = datakit::render_category_crop(cat, cfg.frame_h, cfg.frame_w, rng);
      img_rows.push_back(image_embedding(vlm, crop.data()));
      const auto& tmpl = cfg.templates[size_t(rng.below(int64_t(cfg.templates.size())))];
      txt_rows.push_back(text_embedding(vlm, vocab_names[size_t(cat)], tmpl));
    }
    vlm.pm.zero_grads();
    Var loss = infonce_loss(concat_rows(img_rows), concat_rows(txt_rows), vlm.param("vlm.logit_temp"));
    last_loss = loss->scalar();
    if (!std::isfinite(last_loss))
      throw NumericError("clip_pretrain: loss diverged (NaN) at step " + std::to_string(step));
    backward(loss);
    opt.step(vlm.pm);
    auto tau = vlm.pm.get("vlm.logit_temp");
    tau->val[0] = std::clamp(tau->val[0], 0.01, 100.0);
  }

  if (report) {
    report->steps = pcfg.steps;
    report->final_loss = last_loss;
    report->zero_shot_top1 = zero_shot_accuracy(vlm, pcfg.eval_crops, Rng::derive(pcfg.seed, 0xea1ULL));
  }
  return vlm;
}

double zero_shot_accuracy(const TinyVlm& vlm, int crops, uint64_t seed) {
  const int k = int(vlm.vocab_names.size());
  if (k == 0 || crops <= 0) return 0.0;
  Var text = vocabulary_embeddings(vlm, vlm.vocab_names);
  Rng rng(seed);
  int hits = 0;
  for (int i = 0; i < crops; ++i) {
    int cat = int(rng.below(k));
    auto crop = datakit::render_category_crop(cat, vlm.cfg.frame_h, vlm.cfg.frame_w, rng);
    Var emb = image_embedding(vlm, crop.data());
    Var sims = matmul(emb, transpose(text));
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (sims->val[size_t(j)] > sims->val[size_t(best)]) best = j;
    hits += (best == cat) ? 1 : 0;
  }
  return double(hits) / double(crops);
}

}  // namespace instformer::tinyvlm
