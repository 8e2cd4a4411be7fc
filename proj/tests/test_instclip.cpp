#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "instformer/core/errors.hpp"
#include "instformer/datakit/datakit.hpp"
#include "instformer/instclip/instclip.hpp"
#include "test_util.hpp"

using namespace instformer;
using namespace instformer::core;
using namespace instformer::instclip;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

tinyvlm::TinyVlm tiny_backbone(int c = 16, int layers = 2, int frame = 32, uint64_t seed = 5) {
  tinyvlm::TinyVlmConfig cfg;
  cfg.embed_dim = c;
  cfg.layers = layers;
  cfg.mlp_ratio = 2;
  cfg.frame_h = frame;
  cfg.frame_w = frame;
  auto vlm = tinyvlm::TinyVlm::init(cfg, datakit::default_category_names(), seed);
  vlm.freeze();
  return vlm;
}

std::vector<uint8_t> noise_frame(int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<uint8_t> f(size_t(h) * w * 3, 0);
  for (auto& p : f) p = uint8_t(rng.below(256));
  return f;
}

std::vector<double> blob_logits(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> logits(size_t(n) * h * w, -8.0);
  for (int i = 0; i < n; ++i) {
    int cx = 6 + int(rng.below(int64_t(w - 12))), cy = 6 + int(rng.below(int64_t(h - 12)));
    int r = 4 + int(rng.below(5));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) logits[(size_t(i) * h + y) * w + x] = 8.0;
  }
  return logits;
}

}  // namespace

TEST_CASE("guidance mask: structural template and the no-blocked-row invariant") {
  auto logits = blob_logits(3, 32, 32, 1);
  auto gb = build_guidance_mask(logits, 3, 32, 32, 8, GuidanceMode::kSoft);
  const int d = gb.dim();
  REQUIRE(d == 1 + 3 + 16);

  // register row: itself and vision open, instances blocked
  CHECK(gb.at(0, 0) == 0.0);
  for (int j = 0; j < 3; ++j) CHECK(gb.at(0, 1 + j) == -kInf);
  for (int v = 0; v < 16; ++v) CHECK(gb.at(0, 1 + 3 + v) == 0.0);
  // vision rows: vision and register open, instances blocked
  for (int v = 0; v < 16; ++v) {
    CHECK(gb.at(1 + 3 + v, 0) == 0.0);
    for (int j = 0; j < 3; ++j) CHECK(gb.at(1 + 3 + v, 1 + j) == -kInf);
    for (int u = 0; u < 16; ++u) CHECK(gb.at(1 + 3 + v, 1 + 3 + u) == 0.0);
  }
  // instance rows: self and register open, other instances blocked
  for (int i = 0; i < 3; ++i) {
    CHECK(gb.at(1 + i, 0) == 0.0);
    for (int j = 0; j < 3; ++j) CHECK(gb.at(1 + i, 1 + j) == (i == j ? 0.0 : -kInf));
  }
  for (int r = 0; r < d; ++r) {
    bool open = false;
    for (int c = 0; c < d && !open; ++c) open = gb.at(r, c) > -kInf;
    CHECK(open);
  }
}

TEST_CASE("guidance mask: saturated, fallback and soft-pooling reference cases") {
  // all-foreground: soft bias magnitude bounded by 10*sigmoid(-20)
  std::vector<double> fg(2 * 32 * 32, 20.0);
  auto gb_fg = build_guidance_mask(fg, 2, 32, 32, 8, GuidanceMode::kSoft);
  for (int i = 0; i < 2; ++i)
    for (int v = 0; v < 16; ++v) CHECK(std::abs(gb_fg.at(1 + i, 1 + 2 + v)) <= 10.0 / (1.0 + std::exp(20.0)) + 1e-12);

  // all-background in hard mode: exactly one unblocked vision entry (fallback)
  std::vector<double> bg(2 * 32 * 32, -20.0);
  auto gb_bg = build_guidance_mask(bg, 2, 32, 32, 8, GuidanceMode::kHard);
  for (int i = 0; i < 2; ++i) {
    int open = 0, open_at = -1;
    for (int v = 0; v < 16; ++v)
      if (gb_bg.at(1 + i, 1 + 2 + v) == 0.0) {
        ++open;
        open_at = v;
      }
    CHECK(open == 1);
    CHECK(open_at == 0);  // argmax tie resolves to the lowest patch index
  }

  // random soft case against an independent pooling routine
  auto logits = blob_logits(4, 32, 32, 7);
  auto gb = build_guidance_mask(logits, 4, 32, 32, 8, GuidanceMode::kSoft, -10.0);
  for (int i = 0; i < 4; ++i) {
    for (int py = 0; py < 4; ++py) {
      for (int px = 0; px < 4; ++px) {
        double a = 0;
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            a += 1.0 / (1.0 + std::exp(-logits[(size_t(i) * 32 + (py * 8 + y)) * 32 + (px * 8 + x)]));
        a /= 64.0;
        CHECK(gb.at(1 + i, 1 + 4 + py * 4 + px) == doctest::Approx(-10.0 * (1.0 - a)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("inst attention: zero bias equals unmasked attention exactly") {
  auto vlm = tiny_backbone();
  Rng rng(3);
  auto x = make_const({5, 16}, init_normal(rng, 80, 1.0));
  std::vector<double> zero_bias(25, 0.0);
  auto with_bias = tinyvlm::encoder_block(vlm, 0, x, &zero_bias);
  auto without = tinyvlm::encoder_block(vlm, 0, x, nullptr);
  CHECK(with_bias->val == without->val);
}

TEST_CASE("inst attention: fully blocked column makes other rows invariant to that token") {
  auto vlm = tiny_backbone();
  Rng rng(4);
  auto base_vals = init_normal(rng, 80, 1.0);
  auto x1 = make_const({5, 16}, base_vals);
  auto perturbed = base_vals;
  for (int c = 0; c < 16; ++c) perturbed[size_t(2) * 16 + c] += rng.normal(0.0, 3.0);
  auto x2 = make_const({5, 16}, perturbed);

  std::vector<double> bias(25, 0.0);
  for (int r = 0; r < 5; ++r) bias[size_t(r) * 5 + 2] = -kInf;  // nobody reads token 2
  auto y1 = tinyvlm::encoder_block(vlm, 0, x1, &bias);
  auto y2 = tinyvlm::encoder_block(vlm, 0, x2, &bias);
  for (int r = 0; r < 5; ++r) {
    if (r == 2) continue;
    for (int c = 0; c < 16; ++c) CHECK(y1->val[size_t(r) * 16 + c] == y2->val[size_t(r) * 16 + c]);
  }
}

TEST_CASE("inst attention: numeric case matches an independent dense recomputation") {
  auto vlm = tiny_backbone(4, 1);
  // overwrite with a tiny handcrafted state for the reference loop
  Rng rng(6);
  for (auto& [name, v] : vlm.pm.params)
    if (name.rfind("vlm.layer0", 0) == 0)
      for (auto& x : v->val) x = rng.normal(0.0, 0.5);

  auto x = make_const({3, 4}, init_normal(rng, 12, 1.0));
  std::vector<double> bias(9, 0.0);
  bias[1] = -kInf;  // token 0 cannot read token 1
  auto out = tinyvlm::encoder_block(vlm, 0, x, &bias);

  // reference: plain loops, no autodiff machinery
  auto W = [&](const std::string& n) { return vlm.param("vlm.layer0." + n)->val; };
  auto linear = [&](const std::vector<double>& in, const std::vector<double>& w, const std::vector<double>& b,
                    int rows, int ci, int co) {
    std::vector<double> out_(size_t(rows) * co, 0.0);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < co; ++j) {
        double s = b[size_t(j)];
        for (int k = 0; k < ci; ++k) s += in[size_t(r) * ci + k] * w[size_t(k) * co + j];
        out_[size_t(r) * co + j] = s;
      }
    return out_;
  };
  auto q = linear(x->val, W("attn.wq"), W("attn.bq"), 3, 4, 4);
  auto k = linear(x->val, W("attn.wk"), W("attn.bk"), 3, 4, 4);
  auto v = linear(x->val, W("attn.wv"), W("attn.bv"), 3, 4, 4);
  std::vector<double> att(9, 0.0);
  for (int i = 0; i < 3; ++i) {
    std::vector<double> row(3, 0.0);
    double mx = -kInf;
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += q[size_t(i) * 4 + c] * k[size_t(j) * 4 + c];
      row[size_t(j)] = s / 2.0 + bias[size_t(i) * 3 + j];
      mx = std::max(mx, row[size_t(j)]);
    }
    double denom = 0;
    for (int j = 0; j < 3; ++j) {
      row[size_t(j)] = row[size_t(j)] == -kInf ? 0.0 : std::exp(row[size_t(j)] - mx);
      denom += row[size_t(j)];
    }
    for (int j = 0; j < 3; ++j) att[size_t(i) * 3 + j] = row[size_t(j)] / denom;
  }
  std::vector<double> attended(12, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += att[size_t(i) * 3 + j] * v[size_t(j) * 4 + c];
      attended[size_t(i) * 4 + c] = s;
    }
  auto o = linear(attended, W("attn.wo"), W("attn.bo"), 3, 4, 4);
  auto ln = [&](std::vector<double> in, const std::vector<double>& g, const std::vector<double>& b) {
    for (int r = 0; r < 3; ++r) {
      double mu = 0, var = 0;
      for (int c = 0; c < 4; ++c) mu += in[size_t(r) * 4 + c];
      mu /= 4;
      for (int c = 0; c < 4; ++c) var += (in[size_t(r) * 4 + c] - mu) * (in[size_t(r) * 4 + c] - mu);
      var /= 4;
      for (int c = 0; c < 4; ++c)
        in[size_t(r) * 4 + c] = (in[size_t(r) * 4 + c] - mu) / std::sqrt(var + 1e-5) * g[size_t(c)] + b[size_t(c)];
    }
    return in;
  };
  std::vector<double> h(12, 0.0);
  for (int i = 0; i < 12; ++i) h[size_t(i)] = x->val[size_t(i)] + o[size_t(i)];
  h = ln(h, W("ln1.g"), W("ln1.b"));
  auto m1 = linear(h, W("mlp.w1"), W("mlp.b1"), 3, 4, 8);
  for (auto& u : m1) u = 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2));
  auto m2 = linear(m1, W("mlp.w2"), W("mlp.b2"), 3, 8, 4);
  std::vector<double> h2(12, 0.0);
  for (int i = 0; i < 12; ++i) h2[size_t(i)] = h[size_t(i)] + m2[size_t(i)];
  h2 = ln(h2, W("ln2.g"), W("ln2.b"));

  for (int i = 0; i < 12; ++i) CHECK(out->val[size_t(i)] == doctest::Approx(h2[size_t(i)]).epsilon(1e-6));

  // attention rows sum to one with -inf entries contributing exactly zero
  for (int i = 0; i < 3; ++i) {
    double s = att[size_t(i) * 3] + att[size_t(i) * 3 + 1] + att[size_t(i) * 3 + 2];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(att[1] == 0.0);
}

TEST_CASE("instclip_forward: unit norm, mask permutation permutes tokens") {
  auto vlm = tiny_backbone(16, 2, 32, 8);
  InstClipConfig cfg;
  auto ic = InstClip::init(vlm, cfg, 9);
  auto frame = noise_frame(32, 32, 10);
  auto logits = blob_logits(4, 32, 32, 11);

  auto gb = build_guidance_mask(logits, 4, 32, 32, 8, GuidanceMode::kSoft);
  auto out = instclip_forward(ic, frame.data(), gb);
  CHECK(out.instance_tokens->shape == std::vector<int>{4, 16});
  for (int i = 0; i < 4; ++i) {
    double n = 0;
    for (int c = 0; c < 16; ++c) {
      double v = out.instance_tokens->val[size_t(i) * 16 + c];
      n += v * v;
    }
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }

  std::vector<int> perm = {2, 0, 3, 1};
  std::vector<double> permuted(logits.size(), 0.0);
  for (int i = 0; i < 4; ++i)
    std::copy(logits.begin() + perm[size_t(i)] * 32 * 32, logits.begin() + (perm[size_t(i)] + 1) * 32 * 32,
              permuted.begin() + i * 32 * 32);
  auto gb_p = build_guidance_mask(permuted, 4, 32, 32, 8, GuidanceMode::kSoft);
  auto out_p = instclip_forward(ic, frame.data(), gb_p);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 16; ++c)
      CHECK(out_p.instance_tokens->val[size_t(i) * 16 + c] ==
            out.instance_tokens->val[size_t(perm[size_t(i)]) * 16 + c]);
}

TEST_CASE("single-forward equivalence: batched hard-mode forward equals per-instance passes") {
  auto vlm = tiny_backbone(16, 2, 32, 12);
  InstClipConfig cfg;
  cfg.mode = GuidanceMode::kHard;
  auto ic = InstClip::init(vlm, cfg, 13);
  auto frame = noise_frame(32, 32, 14);
  const int n = 5;
  auto logits = blob_logits(n, 32, 32, 15);

  auto batched = instclip_forward(ic, frame.data(), build_guidance_mask(logits, n, 32, 32, 8, cfg.mode));
  double worst = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> single(logits.begin() + i * 32 * 32, logits.begin() + (i + 1) * 32 * 32);
    auto one = instclip_forward(ic, frame.data(), build_guidance_mask(single, 1, 32, 32, 8, cfg.mode));
    for (int c = 0; c < 16; ++c)
      worst = std::max(worst, std::abs(one.instance_tokens->val[size_t(c)] -
                                       batched.instance_tokens->val[size_t(i) * 16 + c]));
  }
  MESSAGE("max per-instance deviation: " << worst);
  CHECK(worst <= 1e-5);
}

TEST_CASE("classify_instances: argmax rules and brute-force agreement") {
  Rng rng(16);
  auto vocab = l2_normalize_rows(make_const({6, 8}, init_normal(rng, 48, 1.0)));

  // token equal to a vocabulary row classifies as that row
  auto row3 = slice_rows(vocab, 3, 4);
  auto cls = classify_instances(row3, vocab, 0.05, true);
  CHECK(cls.categories[0] == 3);

  // positive rescaling cannot change the argmax
  auto scaled = scale(row3, 3.0);
  CHECK(classify_instances(scaled, vocab, 0.05, true).categories[0] == 3);

  // random tokens: argmax equals the max dot product
  auto tokens = l2_normalize_rows(make_const({5, 8}, init_normal(rng, 40, 1.0)));
  auto got = classify_instances(tokens, vocab, 0.1, true);
  for (int i = 0; i < 5; ++i) {
    int best = 0;
    double bv = -2;
    for (int k = 0; k < 6; ++k) {
      double dot = 0;
      for (int c = 0; c < 8; ++c) dot += tokens->val[size_t(i) * 8 + c] * vocab->val[size_t(k) * 8 + c];
      if (dot > bv) {
        bv = dot;
        best = k;
      }
    }
    CHECK(got.categories[size_t(i)] == best);
    double rowsum = 0;
    for (int k = 0; k < 6; ++k) rowsum += got.probs->val[size_t(i) * 6 + k];
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-9));
  }

  CHECK_THROWS_AS(classify_instances(tokens, make_const({0, 8}, {}), 0.1, true), ConfigError);
}

TEST_CASE("lora: zero-init contract, zero scale, merge oracle, rank guard") {
  Rng rng(17);
  ParamMap pm;
  auto w = make_const({6, 4}, init_normal(rng, 24, 1.0));
  auto ad = make_lora_adapter(pm, "t", 6, 4, 2, 1.5, rng);

  auto x = make_const({3, 6}, init_normal(rng, 18, 1.0));
  auto base = matmul(x, w);
  CHECK(lora_apply(w, ad, x)->val == base->val);  // B starts at zero

  // nonzero adapter: merged and unmerged agree on 100 random inputs
  for (auto& v : ad.up->val) v = rng.normal(0.0, 0.5);
  LoraAdapter zero_scale = ad;
  zero_scale.scale = 0.0;
  CHECK(lora_apply(w, zero_scale, x)->val == base->val);

  auto merged = lora_merge(w, ad);
  for (int trial = 0; trial < 100; ++trial) {
    auto xin = make_const({2, 6}, init_normal(rng, 12, 1.0));
    auto ya = lora_apply(w, ad, xin);
    auto ym = matmul(xin, merged);
    for (size_t i = 0; i < ya->val.size(); ++i)
      CHECK(ya->val[i] == doctest::Approx(ym->val[i]).epsilon(1e-6));
  }

  ParamMap pm2;
  CHECK_THROWS_AS(make_lora_adapter(pm2, "bad", 6, 4, 5, 1.0, rng), ConfigError);
}

TEST_CASE("classification cross-entropy gradient flows to LoRA parameters") {
  auto vlm = tiny_backbone(16, 2, 32, 18);
  InstClipConfig cfg;
  auto ic = InstClip::init(vlm, cfg, 19);
  auto frame = noise_frame(32, 32, 20);
  auto logits = blob_logits(3, 32, 32, 21);
  auto gb = build_guidance_mask(logits, 3, 32, 32, 8, cfg.mode);

  Rng rng(22);
  auto text = l2_normalize_rows(make_const({5, 16}, init_normal(rng, 80, 1.0)));
  std::vector<int> targets = {1, 4, 0};
  // make the adapters live so gradients are nontrivial
  for (auto& [name, v] : ic.pm.params)
    if (name.find(".b") != std::string::npos)
      for (auto& u : v->val) u = rng.normal(0.0, 0.1);

  auto loss_fn = [&] {
    auto out = instclip_forward(ic, frame.data(), gb);
    return classification_loss(out.instance_tokens, targets, text, 0.1, true);
  };
  Rng pick(23);
  double err = testutil::fd_gradcheck(ic.pm, loss_fn,
                                      {"instclip.lora.layer0.attn.wq.a", "instclip.lora.layer1.attn.wv.b",
                                       "instclip.inst_token", "instclip.reg_token"},
                                      4, pick);
  CHECK(err < 1e-4);
}
