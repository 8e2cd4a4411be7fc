#include "instformer/proposal/proposal.hpp"

#include <cmath>

#include "instformer/core/assignment.hpp"
#include "instformer/core/errors.hpp"
#include "instformer/core/log.hpp"

namespace instformer::proposal {

using namespace instformer::core;

ProposalNet ProposalNet::init(const ProposalConfig& cfg, uint64_t seed) {
  if (cfg.frame_h % 4 != 0 || cfg.frame_w % 4 != 0)
    throw ShapeError("proposal: frame size must be divisible by 4");
  ProposalNet net;
  net.cfg = cfg;
  Rng rng(Rng::derive(seed, 0x9c0bULL));
  const int c = cfg.embed_dim;
  const int fp = cfg.feat_h() * cfg.feat_w();
  auto& pm = net.pm;

  auto conv_init = [&](const std::string& name, int co, int ci, int k) {
    double std = std::sqrt(2.0 / double(ci * k * k));
    pm.add(name + ".w", {co, ci, k, k}, init_normal(rng, int64_t(co) * ci * k * k, std));
    pm.add(name + ".b", {co}, init_zeros(co));
  };
  conv_init("proposal.backbone.conv1", 32, 3, 3);
  conv_init("proposal.backbone.conv2", c, 32, 3);
  conv_init("proposal.backbone.conv3", c, c, 3);
  conv_init("proposal.mask.lateral", c, 32, 1);
  conv_init("proposal.mask.top", c, c, 1);
  conv_init("proposal.mask.pixel_embed", c, c, 1);

  pm.add("proposal.feat_pos", {fp, c}, init_normal(rng, int64_t(fp) * c, 0.02));
  pm.add("proposal.query_init", {cfg.num_queries, c}, init_normal(rng, int64_t(cfg.num_queries) * c, 0.5));

  for (int l = 0; l < cfg.decoder_layers; ++l) {
    std::string base = "proposal.dec" + std::to_string(l) + ".";
    for (const char* blk : {"cross", "self"}) {
      for (const char* w : {"wq", "wk", "wv", "wo"})
        pm.add(base + blk + "." + w, {c, c}, init_normal(rng, int64_t(c) * c, 0.08));
      for (const char* b : {"bq", "bk", "bv", "bo"}) pm.add(base + blk + "." + b, {1, c}, init_zeros(c));
    }
    pm.add(base + "ln1.g", {1, c}, std::vector<double>(size_t(c), 1.0));
    pm.add(base + "ln1.b", {1, c}, init_zeros(c));
    pm.add(base + "ln2.g", {1, c}, std::vector<double>(size_t(c), 1.0));
    pm.add(base + "ln2.b", {1, c}, init_zeros(c));
    pm.add(base + "mlp.w1", {c, 4 * c}, init_normal(rng, int64_t(c) * 4 * c, 0.08));
    pm.add(base + "mlp.b1", {1, 4 * c}, init_zeros(4 * c));
    pm.add(base + "mlp.w2", {4 * c, c}, init_normal(rng, int64_t(4 * c) * c, 0.08));
    pm.add(base + "mlp.b2", {1, c}, init_zeros(c));
    pm.add(base + "ln3.g", {1, c}, std::vector<double>(size_t(c), 1.0));
    pm.add(base + "ln3.b", {1, c}, init_zeros(c));
  }
  pm.add("proposal.mask_embed.w", {c, c}, init_normal(rng, int64_t(c) * c, 0.08));
  pm.add("proposal.mask_embed.b", {1, c}, init_zeros(c));
  pm.add("proposal.obj_head.w", {c, 1}, init_normal(rng, c, 0.08));
  pm.add("proposal.obj_head.b", {1, 1}, init_zeros(1));
  pm.add("proposal.mask_bias", {1}, {-2.0});  // start with mostly-empty masks
  return net;
}

namespace {

Var frame_to_chw(const ProposalConfig& cfg, const uint8_t* frame) {
  const int h = cfg.frame_h, w = cfg.frame_w;
  std::vector<double> data(size_t(3) * h * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        data[(size_t(ch) * h + y) * w + x] = double(frame[(size_t(y) * w + x) * 3 + size_t(ch)]) / 255.0 * 2.0 - 1.0;
  return make_const({3, h, w}, std::move(data));
}

// [C,h,w] -> [h*w, C] token rows
Var chw_to_tokens(const Var& x) {
  int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  Var flat = reshape(x, {c, h * w});
  return transpose(flat);
}

struct AttnWeights {
  Var wq, wk, wv, wo, bq, bk, bv, bo;
};

AttnWeights attn_weights(const ProposalNet& net, const std::string& base) {
  return {net.param(base + ".wq"), net.param(base + ".wk"), net.param(base + ".wv"), net.param(base + ".wo"),
          net.param(base + ".bq"), net.param(base + ".bk"), net.param(base + ".bv"), net.param(base + ".bo")};
}

Var attention(const AttnWeights& w, const Var& queries, const Var& keys, const Var& values, double inv_sqrt_d) {
  Var q = add(matmul(queries, w.wq), w.bq);
  Var k = add(matmul(keys, w.wk), w.bk);
  Var v = add(matmul(values, w.wv), w.bv);
  Var probs = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
  return add(matmul(matmul(probs, v), w.wo), w.bo);
}

}  // namespace

ProposalOutput propose(const ProposalNet& net, const uint8_t* frame) {
  const auto& cfg = net.cfg;
  const int c = cfg.embed_dim;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(c));

  Var x = frame_to_chw(cfg, frame);
  Var s2 = vrelu(conv2d(x, net.param("proposal.backbone.conv1.w"), net.param("proposal.backbone.conv1.b"), 2, 1));
  Var s4 = vrelu(conv2d(s2, net.param("proposal.backbone.conv2.w"), net.param("proposal.backbone.conv2.b"), 2, 1));
  Var feat = vrelu(conv2d(s4, net.param("proposal.backbone.conv3.w"), net.param("proposal.backbone.conv3.b"), 1, 1));

  // mask features at stride 2: lateral from the early high-res stage plus
  // upsampled semantic features
  Var lateral = conv2d(s2, net.param("proposal.mask.lateral.w"), net.param("proposal.mask.lateral.b"), 1, 0);
  Var top = conv2d(upsample_bilinear(feat, 2), net.param("proposal.mask.top.w"), net.param("proposal.mask.top.b"), 1, 0);
  Var mask_feat = vrelu(add(lateral, top));
  Var pixel_embed = conv2d(mask_feat, net.param("proposal.mask.pixel_embed.w"),
                           net.param("proposal.mask.pixel_embed.b"), 1, 0);  // [C, H/2, W/2]

  Var feat_tokens = chw_to_tokens(feat);
  Var feat_with_pos = add(feat_tokens, net.param("proposal.feat_pos"));
  Var queries = net.param("proposal.query_init");
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    std::string base = "proposal.dec" + std::to_string(l);
    Var crossed = attention(attn_weights(net, base + ".cross"), queries, feat_with_pos, feat_tokens, inv_sqrt_d);
    queries = layer_norm_rows(add(queries, crossed), net.param(base + ".ln1.g"), net.param(base + ".ln1.b"));
    Var selfed = attention(attn_weights(net, base + ".self"), queries, queries, queries, inv_sqrt_d);
    queries = layer_norm_rows(add(queries, selfed), net.param(base + ".ln2.g"), net.param(base + ".ln2.b"));
    Var m = vrelu(add(matmul(queries, net.param(base + ".mlp.w1")), net.param(base + ".mlp.b1")));
    m = add(matmul(m, net.param(base + ".mlp.w2")), net.param(base + ".mlp.b2"));
    queries = layer_norm_rows(add(queries, m), net.param(base + ".ln3.g"), net.param(base + ".ln3.b"));
  }

  Var mask_embed = add(matmul(queries, net.param("proposal.mask_embed.w")), net.param("proposal.mask_embed.b"));
  Var pixel_rows = reshape(pixel_embed, {c, cfg.mask_h() * cfg.mask_w()});  // [C, hw/4]
  Var logits_low = add(matmul(mask_embed, pixel_rows), net.param("proposal.mask_bias"));
  Var logits = upsample_bilinear(reshape(logits_low, {cfg.num_queries, cfg.mask_h(), cfg.mask_w()}), 2);

  ProposalOutput out;
  out.mask_logits = logits;
  out.queries = queries;
  out.objectness_logits = add(matmul(queries, net.param("proposal.obj_head.w")), net.param("proposal.obj_head.b"));
  return out;
}

std::vector<double> ProposalOutput::objectness() const {
  std::vector<double> out(objectness_logits->val.size(), 0.0);
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-objectness_logits->val[i]));
  return out;
}

core::Var margin_contrastive_loss(const core::Var& queries, double margin) {
  if (queries->shape.size() != 2 || queries->shape[0] < 1)
    throw ShapeError("margin_contrastive_loss: expected [N,C] with N >= 1");
  int n = queries->shape[0];
  for (int r = 0; r < n; ++r) {
    double s = 0;
    for (int cc = 0; cc < queries->shape[1]; ++cc) {
      double v = queries->val[size_t(r) * queries->shape[1] + cc];
      s += v * v;
    }
    if (std::sqrt(s) < 1e-12) warn("margin_contrastive_loss: zero-norm query row " + std::to_string(r));
  }
  Var qn = l2_normalize_rows(queries);
  Var sims = matmul(qn, transpose(qn));
  Var hinge = vrelu(add_scalar(sims, -margin));
  std::vector<double> off_diag(size_t(n) * n, 1.0);
  for (int i = 0; i < n; ++i) off_diag[size_t(i) * n + i] = 0.0;
  return sum(mul(hinge, make_const({n, n}, std::move(off_diag))));
}

namespace {

double bce_mean_value(const double* logits, const datakit::Mask& gt) {
  double s = 0;
  for (size_t i = 0; i < gt.data.size(); ++i) {
    double x = logits[i], t = gt.data[i] ? 1.0 : 0.0;
    s += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return s / double(gt.data.size());
}

double dice_value(const double* logits, const datakit::Mask& gt, double smooth = 1.0) {
  double inter = 0, psum = 0, gsum = 0;
  for (size_t i = 0; i < gt.data.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits[i]));
    double t = gt.data[i] ? 1.0 : 0.0;
    inter += p * t;
    psum += p;
    gsum += t;
  }
  return 1.0 - (2 * inter + smooth) / (psum + gsum + smooth);
}

}  // namespace

std::vector<int> match_proposals_to_gt(const ProposalOutput& out, const std::vector<datakit::Mask>& gt_masks,
                                       const SegLossWeights& weights) {
  const int n = out.mask_logits->shape[0];
  const int g = int(gt_masks.size());
  if (g > n)
    throw ShapeError("match_proposals_to_gt: " + std::to_string(g - n) +
                     " ground-truth instance(s) exceed the " + std::to_string(n) + " proposal slots");
  std::vector<int> assignment(size_t(n), -1);
  if (g == 0) return assignment;

  const int hw = out.mask_logits->shape[1] * out.mask_logits->shape[2];
  auto obj = out.objectness();
  std::vector<double> cost(size_t(n) * g, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* logits = out.mask_logits->val.data() + size_t(i) * hw;
    for (int j = 0; j < g; ++j) {
      cost[size_t(i) * g + j] = weights.w_bce * bce_mean_value(logits, gt_masks[size_t(j)]) +
                                weights.w_dice * dice_value(logits, gt_masks[size_t(j)]) -
                                weights.w_obj * std::log(std::max(obj[size_t(i)], 1e-12));
    }
  }
  // n >= g: transpose so every ground truth gets a proposal
  std::vector<double> t(size_t(g) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) t[size_t(j) * n + i] = cost[size_t(i) * g + j];
  auto gt_to_prop = solve_assignment(t, g, n);
  for (int j = 0; j < g; ++j) assignment[size_t(gt_to_prop[size_t(j)])] = j;
  return assignment;
}

core::Var segmentation_loss(const ProposalOutput& out, const std::vector<int>& assignment,
                            const std::vector<datakit::Mask>& gt_masks, const SegLossWeights& weights) {
  const int n = out.mask_logits->shape[0];
  const int hw = out.mask_logits->shape[1] * out.mask_logits->shape[2];
  if (int(assignment.size()) != n) throw ShapeError("segmentation_loss: assignment size mismatch");

  Var flat = reshape(out.mask_logits, {n, hw});
  std::vector<Var> terms;
  std::vector<double> obj_targets(size_t(n), 0.0);
  for (int i = 0; i < n; ++i) {
    int j = assignment[size_t(i)];
    if (j < 0) continue;
    obj_targets[size_t(i)] = 1.0;
    const auto& gt = gt_masks.at(size_t(j));
    std::vector<double> target(gt.data.begin(), gt.data.end());
    Var row = slice_rows(flat, i, i + 1);
    terms.push_back(scale(bce_with_logits(row, target), weights.w_bce));
    terms.push_back(scale(dice_loss_with_logits(row, target), weights.w_dice));
  }
  // objectness: BCE against matched/unmatched, summed over all N slots
  terms.push_back(scale(bce_with_logits(out.objectness_logits, obj_targets), weights.w_obj * n));

  Var total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

}  // namespace instformer::proposal
