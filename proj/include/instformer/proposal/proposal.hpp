#pragma once

#include <string>
#include <vector>

#include "instformer/core/autograd.hpp"
#include "instformer/core/checkpoint.hpp"
#include "instformer/datakit/datakit.hpp"

namespace instformer::proposal {

struct ProposalConfig {
  int num_queries = 8;  // N
  int embed_dim = 64;   // C, shared with the VLM embedding width
  int decoder_layers = 3;
  int frame_h = 64;
  int frame_w = 64;

  int feat_h() const { return frame_h / 4; }  // decoder feature grid
  int feat_w() const { return frame_w / 4; }
  int mask_h() const { return frame_h / 2; }  // mask head grid before x2 upsample
  int mask_w() const { return frame_w / 2; }
};

// Query-based open-world mask proposal network: strided conv backbone,
// cross/self-attention decoder over N learnable queries, per-pixel dot
// product mask head and an objectness head for class-agnostic ranking.
struct ProposalNet {
  ProposalConfig cfg;
  core::ParamMap pm;

  static ProposalNet init(const ProposalConfig& cfg, uint64_t seed);
  core::Var param(const std::string& name) const { return pm.get(name); }
};

struct ProposalOutput {
  core::Var mask_logits;        // [N, H, W], pre-sigmoid
  core::Var queries;            // [N, C]
  core::Var objectness_logits;  // [N, 1]

  std::vector<double> objectness() const;  // sigmoid of the logits
};

// Deterministic forward pass (the net has no stochastic layers).
ProposalOutput propose(const ProposalNet& net, const uint8_t* frame);

// Sum over ordered pairs i != j of max(0, cos(Q_i, Q_j) - margin). Zero-norm
// rows contribute cosine 0 and emit a warning.
core::Var margin_contrastive_loss(const core::Var& queries, double margin);

struct SegLossWeights {
  double w_bce = 2.0;
  double w_dice = 2.0;
  double w_obj = 1.0;
};

// One-to-one Hungarian assignment minimizing
//   w_bce*BCE + w_dice*Dice - w_obj*log(objectness);
// returns per-proposal ground-truth index or -1. Throws when #GT > N.
std::vector<int> match_proposals_to_gt(const ProposalOutput& out,
                                       const std::vector<datakit::Mask>& gt_masks,
                                       const SegLossWeights& weights);

// Matched pairs: w_bce*BCE + w_dice*Dice on masks + w_obj*BCE(objectness, 1);
// unmatched proposals: w_obj*BCE(objectness, 0). Terms are summed.
core::Var segmentation_loss(const ProposalOutput& out, const std::vector<int>& assignment,
                            const std::vector<datakit::Mask>& gt_masks, const SegLossWeights& weights);

}  // namespace instformer::proposal
