#include "instformer/cli/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <tuple>

#include "instformer/core/errors.hpp"
#include "instformer/core/parallel.hpp"

namespace fs = std::filesystem;

namespace instformer::cli {

using namespace instformer::core;
using instformer::datakit::Mask;

namespace {

tinyvlm::TinyVlmConfig vlm_config_of(const RunConfig& cfg) {
  tinyvlm::TinyVlmConfig v;
  v.embed_dim = cfg.model.embed_dim;
  v.layers = cfg.model.vlm_layers;
  v.patch = cfg.model.patch;
  v.frame_h = cfg.corpus.height;
  v.frame_w = cfg.corpus.width;
  v.normalize_class_similarity = cfg.model.normalize_class_similarity;
  return v;
}

proposal::ProposalConfig proposal_config_of(const RunConfig& cfg) {
  proposal::ProposalConfig p;
  p.num_queries = cfg.model.num_queries;
  p.embed_dim = cfg.model.embed_dim;
  p.decoder_layers = cfg.model.decoder_layers;
  p.frame_h = cfg.corpus.height;
  p.frame_w = cfg.corpus.width;
  return p;
}

instclip::InstClipConfig instclip_config_of(const RunConfig& cfg) {
  instclip::InstClipConfig ic;
  ic.mode = instclip::guidance_mode_from_string(cfg.guidance.mode);
  ic.b_low = cfg.guidance.b_low;
  ic.lora = cfg.lora;
  return ic;
}

proposal::SegLossWeights seg_weights_of(const RunConfig& cfg) {
  return {cfg.loss.w_bce, cfg.loss.w_dice, cfg.loss.w_obj};
}

struct FrameGt {
  std::vector<Mask> masks;
  std::vector<int> categories;
};

FrameGt frame_gt(const datakit::VideoClip& clip, int t) {
  FrameGt gt;
  for (const auto& inst : clip.per_frame[size_t(t)]) {
    gt.masks.push_back(inst.mask);
    gt.categories.push_back(inst.category);
  }
  return gt;
}

// defined with the inference helpers below
std::vector<uint8_t> masked_crop(const uint8_t* frame, const datakit::Mask& mask, int h, int w, int out_h,
                                 int out_w);

double cosine_lr(double base, int step, int total) {
  const int warmup = std::min(30, total / 10);
  if (step < warmup) return base * double(step + 1) / double(warmup);
  double t = total > 1 ? double(step - warmup) / double(std::max(1, total - 1 - warmup)) : 0.0;
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * t)));
}

}  // namespace

// ----------------------------------------------------------------- stage one

Stage1Model train_stage1(const RunConfig& cfg, const tinyvlm::TinyVlm& frozen_vlm,
                         const std::string& corpus_dir, Stage1Report* report) {
  auto manifest = datakit::load_manifest(corpus_dir);
  if (frozen_vlm.cfg.frame_h != cfg.corpus.height || frozen_vlm.cfg.frame_w != cfg.corpus.width)
    throw ConfigError("train_stage1: VLM frame size does not match the corpus");

  Stage1Model model{proposal::ProposalNet::init(proposal_config_of(cfg), cfg.train.seed),
                    instclip::InstClip::init(frozen_vlm, instclip_config_of(cfg), cfg.train.seed), cfg};
  model.ic.vlm.freeze();

  // text embeddings of SEEN categories only; frozen, computed once
  const auto seen = manifest.vocab.seen_indices();
  std::vector<std::string> seen_names;
  for (int s : seen) seen_names.push_back(manifest.vocab.names[size_t(s)]);
  Var text_seen = tinyvlm::vocabulary_embeddings(model.ic.vlm, seen_names);
  text_seen = make_const(text_seen->shape, text_seen->val);
  std::vector<int> cat_to_seen_row(manifest.vocab.names.size(), -1);
  for (size_t i = 0; i < seen.size(); ++i) cat_to_seen_row[size_t(seen[size_t(i)])] = int(i);
  const double tau = model.ic.vlm.temperature();

  const auto train_ids = manifest.video_ids("train");
  if (train_ids.empty()) throw ConfigError("train_stage1: corpus has no train videos");
  std::vector<datakit::VideoClip> clips;
  clips.reserve(train_ids.size());
  for (int id : train_ids) clips.push_back(datakit::load_video(corpus_dir, manifest, id));

  Rng rng(Rng::derive(cfg.train.seed, 0x57a9e1ULL));
  Adam opt_net, opt_ic;
  opt_ic.weight_decay = cfg.train.stage1_adapter_decay;
  std::map<std::tuple<int, int, int>, std::vector<double>> teacher_cache;  // (clip, frame, identity)
  const auto weights = seg_weights_of(cfg);
  const int patch = cfg.model.patch;
  const auto mode = instclip_config_of(cfg).mode;
  double last_loss = 0;

  const int cls_start = int(cfg.train.stage1_mask_warmup * cfg.train.stage1_steps);
  for (int step = 0; step < cfg.train.stage1_steps; ++step) {
    double lr = cosine_lr(cfg.train.stage1_lr, step, cfg.train.stage1_steps);
    opt_net.lr = lr;
    // adapters and tokens start at cls_start, on their own cosine schedule
    opt_ic.lr = cosine_lr(cfg.train.stage1_adapter_lr, std::max(0, step - cls_start),
                          std::max(1, cfg.train.stage1_steps - cls_start));
    model.net.pm.zero_grads();
    model.ic.pm.zero_grads();
    const bool train_cls = step >= cls_start && cfg.loss.w_cls > 0;

    double step_loss = 0, step_seg = 0, step_sc = 0, step_cls = 0;
    for (int b = 0; b < cfg.train.stage1_batch; ++b) {
      size_t clip_index = size_t(rng.below(int64_t(clips.size())));
      const auto& clip = clips[clip_index];
      int t = int(rng.below(clip.frames));
      auto gt = frame_gt(clip, t);
      const auto clean_gt = gt;  // pre-augmentation masks feed the distillation teacher

      const uint8_t* frame = clip.frame_ptr(t);
      std::vector<uint8_t> jittered;
      if (cfg.train.stage1_augment) {
        const int h = cfg.corpus.height, w = cfg.corpus.width;
        // photometric jitter: per-channel gain and a global offset
        double gain[3] = {rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15)};
        int offset = int(rng.below(17)) - 8;
        jittered.assign(frame, frame + size_t(h) * w * 3);
        for (size_t px = 0; px < jittered.size(); ++px)
          jittered[px] = uint8_t(std::clamp(int(jittered[px] * gain[px % 3]) + offset, 0, 255));
        // horizontal flip (vertical would swap chiral categories)
        bool flip = rng.bernoulli(0.5);
        // circular shift; objects already cross frame borders in the corpus
        int dy = int(rng.below(17)) - 8, dx = int(rng.below(17)) - 8;
        auto map_px = [&](int y, int x) {
          int sx = flip ? w - 1 - x : x;
          return std::pair<int, int>{(y - dy % h + h) % h, (sx - dx % w + w) % w};
        };
        std::vector<uint8_t> moved(jittered.size(), 0);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            auto [sy, sx] = map_px(y, x);
            std::copy_n(&jittered[(size_t(sy) * w + sx) * 3], 3, &moved[(size_t(y) * w + x) * 3]);
          }
        jittered = std::move(moved);
        for (auto& m : gt.masks) {
          datakit::Mask shifted(h, w);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              auto [sy, sx] = map_px(y, x);
              shifted.at(y, x) = m.at(sy, sx);
            }
          m = std::move(shifted);
        }
        frame = jittered.data();
      }

      auto out = proposal::propose(model.net, frame);
      auto assignment = proposal::match_proposals_to_gt(out, gt.masks, weights);
      Var loss = proposal::segmentation_loss(out, assignment, gt.masks, weights);
      step_seg += loss->scalar();
      Var sc = scale(proposal::margin_contrastive_loss(out.queries, cfg.loss.alpha_margin), cfg.loss.lambda_sc);
      step_sc += sc->scalar();
      loss = add(loss, sc);

      // classification CE on matched proposals; guidance is built from the
      // detached mask logits so stage-1 mask gradients stay mask-driven
      std::vector<int> matched_rows, matched_targets;
      for (int i = 0; i < cfg.model.num_queries; ++i) {
        int j = assignment[size_t(i)];
        if (j < 0) continue;
        int row = cat_to_seen_row[size_t(gt.categories[size_t(j)])];
        if (row < 0) continue;  // unseen never appears in train split
        matched_rows.push_back(i);
        matched_targets.push_back(row);
      }
      if (!matched_rows.empty() && train_cls) {
        auto bias = instclip::build_guidance_mask(out.mask_logits->val, cfg.model.num_queries,
                                                  cfg.corpus.height, cfg.corpus.width, patch, mode,
                                                  cfg.guidance.b_low);
        auto tokens = instclip::instclip_forward(model.ic, frame, bias);
        Var picked = select_rows(tokens.instance_tokens, matched_rows);
        Var cls = scale(instclip::classification_loss(picked, matched_targets, text_seen,
                                                      std::max(tau, cfg.train.tau_cls_train),
                                                      cfg.model.normalize_class_similarity),
                        cfg.loss.w_cls);
        step_cls += cls->scalar();
        loss = add(loss, cls);

        // single-forward approximation target: each instance token mimics the
        // frozen tower's embedding of its own (clean) masked crop
        if (cfg.loss.w_distill > 0) {
          std::vector<Var> teachers;
          for (size_t r = 0; r < matched_rows.size(); ++r) {
            int j = assignment[size_t(matched_rows[r])];
            int identity = clip.per_frame[size_t(t)][size_t(j)].identity;
            auto key = std::make_tuple(int(clip_index), t, identity);
            auto it = teacher_cache.find(key);
            if (it == teacher_cache.end()) {
              auto crop = masked_crop(clip.frame_ptr(t), clean_gt.masks[size_t(j)], cfg.corpus.height,
                                      cfg.corpus.width, model.ic.vlm.cfg.frame_h, model.ic.vlm.cfg.frame_w);
              Var emb = tinyvlm::image_embedding(model.ic.vlm, crop.data());
              it = teacher_cache.emplace(key, emb->val).first;
            }
            teachers.push_back(make_const({1, cfg.model.embed_dim}, it->second));
          }
          // 1 - cos per pair; tokens and teachers are unit rows
          Var cos_sum = sum(mul(picked, concat_rows(teachers)));
          Var distill = scale(add_scalar(neg(scale(cos_sum, 1.0 / double(matched_rows.size()))), 1.0),
                              cfg.loss.w_distill);
          step_cls += distill->scalar();
          loss = add(loss, distill);
        }
      }

      Var scaled = scale(loss, 1.0 / double(cfg.train.stage1_batch));
      if (!std::isfinite(scaled->scalar()))
        throw NumericError("train_stage1: loss diverged (NaN) at step " + std::to_string(step));
      backward(scaled);
      step_loss += scaled->scalar();
    }
    opt_net.step(model.net.pm);
    opt_ic.step(model.ic.pm);
    last_loss = step_loss;
    if (report)
      report->log.push_back({step, step_loss, step_seg / cfg.train.stage1_batch,
                             step_sc / cfg.train.stage1_batch, step_cls / cfg.train.stage1_batch, lr});
  }

  if (report) {
    report->final_loss = last_loss;
    // frame-level seen-category classification probe on the train split
    int correct = 0, total = 0;
    for (size_t ci = 0; ci < clips.size() && total < 60; ci += 2) {
      const auto& clip = clips[ci];
      for (int t = 0; t < clip.frames && total < 60; t += 5) {
        auto gt = frame_gt(clip, t);
        if (gt.masks.empty()) continue;
        auto out = proposal::propose(model.net, clip.frame_ptr(t));
        auto assignment = proposal::match_proposals_to_gt(out, gt.masks, weights);
        auto bias = instclip::build_guidance_mask(out.mask_logits->val, cfg.model.num_queries,
                                                  cfg.corpus.height, cfg.corpus.width, patch, mode,
                                                  cfg.guidance.b_low);
        auto tokens = instclip::instclip_forward(model.ic, clip.frame_ptr(t), bias);
        auto cls = instclip::classify_instances(tokens.instance_tokens, text_seen, tau,
                                                cfg.model.normalize_class_similarity);
        for (int i = 0; i < cfg.model.num_queries; ++i) {
          int j = assignment[size_t(i)];
          if (j < 0) continue;
          int row = cat_to_seen_row[size_t(gt.categories[size_t(j)])];
          if (row < 0) continue;
          ++total;
          correct += (cls.categories[size_t(i)] == row) ? 1 : 0;
        }
      }
    }
    report->cls_accuracy = total > 0 ? double(correct) / total : 0.0;
  }
  return model;
}

// ----------------------------------------------------------------- stage two

namespace {

// per-frame identity -> tracking token values, produced by the frozen stage-1
// model with ground-truth Hungarian alignment
struct TokenSequence {
  std::vector<std::map<int, std::vector<double>>> per_frame;
};

TokenSequence collect_sequence(const Stage1Model& model, const datakit::VideoClip& clip) {
  const auto& cfg = model.cfg;
  const auto weights = seg_weights_of(cfg);
  const auto mode = instclip_config_of(cfg).mode;
  TokenSequence seq;
  seq.per_frame.resize(size_t(clip.frames));
  for (int t = 0; t < clip.frames; ++t) {
    auto gt = frame_gt(clip, t);
    if (gt.masks.empty()) continue;
    auto out = proposal::propose(model.net, clip.frame_ptr(t));
    auto assignment = proposal::match_proposals_to_gt(out, gt.masks, weights);
    auto bias = instclip::build_guidance_mask(out.mask_logits->val, cfg.model.num_queries, cfg.corpus.height,
                                              cfg.corpus.width, cfg.model.patch, mode, cfg.guidance.b_low);
    auto tokens = instclip::instclip_forward(model.ic, clip.frame_ptr(t), bias);
    auto ttok = tracker::make_tracking_tokens(out.queries, tokens.instance_tokens);
    const int dim = ttok->shape[1];
    for (int i = 0; i < cfg.model.num_queries; ++i) {
      int j = assignment[size_t(i)];
      if (j < 0) continue;
      int identity = clip.per_frame[size_t(t)][size_t(j)].identity;
      seq.per_frame[size_t(t)][identity] =
          std::vector<double>(ttok->val.begin() + long(i) * dim, ttok->val.begin() + long(i + 1) * dim);
    }
  }
  return seq;
}

}  // namespace

tracker::RolloutNet train_stage2(const Stage1Model& model, const std::string& corpus_dir,
                                 Stage2Report* report) {
  const auto& cfg = model.cfg;
  auto manifest = datakit::load_manifest(corpus_dir);
  const auto train_ids = manifest.video_ids("train");
  if (train_ids.empty()) throw ConfigError("train_stage2: corpus has no train videos");

  tracker::RolloutConfig rcfg;
  rcfg.token_dim = 2 * cfg.model.embed_dim;
  rcfg.hidden_dim = cfg.model.tracker_hidden;
  auto rnn = tracker::RolloutNet::init(rcfg, cfg.train.seed);

  // frozen forward passes once per video, cached as plain values
  std::vector<TokenSequence> sequences(train_ids.size());
  parallel_for(int64_t(train_ids.size()), [&](int64_t i) {
    auto clip = datakit::load_video(corpus_dir, manifest, train_ids[size_t(i)]);
    sequences[size_t(i)] = collect_sequence(model, clip);
  });

  const bool target_current = cfg.loss.tc_target == "current";
  const auto form = cfg.loss.tc_form == "softmax" ? tracker::TcForm::kSoftmax : tracker::TcForm::kBinary;
  Rng rng(Rng::derive(cfg.train.seed, 0x57a9e2ULL));
  Adam opt;
  double last_loss = 0;

  for (int step = 0; step < cfg.train.stage2_steps; ++step) {
    opt.lr = cosine_lr(cfg.train.stage2_lr, step, cfg.train.stage2_steps);
    rnn.pm.zero_grads();
    double step_loss = 0;
    for (int b = 0; b < cfg.train.stage2_batch; ++b) {
      const auto& seq = sequences[size_t(rng.below(int64_t(sequences.size())))];
      std::map<int, Var> hidden;
      std::map<int, Var> pending;                          // prediction for the upcoming frame
      std::map<int, std::vector<double>> rollout_input;    // token the prediction was made from
      std::vector<Var> frame_losses;
      for (size_t t = 0; t < seq.per_frame.size(); ++t) {
        const auto& now = seq.per_frame[t];
        // loss rows: identities with a live prediction and a target token
        std::vector<Var> preds, targets;
        for (const auto& [id, token] : now) {
          auto p = pending.find(id);
          if (p == pending.end()) continue;
          preds.push_back(p->second);
          // default target is the current frame's token; the literal Eq.-6
          // subscript instead pulls toward the token the prediction came from
          targets.push_back(make_const({1, rcfg.token_dim}, target_current ? token : rollout_input.at(id)));
        }
        if (preds.size() >= 1)
          frame_losses.push_back(
              tracker::temporal_contrastive_loss(concat_rows(preds), concat_rows(targets), cfg.loss.tau_tc, form));
        // advance the RNN on every identity observed this frame
        for (const auto& [id, token] : now) {
          auto h = hidden.find(id);
          Var hv = h == hidden.end() ? make_const({1, rcfg.hidden_dim}, init_zeros(rcfg.hidden_dim)) : h->second;
          auto [pred, hnew] = tracker::rollout_step(rnn, make_const({1, rcfg.token_dim}, token), hv);
          pending[id] = pred;
          hidden[id] = hnew;
          rollout_input[id] = token;
        }
      }
      if (frame_losses.empty()) continue;
      Var video_loss = frame_losses[0];
      for (size_t i = 1; i < frame_losses.size(); ++i) video_loss = add(video_loss, frame_losses[i]);
      video_loss = scale(video_loss, 1.0 / (double(frame_losses.size()) * cfg.train.stage2_batch));
      if (!std::isfinite(video_loss->scalar()))
        throw NumericError("train_stage2: loss diverged (NaN) at step " + std::to_string(step));
      backward(video_loss);
      step_loss += video_loss->scalar();
    }
    opt.step(rnn.pm);
    last_loss = step_loss;
    if (report) report->log.push_back({step, step_loss, 0, 0, 0, opt.lr});
  }
  if (report) report->final_loss = last_loss;
  return rnn;
}

// -------------------------------------------------------------- checkpoints

void save_stage1(const Stage1Model& model, const std::string& path, const nlohmann::json& extra_meta) {
  Checkpoint ck;
  model.ic.vlm.to_checkpoint(ck);
  for (const auto& [name, v] : model.ic.pm.params) ck.put(name, v);
  for (const auto& [name, v] : model.net.pm.params) ck.put(name, v);
  ck.meta["kind"] = "stage1";
  ck.meta["config"] = config_to_json(model.cfg);
  for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  ck.save(path);
}

namespace {

Stage1Model stage1_from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg = config_from_json(ck.meta.at("config"));
  Stage1Model model{proposal::ProposalNet{}, instclip::InstClip{}, cfg};
  model.net.cfg = proposal_config_of(cfg);
  model.ic.vlm = tinyvlm::TinyVlm::from_checkpoint(ck);
  model.ic.cfg = instclip_config_of(cfg);
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("proposal.", 0) == 0) model.net.pm.params[name] = make_var(t.first, t.second, false);
    if (name.rfind("instclip.", 0) == 0) model.ic.pm.params[name] = make_var(t.first, t.second, false);
  }
  return model;
}

}  // namespace

Stage1Model load_stage1(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  std::string kind = ck.meta.value("kind", "");
  if (kind != "stage1" && kind != "stage2") throw IoError("not a stage checkpoint: " + path);
  return stage1_from_checkpoint(ck);
}

void save_stage2(const Stage1Model& model, const tracker::RolloutNet& rollout, const std::string& path,
                 const nlohmann::json& extra_meta) {
  Checkpoint ck;
  model.ic.vlm.to_checkpoint(ck);
  for (const auto& [name, v] : model.ic.pm.params) ck.put(name, v);
  for (const auto& [name, v] : model.net.pm.params) ck.put(name, v);
  for (const auto& [name, v] : rollout.pm.params) ck.put(name, v);
  ck.meta["kind"] = "stage2";
  ck.meta["config"] = config_to_json(model.cfg);
  for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  ck.save(path);
}

Stage2Model load_stage2(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "stage2") throw IoError("not a stage-2 checkpoint: " + path);
  Stage2Model model{stage1_from_checkpoint(ck), tracker::RolloutNet{}};
  model.rollout.cfg.token_dim = 2 * model.stage1.cfg.model.embed_dim;
  model.rollout.cfg.hidden_dim = model.stage1.cfg.model.tracker_hidden;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("tracker.", 0) == 0) model.rollout.pm.params[name] = make_var(t.first, t.second, false);
  if (model.rollout.pm.params.empty()) throw IoError("stage-2 checkpoint misses tracker tensors: " + path);
  return model;
}

// ---------------------------------------------------------------- inference

namespace {

struct TrackAccumulator {
  std::vector<int> frames;
  std::map<int, Mask> masks;
  double obj_sum = 0;
  std::vector<double> prob_sum;
  std::vector<int> votes;
};

Mask mask_from_logits(const double* logits, int h, int w) {
  Mask m(h, w);
  for (int i = 0; i < h * w; ++i) m.data[size_t(i)] = logits[i] >= 0.0 ? 1 : 0;
  return m;
}

// masked crop, background zeroed, nearest-resized to the VLM frame size
std::vector<uint8_t> masked_crop(const uint8_t* frame, const Mask& mask, int h, int w, int out_h, int out_w) {
  int x0 = w, y0 = h, x1 = -1, y1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  std::vector<uint8_t> crop(size_t(out_h) * out_w * 3, 0);
  if (x1 < 0) return crop;
  x0 = std::max(0, x0 - 2);
  y0 = std::max(0, y0 - 2);
  x1 = std::min(w - 1, x1 + 2);
  y1 = std::min(h - 1, y1 + 2);
  int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      int sx = x0 + std::min(bw - 1, int(double(ox) * bw / out_w));
      int sy = y0 + std::min(bh - 1, int(double(oy) * bh / out_h));
      if (!mask.at(sy, sx)) continue;
      const uint8_t* src = frame + (size_t(sy) * w + sx) * 3;
      uint8_t* dst = crop.data() + (size_t(oy) * out_w + ox) * 3;
      dst[0] = src[0];
      dst[1] = src[1];
      dst[2] = src[2];
    }
  }
  return crop;
}

}  // namespace

metrics::VideoPredictions infer_video(const Stage1Model& model, const tracker::RolloutNet* rollout,
                                      const datakit::VideoClip& clip) {
  const auto& cfg = model.cfg;
  const int n = cfg.model.num_queries;
  const int h = cfg.corpus.height, w = cfg.corpus.width;
  const bool minvis = cfg.tracker.mode == "minvis-clip";
  const auto assoc_mode =
      cfg.tracker.mode == "rollout" ? tracker::TrackerMode::kRollout : tracker::TrackerMode::kPrevious;
  if (assoc_mode == tracker::TrackerMode::kRollout && rollout == nullptr)
    throw ConfigError("infer_video: rollout mode requires a stage-2 checkpoint");

  Var text = tinyvlm::vocabulary_embeddings(model.ic.vlm, model.ic.vlm.vocab_names);
  const int k = text->shape[0];
  const double tau = model.ic.vlm.temperature();
  const auto mode = instclip_config_of(cfg).mode;
  tracker::TrackerThresholds th{cfg.tracker.theta_match, cfg.tracker.theta_birth, cfg.tracker.max_misses};

  tracker::TrackStore store;
  std::map<int, TrackAccumulator> acc;

  for (int t = 0; t < clip.frames; ++t) {
    const uint8_t* frame = clip.frame_ptr(t);
    auto out = proposal::propose(model.net, frame);
    auto obj = out.objectness();

    std::vector<Mask> masks;
    masks.reserve(size_t(n));
    for (int i = 0; i < n; ++i) masks.push_back(mask_from_logits(out.mask_logits->val.data() + size_t(i) * h * w, h, w));

    Var probs;  // [n, k]
    Var track_tokens;
    if (minvis) {
      std::vector<Var> rows;
      for (int i = 0; i < n; ++i) {
        if (masks[size_t(i)].empty_mask()) {
          rows.push_back(make_const({1, k}, std::vector<double>(size_t(k), 1.0 / k)));
          continue;
        }
        auto crop = masked_crop(frame, masks[size_t(i)], h, w, model.ic.vlm.cfg.frame_h, model.ic.vlm.cfg.frame_w);
        Var emb = tinyvlm::image_embedding(model.ic.vlm, crop.data());
        rows.push_back(softmax_rows(scale(matmul(emb, transpose(text)), 1.0 / tau)));
      }
      probs = concat_rows(rows);
      track_tokens = out.queries;  // previous-frame matching on queries only
    } else {
      auto bias = instclip::build_guidance_mask(out.mask_logits->val, n, h, w, cfg.model.patch, mode,
                                                cfg.guidance.b_low);
      auto tokens = instclip::instclip_forward(model.ic, frame, bias);
      auto cls = instclip::classify_instances(tokens.instance_tokens, text, tau,
                                              cfg.model.normalize_class_similarity);
      probs = cls.probs;
      track_tokens = tracker::make_tracking_tokens(out.queries, tokens.instance_tokens);
    }

    // duplicate suppression: drop proposals whose mask mostly repeats a more
    // confident one (spare query slots copy real objects), and empty masks
    std::vector<int> kept;
    {
      std::vector<int> order(size_t(n), 0);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (obj[size_t(a)] != obj[size_t(b)]) return obj[size_t(a)] > obj[size_t(b)];
        return a < b;
      });
      for (int i : order) {
        if (masks[size_t(i)].empty_mask()) continue;
        bool dup = false;
        for (int j : kept) {
          int64_t inter = 0, uni = 0;
          for (size_t p = 0; p < masks[size_t(i)].data.size(); ++p) {
            bool a = masks[size_t(i)].data[p] != 0, b = masks[size_t(j)].data[p] != 0;
            inter += (a && b) ? 1 : 0;
            uni += (a || b) ? 1 : 0;
          }
          if (uni > 0 && double(inter) / double(uni) >= cfg.tracker.nms_iou) {
            dup = true;
            break;
          }
        }
        if (!dup) kept.push_back(i);
      }
      std::sort(kept.begin(), kept.end());
    }
    const int dim = track_tokens->shape[1];
    std::vector<double> kept_tokens(kept.size() * size_t(dim), 0.0);
    std::vector<double> kept_obj(kept.size(), 0.0);
    for (size_t r = 0; r < kept.size(); ++r) {
      std::copy(track_tokens->val.begin() + long(kept[r]) * dim,
                track_tokens->val.begin() + long(kept[r] + 1) * dim, kept_tokens.begin() + long(r) * dim);
      kept_obj[r] = obj[size_t(kept[r])];
    }

    auto kept_ids = tracker::associate_frame(kept_tokens, int(kept.size()), dim, kept_obj, store, th,
                                             assoc_mode, rollout);
    std::vector<int> ids(size_t(n), -1);
    for (size_t r = 0; r < kept.size(); ++r) ids[size_t(kept[r])] = kept_ids[r];
    for (int i = 0; i < n; ++i) {
      int id = ids[size_t(i)];
      if (id < 0) continue;
      auto& a = acc[id];
      if (a.prob_sum.empty()) {
        a.prob_sum.assign(size_t(k), 0.0);
        a.votes.assign(size_t(k), 0);
      }
      a.frames.push_back(t);
      if (!masks[size_t(i)].empty_mask()) a.masks[t] = masks[size_t(i)];
      a.obj_sum += obj[size_t(i)];
      int frame_argmax = 0;
      for (int c = 0; c < k; ++c) {
        a.prob_sum[size_t(c)] += probs->val[size_t(i) * k + c];
        if (probs->val[size_t(i) * k + c] > probs->val[size_t(i) * k + frame_argmax]) frame_argmax = c;
      }
      ++a.votes[size_t(frame_argmax)];
    }
  }

  metrics::VideoPredictions pred;
  pred.video_id = clip.id;
  for (const auto& [id, a] : acc) {
    metrics::PredTrack track;
    track.id = id;
    double count = double(a.frames.size());
    int best = 0;
    if (cfg.tracker.category_rule == "vote") {
      for (int c = 1; c < k; ++c)
        if (a.votes[size_t(c)] > a.votes[size_t(best)]) best = c;
    } else {
      for (int c = 1; c < k; ++c)
        if (a.prob_sum[size_t(c)] > a.prob_sum[size_t(best)]) best = c;
    }
    track.category = best;
    track.objectness = a.obj_sum / count;
    track.score = track.objectness * (a.prob_sum[size_t(best)] / count);
    track.masks = a.masks;
    pred.tracks.push_back(std::move(track));
  }
  return pred;
}

nlohmann::json predictions_to_json(const metrics::VideoPredictions& pred) {
  nlohmann::json tracks = nlohmann::json::array();
  for (const auto& t : pred.tracks) {
    int p = -1, q = -1;
    if (!t.masks.empty()) {
      p = t.masks.begin()->first;
      q = t.masks.rbegin()->first;
    }
    nlohmann::json masks = nlohmann::json::object();
    for (const auto& [frame, mask] : t.masks) masks[std::to_string(frame)] = datakit::encode_rle(mask);
    tracks.push_back(nlohmann::json{{"id", t.id},
                                    {"category_index", t.category},
                                    {"score", t.score},
                                    {"objectness", t.objectness},
                                    {"span", {p, q}},
                                    {"masks", masks}});
  }
  return nlohmann::json{{"video", pred.video_id}, {"tracks", tracks}};
}

void run_inference(const Stage1Model& model, const tracker::RolloutNet* rollout,
                   const std::string& corpus_dir, const std::string& split, const std::string& out_dir,
                   int workers) {
  auto manifest = datakit::load_manifest(corpus_dir);
  auto ids = manifest.video_ids(split);
  if (ids.empty()) throw ConfigError("run_inference: no videos in split '" + split + "'");
  fs::create_directories(out_dir);
  parallel_for(int64_t(ids.size()), [&](int64_t i) {
    auto clip = datakit::load_video(corpus_dir, manifest, ids[size_t(i)]);
    auto pred = infer_video(model, rollout, clip);
    std::ofstream f(fs::path(out_dir) / ("video_" + std::to_string(ids[size_t(i)]) + ".json"));
    if (!f) throw IoError("cannot write predictions for video " + std::to_string(ids[size_t(i)]));
    f << predictions_to_json(pred).dump(2) << "\n";
  }, workers);
  nlohmann::json manifest_json{{"split", split}, {"videos", ids}};
  std::ofstream f(fs::path(out_dir) / "predictions_manifest.json");
  f << manifest_json.dump(2) << "\n";
}

std::vector<metrics::VideoPredictions> load_predictions(const std::string& pred_dir,
                                                        const std::vector<int>& video_ids, int h, int w) {
  std::vector<metrics::VideoPredictions> out;
  for (int id : video_ids) {
    fs::path path = fs::path(pred_dir) / ("video_" + std::to_string(id) + ".json");
    std::ifstream f(path);
    if (!f) throw IoError("missing predictions file: " + path.string());
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw IoError("corrupt predictions file: " + path.string());
    metrics::VideoPredictions pred;
    pred.video_id = j.at("video").get<int>();
    for (const auto& t : j.at("tracks")) {
      metrics::PredTrack track;
      track.id = t.at("id").get<int>();
      track.category = t.at("category_index").get<int>();
      track.score = t.at("score").get<double>();
      track.objectness = t.value("objectness", t.at("score").get<double>());
      for (const auto& [frame, rle] : t.at("masks").items())
        track.masks[std::stoi(frame)] = datakit::decode_rle(rle.get<std::string>(), h, w);
      pred.tracks.push_back(std::move(track));
    }
    out.push_back(std::move(pred));
  }
  return out;
}

std::vector<metrics::VideoGt> load_split_gt(const std::string& corpus_dir,
                                            const datakit::CorpusManifest& manifest,
                                            const std::string& split) {
  std::vector<metrics::VideoGt> out;
  for (int id : manifest.video_ids(split))
    out.push_back(metrics::gt_from_clip(datakit::load_video(corpus_dir, manifest, id, false)));
  return out;
}

}  // namespace instformer::cli
