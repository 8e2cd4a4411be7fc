#include "instformer/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "instformer/core/assignment.hpp"
#include "instformer/core/errors.hpp"

namespace instformer::metrics {

VideoGt gt_from_clip(const datakit::VideoClip& clip) {
  VideoGt gt;
  gt.video_id = clip.id;
  gt.frames = clip.frames;
  std::map<int, GtTrack> by_id;
  for (int t = 0; t < clip.frames; ++t) {
    for (const auto& inst : clip.per_frame[size_t(t)]) {
      auto& track = by_id[inst.identity];
      track.identity = inst.identity;
      track.category = inst.category;
      track.masks[t] = inst.mask;
    }
  }
  for (auto& [id, track] : by_id) gt.tracks.push_back(std::move(track));
  return gt;
}

double st_mask_iou(const std::map<int, datakit::Mask>& a, const std::map<int, datakit::Mask>& b, int frames) {
  int64_t inter = 0, uni = 0;
  for (int t = 0; t < frames; ++t) {
    auto ia = a.find(t);
    auto ib = b.find(t);
    if (ia == a.end() && ib == b.end()) continue;
    if (ia == a.end()) {
      uni += ib->second.area();
      continue;
    }
    if (ib == b.end()) {
      uni += ia->second.area();
      continue;
    }
    const auto& ma = ia->second;
    const auto& mb = ib->second;
    for (size_t i = 0; i < ma.data.size(); ++i) {
      bool pa = ma.data[i] != 0, pb = mb.data[i] != 0;
      inter += (pa && pb) ? 1 : 0;
      uni += (pa || pb) ? 1 : 0;
    }
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

namespace {

struct RankedPred {
  int video_index;
  int track_index;
  double score;
  int id;
};

// deterministic global ranking: score desc, then video asc, then id asc
std::vector<RankedPred> rank_predictions(const std::vector<VideoPredictions>& preds, bool class_agnostic,
                                         int category, int top_k) {
  // per-video cap first (by the same ordering), then global sort
  std::vector<RankedPred> out;
  for (size_t v = 0; v < preds.size(); ++v) {
    std::vector<RankedPred> local;
    for (size_t ti = 0; ti < preds[v].tracks.size(); ++ti) {
      const auto& tr = preds[v].tracks[ti];
      double score = class_agnostic ? tr.objectness : tr.score;
      local.push_back({int(v), int(ti), score, tr.id});
    }
    std::sort(local.begin(), local.end(), [](const RankedPred& a, const RankedPred& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    if (top_k > 0 && int(local.size()) > top_k) local.resize(size_t(top_k));
    for (const auto& r : local) {
      const auto& tr = preds[r.video_index].tracks[size_t(r.track_index)];
      if (!class_agnostic && tr.category != category) continue;
      out.push_back(r);
    }
  }
  std::sort(out.begin(), out.end(), [](const RankedPred& a, const RankedPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.video_index != b.video_index) return a.video_index < b.video_index;
    return a.id < b.id;
  });
  return out;
}

struct ClassEval {
  int gt_count = 0;
  std::vector<char> is_tp;      // per ranked prediction
  std::vector<double> scores;   // aligned with is_tp
};

// greedy score-descending matching at one threshold for one class
ClassEval match_class(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                      const std::vector<std::vector<std::vector<double>>>& iou,  // [video][pred][gt]
                      int category, double threshold, bool class_agnostic, int top_k) {
  ClassEval ev;
  std::vector<std::vector<char>> gt_used(gts.size());
  for (size_t v = 0; v < gts.size(); ++v) {
    gt_used[v].assign(gts[v].tracks.size(), 0);
    for (const auto& g : gts[v].tracks)
      if (class_agnostic || g.category == category) ++ev.gt_count;
  }
  auto ranked = rank_predictions(preds, class_agnostic, category, top_k);
  for (const auto& r : ranked) {
    const auto& gt = gts[size_t(r.video_index)];
    int best = -1;
    double best_iou = threshold;  // must reach the threshold
    for (size_t g = 0; g < gt.tracks.size(); ++g) {
      if (gt_used[size_t(r.video_index)][g]) continue;
      if (!class_agnostic && gt.tracks[g].category != category) continue;
      double i = iou[size_t(r.video_index)][size_t(r.track_index)][g];
      if (i >= best_iou && (best < 0 || i > best_iou)) {
        best = int(g);
        best_iou = i;
      }
    }
    ev.scores.push_back(r.score);
    if (best >= 0) {
      gt_used[size_t(r.video_index)][size_t(best)] = 1;
      ev.is_tp.push_back(1);
    } else {
      ev.is_tp.push_back(0);
    }
  }
  return ev;
}

double ap_101(const ClassEval& ev) {
  if (ev.gt_count == 0) return 0.0;
  std::vector<double> precisions, recalls;
  int tp = 0, fp = 0;
  for (size_t i = 0; i < ev.is_tp.size(); ++i) {
    if (ev.is_tp[i]) ++tp;
    else ++fp;
    precisions.push_back(double(tp) / double(tp + fp));
    recalls.push_back(double(tp) / double(ev.gt_count));
  }
  // precision envelope, then 101-point interpolation
  for (int i = int(precisions.size()) - 2; i >= 0; --i)
    precisions[size_t(i)] = std::max(precisions[size_t(i)], precisions[size_t(i) + 1]);
  double ap = 0.0;
  size_t idx = 0;
  for (int r = 0; r <= 100; ++r) {
    double recall = r / 100.0;
    while (idx < recalls.size() && recalls[idx] < recall) ++idx;
    ap += idx < precisions.size() ? precisions[idx] : 0.0;
  }
  return ap / 101.0;
}

double recall_of(const ClassEval& ev) {
  if (ev.gt_count == 0) return 0.0;
  int tp = 0;
  for (char c : ev.is_tp) tp += c ? 1 : 0;
  return double(tp) / double(ev.gt_count);
}

// IoU tables and the class list shared by AP/AR
struct EvalContext {
  std::vector<std::vector<std::vector<double>>> iou;
  std::vector<int> classes;  // categories present in GT (after filtering)
};

EvalContext build_context(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                          const std::vector<int>& category_filter) {
  if (preds.size() != gts.size()) throw core::ShapeError("evaluate: prediction/gt video count mismatch");
  EvalContext ctx;
  ctx.iou.resize(gts.size());
  std::set<int> classes;
  for (size_t v = 0; v < gts.size(); ++v) {
    if (preds[v].video_id != gts[v].video_id)
      throw core::ShapeError("evaluate: prediction/gt video ids diverge");
    ctx.iou[v].resize(preds[v].tracks.size());
    for (size_t p = 0; p < preds[v].tracks.size(); ++p) {
      ctx.iou[v][p].resize(gts[v].tracks.size());
      for (size_t g = 0; g < gts[v].tracks.size(); ++g)
        ctx.iou[v][p][g] = st_mask_iou(preds[v].tracks[p].masks, gts[v].tracks[g].masks, gts[v].frames);
    }
    for (const auto& g : gts[v].tracks) {
      if (category_filter.empty() ||
          std::find(category_filter.begin(), category_filter.end(), g.category) != category_filter.end())
        classes.insert(g.category);
    }
  }
  ctx.classes.assign(classes.begin(), classes.end());
  return ctx;
}

std::vector<VideoGt> filter_gts(const std::vector<VideoGt>& gts, const std::vector<int>& category_filter) {
  if (category_filter.empty()) return gts;
  std::vector<VideoGt> out = gts;
  for (auto& v : out) {
    std::vector<GtTrack> kept;
    for (auto& t : v.tracks)
      if (std::find(category_filter.begin(), category_filter.end(), t.category) != category_filter.end())
        kept.push_back(t);
    v.tracks = std::move(kept);
  }
  return out;
}

}  // namespace

double video_ap(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                const ApOptions& options) {
  auto gts_f = filter_gts(gts, options.category_filter);
  EvalContext ctx = build_context(preds, gts_f, {});
  if (options.class_agnostic) {
    double sum = 0;
    for (double th : options.thresholds)
      sum += ap_101(match_class(preds, gts_f, ctx.iou, 0, th, true, options.top_k_per_video));
    return options.thresholds.empty() ? 0.0 : sum / double(options.thresholds.size());
  }
  if (ctx.classes.empty()) return 0.0;
  double sum = 0;
  for (double th : options.thresholds) {
    double class_sum = 0;
    for (int c : ctx.classes)
      class_sum += ap_101(match_class(preds, gts_f, ctx.iou, c, th, false, options.top_k_per_video));
    sum += class_sum / double(ctx.classes.size());
  }
  return options.thresholds.empty() ? 0.0 : sum / double(options.thresholds.size());
}

double video_ar(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts, int k,
                ApOptions options) {
  if (k < 1) throw core::ConfigError("video_ar: k must be >= 1");
  options.top_k_per_video = k;
  auto gts_f = filter_gts(gts, options.category_filter);
  EvalContext ctx = build_context(preds, gts_f, {});
  double sum = 0;
  int terms = 0;
  for (double th : options.thresholds) {
    if (options.class_agnostic) {
      sum += recall_of(match_class(preds, gts_f, ctx.iou, 0, th, true, k));
      ++terms;
    } else {
      if (ctx.classes.empty()) continue;
      double class_sum = 0;
      for (int c : ctx.classes) class_sum += recall_of(match_class(preds, gts_f, ctx.iou, c, th, false, k));
      sum += class_sum / double(ctx.classes.size());
      ++terms;
    }
  }
  return terms == 0 ? 0.0 : sum / double(terms);
}

double class_agnostic_ap(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts) {
  ApOptions options;
  options.class_agnostic = true;
  return video_ap(preds, gts, options);
}

int count_id_switches(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts) {
  if (preds.size() != gts.size()) throw core::ShapeError("count_id_switches: video count mismatch");
  int switches = 0;
  for (size_t v = 0; v < gts.size(); ++v) {
    std::map<int, int> last_matched;  // gt identity -> last matched pred id
    for (int t = 0; t < gts[v].frames; ++t) {
      std::vector<const GtTrack*> gt_here;
      std::vector<const PredTrack*> pred_here;
      for (const auto& g : gts[v].tracks)
        if (g.masks.count(t)) gt_here.push_back(&g);
      for (const auto& p : preds[v].tracks)
        if (p.masks.count(t)) pred_here.push_back(&p);
      if (gt_here.empty() || pred_here.empty()) continue;

      // one-to-one max-IoU matching, pairs below 0.5 discarded
      std::vector<double> cost(gt_here.size() * pred_here.size(), 0.0);
      for (size_t g = 0; g < gt_here.size(); ++g) {
        for (size_t p = 0; p < pred_here.size(); ++p) {
          const auto& gm = gt_here[g]->masks.at(t);
          const auto& pm = pred_here[p]->masks.at(t);
          int64_t inter = 0, uni = 0;
          for (size_t i = 0; i < gm.data.size(); ++i) {
            bool a = gm.data[i] != 0, b = pm.data[i] != 0;
            inter += (a && b) ? 1 : 0;
            uni += (a || b) ? 1 : 0;
          }
          cost[g * pred_here.size() + p] = uni == 0 ? 0.0 : -double(inter) / double(uni);
        }
      }
      auto assign = core::solve_assignment(cost, int(gt_here.size()), int(pred_here.size()));
      for (size_t g = 0; g < gt_here.size(); ++g) {
        int p = assign[g];
        if (p < 0) continue;
        if (-cost[g * pred_here.size() + size_t(p)] < 0.5) continue;
        int gt_id = gt_here[g]->identity;
        int pred_id = pred_here[size_t(p)]->id;
        auto it = last_matched.find(gt_id);
        if (it != last_matched.end() && it->second != pred_id) ++switches;
        last_matched[gt_id] = pred_id;
      }
    }
  }
  return switches;
}

EvalReport evaluate(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                    const datakit::Vocabulary& vocab) {
  EvalReport rep;
  rep.num_videos = int(gts.size());
  for (const auto& g : gts) rep.num_gt_tracks += int(g.tracks.size());

  ApOptions all;
  rep.ap_all = video_ap(preds, gts, all);
  ApOptions at50 = all;
  at50.thresholds = {0.50};
  rep.ap50_all = video_ap(preds, gts, at50);
  ApOptions at75 = all;
  at75.thresholds = {0.75};
  rep.ap75_all = video_ap(preds, gts, at75);

  ApOptions seen = all;
  seen.category_filter = vocab.seen_indices();
  rep.ap_seen = video_ap(preds, gts, seen);
  ApOptions unseen = all;
  unseen.category_filter = vocab.unseen_indices();
  rep.ap_uncommon = video_ap(preds, gts, unseen);

  rep.ar1_all = video_ar(preds, gts, 1);
  rep.ar10_all = video_ar(preds, gts, 10);
  rep.ar100_all = video_ar(preds, gts, 100);
  rep.ap_class_agnostic = class_agnostic_ap(preds, gts);
  ApOptions agnostic;
  agnostic.class_agnostic = true;
  rep.ar10_class_agnostic = video_ar(preds, gts, 10, agnostic);
  rep.id_switches = count_id_switches(preds, gts);

  // PR points at IoU 0.5, all classes pooled class-agnostically by score
  {
    EvalContext ctx = build_context(preds, gts, {});
    double class_count = double(std::max<size_t>(ctx.classes.size(), 1));
    (void)class_count;
    std::vector<std::pair<double, double>> curve;
    for (int c : ctx.classes) {
      auto ev = match_class(preds, gts, ctx.iou, c, 0.5, false, 0);
      int tp = 0, fp = 0;
      for (size_t i = 0; i < ev.is_tp.size(); ++i) {
        if (ev.is_tp[i]) ++tp;
        else ++fp;
        if (ev.gt_count > 0)
          curve.emplace_back(double(tp) / ev.gt_count, double(tp) / double(tp + fp));
      }
    }
    std::sort(curve.begin(), curve.end());
    rep.pr_curve50 = std::move(curve);
  }
  return rep;
}

nlohmann::json report_to_json(const EvalReport& r) {
  return nlohmann::json{{"ap_all", r.ap_all},
                        {"ap_seen", r.ap_seen},
                        {"ap_uncommon", r.ap_uncommon},
                        {"ap50_all", r.ap50_all},
                        {"ap75_all", r.ap75_all},
                        {"ar1_all", r.ar1_all},
                        {"ar10_all", r.ar10_all},
                        {"ar100_all", r.ar100_all},
                        {"ap_class_agnostic", r.ap_class_agnostic},
                        {"ar10_class_agnostic", r.ar10_class_agnostic},
                        {"id_switches", r.id_switches},
                        {"num_videos", r.num_videos},
                        {"num_gt_tracks", r.num_gt_tracks}};
}

}  // namespace instformer::metrics
