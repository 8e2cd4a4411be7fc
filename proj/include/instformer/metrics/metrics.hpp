#pragma once

#include <map>
#include <string>
#include <vector>

#include "instformer/datakit/datakit.hpp"

#include "json.hpp"

namespace instformer::metrics {

struct PredTrack {
  int id = 0;
  int category = 0;
  double score = 0.0;       // composed confidence used for class-aware ranking
  double objectness = 0.0;  // class-agnostic confidence
  std::map<int, datakit::Mask> masks;  // frame -> mask; absent frames are empty
};

struct GtTrack {
  int identity = 0;
  int category = 0;
  std::map<int, datakit::Mask> masks;
};

struct VideoPredictions {
  int video_id = 0;
  std::vector<PredTrack> tracks;
};

struct VideoGt {
  int video_id = 0;
  int frames = 0;
  std::vector<GtTrack> tracks;
};

VideoGt gt_from_clip(const datakit::VideoClip& clip);

// Spatio-temporal mask IoU: sum of per-frame intersections over sum of
// per-frame unions; 0/0 maps to 0. Symmetric.
double st_mask_iou(const std::map<int, datakit::Mask>& a, const std::map<int, datakit::Mask>& b, int frames);

std::vector<double> default_iou_thresholds();  // 0.50:0.05:0.95

struct ApOptions {
  std::vector<double> thresholds = default_iou_thresholds();
  bool class_agnostic = false;      // collapse labels, rank by objectness
  int top_k_per_video = 0;          // 0 = unlimited
  std::vector<int> category_filter; // empty = every category present in GT
};

// Greedy score-descending matching per class and threshold, 101-point
// interpolated PR area, averaged over classes present in GT, then thresholds.
double video_ap(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                const ApOptions& options);

// Recall averaged over thresholds and classes using at most k top-score
// predictions per video.
double video_ar(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts, int k,
                ApOptions options = {});

double class_agnostic_ap(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts);

// Frames where a ground-truth identity's matched predicted track id differs
// from its previously matched id; per-frame matching is one-to-one at
// IoU >= 0.5.
int count_id_switches(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts);

struct EvalReport {
  double ap_all = 0, ap_seen = 0, ap_uncommon = 0;
  double ap50_all = 0, ap75_all = 0;
  double ar1_all = 0, ar10_all = 0, ar100_all = 0;
  double ap_class_agnostic = 0;
  double ar10_class_agnostic = 0;
  int id_switches = 0;
  int num_videos = 0;
  int num_gt_tracks = 0;
  // (recall, precision) points at IoU 0.5 over all classes, for report plots
  std::vector<std::pair<double, double>> pr_curve50;
};

EvalReport evaluate(const std::vector<VideoPredictions>& preds, const std::vector<VideoGt>& gts,
                    const datakit::Vocabulary& vocab);

nlohmann::json report_to_json(const EvalReport& report);  // flat keys

}  // namespace instformer::metrics
