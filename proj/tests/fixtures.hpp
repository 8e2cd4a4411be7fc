#pragma once

#include <map>
#include <vector>

#include "instformer/metrics/metrics.hpp"

namespace fixtures {

using instformer::datakit::Mask;
using instformer::metrics::GtTrack;
using instformer::metrics::PredTrack;
using instformer::metrics::VideoGt;
using instformer::metrics::VideoPredictions;

inline Mask box_mask(int h, int w, int x0, int y0, int x1, int y1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

inline PredTrack pred(int id, int cat, double score, double obj, std::map<int, Mask> masks) {
  PredTrack p;
  p.id = id;
  p.category = cat;
  p.score = score;
  p.objectness = obj;
  p.masks = std::move(masks);
  return p;
}

inline GtTrack gt(int identity, int cat, std::map<int, Mask> masks) {
  GtTrack g;
  g.identity = identity;
  g.category = cat;
  g.masks = std::move(masks);
  return g;
}

// The hand-built 3-video evaluation fixture: 6 ground-truth tracks across two
// categories, predictions with graded IoUs, one duplicate, one wrong-class
// detection. The reference evaluator's AP on it is frozen where it is used.
inline void three_video_fixture(std::vector<VideoPredictions>& preds, std::vector<VideoGt>& gts) {
  gts.assign(3, {});
  preds.assign(3, {});
  for (int v = 0; v < 3; ++v) {
    gts[size_t(v)].video_id = v;
    gts[size_t(v)].frames = 2;
    preds[size_t(v)].video_id = v;
  }
  gts[0].tracks = {gt(0, 0, {{0, box_mask(8, 8, 0, 0, 4, 4)}, {1, box_mask(8, 8, 0, 0, 4, 4)}}),
                   gt(1, 1, {{0, box_mask(8, 8, 4, 4, 8, 8)}, {1, box_mask(8, 8, 4, 4, 8, 8)}})};
  gts[1].tracks = {gt(0, 0, {{0, box_mask(8, 8, 1, 1, 6, 6)}}), gt(1, 0, {{1, box_mask(8, 8, 2, 0, 7, 4)}})};
  gts[2].tracks = {gt(0, 1, {{0, box_mask(8, 8, 0, 2, 5, 7)}, {1, box_mask(8, 8, 1, 2, 6, 7)}}),
                   gt(1, 1, {{0, box_mask(8, 8, 6, 0, 8, 8)}})};

  preds[0].tracks = {
      pred(0, 0, 0.95, 0.9, {{0, box_mask(8, 8, 0, 0, 4, 4)}, {1, box_mask(8, 8, 0, 1, 4, 4)}}),
      pred(1, 1, 0.80, 0.8, {{0, box_mask(8, 8, 4, 4, 8, 8)}}),
      pred(2, 1, 0.60, 0.7, {{0, box_mask(8, 8, 0, 0, 2, 2)}})};
  preds[1].tracks = {pred(0, 0, 0.90, 0.85, {{0, box_mask(8, 8, 1, 1, 6, 6)}}),
                     pred(1, 0, 0.85, 0.8, {{0, box_mask(8, 8, 1, 1, 6, 6)}}),
                     pred(2, 0, 0.70, 0.6, {{1, box_mask(8, 8, 2, 0, 6, 4)}})};
  preds[2].tracks = {
      pred(0, 1, 0.92, 0.9, {{0, box_mask(8, 8, 0, 2, 5, 7)}, {1, box_mask(8, 8, 0, 2, 5, 7)}}),
      pred(1, 0, 0.50, 0.5, {{0, box_mask(8, 8, 6, 0, 8, 8)}})};
}

// Frozen output of the independent reference evaluator on the fixture above
// (see test_metrics.cpp), at the default 0.50:0.05:0.95 thresholds.
inline constexpr double kThreeVideoFixtureAp = 0.504702970297;

}  // namespace fixtures
