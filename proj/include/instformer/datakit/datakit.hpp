#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "instformer/core/rng.hpp"

namespace instformer::datakit {

// Specification of a synthetic moving-shapes corpus. Generation is a pure
// function of this struct; rerunning with the same spec is byte-identical.
struct CorpusSpec {
  int num_videos = 48;
  int frames_per_video = 16;
  int height = 64;
  int width = 64;
  int max_instances_per_frame = 6;
  std::vector<std::string> category_names;
  double seen_fraction = 0.625;
  double occlusion_rate = 0.3;
  double motion_speed_min = 1.0;
  double motion_speed_max = 3.0;
  uint64_t seed = 7;
};

// The 16 default category names; geometry and color family are keyed by
// category index (cycled when the vocabulary is larger).
std::vector<std::string> default_category_names();

void validate_spec(const CorpusSpec& spec);

struct Vocabulary {
  std::vector<std::string> names;
  std::vector<uint8_t> is_seen;  // parallel to names

  int size() const { return int(names.size()); }
  int seen_count() const;
  std::vector<int> seen_indices() const;
  std::vector<int> unseen_indices() const;
};

// Deterministic partition: seen count = round(K * seen_fraction), clamped so
// both sides keep at least 2 entries.
Vocabulary split_vocabulary(const std::vector<std::string>& names, double seen_fraction, uint64_t seed);

struct Mask {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> data;  // row-major, 0/1

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), data(size_t(h_) * w_, 0) {}
  uint8_t& at(int y, int x) { return data[size_t(y) * w + x]; }
  uint8_t at(int y, int x) const { return data[size_t(y) * w + x]; }
  int64_t area() const;
  bool empty_mask() const { return area() == 0; }
};

// COCO-convention run-length coding: column-major scan, first run counts
// zeros; serialized as comma-separated decimal counts.
std::string encode_rle(const Mask& mask);
Mask decode_rle(const std::string& rle, int h, int w);

struct FrameInstance {
  int identity = 0;
  int category = 0;
  Mask mask;
};

struct IdentityInfo {
  int category = 0;
  int first_frame = 0;
  int last_frame = 0;
};

struct VideoClip {
  int id = 0;
  std::string split;  // "train" or "eval"
  int frames = 0, height = 0, width = 0;
  std::vector<uint8_t> pixels;  // T*H*W*3
  std::vector<std::vector<FrameInstance>> per_frame;
  std::map<int, IdentityInfo> identities;

  const uint8_t* frame_ptr(int t) const { return pixels.data() + size_t(t) * height * width * 3; }
};

// Throws on violated ground-truth invariants (disjoint masks, stable
// categories, lifespan bounds). Called on every generated video.
void validate_clip(const VideoClip& clip);

// Simulates one video from (spec, video_index); split assignment and the
// category pool follow from the index. Pure function, safe to call from
// parallel workers.
VideoClip simulate_video(const CorpusSpec& spec, const Vocabulary& vocab, int video_index);

struct CorpusManifest {
  CorpusSpec spec;
  Vocabulary vocab;
  struct VideoEntry {
    int id = 0;
    std::string dir;
    std::string split;
  };
  std::vector<VideoEntry> videos;

  std::vector<int> video_ids(const std::string& split) const;  // "train", "eval", "all"
};

CorpusManifest generate_corpus(const CorpusSpec& spec, const std::string& out_dir, int workers = 0);
CorpusManifest load_manifest(const std::string& corpus_dir);
VideoClip load_video(const std::string& corpus_dir, const CorpusManifest& manifest, int video_id,
                     bool load_pixels = true);

// Renders one centered, jittered instance of a category on a clean
// background; the pretraining data stream for the VLM. Never touches
// identity or tracking annotations.
std::vector<uint8_t> render_category_crop(int category_index, int h, int w, core::Rng& rng);

}  // namespace instformer::datakit
