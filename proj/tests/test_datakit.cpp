#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "instformer/core/errors.hpp"
#include "instformer/datakit/datakit.hpp"

namespace fs = std::filesystem;
using namespace instformer;
using namespace instformer::datakit;

namespace {

CorpusSpec small_spec(uint64_t seed = 7) {
  CorpusSpec s;
  s.num_videos = 12;
  s.frames_per_video = 16;
  s.height = 64;
  s.width = 64;
  s.max_instances_per_frame = 5;
  s.category_names = default_category_names();
  s.seen_fraction = 0.625;
  s.occlusion_rate = 0.3;
  s.seed = seed;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

struct Box {
  int x0, y0, x1, y1;
  bool overlaps(const Box& o) const { return x0 <= o.x1 && o.x0 <= x1 && y0 <= o.y1 && o.y0 <= y1; }
};

Box mask_bbox(const Mask& m) {
  Box b{m.w, m.h, -1, -1};
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  return b;
}

}  // namespace

TEST_CASE("rle conventions: zero run first, column-major") {
  Mask zeros(2, 2);
  CHECK(encode_rle(zeros) == "4");

  Mask ones(2, 2);
  std::fill(ones.data.begin(), ones.data.end(), 1);
  CHECK(encode_rle(ones) == "0,4");

  // single pixel at (y=1, x=0): column-major index 1
  Mask m(2, 2);
  m.at(1, 0) = 1;
  CHECK(encode_rle(m) == "1,1,2");
}

TEST_CASE("rle roundtrip on 500 random masks") {
  core::Rng rng(123);
  for (int trial = 0; trial < 500; ++trial) {
    int h = 1 + int(rng.below(24));
    int w = 1 + int(rng.below(24));
    Mask m(h, w);
    double density = rng.uniform();
    for (auto& v : m.data) v = rng.bernoulli(density) ? 1 : 0;
    Mask back = decode_rle(encode_rle(m), h, w);
    REQUIRE(back.data == m.data);
  }
}

TEST_CASE("rle decode rejects malformed input") {
  CHECK_THROWS_AS(decode_rle("abc", 2, 2), core::DecodeError);
  CHECK_THROWS_AS(decode_rle("3", 2, 2), core::DecodeError);      // short
  CHECK_THROWS_AS(decode_rle("5", 2, 2), core::DecodeError);      // long
  CHECK_THROWS_AS(decode_rle("2,,2", 2, 2), core::DecodeError);   // empty run
  CHECK_THROWS_AS(decode_rle("", 2, 2), core::DecodeError);
}

TEST_CASE("split_vocabulary counts, clamping and determinism") {
  std::vector<std::string> names4 = {"a", "b", "c", "d"};
  auto v4 = split_vocabulary(names4, 0.5, 1);
  CHECK(v4.seen_count() == 2);

  std::vector<std::string> names16 = default_category_names();
  auto v16 = split_vocabulary(names16, 0.625, 1);
  CHECK(v16.seen_count() == 10);
  CHECK(v16.size() - v16.seen_count() == 6);

  auto clamped = split_vocabulary(names16, 0.9, 1);
  CHECK(clamped.seen_count() == 14);
  CHECK(clamped.size() - clamped.seen_count() == 2);

  auto again = split_vocabulary(names16, 0.625, 1);
  CHECK(again.is_seen == v16.is_seen);

  CHECK_THROWS_AS(split_vocabulary({"a", "b", "c"}, 0.5, 1), core::ConfigError);
}

TEST_CASE("generation is deterministic: same seed, byte-identical output") {
  auto spec = small_spec(7);
  fs::path d1 = fresh_dir("instformer_corpus_a");
  fs::path d2 = fresh_dir("instformer_corpus_b");
  generate_corpus(spec, d1.string(), 2);
  generate_corpus(spec, d2.string(), 1);  // different worker count, same bytes

  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  for (int v = 0; v < spec.num_videos; ++v) {
    std::string dir = "video_" + std::to_string(v);
    CHECK(slurp(d1 / dir / "frames.u8") == slurp(d2 / dir / "frames.u8"));
    CHECK(slurp(d1 / dir / "annotations.json") == slurp(d2 / dir / "annotations.json"));
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("generated corpus honors ground-truth invariants") {
  auto spec = small_spec(21);
  fs::path dir = fresh_dir("instformer_corpus_inv");
  auto manifest = generate_corpus(spec, dir.string());

  std::set<int> unseen;
  for (int i = 0; i < manifest.vocab.size(); ++i)
    if (!manifest.vocab.is_seen[size_t(i)]) unseen.insert(i);

  int eval_videos = 0;
  for (const auto& entry : manifest.videos) {
    auto clip = load_video(dir.string(), manifest, entry.id, /*load_pixels=*/true);
    validate_clip(clip);  // disjoint masks, stable categories, lifespans
    CHECK(clip.pixels.size() == size_t(spec.frames_per_video) * 64 * 64 * 3);
    for (const auto& [id, info] : clip.identities) {
      CHECK(info.category >= 0);
      CHECK(info.category < manifest.vocab.size());
      if (entry.split == "train") CHECK(unseen.count(info.category) == 0);
    }
    if (entry.split == "eval") ++eval_videos;
  }
  CHECK(eval_videos == spec.num_videos / 4);
  fs::remove_all(dir);
}

TEST_CASE("occlusion rate is reflected in emitted annotations") {
  auto spec = small_spec(5);
  spec.num_videos = 32;
  spec.occlusion_rate = 0.5;
  fs::path dir = fresh_dir("instformer_corpus_occ");
  auto manifest = generate_corpus(spec, dir.string());

  // Independent scan: decode annotation RLEs, compute visible-mask boxes,
  // count frames containing at least one overlapping pair.
  int64_t overlap_frames = 0, total_frames = 0;
  for (const auto& entry : manifest.videos) {
    auto clip = load_video(dir.string(), manifest, entry.id, /*load_pixels=*/false);
    for (int t = 0; t < clip.frames; ++t) {
      ++total_frames;
      const auto& frame = clip.per_frame[size_t(t)];
      bool any = false;
      for (size_t i = 0; i < frame.size() && !any; ++i)
        for (size_t j = i + 1; j < frame.size() && !any; ++j)
          any = mask_bbox(frame[i].mask).overlaps(mask_bbox(frame[j].mask));
      if (any) ++overlap_frames;
    }
  }
  double measured = double(overlap_frames) / double(total_frames);
  MESSAGE("measured occlusion fraction: " << measured);
  CHECK(measured >= 0.45);
  CHECK(measured <= 0.55);
  fs::remove_all(dir);
}

TEST_CASE("objects can leave and re-enter, producing gapped lifespans") {
  auto spec = small_spec(11);
  spec.num_videos = 24;
  fs::path dir = fresh_dir("instformer_corpus_gap");
  auto manifest = generate_corpus(spec, dir.string());
  int gapped = 0;
  for (const auto& entry : manifest.videos) {
    auto clip = load_video(dir.string(), manifest, entry.id, false);
    std::map<int, std::vector<int>> visible;
    for (int t = 0; t < clip.frames; ++t)
      for (const auto& inst : clip.per_frame[size_t(t)]) visible[inst.identity].push_back(t);
    for (const auto& [id, frames] : visible)
      for (size_t i = 1; i < frames.size(); ++i)
        if (frames[i] - frames[i - 1] > 1) ++gapped;
  }
  CHECK(gapped > 0);  // re-identification pressure exists somewhere in the corpus
  fs::remove_all(dir);
}

TEST_CASE("invalid specs are rejected") {
  auto spec = small_spec();
  spec.category_names = {"a", "b", "c"};
  CHECK_THROWS_AS(validate_spec(spec), core::ConfigError);

  spec = small_spec();
  spec.height = 60;  // not divisible by 16
  CHECK_THROWS_AS(validate_spec(spec), core::ConfigError);

  spec = small_spec();
  spec.seen_fraction = 1.2;
  CHECK_THROWS_AS(validate_spec(spec), core::ConfigError);

  spec = small_spec();
  CHECK_THROWS_AS(generate_corpus(spec, "/proc/definitely/not/writable"), core::IoError);
}

TEST_CASE("category crops are deterministic per rng stream and nonempty") {
  core::Rng a(3), b(3);
  auto c1 = render_category_crop(4, 64, 64, a);
  auto c2 = render_category_crop(4, 64, 64, b);
  CHECK(c1 == c2);
  // crop differs from pure background somewhere
  bool any = false;
  for (size_t i = 0; i < c1.size() && !any; i += 3) any = c1[i] > 90;
  CHECK(any);
}
