#include "instformer/datakit/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "instformer/core/errors.hpp"
#include "instformer/core/parallel.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace instformer::datakit {

using core::ConfigError;
using core::DecodeError;
using core::IoError;
using core::Rng;

// ----------------------------------------------------------------- vocabulary

std::vector<std::string> default_category_names() {
  return {"circle", "ring",    "ellipse", "square",   "rectangle", "diamond", "triangle", "wedge",
          "pentagon", "hexagon", "spark",  "star",     "sunburst",  "cross",   "saltire",  "capsule"};
}

void validate_spec(const CorpusSpec& spec) {
  if (spec.num_videos < 1) throw ConfigError("corpus: num_videos must be >= 1");
  if (spec.frames_per_video < 2) throw ConfigError("corpus: frames_per_video must be >= 2");
  if (spec.height < 32 || spec.width < 32) throw ConfigError("corpus: frame size must be >= 32x32");
  if (spec.height % 16 != 0 || spec.width % 16 != 0)
    throw ConfigError("corpus: frame size must be divisible by 16 (downstream patch/stride grid)");
  if (spec.max_instances_per_frame < 1) throw ConfigError("corpus: max_instances_per_frame must be >= 1");
  if (spec.category_names.size() < 4) throw ConfigError("corpus: need at least 4 category names");
  {
    auto names = spec.category_names;
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end())
      throw ConfigError("corpus: category names must be unique");
  }
  if (!(spec.seen_fraction > 0.0 && spec.seen_fraction < 1.0))
    throw ConfigError("corpus: seen_fraction must lie in (0,1)");
  int k = int(spec.category_names.size());
  int seen = int(std::lround(double(k) * spec.seen_fraction));
  seen = std::clamp(seen, 2, k - 2);
  if (seen < 2 || k - seen < 2) throw ConfigError("corpus: split must leave >= 2 seen and >= 2 unseen categories");
  if (spec.occlusion_rate < 0.0 || spec.occlusion_rate > 1.0)
    throw ConfigError("corpus: occlusion_rate must lie in [0,1]");
  if (!(spec.motion_speed_min > 0.0) || spec.motion_speed_max < spec.motion_speed_min)
    throw ConfigError("corpus: motion speed range invalid");
}

int Vocabulary::seen_count() const {
  int n = 0;
  for (uint8_t s : is_seen) n += s ? 1 : 0;
  return n;
}

std::vector<int> Vocabulary::seen_indices() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (is_seen[i]) out.push_back(i);
  return out;
}

std::vector<int> Vocabulary::unseen_indices() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (!is_seen[i]) out.push_back(i);
  return out;
}

Vocabulary split_vocabulary(const std::vector<std::string>& names, double seen_fraction, uint64_t seed) {
  if (names.size() < 4) throw ConfigError("split_vocabulary: need at least 4 names");
  int k = int(names.size());
  int seen = int(std::lround(double(k) * seen_fraction));
  seen = std::clamp(seen, 2, k - 2);

  std::vector<int> order(size_t(k), 0);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::derive(seed, 0x5eedULL));
  rng.shuffle(order);

  Vocabulary vocab;
  vocab.names = names;
  vocab.is_seen.assign(size_t(k), 0);
  for (int i = 0; i < seen; ++i) vocab.is_seen[size_t(order[size_t(i)])] = 1;
  return vocab;
}

// ------------------------------------------------------------------------ rle

int64_t Mask::area() const {
  int64_t a = 0;
  for (uint8_t v : data) a += v ? 1 : 0;
  return a;
}

std::string encode_rle(const Mask& mask) {
  std::vector<int64_t> runs;
  uint8_t current = 0;  // first run counts zeros
  int64_t count = 0;
  for (int x = 0; x < mask.w; ++x) {
    for (int y = 0; y < mask.h; ++y) {
      uint8_t v = mask.at(y, x) ? 1 : 0;
      if (v == current) {
        ++count;
      } else {
        runs.push_back(count);
        current = v;
        count = 1;
      }
    }
  }
  runs.push_back(count);
  std::string out;
  for (size_t i = 0; i < runs.size(); ++i) {
    if (i) out.push_back(',');
    out += std::to_string(runs[i]);
  }
  return out;
}

Mask decode_rle(const std::string& rle, int h, int w) {
  if (h <= 0 || w <= 0) throw DecodeError("decode_rle: non-positive shape");
  Mask mask(h, w);
  int64_t total = int64_t(h) * w;
  int64_t pos = 0;
  uint8_t current = 0;
  std::stringstream ss(rle);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok.size() > 12 || tok.find_first_not_of("0123456789") != std::string::npos)
      throw DecodeError("decode_rle: malformed run '" + tok + "'");
    int64_t run = std::stoll(tok);
    if (pos + run > total) throw DecodeError("decode_rle: runs exceed mask size");
    if (current) {
      for (int64_t i = pos; i < pos + run; ++i) {
        int x = int(i / h), y = int(i % h);
        mask.at(y, x) = 1;
      }
    }
    pos += run;
    current = 1 - current;
  }
  if (pos != total) throw DecodeError("decode_rle: runs cover " + std::to_string(pos) + " of " +
                                      std::to_string(total) + " pixels");
  return mask;
}

// --------------------------------------------------------------------- shapes

namespace {

constexpr int kGeometryCount = 16;

struct Vec2 {
  double x = 0, y = 0;
};

std::vector<Vec2> regular_polygon(int n, double start_angle, double radius) {
  std::vector<Vec2> v(size_t(n), Vec2{});
  for (int i = 0; i < n; ++i) {
    double a = start_angle + 2.0 * M_PI * i / n;
    v[size_t(i)] = {radius * std::cos(a), radius * std::sin(a)};
  }
  return v;
}

std::vector<Vec2> star_polygon(int points, double inner, double start_angle) {
  std::vector<Vec2> v(size_t(points) * 2, Vec2{});
  for (int i = 0; i < 2 * points; ++i) {
    double r = (i % 2 == 0) ? 1.0 : inner;
    double a = start_angle + M_PI * i / points;
    v[size_t(i)] = {r * std::cos(a), r * std::sin(a)};
  }
  return v;
}

bool point_in_polygon(const std::vector<Vec2>& poly, double x, double y) {
  bool inside = false;
  size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y)) {
      double xi = poly[j].x + (y - poly[j].y) / (poly[i].y - poly[j].y) * (poly[i].x - poly[j].x);
      if (x < xi) inside = !inside;
    }
  }
  return inside;
}

// Unit-scale inside test in local (rotated) coordinates. Geometry is keyed by
// category index so classification is learnable from pixels.
bool inside_geometry(int geom, double x, double y) {
  switch (geom % kGeometryCount) {
    case 0: return x * x + y * y <= 1.0;                                     // circle
    case 1: {                                                                // ring
      double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.42 * 0.42;
    }
    case 2: return x * x + (y / 0.5) * (y / 0.5) <= 1.0;                     // wide ellipse
    case 3: return std::abs(x) <= 0.78 && std::abs(y) <= 0.78;               // square
    case 4: return std::abs(x) <= 0.5 && std::abs(y) <= 0.95;                // tall rectangle
    case 5: return std::abs(x) + std::abs(y) <= 1.0;                         // diamond
    case 6: {                                                                // triangle (apex up)
      static const auto poly = regular_polygon(3, -M_PI / 2, 1.0);
      return point_in_polygon(poly, x, y);
    }
    case 7: {                                                                // wedge (apex down)
      static const auto poly = regular_polygon(3, M_PI / 2, 1.0);
      return point_in_polygon(poly, x, y);
    }
    case 8: {
      static const auto poly = regular_polygon(5, -M_PI / 2, 1.0);
      return point_in_polygon(poly, x, y);
    }
    case 9: {
      static const auto poly = regular_polygon(6, 0.0, 1.0);
      return point_in_polygon(poly, x, y);
    }
    case 10: {
      static const auto poly = star_polygon(4, 0.55, -M_PI / 2);
      return point_in_polygon(poly, x, y);
    }
    case 11: {
      static const auto poly = star_polygon(5, 0.58, -M_PI / 2);
      return point_in_polygon(poly, x, y);
    }
    case 12: {
      static const auto poly = star_polygon(6, 0.62, -M_PI / 2);
      return point_in_polygon(poly, x, y);
    }
    case 13:                                                                 // plus
      return (std::abs(x) <= 0.46 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.46 && std::abs(x) <= 1.0);
    case 14: {                                                               // saltire = plus at 45 deg
      double c = std::cos(M_PI / 4), s = std::sin(M_PI / 4);
      double rx = c * x + s * y, ry = -s * x + c * y;
      return (std::abs(rx) <= 0.46 && std::abs(ry) <= 1.0) || (std::abs(ry) <= 0.46 && std::abs(rx) <= 1.0);
    }
    default: {                                                               // capsule
      double ax = std::abs(x);
      if (ax <= 0.55) return std::abs(y) <= 0.45;
      double dx = ax - 0.55;
      return dx * dx + y * y <= 0.45 * 0.45;
    }
  }
}

// Convex-ish geometries can fully cover a smaller object; used to pick the
// front object of a designed full-occlusion crossing.
bool geometry_is_solid(int geom) {
  switch (geom % kGeometryCount) {
    case 0:
    case 2:
    case 3:
    case 4:
    case 5:
    case 8:
    case 9:
    case 15: return true;
    default: return false;
  }
}

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  double c = v * s;
  double x = c * (1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0));
  double m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) r = c, g = x;
  else if (h < 120) r = x, g = c;
  else if (h < 180) g = c, b = x;
  else if (h < 240) g = x, b = c;
  else if (h < 300) r = x, b = c;
  else r = c, b = x;
  auto to8 = [m](double u) { return uint8_t(std::clamp((u + m) * 255.0, 0.0, 255.0)); };
  return {to8(r), to8(g), to8(b)};
}

Rgb category_color(int category, Rng& rng) {
  double hue = 360.0 * double(category % kGeometryCount) / kGeometryCount + rng.uniform(-8.0, 8.0);
  double val = 0.88 * rng.uniform(0.82, 1.0);
  return hsv_to_rgb(hue, 0.74, val);
}

struct ShapeInstance {
  int identity = 0;
  int category = 0;
  double scale = 6.0;
  double rot = 0.0;
  Rgb color;
  double ext_x = 6.0, ext_y = 6.0;  // measured half-extents in pixels

  // motion: either bouncing inside a box or straight-line (crossing pair)
  bool linear = false;
  double x0 = 0, y0 = 0, vx = 0, vy = 0;
  double box_x0 = 0, box_x1 = 0, box_y0 = 0, box_y1 = 0;

  bool contains(double px, double py, double cx, double cy) const {
    double dx = (px - cx) / scale, dy = (py - cy) / scale;
    double c = std::cos(-rot), s = std::sin(-rot);
    return inside_geometry(category, c * dx - s * dy, s * dx + c * dy);
  }
};

double fold_position(double u, double lo, double hi) {
  if (hi <= lo) return lo;
  double period = 2.0 * (hi - lo);
  double m = std::fmod(u - lo, period);
  if (m < 0) m += period;
  return m <= (hi - lo) ? lo + m : hi - (m - (hi - lo));
}

Vec2 position_at(const ShapeInstance& inst, int t) {
  if (inst.linear) return {inst.x0 + inst.vx * t, inst.y0 + inst.vy * t};
  return {fold_position(inst.x0 + inst.vx * t, inst.box_x0, inst.box_x1),
          fold_position(inst.y0 + inst.vy * t, inst.box_y0, inst.box_y1)};
}

// Measured pixel half-extents of the rasterized shape, for bbox math.
void measure_extents(ShapeInstance& inst) {
  int r = int(std::ceil(inst.scale * 1.5)) + 1;
  double mx = 0, my = 0;
  for (int y = -r; y <= r; ++y) {
    for (int x = -r; x <= r; ++x) {
      if (inst.contains(x + 0.5, y + 0.5, 0.0, 0.0)) {
        mx = std::max(mx, std::abs(x + 0.5));
        my = std::max(my, std::abs(y + 0.5));
      }
    }
  }
  inst.ext_x = mx + 0.5;
  inst.ext_y = my + 0.5;
}

}  // namespace

// ----------------------------------------------------------------- simulation

void validate_clip(const VideoClip& clip) {
  for (int t = 0; t < clip.frames; ++t) {
    std::vector<uint8_t> covered(size_t(clip.height) * clip.width, 0);
    for (const auto& inst : clip.per_frame[size_t(t)]) {
      if (inst.mask.h != clip.height || inst.mask.w != clip.width)
        throw std::logic_error("clip invariant: mask shape mismatch");
      for (size_t i = 0; i < inst.mask.data.size(); ++i) {
        if (!inst.mask.data[i]) continue;
        if (covered[i]) throw std::logic_error("clip invariant: overlapping ground-truth masks");
        covered[i] = 1;
      }
      auto it = clip.identities.find(inst.identity);
      if (it == clip.identities.end()) throw std::logic_error("clip invariant: unknown identity");
      if (it->second.category != inst.category)
        throw std::logic_error("clip invariant: identity changed category");
      if (t < it->second.first_frame || t > it->second.last_frame)
        throw std::logic_error("clip invariant: instance outside its lifespan");
    }
  }
}

VideoClip simulate_video(const CorpusSpec& spec, const Vocabulary& vocab, int video_index) {
  Rng rng(Rng::derive(spec.seed, uint64_t(video_index)));
  const int T = spec.frames_per_video, H = spec.height, W = spec.width;

  VideoClip clip;
  clip.id = video_index;
  clip.split = (video_index % 4 == 3) ? "eval" : "train";
  clip.frames = T;
  clip.height = H;
  clip.width = W;
  clip.per_frame.resize(size_t(T));

  const std::vector<int> pool = (clip.split == "train") ? vocab.seen_indices() : [&] {
    std::vector<int> all(size_t(vocab.size()));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }();

  const bool want_pair = spec.occlusion_rate > 0.0 && spec.max_instances_per_frame >= 2;
  const int n_min = want_pair ? 2 : 1;
  // triangular weighting toward small populations keeps objects large enough
  // for the downstream patch grid while still reaching max_instances_per_frame
  int span = spec.max_instances_per_frame - n_min + 1;
  int n_inst = n_min + int(std::min(rng.below(span), rng.below(span)));

  // Horizontal bands keep free-moving objects disjoint; the crossing pair owns
  // a full-width band so designed overlaps are the only overlaps.
  int n_other = n_inst - (want_pair ? 2 : 0);
  int n_bands = (want_pair ? 1 : 0) + (n_other + 1) / 2;
  n_bands = std::max(n_bands, 1);
  while (H / n_bands < 14 && n_inst > n_min) {  // shrink population until bands fit
    --n_inst;
    n_other = n_inst - (want_pair ? 2 : 0);
    n_bands = std::max((want_pair ? 1 : 0) + (n_other + 1) / 2, 1);
  }
  const double band_h = double(H) / n_bands;
  const int pair_band = want_pair ? int(rng.below(n_bands)) : -1;

  std::vector<ShapeInstance> insts;
  insts.reserve(size_t(n_inst));

  if (want_pair) {
    // Two objects crossing inside one band; speeds are solved so that their
    // boxes overlap for ~occlusion_rate * T frames.
    double by0 = pair_band * band_h, by1 = (pair_band + 1) * band_h;
    double cy = 0.5 * (by0 + by1) + rng.uniform(-1.0, 1.0);
    double smax = std::clamp((band_h / 2.0 - 2.0) / 1.2, 4.0, 10.0);

    ShapeInstance back, front;
    back.identity = 0;
    front.identity = 1;
    back.category = pool[size_t(rng.below(int64_t(pool.size())))];
    // same-category crossings make identity ambiguous on appearance alone,
    // the case that separates history-aware from previous-frame matching
    front.category = rng.bernoulli(0.55) ? back.category : pool[size_t(rng.below(int64_t(pool.size())))];
    bool full_occ = rng.bernoulli(0.4) && geometry_is_solid(front.category);
    if (full_occ) {
      front.scale = smax;
      back.scale = smax * 0.62;
    } else {
      back.scale = smax;
      front.scale = smax * rng.uniform(0.62, 0.75);
    }
    for (ShapeInstance* p : {&back, &front}) {
      p->rot = rng.uniform(-0.12, 0.12);
      p->color = category_color(p->category, rng);
      measure_extents(*p);
      p->linear = true;
    }

    double overlap_px = back.ext_x + front.ext_x;
    // 1.12 absorbs pixel-rounding losses at the window edges (measured on
    // generated corpora against the emitted-annotation scan).
    double w_frames = std::clamp(spec.occlusion_rate * T * 1.12, 1.0, double(T - 2));
    if (full_occ) {
      // Frames with the back object fully hidden produce no box pair; stretch
      // the designed window to compensate.
      double hidden_frac = std::max(0.0, front.ext_x - back.ext_x) / overlap_px;
      w_frames = std::min(w_frames * (1.0 + 0.9 * hidden_frac), double(T - 2));
    }
    double v_rel = 2.0 * overlap_px / w_frames;
    double v_half = v_rel / 2.0;
    double t_star = 0.5 * (T - 1);
    double cx = W / 2.0 + rng.uniform(-2.0, 2.0);
    bool back_from_left = rng.bernoulli(0.5);
    back.x0 = cx + (back_from_left ? -1.0 : 1.0) * v_half * t_star;
    back.vx = (back_from_left ? 1.0 : -1.0) * v_half;
    front.x0 = cx - (back_from_left ? -1.0 : 1.0) * v_half * t_star;
    front.vx = -back.vx;
    back.y0 = cy + rng.uniform(-1.0, 1.0);
    front.y0 = cy - rng.uniform(-1.0, 1.0);
    back.vy = front.vy = 0.0;
    insts.push_back(back);
    insts.push_back(front);
  }

  // Remaining objects bounce inside disjoint cells, two per band.
  int placed = 0;
  for (int b = 0; b < n_bands && placed < n_other; ++b) {
    if (b == pair_band) continue;
    for (int half = 0; half < 2 && placed < n_other; ++half, ++placed) {
      ShapeInstance inst;
      inst.identity = int(insts.size());
      inst.category = pool[size_t(rng.below(int64_t(pool.size())))];
      inst.scale = std::clamp((band_h / 2.0 - 2.0) / 1.2, 3.5, 10.0) * rng.uniform(0.85, 1.0);
      inst.rot = rng.uniform(-0.12, 0.12);
      inst.color = category_color(inst.category, rng);
      measure_extents(inst);

      double cw = W / 2.0;
      double x_lo = half * cw, x_hi = (half + 1) * cw;
      bool exits = rng.bernoulli(0.35);
      if (exits) {
        double shift = cw * 0.55 * (half == 0 ? -1.0 : 1.0);
        x_lo += shift;
        x_hi += shift;
      }
      inst.box_x0 = x_lo + inst.ext_x + 1.0;
      inst.box_x1 = std::max(inst.box_x0 + 1.0, x_hi - inst.ext_x - 1.0);
      inst.box_y0 = b * band_h + inst.ext_y + 1.0;
      inst.box_y1 = std::max(inst.box_y0 + 1.0, (b + 1) * band_h - inst.ext_y - 1.0);
      inst.x0 = rng.uniform(inst.box_x0, inst.box_x1);
      inst.y0 = rng.uniform(inst.box_y0, inst.box_y1);
      double speed = rng.uniform(spec.motion_speed_min, spec.motion_speed_max);
      double dir = rng.uniform(0.0, 2.0 * M_PI);
      inst.vx = speed * std::cos(dir);
      inst.vy = speed * std::sin(dir);
      insts.push_back(inst);
    }
  }

  for (const auto& inst : insts)
    clip.identities[inst.identity] = IdentityInfo{inst.category, T, -1};

  clip.pixels.assign(size_t(T) * H * W * 3, 0);
  const uint8_t bg[3] = {40, 40, 46};
  std::vector<int> owner(size_t(H) * W);

  for (int t = 0; t < T; ++t) {
    uint8_t* px = clip.pixels.data() + size_t(t) * H * W * 3;
    std::fill(owner.begin(), owner.end(), -1);
    for (size_t i = 0; i < size_t(H) * W; ++i) {
      px[i * 3 + 0] = bg[0];
      px[i * 3 + 1] = bg[1];
      px[i * 3 + 2] = bg[2];
    }
    // painter's order: later instances are in front
    for (size_t i = 0; i < insts.size(); ++i) {
      const auto& inst = insts[i];
      Vec2 c = position_at(inst, t);
      int x0 = std::max(0, int(std::floor(c.x - inst.ext_x)));
      int x1 = std::min(W - 1, int(std::ceil(c.x + inst.ext_x)));
      int y0 = std::max(0, int(std::floor(c.y - inst.ext_y)));
      int y1 = std::min(H - 1, int(std::ceil(c.y + inst.ext_y)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (inst.contains(x + 0.5, y + 0.5, c.x, c.y)) {
            owner[size_t(y) * W + x] = int(i);
            uint8_t* p = px + (size_t(y) * W + x) * 3;
            p[0] = inst.color.r;
            p[1] = inst.color.g;
            p[2] = inst.color.b;
          }
        }
      }
    }
    // visible masks from the ownership map (occluded pixels belong to front)
    std::vector<Mask> masks(insts.size(), Mask(H, W));
    std::vector<int64_t> areas(insts.size(), 0);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        int o = owner[size_t(y) * W + x];
        if (o >= 0) {
          masks[size_t(o)].at(y, x) = 1;
          ++areas[size_t(o)];
        }
      }
    }
    for (size_t i = 0; i < insts.size(); ++i) {
      if (areas[i] == 0) continue;
      FrameInstance fi;
      fi.identity = insts[i].identity;
      fi.category = insts[i].category;
      fi.mask = std::move(masks[i]);
      clip.per_frame[size_t(t)].push_back(std::move(fi));
      auto& info = clip.identities[insts[i].identity];
      info.first_frame = std::min(info.first_frame, t);
      info.last_frame = std::max(info.last_frame, t);
    }
    // luma noise on top; ground truth stays the clean ownership map
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        int n = int(rng.below(13)) - 6;
        uint8_t* p = px + (size_t(y) * W + x) * 3;
        for (int ch = 0; ch < 3; ++ch) p[ch] = uint8_t(std::clamp(int(p[ch]) + n, 0, 255));
      }
    }
  }

  // drop identities that never became visible
  for (auto it = clip.identities.begin(); it != clip.identities.end();) {
    if (it->second.last_frame < it->second.first_frame) it = clip.identities.erase(it);
    else ++it;
  }

  validate_clip(clip);
  return clip;
}

// ------------------------------------------------------------------ corpus io

namespace {

json spec_to_json(const CorpusSpec& s) {
  return json{{"num_videos", s.num_videos},
              {"frames_per_video", s.frames_per_video},
              {"height", s.height},
              {"width", s.width},
              {"max_instances_per_frame", s.max_instances_per_frame},
              {"category_names", s.category_names},
              {"seen_fraction", s.seen_fraction},
              {"occlusion_rate", s.occlusion_rate},
              {"motion_speed", {s.motion_speed_min, s.motion_speed_max}},
              {"seed", s.seed}};
}

CorpusSpec spec_from_json(const json& j) {
  CorpusSpec s;
  s.num_videos = j.at("num_videos").get<int>();
  s.frames_per_video = j.at("frames_per_video").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.max_instances_per_frame = j.at("max_instances_per_frame").get<int>();
  s.category_names = j.at("category_names").get<std::vector<std::string>>();
  s.seen_fraction = j.at("seen_fraction").get<double>();
  s.occlusion_rate = j.at("occlusion_rate").get<double>();
  s.motion_speed_min = j.at("motion_speed")[0].get<double>();
  s.motion_speed_max = j.at("motion_speed")[1].get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(text.data(), std::streamsize(text.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

json annotations_to_json(const VideoClip& clip) {
  json per_frame = json::array();
  for (int t = 0; t < clip.frames; ++t) {
    json frame = json::array();
    for (const auto& inst : clip.per_frame[size_t(t)]) {
      frame.push_back(json{{"identity", inst.identity},
                           {"category_index", inst.category},
                           {"rle", encode_rle(inst.mask)}});
    }
    per_frame.push_back(std::move(frame));
  }
  json ids = json::array();
  for (const auto& [id, info] : clip.identities) {
    ids.push_back(json{{"identity", id},
                       {"category_index", info.category},
                       {"first_frame", info.first_frame},
                       {"last_frame", info.last_frame}});
  }
  return json{{"video", clip.id},   {"split", clip.split},   {"frames", clip.frames},
              {"height", clip.height}, {"width", clip.width}, {"per_frame", per_frame},
              {"identities", ids}};
}

}  // namespace

std::vector<int> CorpusManifest::video_ids(const std::string& split) const {
  std::vector<int> out;
  for (const auto& v : videos)
    if (split == "all" || v.split == split) out.push_back(v.id);
  return out;
}

CorpusManifest generate_corpus(const CorpusSpec& spec, const std::string& out_dir, int workers) {
  validate_spec(spec);
  Vocabulary vocab = split_vocabulary(spec.category_names, spec.seen_fraction, spec.seed);

  fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create corpus directory: " + out_dir);

  CorpusManifest manifest;
  manifest.spec = spec;
  manifest.vocab = vocab;
  manifest.videos.resize(size_t(spec.num_videos));

  core::parallel_for(spec.num_videos, [&](int64_t vi) {
    VideoClip clip = simulate_video(spec, vocab, int(vi));
    fs::path vdir = root / ("video_" + std::to_string(vi));
    fs::create_directories(vdir);
    {
      std::ofstream f(vdir / "frames.u8", std::ios::binary);
      if (!f) throw IoError("cannot write frames for video " + std::to_string(vi));
      f.write(reinterpret_cast<const char*>(clip.pixels.data()), std::streamsize(clip.pixels.size()));
    }
    write_text_file(vdir / "annotations.json", annotations_to_json(clip).dump(2) + "\n");
    manifest.videos[size_t(vi)] = {int(vi), "video_" + std::to_string(vi), clip.split};
  }, workers);

  json vocab_json = json::array();
  for (int i = 0; i < vocab.size(); ++i)
    vocab_json.push_back(json{{"name", vocab.names[size_t(i)]}, {"split", vocab.is_seen[size_t(i)] ? "seen" : "unseen"}});
  json videos_json = json::array();
  for (const auto& v : manifest.videos)
    videos_json.push_back(json{{"id", v.id}, {"dir", v.dir}, {"split", v.split}});
  json m{{"format_version", 1}, {"spec", spec_to_json(spec)}, {"vocabulary", vocab_json}, {"videos", videos_json}};
  write_text_file(root / "manifest.json", m.dump(2) + "\n");
  return manifest;
}

CorpusManifest load_manifest(const std::string& corpus_dir) {
  fs::path path = fs::path(corpus_dir) / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path.string());
  json m = json::parse(f, nullptr, false);
  if (m.is_discarded()) throw IoError("corrupt manifest: " + path.string());

  CorpusManifest manifest;
  manifest.spec = spec_from_json(m.at("spec"));
  for (const auto& e : m.at("vocabulary")) {
    manifest.vocab.names.push_back(e.at("name").get<std::string>());
    manifest.vocab.is_seen.push_back(e.at("split").get<std::string>() == "seen" ? 1 : 0);
  }
  for (const auto& e : m.at("videos"))
    manifest.videos.push_back({e.at("id").get<int>(), e.at("dir").get<std::string>(), e.at("split").get<std::string>()});
  return manifest;
}

VideoClip load_video(const std::string& corpus_dir, const CorpusManifest& manifest, int video_id,
                     bool load_pixels) {
  const CorpusManifest::VideoEntry* entry = nullptr;
  for (const auto& v : manifest.videos)
    if (v.id == video_id) entry = &v;
  if (!entry) throw IoError("video id not in manifest: " + std::to_string(video_id));

  fs::path vdir = fs::path(corpus_dir) / entry->dir;
  std::ifstream af(vdir / "annotations.json");
  if (!af) throw IoError("cannot open annotations for video " + std::to_string(video_id));
  json a = json::parse(af, nullptr, false);
  if (a.is_discarded()) throw IoError("corrupt annotations for video " + std::to_string(video_id));

  VideoClip clip;
  clip.id = a.at("video").get<int>();
  clip.split = a.at("split").get<std::string>();
  clip.frames = a.at("frames").get<int>();
  clip.height = a.at("height").get<int>();
  clip.width = a.at("width").get<int>();
  clip.per_frame.resize(size_t(clip.frames));
  for (int t = 0; t < clip.frames; ++t) {
    for (const auto& e : a.at("per_frame")[size_t(t)]) {
      FrameInstance fi;
      fi.identity = e.at("identity").get<int>();
      fi.category = e.at("category_index").get<int>();
      fi.mask = decode_rle(e.at("rle").get<std::string>(), clip.height, clip.width);
      clip.per_frame[size_t(t)].push_back(std::move(fi));
    }
  }
  for (const auto& e : a.at("identities")) {
    clip.identities[e.at("identity").get<int>()] =
        IdentityInfo{e.at("category_index").get<int>(), e.at("first_frame").get<int>(), e.at("last_frame").get<int>()};
  }
  if (load_pixels) {
    std::ifstream pf(vdir / "frames.u8", std::ios::binary);
    if (!pf) throw IoError("cannot open frames for video " + std::to_string(video_id));
    clip.pixels.assign(size_t(clip.frames) * clip.height * clip.width * 3, 0);
    pf.read(reinterpret_cast<char*>(clip.pixels.data()), std::streamsize(clip.pixels.size()));
    if (pf.gcount() != std::streamsize(clip.pixels.size()))
      throw IoError("frames.u8 truncated for video " + std::to_string(video_id));
  }
  return clip;
}

std::vector<uint8_t> render_category_crop(int category_index, int h, int w, core::Rng& rng) {
  std::vector<uint8_t> px(size_t(h) * w * 3, 0);
  const uint8_t bg[3] = {40, 40, 46};
  for (size_t i = 0; i < size_t(h) * w; ++i) {
    px[i * 3 + 0] = bg[0];
    px[i * 3 + 1] = bg[1];
    px[i * 3 + 2] = bg[2];
  }
  ShapeInstance inst;
  inst.category = category_index;
  inst.scale = std::min(h, w) * rng.uniform(0.2, 0.3);
  inst.rot = rng.uniform(-0.12, 0.12);
  inst.color = category_color(category_index, rng);
  double cx = w / 2.0 + rng.uniform(-4.0, 4.0);
  double cy = h / 2.0 + rng.uniform(-4.0, 4.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (inst.contains(x + 0.5, y + 0.5, cx, cy)) {
        uint8_t* p = px.data() + (size_t(y) * w + x) * 3;
        p[0] = inst.color.r;
        p[1] = inst.color.g;
        p[2] = inst.color.b;
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int n = int(rng.below(13)) - 6;
      uint8_t* p = px.data() + (size_t(y) * w + x) * 3;
      for (int ch = 0; ch < 3; ++ch) p[ch] = uint8_t(std::clamp(int(p[ch]) + n, 0, 255));
    }
  }
  return px;
}

}  // namespace instformer::datakit
