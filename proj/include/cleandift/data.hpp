// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/container.hpp"
#include "cleandift/image_io.hpp"
#include "cleandift/rng.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

/// Object categories; 0 is background.
enum Category : int { kBackground = 0, kDisk = 1, kSquare = 2, kTriangle = 3, kCross = 4 };
inline constexpr int kNumClasses = 5;
inline constexpr double kDepthMin = 1.0;
inline constexpr double kDepthMax = 10.0;

inline const char* category_name(int c) {
  static constexpr const char* names[] = {"background", "disk", "square", "triangle", "cross"};
  return c >= 0 && c < kNumClasses ? names[c] : "?";
}

struct ObjectSpec {
  int category = kDisk;
  double cx = 0, cy = 0;  // centre, continuous pixel coordinates
  double size = 5;        // half extent
  double angle = 0;       // radians
  std::array<double, 3> color{0, 0, 0};  // [-1, 1]
  double depth = 5;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int canvas = 32;
  std::vector<ObjectSpec> objects;  // back to front is by decreasing depth
  int background = 0;
  std::array<double, 3> bg_color_a{0, 0, 0};
  std::array<double, 3> bg_color_b{0, 0, 0};
  double brightness = 0.0;  // photometric offset
  double contrast = 1.0;    // photometric gain
};

struct Keypoint {
  std::string name;
  int object = 0;
  double x = 0, y = 0;
};

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct SceneSample {
  int canvas = 32;
  Tensor<float> image;       // [1, 3, S, S] in [-1, 1]
  std::vector<int> mask;     // S*S class ids
  std::vector<int> instance; // S*S object index or -1
  std::vector<float> depth;  // S*S metric depth
  int class_label = 0;
  std::vector<Keypoint> keypoints;
  std::vector<int> categories;  // per object
  std::vector<std::optional<BBox>> bboxes;  // per object, over visible pixels
};

namespace detail {

/// Object-local landmark coordinates in units of the half extent.
struct Landmark {
  const char* name;
  double u, v;
};

inline std::vector<Landmark> landmarks(int category) {
  switch (category) {
    case kDisk: return {{"center", 0, 0}, {"inner_e", 0.55, 0}, {"inner_w", -0.55, 0}};
    case kSquare:
      return {{"center", 0, 0}, {"corner_ne", 0.7, -0.7}, {"corner_nw", -0.7, -0.7},
              {"corner_sw", -0.7, 0.7}, {"corner_se", 0.7, 0.7}};
    case kTriangle:
      return {{"center", 0, 0}, {"apex", 0, -0.6}, {"base_l", -0.5, 0.3}, {"base_r", 0.5, 0.3}};
    case kCross:
      return {{"center", 0, 0}, {"arm_n", 0, -0.8}, {"arm_e", 0.8, 0}, {"arm_s", 0, 0.8},
              {"arm_w", -0.8, 0}};
  }
  return {};
}

/// Radius of the smallest origin-centred disk holding the unit shape.
inline double bounding_factor(int category) {
  switch (category) {
    case kSquare: return std::numbers::sqrt2;
    case kCross: return std::sqrt(1.0 + 0.3 * 0.3);
    default: return 1.0;
  }
}

/// Membership in the unit shape at object-local (u, v).
inline bool inside_unit(int category, double u, double v) {
  switch (category) {
    case kDisk: return u * u + v * v <= 1.0;
    case kSquare: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case kTriangle: {
      // Apex (0,-1), base corners (+-0.866, 0.5).
      return v <= 0.5 && v >= -1.0 + std::sqrt(3.0) * std::abs(u);
    }
    case kCross: return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) ||
                        (std::abs(v) <= 1.0 && std::abs(u) <= 0.3);
  }
  return false;
}

inline void to_local(const ObjectSpec& o, double x, double y, double& u, double& v) {
  const double dx = x - o.cx, dy = y - o.cy;
  const double c = std::cos(o.angle), s = std::sin(o.angle);
  u = (c * dx + s * dy) / o.size;
  v = (-s * dx + c * dy) / o.size;
}

inline void from_local(const ObjectSpec& o, double u, double v, double& x, double& y) {
  const double c = std::cos(o.angle), s = std::sin(o.angle);
  x = o.cx + o.size * (c * u - s * v);
  y = o.cy + o.size * (s * u + c * v);
}

inline std::array<double, 3> background_at(const SceneSpec& s, int x, int y) {
  const double S = s.canvas;
  double t = 0;
  switch (s.background) {
    case 0: t = (y + 0.5) / S; break;                          // vertical gradient
    case 1: t = ((x / 4) % 2) ? 1.0 : 0.0; break;              // stripes
    case 2: t = (((x / 4) + (y / 4)) % 2) ? 1.0 : 0.0; break;  // checker
    default: {                                                  // radial
      const double dx = x + 0.5 - S / 2, dy = y + 0.5 - S / 2;
      t = std::min(1.0, std::sqrt(dx * dx + dy * dy) / (S / 2));
    }
  }
  std::array<double, 3> c;
  for (int k = 0; k < 3; ++k) c[k] = (1 - t) * s.bg_color_a[k] + t * s.bg_color_b[k];
  return c;
}

inline double background_depth(int y, int canvas) {
  // Receding floor: far at the top, nearer at the bottom.
  return kDepthMax - 3.0 * (y + 0.5) / canvas;
}

inline bool object_inside_canvas(const ObjectSpec& o, int canvas) {
  const double r = o.size * bounding_factor(o.category);
  return o.cx - r >= 0 && o.cy - r >= 0 && o.cx + r <= canvas && o.cy + r <= canvas;
}

}  // namespace detail

/// Random scene description: 2-4 objects with distinct depths; larger objects
/// sit nearer the camera.
inline SceneSpec random_scene_spec(std::uint64_t seed, int canvas = 32) {
  Rng rng(derive_seed(seed, 0x5ce0e));
  SceneSpec s;
  s.seed = seed;
  s.canvas = canvas;
  s.background = int(rng.uniform_int(0, 4));
  for (int k = 0; k < 3; ++k) {
    s.bg_color_a[k] = rng.uniform(-0.6, 0.2);
    s.bg_color_b[k] = rng.uniform(-0.6, 0.2);
  }
  const int count = int(rng.uniform_int(2, 5));
  const double unit = canvas / 32.0;
  for (int i = 0; i < count; ++i) {
    ObjectSpec o;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      o.category = int(rng.uniform_int(1, kNumClasses));
      o.size = rng.uniform(4.0, 8.0) * unit;
      o.angle = rng.uniform(0.0, 2 * std::numbers::pi);
      const double r = o.size * detail::bounding_factor(o.category);
      if (2 * r > canvas) continue;
      o.cx = rng.uniform(r, canvas - r);
      o.cy = rng.uniform(r, canvas - r);
      const double sz = (o.size / unit - 4.0) / 4.0;  // 0 small .. 1 large
      o.depth = 2.0 + 6.0 * (1.0 - sz) + rng.uniform(-0.3, 0.3);
      placed = std::all_of(s.objects.begin(), s.objects.end(), [&](const ObjectSpec& p) {
        return std::abs(p.depth - o.depth) >= 0.25;
      });
    }
    if (!placed) throw std::runtime_error("random_scene_spec: placement failed");
    for (int k = 0; k < 3; ++k) o.color[k] = rng.uniform(-0.2, 1.0) * (rng.uniform() < 0.5 ? 1 : -1);
    s.objects.push_back(o);
  }
  return s;
}

/// Renders a scene. Pixels are tested at their centres; the nearest object
/// wins. Objects carry a mild radial shading so their interiors have texture.
inline SceneSample generate_scene(const SceneSpec& spec) {
  const int S = spec.canvas;
  if (S <= 0) throw std::invalid_argument("generate_scene: canvas must be positive");
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (o.category < 1 || o.category >= kNumClasses)
      throw std::invalid_argument("generate_scene: bad category");
    if (!(o.depth >= kDepthMin && o.depth <= kDepthMax))
      throw std::invalid_argument("generate_scene: depth outside the metric range");
    if (!detail::object_inside_canvas(o, S))
      throw std::invalid_argument("generate_scene: object " + std::to_string(i) +
                                  " leaves the canvas");
    for (std::size_t j = 0; j < i; ++j)
      if (spec.objects[j].depth == o.depth)
        throw std::invalid_argument("generate_scene: depth planes must be distinct");
  }
  SceneSample out;
  out.canvas = S;
  out.image = Tensor<float>(Shape{1, 3, S, S});
  out.mask.assign(std::size_t(S) * S, 0);
  out.instance.assign(std::size_t(S) * S, -1);
  out.depth.assign(std::size_t(S) * S, 0.f);
  for (const auto& o : spec.objects) out.categories.push_back(o.category);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t p = std::size_t(y) * S + x;
      auto col = detail::background_at(spec, x, y);
      double depth = detail::background_depth(y, S);
      int inst = -1;
      double shade = 1.0;
      for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const auto& o = spec.objects[i];
        double u, v;
        detail::to_local(o, x + 0.5, y + 0.5, u, v);
        if (o.depth < depth && detail::inside_unit(o.category, u, v)) {
          depth = o.depth;
          inst = int(i);
          shade = 1.0 - 0.35 * std::min(1.0, std::sqrt(u * u + v * v));
        }
      }
      if (inst >= 0)
        for (int k = 0; k < 3; ++k) col[k] = spec.objects[std::size_t(inst)].color[k] * shade;
      for (int k = 0; k < 3; ++k) {
        const double v = spec.contrast * col[k] + spec.brightness;
        out.image.at(0, k, y, x) = float(std::clamp(v, -1.0, 1.0));
      }
      out.instance[p] = inst;
      out.mask[p] = inst >= 0 ? spec.objects[std::size_t(inst)].category : 0;
      out.depth[p] = float(depth);
    }
  // Bounding boxes of visible pixels.
  out.bboxes.assign(spec.objects.size(), std::nullopt);
  std::vector<int> area(spec.objects.size(), 0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int i = out.instance[std::size_t(y) * S + x];
      if (i < 0) continue;
      ++area[std::size_t(i)];
      auto& b = out.bboxes[std::size_t(i)];
      if (!b) {
        b = BBox{double(x), double(y), 1, 1};
      } else {
        const double x1 = std::max(b->x + b->w, x + 1.0), y1 = std::max(b->y + b->h, y + 1.0);
        b->x = std::min(b->x, double(x));
        b->y = std::min(b->y, double(y));
        b->w = x1 - b->x;
        b->h = y1 - b->y;
      }
    }
  // Dominant category by visible area, ties to the lower id.
  std::array<int, kNumClasses> cat_area{};
  for (std::size_t i = 0; i < area.size(); ++i) cat_area[std::size_t(spec.objects[i].category)] += area[i];
  out.class_label = 1;
  for (int c = 1; c < kNumClasses; ++c)
    if (cat_area[std::size_t(c)] > cat_area[std::size_t(out.class_label)]) out.class_label = c;
  // Landmarks that land on a visible pixel of their own object.
  for (std::size_t i = 0; i < spec.objects.size(); ++i)
    for (const auto& lm : detail::landmarks(spec.objects[i].category)) {
      double x, y;
      detail::from_local(spec.objects[i], lm.u, lm.v, x, y);
      const int px = int(std::floor(x)), py = int(std::floor(y));
      if (px < 0 || py < 0 || px >= S || py >= S) continue;
      if (out.instance[std::size_t(py) * S + px] != int(i)) continue;
      out.keypoints.push_back({lm.name, int(i), x, y});
    }
  return out;
}

/// Similarity transform about the canvas centre plus photometric jitter.
struct PairTransform {
  double angle = 0;  // radians
  double scale = 1;
  double dx = 0, dy = 0;
  double brightness = 0;
  double contrast = 1;

  void apply(double cx, double x, double y, double& ox, double& oy) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double px = x - cx, py = y - cx;
    ox = cx + scale * (c * px - s * py) + dx;
    oy = cx + scale * (s * px + c * py) + dy;
  }
};

struct KeypointPair {
  std::string name;
  double sx, sy, tx, ty;
};

struct CorrespondenceAnnotation {
  std::string source;
  std::string target;
  int width = 0, height = 0;
  std::vector<KeypointPair> keypoints;
  BBox target_bbox;
  int category = 0;
};

struct ScenePair {
  SceneSpec source_spec, target_spec;
  SceneSample source, target;
  CorrespondenceAnnotation annotation;
};

inline SceneSpec transform_spec(const SceneSpec& s, const PairTransform& t) {
  SceneSpec o = s;
  const double c = s.canvas / 2.0;
  for (auto& ob : o.objects) {
    t.apply(c, ob.cx, ob.cy, ob.cx, ob.cy);
    ob.size *= t.scale;
    ob.angle += t.angle;
  }
  o.brightness = s.brightness + t.brightness;
  o.contrast = s.contrast * t.contrast;
  return o;
}

/// Renders source and transformed target. Keypoints come from the source's
/// dominant object and are kept when visible on that object in both images.
inline ScenePair make_pair(const SceneSpec& spec, const PairTransform& t) {
  ScenePair p;
  p.source_spec = spec;
  p.target_spec = transform_spec(spec, t);
  for (std::size_t i = 0; i < p.target_spec.objects.size(); ++i)
    if (!detail::object_inside_canvas(p.target_spec.objects[i], spec.canvas))
      throw std::invalid_argument("make_pair: transform moves object " + std::to_string(i) +
                                  " out of the canvas");
  p.source = generate_scene(spec);
  p.target = generate_scene(p.target_spec);
  const int S = spec.canvas;
  auto& a = p.annotation;
  a.width = a.height = S;
  a.category = p.source.class_label;
  // Dominant object: largest visible instance of the pair category.
  int dom = -1;
  int best = -1;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    if (spec.objects[i].category != a.category) continue;
    const int area = int(std::count(p.source.instance.begin(), p.source.instance.end(), int(i)));
    if (area > best) {
      best = area;
      dom = int(i);
    }
  }
  for (const auto& kp : p.source.keypoints) {
    if (kp.object != dom) continue;
    double tx, ty;
    t.apply(S / 2.0, kp.x, kp.y, tx, ty);
    const int px = int(std::floor(tx)), py = int(std::floor(ty));
    if (px < 0 || py < 0 || px >= S || py >= S) continue;
    if (p.target.instance[std::size_t(py) * S + px] != dom) continue;
    a.keypoints.push_back({kp.name, kp.x, kp.y, tx, ty});
  }
  if (dom >= 0 && p.target.bboxes[std::size_t(dom)]) a.target_bbox = *p.target.bboxes[std::size_t(dom)];
  return p;
}

inline PairTransform random_pair_transform(Rng& rng) {
  PairTransform t;
  t.angle = rng.uniform(-0.35, 0.35);
  t.scale = rng.uniform(0.85, 1.15);
  t.dx = rng.uniform(-3.0, 3.0);
  t.dy = rng.uniform(-3.0, 3.0);
  t.brightness = rng.uniform(-0.1, 0.1);
  t.contrast = rng.uniform(0.85, 1.15);
  return t;
}

/// A pair with at least one surviving keypoint, retrying transforms and scenes.
inline ScenePair random_pair(std::uint64_t seed, int canvas = 32) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    Rng rng(derive_seed(seed, 0xa1e, std::uint64_t(attempt)));
    SceneSpec spec = random_scene_spec(derive_seed(seed, std::uint64_t(attempt)), canvas);
    PairTransform t = random_pair_transform(rng);
    try {
      ScenePair p = make_pair(spec, t);
      if (!p.annotation.keypoints.empty() && p.annotation.target_bbox.w > 0) return p;
    } catch (const std::invalid_argument&) {
    }
  }
  throw std::runtime_error("random_pair: no feasible pair after bounded retries");
}

// ---- raster conversion -----------------------------------------------------

inline Raster to_raster(const Tensor<float>& img, int n = 0) {
  Raster r{img.w(), img.h(), 3, {}};
  r.pixels.resize(std::size_t(r.width) * r.height * 3);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = (double(img.at(n, c, y, x)) + 1.0) * 127.5;
        r.at(x, y, c) = (unsigned char)std::lround(std::clamp(v, 0.0, 255.0));
      }
  return r;
}

inline Tensor<float> from_raster(const Raster& r) {
  Tensor<float> t(Shape{1, 3, r.height, r.width});
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = float(r.at(x, y, r.channels == 3 ? c : 0) / 127.5 - 1.0);
  return t;
}

/// Square centre crop followed by area-weighted resampling to `size`.
inline Raster center_crop_resize(const Raster& in, int size) {
  const int side = std::min(in.width, in.height);
  const int ox = (in.width - side) / 2, oy = (in.height - side) / 2;
  Raster out{size, size, in.channels, {}};
  out.pixels.resize(std::size_t(size) * size * in.channels);
  const double f = double(side) / size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      // Footprint [x*f, (x+1)*f) in crop coordinates, weighted by overlap.
      const double x0 = x * f, x1 = (x + 1) * f, y0 = y * f, y1 = (y + 1) * f;
      for (int c = 0; c < in.channels; ++c) {
        double acc = 0, wsum = 0;
        for (int sy = int(std::floor(y0)); sy < int(std::ceil(y1)) && sy < side; ++sy)
          for (int sx = int(std::floor(x0)); sx < int(std::ceil(x1)) && sx < side; ++sx) {
            const double wx = std::min(x1, sx + 1.0) - std::max(x0, double(sx));
            const double wy = std::min(y1, sy + 1.0) - std::max(y0, double(sy));
            const double w = std::max(0.0, wx) * std::max(0.0, wy);
            acc += w * in.at(ox + sx, oy + sy, c);
            wsum += w;
          }
        out.at(x, y, c) = (unsigned char)std::lround(wsum > 0 ? acc / wsum : 0.0);
      }
    }
  return out;
}

struct IngestedImages {
  std::vector<std::string> names;
  Tensor<float> images;  // [N, 3, S, S]
  std::vector<std::string> skipped;
};

/// Reads every decodable PNG in `dir` (sorted by file name), centre-crops to a
/// square and resizes to `size`. Undecodable files are skipped with a warning.
inline IngestedImages ingest_folder(const std::filesystem::path& dir, int size,
                                    std::ostream& warn = std::cerr) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("ingest_folder: not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  IngestedImages out;
  std::vector<Tensor<float>> imgs;
  for (const auto& f : files) {
    try {
      imgs.push_back(from_raster(center_crop_resize(read_png(f, 3), size)));
      out.names.push_back(f.filename().string());
    } catch (const ImageError& e) {
      warn << "warning: skipping " << f.filename().string() << ": " << e.what() << "\n";
      out.skipped.push_back(f.filename().string());
    }
  }
  if (imgs.empty()) throw std::runtime_error("ingest_folder: no decodable images in " + dir.string());
  out.images = stack_batch<float>(imgs);
  return out;
}

// ---- datasets on disk -------------------------------------------------------

struct ImageRecord {
  std::string name;
  int class_label = 0;
  std::vector<int> categories;
  std::vector<std::optional<BBox>> bboxes;
  std::vector<Keypoint> keypoints;
};

/// A split held in memory. Images are stored already quantized to 8 bits so a
/// save/load round trip is exact.
struct Dataset {
  std::string split;
  int canvas = 32;
  std::vector<ImageRecord> records;
  Tensor<float> images;                   // [N, 3, S, S]
  std::vector<std::vector<int>> masks;    // per image, S*S class ids
  std::vector<std::vector<float>> depths; // per image, S*S
  std::vector<CorrespondenceAnnotation> pairs;

  int size() const { return int(records.size()); }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].name == name) return int(i);
    throw std::out_of_range("dataset " + split + " has no image '" + name + "'");
  }
};

inline Tensor<float> quantize_image(const Tensor<float>& img) { return from_raster(to_raster(img)); }

struct SplitSizes {
  int distill = 4096;
  int teacher_extra = 512;
  int pairs = 256;
  int probe_train = 512;
  int probe_test = 256;
};

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> n{"distill", "teacher_extra", "pairs", "probe_train",
                                          "probe_test"};
  return n;
}

namespace detail {

inline std::uint64_t split_tag(const std::string& split) {
  const auto& n = split_names();
  for (std::size_t i = 0; i < n.size(); ++i)
    if (n[i] == split) return 0x5b1700 + i;
  throw std::invalid_argument("unknown split '" + split + "'");
}

inline std::string indexed_name(const std::string& prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05d", prefix.c_str(), i);
  return buf;
}

inline void add_sample(Dataset& d, std::vector<Tensor<float>>& imgs, const std::string& name,
                       SceneSample&& s) {
  ImageRecord r;
  r.name = name;
  r.class_label = s.class_label;
  r.categories = s.categories;
  r.bboxes = s.bboxes;
  r.keypoints = s.keypoints;
  d.records.push_back(std::move(r));
  imgs.push_back(quantize_image(s.image));
  d.masks.push_back(std::move(s.mask));
  d.depths.push_back(std::move(s.depth));
}

}  // namespace detail

/// Generates one split deterministically from (seed, split name). The pairs
/// split holds source and target images side by side plus the annotations.
inline Dataset generate_split(const std::string& split, int count, std::uint64_t seed,
                              int canvas = 32) {
  if (count <= 0) throw std::invalid_argument("generate_split: count must be positive");
  const std::uint64_t tag = detail::split_tag(split);
  Dataset d;
  d.split = split;
  d.canvas = canvas;
  std::vector<Tensor<float>> imgs;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, tag, std::uint64_t(i));
    if (split == "pairs") {
      ScenePair p = random_pair(s, canvas);
      const std::string src = detail::indexed_name("pair", i) + "_src";
      const std::string tgt = detail::indexed_name("pair", i) + "_tgt";
      p.annotation.source = src;
      p.annotation.target = tgt;
      d.pairs.push_back(p.annotation);
      detail::add_sample(d, imgs, src, std::move(p.source));
      detail::add_sample(d, imgs, tgt, std::move(p.target));
    } else {
      detail::add_sample(d, imgs, detail::indexed_name("img", i),
                         generate_scene(random_scene_spec(s, canvas)));
    }
  }
  d.images = stack_batch<float>(imgs);
  return d;
}

inline json to_json(const BBox& b) { return json::array({b.x, b.y, b.w, b.h}); }
inline BBox bbox_from_json(const json& j) {
  return BBox{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
              j.at(3).get<double>()};
}

/// Writes `images/`, `masks/`, `depth/` and `annotations.json` under `dir`.
///
/// annotations.json schema:
///   {format, version, split, canvas, num_classes,
///    categories: [names by id],
///    images: [{name, image, mask, depth, class_label,
///              objects: [{category, bbox: [x, y, w, h] | null}],
///              keypoints: [{name, object, x, y}]}],
///    pairs: [{source, target, category, target_bbox, width, height,
///             keypoints: [{name, sx, sy, tx, ty}]}]}
/// Coordinates are continuous pixels: pixel i spans [i, i+1).
inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "depth");
  const int S = d.canvas;
  json a;
  a["format"] = "cleandift-dataset";
  a["version"] = 1;
  a["split"] = d.split;
  a["canvas"] = S;
  a["num_classes"] = kNumClasses;
  a["categories"] = json::array();
  for (int c = 0; c < kNumClasses; ++c) a["categories"].push_back(category_name(c));
  a["images"] = json::array();
  for (int i = 0; i < d.size(); ++i) {
    const auto& r = d.records[std::size_t(i)];
    const std::string img = "images/" + r.name + ".png", msk = "masks/" + r.name + ".png",
                      dep = "depth/" + r.name + ".npybin";
    write_png(dir / img, to_raster(slice_batch(d.images, i, 1)));
    Raster m{S, S, 1, {}};
    m.pixels.resize(std::size_t(S) * S);
    for (std::size_t p = 0; p < m.pixels.size(); ++p)
      m.pixels[p] = (unsigned char)d.masks[std::size_t(i)][p];
    write_png(dir / msk, m);
    std::string bytes;
    detail::append_f32_le(bytes, d.depths[std::size_t(i)].data(), std::int64_t(S) * S);
    write_file_atomic(dir / dep, bytes);
    write_file_atomic(dir / (dep + ".json"),
                      json{{"shape", {S, S}}, {"dtype", "float32"}, {"byte_order", "little"}}.dump() + "\n");
    json objs = json::array();
    for (std::size_t k = 0; k < r.categories.size(); ++k)
      objs.push_back({{"category", r.categories[k]},
                      {"bbox", r.bboxes[k] ? to_json(*r.bboxes[k]) : json(nullptr)}});
    json kps = json::array();
    for (const auto& kp : r.keypoints)
      kps.push_back({{"name", kp.name}, {"object", kp.object}, {"x", kp.x}, {"y", kp.y}});
    a["images"].push_back({{"name", r.name},
                           {"image", img},
                           {"mask", msk},
                           {"depth", dep},
                           {"class_label", r.class_label},
                           {"objects", objs},
                           {"keypoints", kps}});
  }
  a["pairs"] = json::array();
  for (const auto& p : d.pairs) {
    json kps = json::array();
    for (const auto& k : p.keypoints)
      kps.push_back({{"name", k.name}, {"sx", k.sx}, {"sy", k.sy}, {"tx", k.tx}, {"ty", k.ty}});
    a["pairs"].push_back({{"source", p.source},
                          {"target", p.target},
                          {"category", p.category},
                          {"width", p.width},
                          {"height", p.height},
                          {"target_bbox", to_json(p.target_bbox)},
                          {"keypoints", kps}});
  }
  write_file_atomic(dir / "annotations.json", a.dump(1) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto apath = dir / "annotations.json";
  if (!std::filesystem::exists(apath))
    throw std::runtime_error("no dataset at " + dir.string() + " (missing annotations.json; run gen-data)");
  json a = json::parse(read_file_bytes(apath));
  if (a.value("format", "") != "cleandift-dataset")
    throw std::runtime_error(apath.string() + ": not a dataset annotation file");
  Dataset d;
  d.split = a.at("split");
  d.canvas = a.at("canvas");
  const int S = d.canvas;
  std::vector<Tensor<float>> imgs;
  for (const auto& e : a.at("images")) {
    ImageRecord r;
    r.name = e.at("name");
    r.class_label = e.at("class_label");
    for (const auto& o : e.at("objects")) {
      r.categories.push_back(o.at("category"));
      r.bboxes.push_back(o.at("bbox").is_null() ? std::nullopt
                                                : std::optional<BBox>(bbox_from_json(o.at("bbox"))));
    }
    for (const auto& k : e.at("keypoints"))
      r.keypoints.push_back({k.at("name"), k.at("object"), k.at("x"), k.at("y")});
    Raster img = read_png(dir / e.at("image").get<std::string>(), 3);
    Raster m = read_png(dir / e.at("mask").get<std::string>(), 1);
    if (img.width != S || img.height != S || m.width != S || m.height != S)
      throw std::runtime_error("dataset image " + r.name + " has the wrong size");
    imgs.push_back(from_raster(img));
    d.masks.emplace_back(m.pixels.begin(), m.pixels.end());
    const std::string dep = e.at("depth");
    json side = json::parse(read_file_bytes(dir / (dep + ".json")));
    if (side.at("shape") != json{S, S}) throw std::runtime_error("depth " + dep + ": shape mismatch");
    const std::string bytes = read_file_bytes(dir / dep);
    if (bytes.size() != std::size_t(S) * S * 4) throw std::runtime_error("depth " + dep + ": truncated");
    std::vector<float> depth(std::size_t(S) * S);
    detail::read_f32_le(reinterpret_cast<const unsigned char*>(bytes.data()), depth.data(),
                        std::int64_t(depth.size()));
    d.depths.push_back(std::move(depth));
    d.records.push_back(std::move(r));
  }
  if (imgs.empty()) throw std::runtime_error(apath.string() + ": dataset has no images");
  d.images = stack_batch<float>(imgs);
  for (const auto& p : a.at("pairs")) {
    CorrespondenceAnnotation c;
    c.source = p.at("source");
    c.target = p.at("target");
    c.category = p.at("category");
    c.width = p.at("width");
    c.height = p.at("height");
    c.target_bbox = bbox_from_json(p.at("target_bbox"));
    for (const auto& k : p.at("keypoints"))
      c.keypoints.push_back({k.at("name"), k.at("sx"), k.at("sy"), k.at("tx"), k.at("ty")});
    d.pairs.push_back(std::move(c));
  }
  return d;
}

}  // namespace cleandift
