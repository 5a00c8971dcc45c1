#pragma once

// Procedural two-domain instance benchmark.
//
// An instance is a body shape (the shared high-level class) carrying a
// marker glyph in one quadrant and a number of horizontal stripes (the
// mid-level parts). The "filled" domain paints the body at the instance's
// palette intensity with bright glyphs and dark stripes; the "contour"
// domain draws only jittered 1-px outlines of the same geometry and never
// sees the palette.

#include <array>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include <nlohmann/json.hpp>

#include "cdim/cdtf.hpp"
#include "cdim/random.hpp"

namespace cdim::synth {

enum class BodyShape { kDisk, kSquare, kTriangle, kCross };
enum class Glyph { kDot, kBar, kNotch };
enum class Quadrant { kNE, kNW, kSE, kSW };
enum class Domain { kFilled, kContour };
enum class Alignment { kAligned, kPerturbed };
enum class Split { kTrain, kTest };

inline constexpr std::size_t kNumShapes = 4;
inline constexpr std::size_t kNumGlyphs = 3;
inline constexpr std::size_t kNumQuadrants = 4;
inline constexpr std::size_t kMaxStripes = 3;
inline constexpr std::size_t kAttributeSpace =
    kNumShapes * kNumGlyphs * kNumQuadrants * (kMaxStripes + 1);

inline std::string to_string(Domain d) { return d == Domain::kFilled ? "filled" : "contour"; }
inline std::string to_string(Alignment a) {
  return a == Alignment::kAligned ? "aligned" : "perturbed";
}
inline std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "filled") return Domain::kFilled;
  if (s == "contour") return Domain::kContour;
  throw ConfigError("unknown domain '" + s + "'");
}
inline Alignment alignment_from_string(const std::string& s) {
  if (s == "aligned") return Alignment::kAligned;
  if (s == "perturbed") return Alignment::kPerturbed;
  throw ConfigError("unknown mode '" + s + "' (expected aligned or perturbed)");
}
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "'");
}

struct InstanceSpec {
  std::size_t id = 0;
  BodyShape shape = BodyShape::kDisk;
  Glyph glyph = Glyph::kDot;
  Quadrant quadrant = Quadrant::kNE;
  std::size_t stripes = 0;
  double palette = 0.6;  // fill intensity, filled domain only

  /// Index of the (shape, glyph, quadrant, stripes) combination.
  std::size_t combination() const {
    return ((static_cast<std::size_t>(shape) * kNumGlyphs + static_cast<std::size_t>(glyph)) *
                kNumQuadrants +
            static_cast<std::size_t>(quadrant)) *
               (kMaxStripes + 1) +
           stripes;
  }

  static InstanceSpec from_combination(std::size_t combo) {
    InstanceSpec s;
    s.stripes = combo % (kMaxStripes + 1);
    combo /= kMaxStripes + 1;
    s.quadrant = static_cast<Quadrant>(combo % kNumQuadrants);
    combo /= kNumQuadrants;
    s.glyph = static_cast<Glyph>(combo % kNumGlyphs);
    s.shape = static_cast<BodyShape>(combo / kNumGlyphs);
    return s;
  }
};

/// `n` pairwise-distinct instances, at least two sharing a body shape.
inline std::vector<InstanceSpec> generate_instances(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("need at least 2 instances, got " + std::to_string(n));
  if (n > kAttributeSpace) {
    throw ConfigError("requested " + std::to_string(n) +
                      " instances but only " + std::to_string(kAttributeSpace) +
                      " distinct attribute combinations exist (maximum " +
                      std::to_string(kAttributeSpace) + ")");
  }
  Rng rng = make_rng(seed, 0x696e7374ull);
  for (;;) {
    std::vector<InstanceSpec> out;
    std::set<std::size_t> used;
    while (out.size() < n) {
      const std::size_t combo = uniform_index(rng, kAttributeSpace);
      if (!used.insert(combo).second) continue;
      InstanceSpec s = InstanceSpec::from_combination(combo);
      s.id = out.size();
      s.palette = 0.45 + 0.45 * uniform01(rng);
      out.push_back(s);
    }
    std::array<std::size_t, kNumShapes> per_shape{};
    for (const auto& s : out) ++per_shape[static_cast<std::size_t>(s.shape)];
    if (*std::max_element(per_shape.begin(), per_shape.end()) >= 2) return out;
  }
}

struct Pose {
  double dx = 0, dy = 0;  // pixels, +x right, +y down
  double angle_deg = 0;
  bool flip = false;
};

struct RenderConfig {
  Domain domain = Domain::kFilled;
  std::size_t size = 32;
  std::size_t channels = 1;
  Alignment alignment = Alignment::kAligned;
  double max_translation = 4.0;
  double max_rotation_deg = 25.0;
  double flip_probability = 0.5;
  double contour_jitter = 1.0;
  double noise_std = 0.02;
};

namespace detail {

struct Pt {
  double x, y;
};

using Polyline = std::vector<Pt>;

inline constexpr double kRadius = 9.0;  // body scale in pixels
inline constexpr double kStroke = 0.7;  // half stroke width of contour lines
inline constexpr double kJitterClip = 2.5;  // jitter offsets beyond this many std are redrawn

inline Polyline regular_polygon(double cx, double cy, double r, std::size_t n, double phase = 0) {
  Polyline p;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = phase + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    p.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
  }
  return p;
}

inline Polyline rect(double cx, double cy, double hw, double hh) {
  return {{cx - hw, cy - hh}, {cx + hw, cy - hh}, {cx + hw, cy + hh}, {cx - hw, cy + hh}};
}

inline Polyline body_polygon(BodyShape s) {
  const double r = kRadius;
  switch (s) {
    case BodyShape::kDisk: return regular_polygon(0, 0, r, 32);
    case BodyShape::kSquare: return rect(0, 0, 0.85 * r, 0.85 * r);
    case BodyShape::kTriangle: return {{0, -1.15 * r}, {1.1 * r, 0.8 * r}, {-1.1 * r, 0.8 * r}};
    case BodyShape::kCross: {
      const double a = 0.38 * r, e = r;
      return {{-a, -e}, {a, -e}, {a, -a}, {e, -a}, {e, a},   {a, a},
              {a, e},   {-a, e}, {-a, a}, {-e, a}, {-e, -a}, {-a, -a}};
    }
  }
  return {};
}

inline Pt quadrant_center(Quadrant q) {
  const double o = 0.48 * kRadius;
  switch (q) {
    case Quadrant::kNE: return {o, -o};
    case Quadrant::kNW: return {-o, -o};
    case Quadrant::kSE: return {o, o};
    case Quadrant::kSW: return {-o, o};
  }
  return {0, 0};
}

inline Polyline glyph_polygon(Glyph g, Pt c) {
  switch (g) {
    case Glyph::kDot: return regular_polygon(c.x, c.y, 2.3, 8);
    case Glyph::kBar: return rect(c.x, c.y, 3.2, 1.1);
    case Glyph::kNotch: return {{c.x - 2.8, c.y - 2.0}, {c.x + 2.8, c.y - 2.0}, {c.x, c.y + 2.4}};
  }
  return {};
}

inline std::vector<double> stripe_rows(std::size_t count) {
  std::vector<double> ys;
  for (std::size_t i = 0; i < count; ++i) {
    ys.push_back(-0.55 * kRadius +
                 1.1 * kRadius * static_cast<double>(i + 1) / static_cast<double>(count + 1));
  }
  return ys;
}

inline bool inside(const Polyline& poly, Pt p) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > p.y) != (poly[j].y > p.y)) {
      const double x = poly[j].x + (p.y - poly[j].y) * (poly[i].x - poly[j].x) / (poly[i].y - poly[j].y);
      if (p.x < x) in = !in;
    }
  }
  return in;
}

inline double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

/// Splits edges so no segment exceeds `max_len`; closed polygons wrap.
inline Polyline densify(const Polyline& poly, double max_len, bool closed) {
  Polyline out;
  const std::size_t edges = closed ? poly.size() : poly.size() - 1;
  for (std::size_t i = 0; i < edges; ++i) {
    const Pt a = poly[i], b = poly[(i + 1) % poly.size()];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const std::size_t pieces = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(len / max_len)));
    for (std::size_t k = 0; k < pieces; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(pieces);
      out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
  }
  if (!closed) out.push_back(poly.back());
  return out;
}

struct Stroke {
  Polyline points;
  bool closed = true;
  bool clip_to_body = false;
};

/// Geometry of one instance in object coordinates.
struct Scene {
  Polyline body;
  Polyline glyph;
  std::vector<double> stripes;
};

inline Scene make_scene(const InstanceSpec& spec) {
  return {body_polygon(spec.shape), glyph_polygon(spec.glyph, quadrant_center(spec.quadrant)),
          stripe_rows(spec.stripes)};
}

/// Contour strokes with per-vertex Gaussian jitter.
inline std::vector<Stroke> contour_strokes(const Scene& scene, double jitter, Rng& rng) {
  std::normal_distribution<double> noise(0.0, jitter);
  auto offset = [&] {
    for (;;) {
      const double d = noise(rng);
      if (std::abs(d) <= kJitterClip * jitter) return d;
    }
  };
  auto jittered = [&](Polyline p) {
    if (jitter > 0)
      for (Pt& v : p) {
        v.x += offset();
        v.y += offset();
      }
    return p;
  };
  std::vector<Stroke> strokes;
  strokes.push_back({jittered(densify(scene.body, 4.0, true)), true, false});
  strokes.push_back({jittered(scene.glyph), true, false});
  for (double y : scene.stripes) {
    Polyline line{{-1.3 * kRadius, y}, {1.3 * kRadius, y}};
    strokes.push_back({jittered(densify(line, 4.0, false)), false, true});
  }
  return strokes;
}

inline double shade_filled(const Scene& scene, double palette, Pt q) {
  double v = 0.0;
  if (inside(scene.body, q)) {
    v = palette;
    for (double y : scene.stripes)
      if (std::abs(q.y - y) <= 0.8) v = 0.1;
  }
  if (inside(scene.glyph, q)) v = 1.0;
  return v;
}

inline double shade_contour(const Scene& scene, const std::vector<Stroke>& strokes, Pt q) {
  for (const Stroke& s : strokes) {
    if (s.clip_to_body && !inside(scene.body, q)) continue;
    const std::size_t edges = s.closed ? s.points.size() : s.points.size() - 1;
    for (std::size_t i = 0; i < edges; ++i) {
      if (segment_distance(q, s.points[i], s.points[(i + 1) % s.points.size()]) <= kStroke)
        return 1.0;
    }
  }
  return 0.0;
}

/// Maps an image-space point to object coordinates under `pose`.
inline Pt to_object(Pt p, const Pose& pose, double center) {
  double x = p.x - center - pose.dx, y = p.y - center - pose.dy;
  const double a = -pose.angle_deg * std::numbers::pi / 180.0;
  const double rx = x * std::cos(a) - y * std::sin(a);
  const double ry = x * std::sin(a) + y * std::cos(a);
  return {pose.flip ? -rx : rx, ry};
}

/// 4x4 supersampled coverage of `shade` over the image grid.
template <typename Shade>
std::vector<double> rasterize(std::size_t size, const Pose& pose, Shade&& shade) {
  std::vector<double> img(size * size, 0.0);
  const double center = static_cast<double>(size) / 2.0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const Pt p{static_cast<double>(x) + (sx + 0.5) / 4.0,
                     static_cast<double>(y) + (sy + 0.5) / 4.0};
          acc += shade(to_object(p, pose, center));
        }
      img[y * size + x] = acc / 16.0;
    }
  return img;
}

/// Image-space bounding box [x0, x1] x [y0, y1] of the instance under a pose
/// with zero translation, relative to the image center. Includes the stroke
/// width and the largest jitter offset for the contour domain.
inline std::array<double, 4> posed_extent(const InstanceSpec& spec, const RenderConfig& cfg,
                                          double angle_deg, bool flip) {
  const Scene scene = make_scene(spec);
  const double a = angle_deg * std::numbers::pi / 180.0;
  std::array<double, 4> box{1e300, -1e300, 1e300, -1e300};
  for (const Polyline* poly : {&scene.body, &scene.glyph})
    for (Pt v : *poly) {
      const double x = flip ? -v.x : v.x;
      const double rx = x * std::cos(a) - v.y * std::sin(a);
      const double ry = x * std::sin(a) + v.y * std::cos(a);
      box = {std::min(box[0], rx), std::max(box[1], rx), std::min(box[2], ry), std::max(box[3], ry)};
    }
  if (cfg.domain == Domain::kContour) {
    const double grow = kStroke + kJitterClip * cfg.contour_jitter;
    box = {box[0] - grow, box[1] + grow, box[2] - grow, box[3] + grow};
  }
  return box;
}

}  // namespace detail

/// Canonical pose when aligned. Perturbed poses draw rotation and flip, then
/// a translation within +-max_translation restricted so the object keeps a
/// 1 px empty border.
inline Pose sample_pose(const InstanceSpec& spec, const RenderConfig& cfg, Rng& rng) {
  if (cfg.alignment == Alignment::kAligned) return {};
  Pose p;
  p.angle_deg = (2 * uniform01(rng) - 1) * cfg.max_rotation_deg;
  p.flip = uniform01(rng) < cfg.flip_probability;
  const auto box = detail::posed_extent(spec, cfg, p.angle_deg, p.flip);
  const double half = static_cast<double>(cfg.size) / 2.0 - 1.0;
  auto draw = [&](double lo_extent, double hi_extent) {
    const double lo = std::max(-cfg.max_translation, -half - lo_extent);
    const double hi = std::min(cfg.max_translation, half - hi_extent);
    const double u = uniform01(rng);
    return lo <= hi ? lo + u * (hi - lo) : 0.0;
  };
  p.dx = draw(box[0], box[1]);
  p.dy = draw(box[2], box[3]);
  return p;
}

/// Renders with an explicit pose; `rng` drives contour jitter and noise.
inline Tensor<float> render_with_pose(const InstanceSpec& spec, const RenderConfig& cfg,
                                      const Pose& pose, Rng& rng) {
  const detail::Scene scene = detail::make_scene(spec);
  std::vector<double> img;
  if (cfg.domain == Domain::kFilled) {
    img = detail::rasterize(cfg.size, pose,
                            [&](detail::Pt q) { return detail::shade_filled(scene, spec.palette, q); });
  } else {
    const auto strokes = detail::contour_strokes(scene, cfg.contour_jitter, rng);
    img = detail::rasterize(cfg.size, pose,
                            [&](detail::Pt q) { return detail::shade_contour(scene, strokes, q); });
  }
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0 ? cfg.noise_std : 1.0);
  Tensor<float> out(Shape{cfg.size, cfg.size, cfg.channels});
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i] + (cfg.noise_std > 0 ? noise(rng) : 0.0);
    for (std::size_t c = 0; c < cfg.channels; ++c) out[i * cfg.channels + c] = static_cast<float>(v);
  }
  return out;
}

/// Samples a pose (canonical when aligned) and renders.
inline Tensor<float> render(const InstanceSpec& spec, const RenderConfig& cfg, Rng& rng) {
  const Pose pose = sample_pose(spec, cfg, rng);
  return render_with_pose(spec, cfg, pose, rng);
}

/// Coverage mask (size x size) of the glyph region, grown by `margin` px.
inline std::vector<float> part_mask(const InstanceSpec& spec, std::size_t size, const Pose& pose = {},
                                    double margin = 1.0) {
  const detail::Scene scene = detail::make_scene(spec);
  const auto cov = detail::rasterize(size, pose, [&](detail::Pt q) {
    if (detail::inside(scene.glyph, q)) return 1.0;
    const auto& g = scene.glyph;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (detail::segment_distance(q, g[i], g[(i + 1) % g.size()]) <= margin) return 1.0;
    return 0.0;
  });
  return {cov.begin(), cov.end()};
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetItem {
  std::string path;  // relative to the dataset directory
  std::size_t instance = 0;
  Domain domain = Domain::kFilled;
  std::size_t view = 0;
  Split split = Split::kTrain;
  Tensor<float> image;
};

struct Dataset {
  Alignment mode = Alignment::kAligned;
  std::uint64_t seed = 0;
  std::vector<DatasetItem> items;

  std::vector<std::size_t> instances(Split split) const {
    std::set<std::size_t> ids;
    for (const auto& it : items)
      if (it.split == split) ids.insert(it.instance);
    return {ids.begin(), ids.end()};
  }

  std::vector<std::size_t> select(Split split, std::optional<Domain> domain = {}) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].split == split && (!domain || items[i].domain == *domain)) idx.push_back(i);
    return idx;
  }
};

struct DatasetConfig {
  std::size_t instances = 16;
  std::size_t train_instances = 8;
  Alignment mode = Alignment::kAligned;
  std::size_t renders = 1;  // per instance and domain
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  std::size_t channels = 0;  // 0: 1 for aligned, 3 for perturbed
  double noise_std = 0.02;
  double contour_jitter = 1.0;

  std::size_t resolved_channels() const {
    return channels ? channels : (mode == Alignment::kAligned ? 1 : 3);
  }
};

inline RenderConfig render_config(const DatasetConfig& dc, Domain domain) {
  RenderConfig rc;
  rc.domain = domain;
  rc.size = dc.image_size;
  rc.channels = dc.resolved_channels();
  rc.alignment = dc.mode;
  rc.noise_std = dc.noise_std;
  rc.contour_jitter = dc.contour_jitter;
  return rc;
}

inline std::string item_path(std::size_t instance, Domain domain, std::size_t view) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "images/i%03zu_%s_v%zu.cdtf", instance, to_string(domain).c_str(),
                view);
  return buf;
}

/// Renders every (instance, domain, view) item in memory. The first
/// `train_instances` generated instances form the training split. Each
/// item draws from its own stream derived from (seed, item index).
inline Dataset generate_dataset(const DatasetConfig& dc) {
  if (dc.renders == 0) throw ConfigError("renders per domain must be positive");
  if (dc.train_instances > dc.instances) {
    throw ConfigError("train_instances exceeds instances");
  }
  const auto specs = generate_instances(dc.instances, dc.seed);
  Dataset ds;
  ds.mode = dc.mode;
  ds.seed = dc.seed;
  std::size_t index = 0;
  for (const auto& spec : specs) {
    for (Domain domain : {Domain::kFilled, Domain::kContour}) {
      const RenderConfig rc = render_config(dc, domain);
      for (std::size_t view = 0; view < dc.renders; ++view, ++index) {
        Rng rng = make_rng(dc.seed, 0x1000 + index);
        DatasetItem item;
        item.path = item_path(spec.id, domain, view);
        item.instance = spec.id;
        item.domain = domain;
        item.view = view;
        item.split = spec.id < dc.train_instances ? Split::kTrain : Split::kTest;
        item.image = render(spec, rc, rng);
        ds.items.push_back(std::move(item));
      }
    }
  }
  return ds;
}

inline nlohmann::json manifest_json(const Dataset& ds) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : ds.items) {
    items.push_back({{"path", it.path},
                     {"instance", it.instance},
                     {"domain", to_string(it.domain)},
                     {"view", it.view},
                     {"split", to_string(it.split)}});
  }
  return {{"items", items}, {"mode", to_string(ds.mode)}, {"seed", ds.seed}};
}

/// Writes images as CDTF plus manifest.json; returns the manifest path.
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (const auto& it : ds.items) cdtf::write(dir / it.path, it.image);
  const auto manifest = dir / "manifest.json";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << manifest_json(ds).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + manifest.string());
  return manifest;
}

inline std::filesystem::path make_dataset(const DatasetConfig& dc, const std::filesystem::path& dir) {
  return write_dataset(generate_dataset(dc), dir);
}

/// Reads any manifest + CDTF directory, synthetic or converted from real
/// data.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.json";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
    Dataset ds;
    ds.mode = alignment_from_string(j.at("mode").get<std::string>());
    ds.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& ij : j.at("items")) {
      DatasetItem it;
      it.path = ij.at("path").get<std::string>();
      it.instance = ij.at("instance").get<std::size_t>();
      it.domain = domain_from_string(ij.at("domain").get<std::string>());
      it.view = ij.at("view").get<std::size_t>();
      it.split = split_from_string(ij.at("split").get<std::string>());
      it.image = cdtf::read<float>(dir / it.path);
      ds.items.push_back(std::move(it));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid manifest " + manifest.string() + ": " + e.what());
  }
}

}  // namespace cdim::synth
