#pragma once

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cdim/fusion.hpp"
#include "cdim/synth.hpp"

namespace cdim {

// ---------------------------------------------------------------------------
// Feature extraction

/// Verifies backbone and fusion parameters before extraction.
template <typename T>
void check_compatible(const NetworkParams<T>& params, const BackboneConfig& config,
                      const FusionSpec& spec) {
  check_compatible(params, config);
  validate(spec, config);
  if (!spec.reduce_to) return;
  const std::string w = std::string(kReduceLayer) + ".weight";
  const Shape need{mid_length(config, spec), *spec.reduce_to};
  if (!params.contains(w)) throw ConfigError("checkpoint incompatible with fusion: " + w + ": missing");
  if (params.at(w).shape() != need) {
    throw ConfigError("checkpoint incompatible with fusion: " + w + ": have " +
                      to_string(params.at(w).shape()) + ", need " + to_string(need));
  }
}

/// Row i is f_final of images[i]. Images are run in chunks; rows do not
/// depend on the chunking.
template <typename T>
Tensor<T> extract_features(const NetworkParams<T>& params, const BackboneConfig& config,
                           const FusionSpec& spec, const std::vector<const Tensor<T>*>& images,
                           std::size_t chunk = 64) {
  check_compatible(params, config, spec);
  const std::size_t d = fused_length(config, spec);
  Tensor<T> out(Shape{images.size(), d});
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t stop = std::min(images.size(), start + chunk);
    std::vector<const Tensor<T>*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                       images.begin() + static_cast<std::ptrdiff_t>(stop));
    Tape<T> tape;
    BoundParams<T> bound(tape, params);
    const Var<T> f = embed(bound, config, spec, tape.constant(concat_batches<T>(part)));
    std::copy(f.value().data().begin(), f.value().data().end(), out.data().begin() + start * d);
  }
  return out;
}

template <typename T>
Tensor<T> extract_features(const NetworkParams<T>& params, const BackboneConfig& config,
                           const FusionSpec& spec, const std::vector<Tensor<T>>& images) {
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return extract_features(params, config, spec, ptrs);
}

// ---------------------------------------------------------------------------
// Ranking and metrics

struct Ranking {
  std::vector<std::size_t> order;  // gallery indices, best first
  std::vector<double> distances;   // aligned with `order`
};

/// Ascending Euclidean distance; equal distances keep gallery order.
template <typename T>
Ranking rank_gallery(std::span<const T> query, const Tensor<T>& gallery) {
  if (gallery.rank() != 2 || gallery.dim(1) != query.size()) {
    throw ShapeError("query length " + std::to_string(query.size()) +
                     " does not match gallery " + to_string(gallery.shape()));
  }
  const std::size_t n = gallery.dim(0), d = gallery.dim(1);
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* g = gallery.data().data() + i * d;
    double ss = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(query[k]) - static_cast<double>(g[k]);
      ss += diff * diff;
    }
    dist[i] = std::sqrt(ss);
  }
  Ranking r;
  r.order.resize(n);
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  for (std::size_t i : r.order) r.distances.push_back(dist[i]);
  return r;
}

/// relevance[q][g] says whether gallery item g matches query q.
using Relevance = std::vector<std::vector<bool>>;

/// 1-based rank of the first relevant item, 0 if none.
inline std::size_t first_hit_rank(const std::vector<std::size_t>& order,
                                  const std::vector<bool>& relevant) {
  for (std::size_t r = 0; r < order.size(); ++r)
    if (relevant.at(order[r])) return r + 1;
  return 0;
}

inline double acc_at_k(const std::vector<std::vector<std::size_t>>& rankings,
                       const Relevance& relevance, std::size_t k) {
  if (k < 1) throw ConfigError("acc@K needs K >= 1");
  if (rankings.size() != relevance.size()) throw ShapeError("rankings and relevance differ in length");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::size_t r = first_hit_rank(rankings[q], relevance[q]);
    if (r != 0 && r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

/// Non-interpolated AP: mean of precision at each relevant rank. Returns
/// nullopt when the query has no relevant item.
inline std::optional<double> average_precision(const std::vector<std::size_t>& order,
                                               const std::vector<bool>& relevant) {
  std::size_t total = 0;
  for (std::size_t g : order) total += relevant.at(g) ? 1 : 0;
  if (total == 0) return std::nullopt;
  double sum = 0;
  std::size_t seen = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (relevant[order[r]]) {
      ++seen;
      sum += static_cast<double>(seen) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(total);
}

struct MapResult {
  double map = 0.0;
  std::size_t skipped_queries = 0;  // queries without any relevant item
};

inline MapResult mean_average_precision(const std::vector<std::vector<std::size_t>>& rankings,
                                        const Relevance& relevance) {
  if (rankings.size() != relevance.size()) throw ShapeError("rankings and relevance differ in length");
  MapResult out;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    if (auto ap = average_precision(rankings[q], relevance[q])) {
      sum += *ap;
      ++used;
    } else {
      ++out.skipped_queries;
    }
  }
  out.map = used ? sum / static_cast<double>(used) : 0.0;
  return out;
}

/// Mean of the rows, then L2-normalized.
template <typename T>
std::vector<T> multi_query_feature(const std::vector<std::vector<T>>& features) {
  if (features.empty()) throw ShapeError("multi-query pooling needs at least one feature");
  std::vector<T> mean(features.front().size(), T{0});
  for (const auto& f : features) {
    if (f.size() != mean.size()) throw ShapeError("multi-query features differ in length");
    for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
  }
  for (T& v : mean) v /= static_cast<T>(features.size());
  const Shape shape{mean.size()};
  const Tensor<T> pooled = kernels::l2_normalize(Tensor<T>(shape, std::move(mean)));
  return {pooled.data().begin(), pooled.data().end()};
}

// ---------------------------------------------------------------------------
// Protocol and report

struct RetrievalProtocol {
  synth::Domain query_domain = synth::Domain::kContour;
  synth::Domain gallery_domain = synth::Domain::kFilled;
  bool multi_query = false;
  synth::Split split = synth::Split::kTest;
  std::vector<std::size_t> ks{1, 5, 10};
};

struct QueryResult {
  std::string query;  // item path, or "instance:<id>" for pooled queries
  std::size_t instance = 0;
  std::vector<std::size_t> ranks;  // gallery item indices (dataset order), best first
  std::vector<double> distances;
  std::size_t first_hit_rank = 0;
  std::optional<double> ap;
};

struct RetrievalReport {
  std::vector<QueryResult> per_query;
  std::map<std::size_t, double> acc;
  double map = 0.0;
  std::size_t skipped_queries = 0;
  std::size_t gallery_instances = 0;

  double acc_at(std::size_t k) const { return acc.at(k); }
};

inline nlohmann::json to_json(const RetrievalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& q : r.per_query) {
    per.push_back({{"query", q.query},
                   {"ranks", q.ranks},
                   {"first_hit_rank", q.first_hit_rank},
                   {"ap", q.ap ? nlohmann::json(*q.ap) : nlohmann::json(nullptr)}});
  }
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [k, v] : r.acc) acc[std::to_string(k)] = v;
  return {{"per_query", per}, {"acc", acc}, {"map", r.map}, {"skipped_queries", r.skipped_queries}};
}

/// Ranks the protocol's gallery for each query of `split`. Gallery items
/// with the same (instance, domain, view) as the query are excluded.
template <typename T>
RetrievalReport evaluate_retrieval(const Tensor<T>& features, const synth::Dataset& ds,
                                   const RetrievalProtocol& protocol) {
  const auto query_items = ds.select(protocol.split, protocol.query_domain);
  const auto gallery_items = ds.select(protocol.split, protocol.gallery_domain);
  if (query_items.empty() || gallery_items.empty()) {
    throw ConfigError("protocol selects no queries or no gallery items");
  }
  const std::size_t d = features.dim(1);
  auto row = [&](std::size_t item) {
    return std::vector<T>(features.data().begin() + item * d,
                          features.data().begin() + (item + 1) * d);
  };
  Tensor<T> gallery(Shape{gallery_items.size(), d});
  std::set<std::size_t> gallery_ids;
  for (std::size_t g = 0; g < gallery_items.size(); ++g) {
    const auto r = row(gallery_items[g]);
    std::copy(r.begin(), r.end(), gallery.data().begin() + g * d);
    gallery_ids.insert(ds.items[gallery_items[g]].instance);
  }

  struct Query {
    std::string name;
    std::size_t instance;
    std::optional<std::size_t> item;
    std::vector<T> feature;
  };
  std::vector<Query> queries;
  if (protocol.multi_query) {
    std::map<std::size_t, std::vector<std::vector<T>>> pooled;
    for (std::size_t i : query_items) pooled[ds.items[i].instance].push_back(row(i));
    for (auto& [inst, feats] : pooled)
      queries.push_back({"instance:" + std::to_string(inst), inst, std::nullopt,
                         multi_query_feature(feats)});
  } else {
    for (std::size_t i : query_items)
      queries.push_back({ds.items[i].path, ds.items[i].instance, i, row(i)});
  }

  RetrievalReport report;
  report.gallery_instances = gallery_ids.size();
  std::vector<std::vector<std::size_t>> rankings;
  Relevance relevance;
  for (const Query& q : queries) {
    const Ranking r = rank_gallery(std::span<const T>(q.feature), gallery);
    QueryResult qr;
    qr.query = q.name;
    qr.instance = q.instance;
    std::vector<std::size_t> order;
    std::vector<bool> rel(gallery_items.size(), false);
    for (std::size_t pos = 0; pos < r.order.size(); ++pos) {
      const std::size_t item = gallery_items[r.order[pos]];
      if (q.item && item == *q.item) continue;
      order.push_back(r.order[pos]);
      qr.ranks.push_back(item);
      qr.distances.push_back(r.distances[pos]);
    }
    for (std::size_t g = 0; g < gallery_items.size(); ++g)
      rel[g] = ds.items[gallery_items[g]].instance == q.instance;
    qr.first_hit_rank = first_hit_rank(order, rel);
    qr.ap = average_precision(order, rel);
    rankings.push_back(std::move(order));
    relevance.push_back(std::move(rel));
    report.per_query.push_back(std::move(qr));
  }
  for (std::size_t k : protocol.ks) report.acc[k] = acc_at_k(rankings, relevance, k);
  const MapResult m = mean_average_precision(rankings, relevance);
  report.map = m.map;
  report.skipped_queries = m.skipped_queries;
  return report;
}

/// Extracts features for every item and evaluates.
template <typename T>
RetrievalReport evaluate_model(const NetworkParams<T>& params, const BackboneConfig& config,
                               const FusionSpec& spec, const synth::Dataset& ds,
                               const RetrievalProtocol& protocol) {
  std::vector<const Tensor<T>*> images;
  Tensor<T> features(Shape{ds.items.size(), fused_length(config, spec)});
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    if (ds.items[i].split != protocol.split) continue;
    used.push_back(i);
    images.push_back(&ds.items[i].image);
  }
  const Tensor<T> f = extract_features(params, config, spec, images);
  const std::size_t d = f.dim(1);
  for (std::size_t r = 0; r < used.size(); ++r) {
    std::copy(f.data().begin() + r * d, f.data().begin() + (r + 1) * d,
              features.data().begin() + used[r] * d);
  }
  return evaluate_retrieval(features, ds, protocol);
}

// ---------------------------------------------------------------------------
// Activation heatmaps

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Min-max normalizes an (H,W) map to [0,255] and resizes it bilinearly
/// (pixel centers aligned). Constant maps become all zero.
inline GrayImage heatmap_image(const std::vector<double>& map, std::size_t h, std::size_t w,
                               std::size_t out_h, std::size_t out_w) {
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  auto at = [&](std::size_t y, std::size_t x) { return range > 0 ? (map[y * w + x] - lo) / range : 0.0; };
  GrayImage img{out_w, out_h, std::vector<std::uint8_t>(out_h * out_w)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * static_cast<double>(h) /
                                         static_cast<double>(out_h) - 0.5,
                                 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * static_cast<double>(w) /
                                           static_cast<double>(out_w) - 0.5,
                                   0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                       fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      img.pixels[y * out_w + x] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  in.get();
  if (magic != "P5" || maxval != 255) throw IoError(path.string() + ": not an 8-bit P5 image");
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError(path.string() + ": truncated image data");
  return img;
}

/// The (H,W) slice of layer `tap` at `channel` for one image.
template <typename T>
std::vector<double> activation_map(const NetworkParams<T>& params, const BackboneConfig& config,
                                   const Tensor<T>& image, const std::string& tap,
                                   std::size_t channel, Shape* tap_shape = nullptr) {
  BackboneConfig probe = config;
  probe.final_layer = tap;
  probe.tap_points.clear();
  const Shape s = layer_shape(probe, tap);
  if (s.size() != 3) throw ConfigError("layer '" + tap + "' has no spatial map: " + to_string(s));
  if (channel >= s[2]) {
    throw ConfigError("channel " + std::to_string(channel) + " out of range for '" + tap +
                      "' with " + std::to_string(s[2]) + " channels");
  }
  if (tap_shape) *tap_shape = s;
  const Tensor<T> fmap = forward_with_taps(params, probe, image).final_feature;
  std::vector<double> out(s[0] * s[1]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(fmap[i * s[2] + channel]);
  return out;
}

template <typename T>
GrayImage export_activation_heatmap(const NetworkParams<T>& params, const BackboneConfig& config,
                                    const Tensor<T>& image, const std::string& tap,
                                    std::size_t channel, const std::filesystem::path& out) {
  Shape s;
  const auto map = activation_map(params, config, image, tap, channel, &s);
  GrayImage img = heatmap_image(map, s[0], s[1], config.input_shape[0], config.input_shape[1]);
  write_pgm(out, img);
  return img;
}

}  // namespace cdim
