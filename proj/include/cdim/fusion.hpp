#pragma once

#include <optional>

#include "cdim/backbone.hpp"

namespace cdim {

enum class Pooling { kFlatten, kGap };

inline std::string to_string(Pooling p) { return p == Pooling::kFlatten ? "flatten" : "gap"; }

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "flatten") return Pooling::kFlatten;
  if (s == "gap") return Pooling::kGap;
  throw ConfigError("unknown pooling mode '" + s + "' (expected flatten or gap)");
}

struct TapPooling {
  std::string tap;
  Pooling mode = Pooling::kFlatten;
  friend bool operator==(const TapPooling&, const TapPooling&) = default;
};

/// Which mid-layer taps join the final feature and how.
///
/// Pooled tap vectors are concatenated in order, optionally projected to
/// `reduce_to` by a learned affine layer ("reduce.weight", "reduce.bias"),
/// and then the mid block and the final block are each L2-normalized
/// (when `normalize_blocks`) and joined mid-then-final. With no taps the
/// result is the normalized final feature alone.
struct FusionSpec {
  std::vector<TapPooling> taps;
  std::optional<std::size_t> reduce_to;
  bool normalize_blocks = true;

  bool empty() const { return taps.empty(); }
  friend bool operator==(const FusionSpec&, const FusionSpec&) = default;
};

inline constexpr const char* kReduceLayer = "reduce";
inline constexpr std::uint64_t kReduceSeedStream = 0x7265647563ull;

inline std::size_t pooled_length(const Shape& tap_shape, Pooling mode) {
  if (tap_shape.size() != 3) {
    throw ShapeError("tap must be an (H,W,C) feature map, got " + to_string(tap_shape));
  }
  return mode == Pooling::kFlatten ? num_elements(tap_shape) : tap_shape[2];
}

/// Length of the concatenated pooled taps, before any reduction.
inline std::size_t mid_length(const BackboneConfig& config, const FusionSpec& spec) {
  const std::vector<Shape> shapes = infer_shapes(config);
  std::size_t n = 0;
  for (const TapPooling& t : spec.taps) n += pooled_length(shapes[config.index_of(t.tap)], t.mode);
  return n;
}

inline void validate(const FusionSpec& spec, const BackboneConfig& config) {
  for (const TapPooling& t : spec.taps) {
    if (std::find(config.tap_points.begin(), config.tap_points.end(), t.tap) ==
        config.tap_points.end()) {
      throw ConfigError("fusion tap '" + t.tap + "' is not a tap point of backbone '" +
                        config.name + "'");
    }
  }
  if (spec.reduce_to) {
    if (spec.taps.empty()) throw ConfigError("reduce_to set but no taps are fused");
    const std::size_t mid = mid_length(config, spec);
    if (*spec.reduce_to == 0 || *spec.reduce_to > mid) {
      throw ConfigError("reduce_to " + std::to_string(*spec.reduce_to) +
                        " must be in [1, " + std::to_string(mid) + "]");
    }
  }
}

inline std::size_t fused_length(const BackboneConfig& config, const FusionSpec& spec) {
  validate(spec, config);
  const std::size_t final_len = num_elements(layer_shape(config, config.final_layer));
  if (spec.taps.empty()) return final_len;
  return spec.reduce_to.value_or(mid_length(config, spec)) + final_len;
}

/// Adds the reduction layer's parameters when the spec asks for one and
/// `params` does not have them yet.
template <typename T>
void init_fusion_params(NetworkParams<T>& params, const BackboneConfig& config,
                        const FusionSpec& spec, std::uint64_t seed) {
  validate(spec, config);
  if (!spec.reduce_to || params.contains(std::string(kReduceLayer) + ".weight")) return;
  const std::size_t mid = mid_length(config, spec);
  init_affine(params, kReduceLayer, Shape{mid, *spec.reduce_to}, mid, seed, kReduceSeedStream);
}

/// Turns an (H,W,C) tap (or an (N,H,W,C) batch of taps) into a vector.
template <typename T>
Var<T> pool_mid(Var<T> tap, Pooling mode) {
  const std::size_t rank = tap.value().rank();
  if (rank != 3 && rank != 4) {
    throw ShapeError("pool_mid expects an (H,W,C) feature map, got " + to_string(tap.shape()));
  }
  return mode == Pooling::kFlatten ? flatten(tap) : global_average_pool(tap);
}

template <typename T>
Var<T> fuse(Var<T> final_feature, const std::map<std::string, Var<T>>& taps,
            const FusionSpec& spec, BoundParams<T>& params) {
  Var<T> final_block =
      spec.normalize_blocks ? l2_normalize(final_feature) : final_feature;
  if (spec.taps.empty()) return final_block;
  std::vector<Var<T>> mids;
  for (const TapPooling& t : spec.taps) {
    auto it = taps.find(t.tap);
    if (it == taps.end()) throw ConfigError("fusion tap '" + t.tap + "' missing from forward output");
    mids.push_back(pool_mid(it->second, t.mode));
  }
  Var<T> mid = mids.size() == 1 ? mids.front() : concatenate(mids);
  if (spec.reduce_to) {
    mid = fully_connected(mid, params(std::string(kReduceLayer) + ".weight"),
                          params(std::string(kReduceLayer) + ".bias"));
  }
  if (spec.normalize_blocks) mid = l2_normalize(mid);
  return concatenate<T>({mid, final_block});
}

/// Backbone plus fusion on one tape: image (or batch) -> f_final.
template <typename T>
Var<T> embed(BoundParams<T>& params, const BackboneConfig& config, const FusionSpec& spec,
             Var<T> image) {
  const BackboneOutput<T> out = forward_with_taps(params, config, image);
  return fuse(out.final_feature, out.taps, spec, params);
}

/// Evaluation-time fusion on fixed parameters. Applied to a model trained
/// without fusion, the taps receive no supervision from the matching loss;
/// the arithmetic is identical to `fuse`. Missing reduction parameters are
/// initialized from `seed` as an untrained projection.
template <typename T>
Tensor<T> fuse_frozen(const NetworkParams<T>& trained, const BackboneConfig& config,
                      const FusionSpec& spec, const Tensor<T>& image, std::uint64_t seed = 0) {
  validate(spec, config);
  const NetworkParams<T>* params = &trained;
  NetworkParams<T> completed;
  if (spec.reduce_to && !trained.contains(std::string(kReduceLayer) + ".weight")) {
    completed = trained;
    init_fusion_params(completed, config, spec, seed);
    params = &completed;
  }
  Tape<T> tape;
  BoundParams<T> bound(tape, *params);
  return embed(bound, config, spec, tape.constant(image)).value();
}

/// Backbone config whose tap points are exactly the taps `spec` fuses.
inline BackboneConfig with_taps_for(BackboneConfig config, const FusionSpec& spec) {
  config.tap_points.clear();
  for (const TapPooling& t : spec.taps) config.tap_points.push_back(t.tap);
  infer_shapes(config);
  return config;
}

inline nlohmann::json to_json(const FusionSpec& spec) {
  nlohmann::json taps = nlohmann::json::array();
  for (const auto& t : spec.taps) taps.push_back({{"tap", t.tap}, {"pooling", to_string(t.mode)}});
  nlohmann::json j{{"taps", taps}, {"normalize_blocks", spec.normalize_blocks}};
  j["reduce_to"] = spec.reduce_to ? nlohmann::json(*spec.reduce_to) : nlohmann::json(nullptr);
  return j;
}

inline FusionSpec fusion_from_json(const nlohmann::json& j) {
  try {
    FusionSpec spec;
    for (const auto& t : j.value("taps", nlohmann::json::array())) {
      spec.taps.push_back({t.at("tap").get<std::string>(),
                           pooling_from_string(t.value("pooling", std::string("flatten")))});
    }
    if (j.contains("reduce_to") && !j.at("reduce_to").is_null())
      spec.reduce_to = j.at("reduce_to").get<std::size_t>();
    spec.normalize_blocks = j.value("normalize_blocks", true);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid fusion spec: ") + e.what());
  }
}

}  // namespace cdim
