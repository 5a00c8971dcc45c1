#pragma once

#include <array>
#include <map>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cdim/ops.hpp"
#include "cdim/random.hpp"

namespace cdim {

enum class LayerKind { kConv, kMaxPool, kGap, kFlatten, kFc };

inline std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kGap: return "gap";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kFc: return "fc";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::kConv;
  if (s == "maxpool") return LayerKind::kMaxPool;
  if (s == "gap") return LayerKind::kGap;
  if (s == "flatten") return LayerKind::kFlatten;
  if (s == "fc") return LayerKind::kFc;
  throw ConfigError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  std::size_t kernel = 0;        // conv: square kernel size
  std::size_t out_channels = 0;  // conv: Cout; fc: output width
  std::size_t in_features = 0;   // fc: declared input width, 0 = inferred
  std::size_t stride = 1;        // conv and maxpool
  std::size_t padding = 0;       // conv
  std::size_t window = 0;        // maxpool
  bool relu = false;             // conv and fc

  static LayerSpec conv(std::string name, std::size_t kernel, std::size_t out_channels,
                        std::size_t padding, bool relu = true, std::size_t stride = 1) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::kConv;
    l.kernel = kernel;
    l.out_channels = out_channels;
    l.padding = padding;
    l.relu = relu;
    l.stride = stride;
    return l;
  }
  static LayerSpec maxpool(std::string name, std::size_t window, std::size_t stride) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::kMaxPool;
    l.window = window;
    l.stride = stride;
    return l;
  }
  static LayerSpec gap(std::string name) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::kGap;
    return l;
  }
  static LayerSpec flatten(std::string name) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::kFlatten;
    return l;
  }
  static LayerSpec fc(std::string name, std::size_t out, bool relu = false,
                      std::size_t in_features = 0) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::kFc;
    l.out_channels = out;
    l.relu = relu;
    l.in_features = in_features;
    return l;
  }

  bool has_params() const { return kind == LayerKind::kConv || kind == LayerKind::kFc; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct BackboneConfig {
  std::string name;
  Shape input_shape;  // (H, W, C)
  std::vector<LayerSpec> layers;
  std::vector<std::string> tap_points;
  std::string final_layer;

  std::size_t index_of(const std::string& layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == layer) return i;
    throw ConfigError("no layer named '" + layer + "' in backbone '" + name + "'");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Output shape (without batch axis) of every layer; validates the config.
inline std::vector<Shape> infer_shapes(const BackboneConfig& config) {
  if (config.input_shape.size() != 3) {
    throw ConfigError("backbone input shape must be (H,W,C), got " +
                      to_string(config.input_shape));
  }
  for (std::size_t d : config.input_shape)
    if (d == 0) throw ConfigError("backbone input shape has a zero dimension");
  std::set<std::string> names;
  for (const LayerSpec& l : config.layers) {
    if (l.name.empty()) throw ConfigError("layer with empty name");
    if (!names.insert(l.name).second) throw ConfigError("duplicate layer name '" + l.name + "'");
  }
  const std::size_t final_index = config.index_of(config.final_layer);
  for (const std::string& tap : config.tap_points) {
    if (config.index_of(tap) >= final_index) {
      throw ConfigError("tap point '" + tap + "' does not precede final layer '" +
                        config.final_layer + "'");
    }
  }

  std::vector<Shape> shapes;
  Shape cur = config.input_shape;
  std::string prev = "input";
  auto fail = [&](const LayerSpec& l, const std::string& why) {
    throw ConfigError("layer '" + l.name + "' is incompatible with '" + prev + "' output " +
                      to_string(cur) + ": " + why);
  };
  for (const LayerSpec& l : config.layers) {
    switch (l.kind) {
      case LayerKind::kConv: {
        if (cur.size() != 3) fail(l, "conv needs an (H,W,C) input");
        if (l.kernel == 0 || l.out_channels == 0 || l.stride == 0)
          fail(l, "conv kernel, channels and stride must be positive");
        if (l.kernel > cur[0] + 2 * l.padding || l.kernel > cur[1] + 2 * l.padding)
          fail(l, "kernel larger than padded input");
        cur = {(cur[0] + 2 * l.padding - l.kernel) / l.stride + 1,
               (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1, l.out_channels};
        break;
      }
      case LayerKind::kMaxPool: {
        if (cur.size() != 3) fail(l, "maxpool needs an (H,W,C) input");
        if (l.window == 0 || l.stride == 0) fail(l, "window and stride must be positive");
        if (l.window > cur[0] || l.window > cur[1]) fail(l, "window larger than input");
        cur = {(cur[0] - l.window) / l.stride + 1, (cur[1] - l.window) / l.stride + 1, cur[2]};
        break;
      }
      case LayerKind::kGap:
        if (cur.size() != 3) fail(l, "gap needs an (H,W,C) input");
        cur = {cur[2]};
        break;
      case LayerKind::kFlatten:
        cur = {num_elements(cur)};
        break;
      case LayerKind::kFc:
        if (cur.size() != 1) fail(l, "fc needs a flat input");
        if (l.out_channels == 0) fail(l, "fc output width must be positive");
        if (l.in_features != 0 && l.in_features != cur[0]) {
          fail(l, "declared input width " + std::to_string(l.in_features) + " but receives " +
                      std::to_string(cur[0]));
        }
        cur = {l.out_channels};
        break;
    }
    shapes.push_back(cur);
    prev = l.name;
  }
  return shapes;
}

inline Shape layer_shape(const BackboneConfig& config, const std::string& layer) {
  return infer_shapes(config).at(config.index_of(layer));
}

/// Learnable tensors keyed "<layer>.weight" / "<layer>.bias"; also holds
/// fusion and classifier parameters when a model has them.
template <typename T>
struct NetworkParams {
  std::map<std::string, Tensor<T>> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : tensors) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : tensors) t.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (const auto& [k, t] : tensors) out.tensors.emplace(k, t.template cast<U>());
    return out;
  }

  /// Equality of names, shapes and values (gradients ignored).
  friend bool operator==(const NetworkParams& a, const NetworkParams& b) {
    return a.tensors == b.tensors;
  }
};

/// He-normal weights with std sqrt(2 / fan_in), zero bias.
template <typename T>
void init_affine(NetworkParams<T>& params, const std::string& layer, Shape weight_shape,
                 std::size_t fan_in, std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  const std::size_t out = weight_shape.back();
  Tensor<T> w(std::move(weight_shape));
  for (T& v : w.data()) v = static_cast<T>(normal(rng));
  params.tensors[layer + ".weight"] = std::move(w);
  params.tensors[layer + ".bias"] = Tensor<T>(Shape{out});
}

template <typename T = float>
NetworkParams<T> build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  const std::vector<Shape> shapes = infer_shapes(config);
  NetworkParams<T> params;
  Shape in = config.input_shape;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    if (l.kind == LayerKind::kConv) {
      init_affine(params, l.name, Shape{l.kernel, l.kernel, in[2], l.out_channels},
                  l.kernel * l.kernel * in[2], seed, i);
    } else if (l.kind == LayerKind::kFc) {
      init_affine(params, l.name, Shape{in[0], l.out_channels}, in[0], seed, i);
    }
    in = shapes[i];
  }
  return params;
}

/// Throws when `params` lacks a tensor the config needs or has the wrong
/// shape; the message lists every mismatch.
template <typename T>
void check_compatible(const NetworkParams<T>& params, const BackboneConfig& config) {
  const NetworkParams<float> expected = build_backbone<float>(config, 0);
  std::string problems;
  for (const auto& [name, t] : expected.tensors) {
    if (!params.contains(name)) {
      problems += " " + name + ": missing;";
    } else if (params.at(name).shape() != t.shape()) {
      problems += " " + name + ": have " + to_string(params.at(name).shape()) + ", need " +
                  to_string(t.shape()) + ";";
    }
  }
  if (!problems.empty()) throw ConfigError("checkpoint incompatible with backbone:" + problems);
}

/// Binds parameters onto a tape once, so every branch of a multi-branch
/// forward pass reads the same leaves.
template <typename T>
class BoundParams {
 public:
  /// Trainable binding: tensors with requires_grad receive gradients.
  BoundParams(Tape<T>& tape, NetworkParams<T>& params)
      : tape_(&tape), params_(&params), mutable_(&params) {}
  /// Frozen binding: values enter as constants.
  BoundParams(Tape<T>& tape, const NetworkParams<T>& params) : tape_(&tape), params_(&params) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = mutable_ ? tape_->parameter(mutable_->at(name)) : tape_->constant(params_->at(name));
    bound_.emplace(name, v);
    return v;
  }

  /// Routes `name` to an existing variable instead of a stored tensor.
  void bind(const std::string& name, Var<T> v) { bound_.insert_or_assign(name, v); }

  bool contains(const std::string& name) const { return params_->contains(name); }
  Tape<T>& tape() const { return *tape_; }

 private:
  Tape<T>* tape_;
  const NetworkParams<T>* params_;
  NetworkParams<T>* mutable_ = nullptr;
  std::map<std::string, Var<T>> bound_;
};

template <typename T>
struct BackboneOutput {
  Var<T> final_feature;
  std::map<std::string, Var<T>> taps;
};

/// Runs the layers up to the final layer on an (H,W,C) image or an
/// (N,H,W,C) batch, exporting the configured tap outputs.
template <typename T>
BackboneOutput<T> forward_with_taps(BoundParams<T>& params, const BackboneConfig& config,
                                    Var<T> image) {
  const Shape& s = image.shape();
  const bool batched = s.size() == 4;
  const Shape spatial = batched ? Shape(s.begin() + 1, s.end()) : s;
  if (spatial != config.input_shape) {
    throw ShapeError("image shape " + to_string(s) + " does not match backbone input " +
                     to_string(config.input_shape));
  }
  const std::size_t final_index = config.index_of(config.final_layer);
  const std::set<std::string> taps(config.tap_points.begin(), config.tap_points.end());
  BackboneOutput<T> out;
  Var<T> x = image;
  for (std::size_t i = 0; i <= final_index; ++i) {
    const LayerSpec& l = config.layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        x = conv2d(x, params(l.name + ".weight"), params(l.name + ".bias"), l.stride, l.padding);
        if (l.relu) x = relu(x);
        break;
      case LayerKind::kMaxPool:
        x = maxpool2d(x, l.window, l.stride);
        break;
      case LayerKind::kGap:
        x = global_average_pool(x);
        break;
      case LayerKind::kFlatten:
        x = flatten(x);
        break;
      case LayerKind::kFc:
        x = fully_connected(x, params(l.name + ".weight"), params(l.name + ".bias"), l.relu);
        break;
    }
    if (taps.count(l.name)) out.taps.emplace(l.name, x);
  }
  out.final_feature = x;
  return out;
}

template <typename T>
struct BackboneValues {
  Tensor<T> final_feature;
  std::map<std::string, Tensor<T>> taps;
};

/// Evaluation-only forward pass on plain tensors.
template <typename T>
BackboneValues<T> forward_with_taps(const NetworkParams<T>& params, const BackboneConfig& config,
                                    const Tensor<T>& image) {
  Tape<T> tape;
  BoundParams<T> bound(tape, params);
  const BackboneOutput<T> out = forward_with_taps(bound, config, tape.constant(image));
  BackboneValues<T> values{out.final_feature.value(), {}};
  for (const auto& [name, v] : out.taps) values.taps.emplace(name, v.value());
  return values;
}

/// Stacks images (each (H,W,C) or (N,H,W,C)) into one batch.
template <typename T>
Tensor<T> concat_batches(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("no images to batch");
  std::vector<T> data;
  std::size_t n = 0;
  Shape inner;
  for (const Tensor<T>* p : parts) {
    const bool batched = p->rank() == 4;
    const Shape s = batched ? Shape(p->shape().begin() + 1, p->shape().end()) : p->shape();
    if (inner.empty()) inner = s;
    if (s != inner) {
      throw ShapeError("batch shape mismatch: " + to_string(inner) + " vs " + to_string(s));
    }
    n += batched ? p->dim(0) : 1;
    data.insert(data.end(), p->data().begin(), p->data().end());
  }
  Shape shape{n};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Evaluates q, p+ and p- through one shared-weight network. The three
/// slots are run as one batch, so all branches read the same parameter
/// leaves and their gradients accumulate together. Each slot may be a
/// single image or a batch of equal size.
template <typename T>
std::array<BackboneOutput<T>, 3> triplet_forward(BoundParams<T>& params,
                                                 const BackboneConfig& config,
                                                 const Tensor<T>& q, const Tensor<T>& p_plus,
                                                 const Tensor<T>& p_minus) {
  if (q.shape() != p_plus.shape() || q.shape() != p_minus.shape()) {
    throw ShapeError("triplet slots differ in shape: " + to_string(q.shape()) + ", " +
                     to_string(p_plus.shape()) + ", " + to_string(p_minus.shape()));
  }
  const bool batched = q.rank() == 4;
  const std::size_t b = batched ? q.dim(0) : 1;
  Tape<T>& tape = params.tape();
  Var<T> all = tape.constant(concat_batches<T>({&q, &p_plus, &p_minus}));
  BackboneOutput<T> joint = forward_with_taps(params, config, all);
  std::array<BackboneOutput<T>, 3> out;
  auto split = [&](Var<T> v, std::size_t slot) {
    Var<T> rows = slice_rows(v, slot * b, (slot + 1) * b);
    if (batched) return rows;
    Shape single(rows.shape().begin() + 1, rows.shape().end());
    return reshape(rows, single);
  };
  for (std::size_t slot = 0; slot < 3; ++slot) {
    out[slot].final_feature = split(joint.final_feature, slot);
    for (const auto& [name, v] : joint.taps) out[slot].taps.emplace(name, split(v, slot));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Presets

/// Pose-aligned sketch-network analog: three conv/relu/pool stages, the
/// third pooled map "conv3" (4x4x64) as tap, and a 64-wide fc embedding.
inline BackboneConfig mini_aligned_net() {
  BackboneConfig c;
  c.name = "mini_aligned_net";
  c.input_shape = {32, 32, 1};
  c.layers = {
      LayerSpec::conv("conv1", 5, 16, 2),  LayerSpec::maxpool("pool1", 2, 2),
      LayerSpec::conv("conv2", 3, 32, 1),  LayerSpec::maxpool("pool2", 2, 2),
      LayerSpec::conv("conv3_pre", 3, 64, 1), LayerSpec::maxpool("conv3", 2, 2),
      LayerSpec::flatten("flatten"),       LayerSpec::fc("fc_final", 64, false, 1024),
  };
  c.tap_points = {"conv3"};
  c.final_layer = "fc_final";
  return c;
}

/// View-varying residual-network analog without skip connections: two
/// conv/relu/pool stages, then three same-resolution conv units blockA,
/// blockB, blockC; the final feature is the GAP of blockC ("pool5").
inline BackboneConfig mini_view_net() {
  BackboneConfig c;
  c.name = "mini_view_net";
  c.input_shape = {32, 32, 3};
  c.layers = {
      LayerSpec::conv("conv1", 3, 16, 1),  LayerSpec::maxpool("pool1", 2, 2),
      LayerSpec::conv("conv2", 3, 32, 1),  LayerSpec::maxpool("pool2", 2, 2),
      LayerSpec::conv("blockA", 3, 64, 1), LayerSpec::conv("blockB", 3, 64, 1),
      LayerSpec::conv("blockC", 3, 64, 1), LayerSpec::gap("pool5"),
  };
  c.tap_points = {"blockA", "blockB"};
  c.final_layer = "pool5";
  return c;
}

inline std::vector<std::string> preset_names() { return {"mini_aligned_net", "mini_view_net"}; }

inline BackboneConfig preset(const std::string& name) {
  if (name == "mini_aligned_net") return mini_aligned_net();
  if (name == "mini_view_net") return mini_view_net();
  throw ConfigError("unknown backbone preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const LayerSpec& l) {
  nlohmann::json j{{"name", l.name}, {"kind", to_string(l.kind)}};
  switch (l.kind) {
    case LayerKind::kConv:
      j["kernel"] = l.kernel;
      j["out_channels"] = l.out_channels;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      j["relu"] = l.relu;
      break;
    case LayerKind::kMaxPool:
      j["window"] = l.window;
      j["stride"] = l.stride;
      break;
    case LayerKind::kFc:
      j["out_features"] = l.out_channels;
      j["in_features"] = l.in_features;
      j["relu"] = l.relu;
      break;
    default:
      break;
  }
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.name = j.at("name").get<std::string>();
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.kernel = j.value("kernel", std::size_t{0});
  l.out_channels = l.kind == LayerKind::kFc ? j.value("out_features", std::size_t{0})
                                            : j.value("out_channels", std::size_t{0});
  l.in_features = j.value("in_features", std::size_t{0});
  l.stride = j.value("stride", std::size_t{1});
  l.padding = j.value("padding", std::size_t{0});
  l.window = j.value("window", std::size_t{0});
  l.relu = j.value("relu", false);
  return l;
}

inline nlohmann::json to_json(const BackboneConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers) layers.push_back(to_json(l));
  return {{"name", c.name},
          {"input_shape", c.input_shape},
          {"layers", layers},
          {"tap_points", c.tap_points},
          {"final_layer", c.final_layer}};
}

/// Accepts a preset name string or an inline config object.
inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
  if (j.is_string()) return preset(j.get<std::string>());
  try {
    BackboneConfig c;
    c.name = j.value("name", std::string("custom"));
    c.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& lj : j.at("layers")) c.layers.push_back(layer_from_json(lj));
    c.tap_points = j.value("tap_points", std::vector<std::string>{});
    c.final_layer = j.at("final_layer").get<std::string>();
    infer_shapes(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid backbone config: ") + e.what());
  }
}

}  // namespace cdim
