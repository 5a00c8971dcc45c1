#pragma once

#include <functional>

#include "cdim/eval.hpp"
#include "cdim/loss.hpp"

namespace cdim {

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { kSgd, kAdam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.01;
  std::optional<double> lr_decay;  // multiplier applied once per epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t max_iterations = 400;
  std::size_t batch_size = 32;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (lr_decay && !(*lr_decay > 0 && *lr_decay <= 1))
      throw ConfigError("lr_decay must be in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_iterations == 0) throw ConfigError("max_iterations must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("adam betas must be in [0, 1)");
  }

  double lr_at_epoch(std::size_t epoch) const {
    return lr_decay ? learning_rate * std::pow(*lr_decay, static_cast<double>(epoch - 1))
                    : learning_rate;
  }
};

/// Named hyperparameter profiles. "full_scale_sgd" and "full_scale_adam" keep the
/// published batch size and learning rates; the others are tuned for the
/// 32x32 presets.
inline OptimizerConfig optimizer_profile(const std::string& name) {
  OptimizerConfig c;
  if (name == "toy_sgd") {
    c.kind = OptimizerKind::kSgd;
    c.learning_rate = 0.01;
    c.batch_size = 32;
  } else if (name == "toy_adam") {
    c.kind = OptimizerKind::kAdam;
    c.learning_rate = 1e-3;
    c.lr_decay = 0.95;
    c.batch_size = 32;
  } else if (name == "full_scale_sgd") {
    c.kind = OptimizerKind::kSgd;
    c.learning_rate = 0.001;
    c.batch_size = 128;
  } else if (name == "full_scale_adam") {
    c.kind = OptimizerKind::kAdam;
    c.learning_rate = 0.00035;
    c.lr_decay = 0.95;
    c.batch_size = 32;
  } else {
    throw ConfigError("unknown optimizer profile '" + name + "'");
  }
  return c;
}

template <typename T>
void sgd_step(Tensor<T>& p, std::span<const T> g, double lr) {
  if (p.size() != g.size()) {
    throw ShapeError("sgd_step: parameter " + to_string(p.shape()) + " vs gradient of " +
                     std::to_string(g.size()) + " elements");
  }
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= static_cast<T>(lr * static_cast<double>(g[i]));
}

template <typename T>
void sgd_step(Tensor<T>& p, const Tensor<T>& g, double lr) {
  if (p.shape() != g.shape()) {
    throw ShapeError("sgd_step: parameter " + to_string(p.shape()) + " vs gradient " +
                     to_string(g.shape()));
  }
  sgd_step(p, g.data(), lr);
}

/// Steps every tensor that carries a gradient.
template <typename T>
void sgd_step(NetworkParams<T>& params, double lr) {
  for (auto& [_, p] : params.tensors)
    if (p.has_grad()) sgd_step(p, std::as_const(p).grad(), lr);
}

template <typename T>
struct AdamState {
  std::size_t step = 0;  // last completed step index
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// One bias-corrected Adam update at step index t (1-based).
template <typename T>
void adam_step(NetworkParams<T>& params, AdamState<T>& state, const OptimizerConfig& cfg,
               std::size_t t, double lr) {
  if (t == 0) throw ConfigError("adam step index must be >= 1");
  if (t > 1 && state.step != t - 1) {
    throw ConfigError("adam state is uninitialized for step " + std::to_string(t) +
                      " (last step " + std::to_string(state.step) + ")");
  }
  if (t == 1) {
    state.m.clear();
    state.v.clear();
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, p] : params.tensors) {
    if (!p.has_grad()) continue;
    auto [mit, fresh] = state.m.try_emplace(name, p.shape());
    auto vit = state.v.try_emplace(name, p.shape()).first;
    if (!fresh && mit->second.shape() != p.shape()) {
      throw ShapeError("adam state for '" + name + "' has shape " + to_string(mit->second.shape()));
    }
    const std::span<const T> g = std::as_const(p).grad();
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
  state.step = t;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class FlipPolicy { kJoint, kIndependent };

inline std::string to_string(FlipPolicy p) { return p == FlipPolicy::kJoint ? "joint" : "independent"; }

inline FlipPolicy flip_policy_from_string(const std::string& s) {
  if (s == "joint") return FlipPolicy::kJoint;
  if (s == "independent") return FlipPolicy::kIndependent;
  throw ConfigError("unknown flip policy '" + s + "' (expected joint or independent)");
}

struct AugmentConfig {
  double flip_probability = 0.5;
  FlipPolicy flip_policy = FlipPolicy::kJoint;
  std::optional<std::pair<std::size_t, std::size_t>> crop;  // (H, W)

  void validate() const {
    if (!(flip_probability >= 0 && flip_probability <= 1))
      throw ConfigError("flip_probability must be in [0, 1]");
    if (crop && (crop->first == 0 || crop->second == 0))
      throw ConfigError("crop target must be positive");
  }
};

template <typename T>
Tensor<T> hflip(const Tensor<T>& image) {
  if (image.rank() != 3) throw ShapeError("hflip expects (H,W,C), got " + to_string(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tensor<T> out(image.shape());
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < C; ++c) out[(h * W + w) * C + c] = image[(h * W + (W - 1 - w)) * C + c];
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& image, std::size_t top, std::size_t left, std::size_t h,
               std::size_t w) {
  if (image.rank() != 3 || top + h > image.dim(0) || left + w > image.dim(1)) {
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                     std::to_string(top) + "," + std::to_string(left) + ") exceeds " +
                     to_string(image.shape()));
  }
  const std::size_t W = image.dim(1), C = image.dim(2);
  Tensor<T> out(Shape{h, w, C});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(y * w + x) * C + c] = image[((top + y) * W + left + x) * C + c];
  return out;
}

/// Test-time counterpart of the random crop.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& image, std::size_t h, std::size_t w) {
  if (image.rank() != 3 || h > image.dim(0) || w > image.dim(1))
    throw ShapeError("center crop larger than image " + to_string(image.shape()));
  return crop(image, (image.dim(0) - h) / 2, (image.dim(1) - w) / 2, h, w);
}

/// Applies a given flip decision and then the random crop.
template <typename T>
Tensor<T> augment_with_flip(const Tensor<T>& image, bool flip, const AugmentConfig& cfg, Rng& rng) {
  Tensor<T> out = flip ? hflip(image) : image;
  if (cfg.crop) {
    const auto [h, w] = *cfg.crop;
    if (h > out.dim(0) || w > out.dim(1))
      throw ShapeError("crop target larger than image " + to_string(out.shape()));
    const std::size_t top = uniform_index(rng, out.dim(0) - h + 1);
    const std::size_t left = uniform_index(rng, out.dim(1) - w + 1);
    out = crop(out, top, left, h, w);
  }
  return out;
}

inline bool flip_coin(const AugmentConfig& cfg, Rng& rng) {
  return cfg.flip_probability > 0 && uniform01(rng) < cfg.flip_probability;
}

template <typename T>
Tensor<T> augment(const Tensor<T>& image, const AugmentConfig& cfg, Rng& rng) {
  const bool flip = flip_coin(cfg, rng);
  return augment_with_flip(image, flip, cfg, rng);
}

struct AugmentedTriplet {
  std::array<bool, 3> flipped{};
};

/// Augments q, p+ and p- in place. Joint: one coin for the triplet.
/// Independent: one coin per image.
template <typename T>
AugmentedTriplet augment_triplet(std::array<Tensor<T>, 3>& images, const AugmentConfig& cfg,
                                 Rng& rng) {
  AugmentedTriplet info;
  const bool shared = flip_coin(cfg, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    info.flipped[i] = cfg.flip_policy == FlipPolicy::kJoint ? shared : (i == 0 ? shared : flip_coin(cfg, rng));
    images[i] = augment_with_flip(images[i], info.flipped[i], cfg, rng);
  }
  return info;
}

// ---------------------------------------------------------------------------
// Triplet sampling

struct TripletIndex {
  std::size_t q = 0, p_plus = 0, p_minus = 0;  // dataset item indices
};

/// Draws (q, p+, p-) item triplets: q from the query domain, p+ a view of
/// the same instance in the gallery domain, p- a gallery-domain view of a
/// uniformly chosen other instance.
class TripletSampler {
 public:
  TripletSampler(const synth::Dataset& ds, std::vector<std::size_t> instances,
                 synth::Domain query = synth::Domain::kContour,
                 synth::Domain gallery = synth::Domain::kFilled)
      : instances_(std::move(instances)) {
    std::sort(instances_.begin(), instances_.end());
    instances_.erase(std::unique(instances_.begin(), instances_.end()), instances_.end());
    if (instances_.size() < 2) {
      throw ConfigError("triplet sampling needs at least 2 instances, got " +
                        std::to_string(instances_.size()));
    }
    const std::set<std::size_t> wanted(instances_.begin(), instances_.end());
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
      const auto& it = ds.items[i];
      if (!wanted.count(it.instance)) continue;
      if (it.domain == query) query_items_[it.instance].push_back(i);
      if (it.domain == gallery) gallery_items_[it.instance].push_back(i);
    }
    for (std::size_t inst : instances_) {
      if (query_items_[inst].empty() || gallery_items_[inst].empty()) {
        throw ConfigError("instance " + std::to_string(inst) + " lacks a " +
                          synth::to_string(query) + " or " + synth::to_string(gallery) + " image");
      }
    }
  }

  const std::vector<std::size_t>& instances() const { return instances_; }

  TripletIndex sample(std::size_t q_instance, Rng& rng) const {
    const auto& qs = query_items_.at(q_instance);
    const auto& ps = gallery_items_.at(q_instance);
    const std::size_t self = static_cast<std::size_t>(
        std::lower_bound(instances_.begin(), instances_.end(), q_instance) - instances_.begin());
    std::size_t k = uniform_index(rng, instances_.size() - 1);
    if (k >= self) ++k;
    const std::size_t neg = instances_[k];
    const auto& ns = gallery_items_.at(neg);
    TripletIndex t;
    t.q = qs[uniform_index(rng, qs.size())];
    t.p_plus = ps[uniform_index(rng, ps.size())];
    t.p_minus = ns[uniform_index(rng, ns.size())];
    return t;
  }

  TripletIndex sample(Rng& rng) const {
    return sample(instances_[uniform_index(rng, instances_.size())], rng);
  }

 private:
  std::vector<std::size_t> instances_;
  std::map<std::size_t, std::vector<std::size_t>> query_items_;
  std::map<std::size_t, std::vector<std::size_t>> gallery_items_;
};

inline std::vector<TripletIndex> sample_triplets(const synth::Dataset& ds,
                                                 const std::vector<std::size_t>& instances,
                                                 std::size_t count, Rng& rng) {
  const TripletSampler sampler(ds, instances);
  std::vector<TripletIndex> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(sampler.sample(rng));
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

struct EarlyStopConfig {
  bool enabled = true;
  double validation_fraction = 0.2;
  std::size_t patience = 10;

  void validate() const {
    if (patience < 1) throw ConfigError("early-stop patience must be >= 1");
    if (!(validation_fraction > 0 && validation_fraction < 1))
      throw ConfigError("validation_fraction must be in (0, 1)");
  }
};

struct TrainLogRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;  // iterations completed so far
  double loss = 0.0;          // mean training loss over the epoch
  std::optional<double> val_acc1;
  double lr = 0.0;
  std::optional<double> train_acc;
};

inline nlohmann::json to_json(const TrainLogRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"iteration", r.iteration},
                   {"loss", r.loss},
                   {"val_acc1", r.val_acc1 ? nlohmann::json(*r.val_acc1) : nlohmann::json(nullptr)},
                   {"lr", r.lr}};
  if (r.train_acc) j["train_acc"] = *r.train_acc;
  return j;
}

template <typename T>
struct TrainResult {
  NetworkParams<T> params;
  std::vector<TrainLogRecord> log;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_acc1;
  std::size_t iterations = 0;
  double initial_loss = 0.0;  // loss of the first batch, before any step
};

template <typename T>
struct TrainHooks {
  std::optional<NetworkParams<T>> initial_params;
  /// Called after every epoch with the log record and the current parameters.
  std::function<void(const TrainLogRecord&, const NetworkParams<T>&)> on_epoch;
};

namespace detail {

inline constexpr std::uint64_t kShuffleStream = 0x73687566ull;
inline constexpr std::uint64_t kBatchStream = 0x62617463ull;
inline constexpr std::uint64_t kValStream = 0x76616c31ull;

inline std::vector<std::size_t> shuffled(std::vector<std::size_t> v, Rng&& rng) {
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

/// Rng for element `j` of the batch at iteration `it`; independent of how
/// batches are assembled.
inline Rng item_rng(std::uint64_t seed, std::size_t it, std::size_t j) {
  return make_rng(derive_seed(seed, kBatchStream + it), j);
}

template <typename T>
void check_finite(T loss, std::size_t epoch, std::size_t it) {
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericalError("training diverged: loss is " + std::to_string(static_cast<double>(loss)) +
                         " at epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it));
  }
}

template <typename T>
void apply_step(NetworkParams<T>& params, AdamState<T>& adam, const OptimizerConfig& opt,
                std::size_t t, double lr) {
  if (opt.kind == OptimizerKind::kSgd) {
    sgd_step(params, lr);
  } else {
    adam_step(params, adam, opt, t, lr);
  }
}

}  // namespace detail

/// Splits training instances into fit and validation parts.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const std::vector<std::size_t>& instances, const EarlyStopConfig& es, std::uint64_t seed) {
  if (!es.enabled) return {instances, {}};
  es.validate();
  std::vector<std::size_t> order = detail::shuffled(instances, make_rng(seed, detail::kValStream));
  std::size_t n_val = static_cast<std::size_t>(
      std::lround(es.validation_fraction * static_cast<double>(instances.size())));
  n_val = std::max<std::size_t>(n_val, 2);
  if (instances.size() < n_val + 2) {
    throw ConfigError("too few training instances (" + std::to_string(instances.size()) +
                      ") for a validation split");
  }
  std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  order.resize(order.size() - n_val);
  std::sort(order.begin(), order.end());
  std::sort(val.begin(), val.end());
  return {order, val};
}

/// acc@1 of query-domain items against gallery-domain items restricted to
/// `instances` of the training split.
template <typename T>
double validation_acc1(const NetworkParams<T>& params, const BackboneConfig& config,
                       const FusionSpec& spec, const synth::Dataset& ds,
                       const std::vector<std::size_t>& instances) {
  synth::Dataset sub;
  sub.mode = ds.mode;
  const std::set<std::size_t> keep(instances.begin(), instances.end());
  for (const auto& it : ds.items) {
    if (it.split != synth::Split::kTrain || !keep.count(it.instance)) continue;
    sub.items.push_back(it);
    sub.items.back().split = synth::Split::kTest;
  }
  RetrievalProtocol protocol;
  protocol.ks = {1};
  return evaluate_model(params, config, spec, sub, protocol).acc_at(1);
}

template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<T>>& images) {
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return concat_batches(ptrs);
}

/// Siamese triplet training: sample, augment, shared-weight forward, fuse,
/// triplet loss, backward, step. Returns the parameters with the best
/// validation acc@1 when early stopping is enabled, the last ones otherwise.
template <typename T = float>
TrainResult<T> train_triplet_model(const synth::Dataset& ds, const BackboneConfig& config,
                                   const FusionSpec& spec, const OptimizerConfig& opt,
                                   const AugmentConfig& aug, const EarlyStopConfig& es,
                                   std::uint64_t seed, const TrainHooks<T>& hooks = {},
                                   T margin = static_cast<T>(kDefaultMargin)) {
  opt.validate();
  aug.validate();
  validate(spec, config);
  TrainResult<T> result;
  NetworkParams<T> params = hooks.initial_params ? *hooks.initial_params : build_backbone<T>(config, seed);
  init_fusion_params(params, config, spec, seed);
  params.set_requires_grad(true);

  const auto [fit, val] = split_validation(ds.instances(synth::Split::kTrain), es, seed);
  const TripletSampler sampler(ds, fit);
  AdamState<T> adam;
  std::size_t it = 0, since_best = 0;
  NetworkParams<T> best;
  for (std::size_t epoch = 1; it < opt.max_iterations; ++epoch) {
    const double lr = opt.lr_at_epoch(epoch);
    const auto order = detail::shuffled(sampler.instances(), make_rng(seed, detail::kShuffleStream + epoch));
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size() && it < opt.max_iterations; start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      std::array<std::vector<Tensor<T>>, 3> slots;
      for (std::size_t j = start; j < stop; ++j) {
        Rng rng = detail::item_rng(seed, it, j - start);
        const TripletIndex t = sampler.sample(order[j], rng);
        std::array<Tensor<T>, 3> imgs{ds.items[t.q].image.template cast<T>(),
                                      ds.items[t.p_plus].image.template cast<T>(),
                                      ds.items[t.p_minus].image.template cast<T>()};
        augment_triplet(imgs, aug, rng);
        for (std::size_t s = 0; s < 3; ++s) slots[s].push_back(std::move(imgs[s]));
      }
      params.zero_grad();
      Tape<T> tape;
      BoundParams<T> bound(tape, params);
      auto out = triplet_forward(bound, config, stack_images(slots[0]), stack_images(slots[1]),
                                 stack_images(slots[2]));
      std::array<Var<T>, 3> f;
      for (std::size_t s = 0; s < 3; ++s) f[s] = fuse(out[s].final_feature, out[s].taps, spec, bound);
      const Var<T> loss = triplet_ranking_loss(f[0], f[1], f[2], margin);
      const T value = loss.value().item();
      detail::check_finite(value, epoch, it);
      if (it == 0) result.initial_loss = static_cast<double>(value);
      tape.backward(loss);
      ++it;
      detail::apply_step(params, adam, opt, it, lr);
      loss_sum += static_cast<double>(value);
      ++batches;
    }
    TrainLogRecord rec{epoch, it, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)),
                       std::nullopt, lr, std::nullopt};
    if (!val.empty()) {
      rec.val_acc1 = validation_acc1(params, config, spec, ds, val);
      if (!result.best_val_acc1 || *rec.val_acc1 > *result.best_val_acc1) {
        result.best_val_acc1 = rec.val_acc1;
        result.best_epoch = epoch;
        best = params;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, params);
    if (!val.empty() && since_best >= es.patience) break;
  }
  result.iterations = it;
  result.params = val.empty() ? std::move(params) : std::move(best);
  result.params.set_requires_grad(false);
  if (val.empty()) result.best_epoch = result.log.size();
  return result;
}

/// Identity classification training over every training-split image of both
/// domains. Labels are the rank of the instance id among training
/// instances; the classifier head is stored as "head.*" in the result.
template <typename T = float>
TrainResult<T> train_classification_model(const synth::Dataset& ds, const BackboneConfig& config,
                                          const FusionSpec& spec, const OptimizerConfig& opt,
                                          const AugmentConfig& aug, std::uint64_t seed,
                                          const TrainHooks<T>& hooks = {}) {
  opt.validate();
  aug.validate();
  validate(spec, config);
  const std::vector<std::size_t> ids = ds.instances(synth::Split::kTrain);
  const ClassifierHead head{fused_length(config, spec), ids.size()};
  head.validate();
  std::map<std::size_t, std::size_t> label_of;
  for (std::size_t k = 0; k < ids.size(); ++k) label_of[ids[k]] = k;

  TrainResult<T> result;
  NetworkParams<T> params = hooks.initial_params ? *hooks.initial_params : build_backbone<T>(config, seed);
  init_fusion_params(params, config, spec, seed);
  if (!params.contains(std::string(kHeadLayer) + ".weight")) init_head(params, head, seed);
  params.set_requires_grad(true);

  const std::vector<std::size_t> items = ds.select(synth::Split::kTrain);
  AdamState<T> adam;
  std::size_t it = 0;
  for (std::size_t epoch = 1; it < opt.max_iterations; ++epoch) {
    const double lr = opt.lr_at_epoch(epoch);
    const auto order = detail::shuffled(items, make_rng(seed, detail::kShuffleStream + epoch));
    double loss_sum = 0;
    std::size_t batches = 0, correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size() && it < opt.max_iterations; start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      std::vector<Tensor<T>> images;
      std::vector<std::size_t> labels;
      for (std::size_t j = start; j < stop; ++j) {
        Rng rng = detail::item_rng(seed, it, j - start);
        images.push_back(augment(ds.items[order[j]].image.template cast<T>(), aug, rng));
        labels.push_back(label_of.at(ds.items[order[j]].instance));
      }
      params.zero_grad();
      Tape<T> tape;
      BoundParams<T> bound(tape, params);
      const Var<T> f = embed(bound, config, spec, tape.constant(stack_images(images)));
      const Var<T> logits = fully_connected(f, bound(std::string(kHeadLayer) + ".weight"),
                                            bound(std::string(kHeadLayer) + ".bias"));
      const Var<T> loss = softmax_cross_entropy(logits, std::span<const std::size_t>(labels));
      const T value = loss.value().item();
      detail::check_finite(value, epoch, it);
      if (it == 0) result.initial_loss = static_cast<double>(value);
      const Tensor<T>& z = logits.value();
      for (std::size_t r = 0; r < labels.size(); ++r) {
        const auto row = z.data().subspan(r * head.num_classes, head.num_classes);
        correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[r];
      }
      seen += labels.size();
      tape.backward(loss);
      ++it;
      detail::apply_step(params, adam, opt, it, lr);
      loss_sum += static_cast<double>(value);
      ++batches;
    }
    TrainLogRecord rec{epoch, it, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)),
                       std::nullopt, lr, static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(seen, 1))};
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, params);
  }
  result.iterations = it;
  result.best_epoch = result.log.size();
  result.params = std::move(params);
  result.params.set_requires_grad(false);
  return result;
}

}  // namespace cdim
