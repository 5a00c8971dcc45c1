#pragma once

// Finite-difference checks of whole models: image -> backbone -> fuse ->
// loss, differentiated with respect to each parameter tensor.

#include "cdim/experiment.hpp"
#include "cdim/gradcheck.hpp"

namespace cdim {

struct ParamCheck {
  std::string name;
  GradCheckResult result;
};

struct ModelCheck {
  Objective objective = Objective::kTriplet;
  std::vector<ParamCheck> params;
  std::size_t near_kinks = 0;  // in the draw that was checked
  std::size_t draws = 0;

  double max_relative_error() const {
    double m = 0;
    for (const auto& p : params) m = std::max(m, p.result.max_relative_error);
    return m;
  }
  std::size_t checked() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.result.checked;
    return n;
  }
};

struct ModelCheckOptions {
  std::size_t coordinates_per_tensor = 0;  // 0: every coordinate
  double h = 1e-6;
  std::size_t classes = 4;                 // classification batch size and K
  double scale_floor = 1e-3;               // see gradient_check
  double kink_margin = 1e-2;
  std::size_t max_draws = 200;
};

namespace detail {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(n(rng));
  return t;
}

/// Relu pre-activations with |z| < margin plus max-pool windows whose two
/// largest entries are closer than margin. Near such points the float
/// forward pass loses most of its relative precision.
template <typename T>
std::size_t count_near_kinks(const NetworkParams<T>& p, const BackboneConfig& c,
                             const Tensor<T>& images, double margin) {
  const std::size_t final_index = c.index_of(c.final_layer);
  auto count_relu = [&](Tensor<T>& z) {
    std::size_t n = 0;
    for (T& v : z.data()) {
      n += std::abs(static_cast<double>(v)) < margin;
      v = std::max(v, T{0});
    }
    return n;
  };
  std::size_t n = 0;
  Tensor<T> x = images;
  for (std::size_t i = 0; i <= final_index; ++i) {
    const LayerSpec& l = c.layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        x = kernels::conv2d(x, p.at(l.name + ".weight"), p.at(l.name + ".bias"), l.stride, l.padding);
        if (l.relu) n += count_relu(x);
        break;
      case LayerKind::kMaxPool: {
        const auto g = kernels::pool_geometry(x, l.window, l.stride);
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t oh = 0; oh < g.out_h; ++oh)
            for (std::size_t ow = 0; ow < g.out_w; ++ow)
              for (std::size_t ch = 0; ch < g.c; ++ch) {
                double top = -INFINITY, second = -INFINITY;
                for (std::size_t kh = 0; kh < l.window; ++kh)
                  for (std::size_t kw = 0; kw < l.window; ++kw) {
                    const double v = x[((b * g.in_h + oh * l.stride + kh) * g.in_w + ow * l.stride + kw) * g.c + ch];
                    if (v > top) {
                      second = top;
                      top = v;
                    } else if (v > second) {
                      second = v;
                    }
                  }
                n += top - second < margin;
              }
        x = kernels::maxpool2d(x, l.window, l.stride);
        break;
      }
      case LayerKind::kGap:
        x = kernels::global_average_pool(x);
        break;
      case LayerKind::kFlatten:
        x = Tensor<T>(Shape{x.dim(0), x.size() / x.dim(0)}, std::vector<T>(x.data().begin(), x.data().end()));
        break;
      case LayerKind::kFc:
        x = kernels::fully_connected(x, p.at(l.name + ".weight"), p.at(l.name + ".bias"));
        if (l.relu) n += count_relu(x);
        break;
    }
  }
  return n;
}

}  // namespace detail

/// Checks the gradient of the triplet or classification loss with respect
/// to every parameter tensor of `config` (plus reduce and head layers).
/// Inputs are standard-normal images and biases are drawn away from zero;
/// draws that put a relu or max near its kink are resampled. The triplet
/// margin is large enough to keep the hinge active.
template <typename T = float>
ModelCheck check_model_gradients(const BackboneConfig& config, const FusionSpec& spec,
                                 Objective objective, std::uint64_t seed,
                                 const ModelCheckOptions& opt = {}) {
  const BackboneConfig c = with_taps_for(config, spec);
  NetworkParams<T> base = build_backbone<T>(c, seed);
  init_fusion_params(base, c, spec, seed);
  Rng rng = make_rng(seed, 0x636865636bull);
  std::uniform_real_distribution<double> mag(0.05, 0.3);
  Shape batch_shape = c.input_shape;
  batch_shape.insert(batch_shape.begin(), objective == Objective::kTriplet ? 3 : opt.classes);

  // Redraw biases and images until no relu or max sits within kink_margin
  // of its kink, keeping the cleanest draw if the cap is reached.
  Tensor<T> images;
  ModelCheck out;
  out.near_kinks = SIZE_MAX;
  for (std::size_t d = 0; d < std::max<std::size_t>(opt.max_draws, 1) && out.near_kinks; ++d) {
    NetworkParams<T> p = base;
    for (auto& [name, t] : p.tensors) {
      if (!name.ends_with(".bias")) continue;
      for (T& v : t.data()) v = static_cast<T>((rng() & 1 ? 1.0 : -1.0) * mag(rng));
    }
    Tensor<T> im = detail::normal_tensor<T>(batch_shape, rng);
    const std::size_t kinks =
        detail::count_near_kinks(p.template cast<double>(), c, im.template cast<double>(), opt.kink_margin);
    ++out.draws;
    if (kinks < out.near_kinks) {
      out.near_kinks = kinks;
      images = std::move(im);
      for (auto& [name, t] : p.tensors)
        if (name.ends_with(".bias")) base.tensors.at(name) = t;
    }
  }
  std::vector<std::size_t> labels(opt.classes);
  std::iota(labels.begin(), labels.end(), std::size_t{0});
  if (objective == Objective::kClassification) {
    init_head(base, ClassifierHead{fused_length(c, spec), opt.classes}, seed);
    // the default head is near zero; scale it so the backbone gradients are not vanishingly small
    for (T& v : base.tensors.at(std::string(kHeadLayer) + ".weight").data()) v *= T(30);
  }

  out.objective = objective;
  for (const auto& [name, tensor] : base.tensors) {
    auto loss_of = [&, name = name](auto w) {
      using U = typename decltype(w)::value_type;
      const NetworkParams<U> params = base.template cast<U>();
      BoundParams<U> bound(w.tape(), params);
      bound.bind(name, w);
      const Var<U> f = embed(bound, c, spec, w.tape().constant(images.template cast<U>()));
      if (objective == Objective::kClassification) {
        return identity_classification_loss(f, bound, std::span<const std::size_t>(labels));
      }
      return triplet_ranking_loss(slice_rows(f, 0, 1), slice_rows(f, 1, 2), slice_rows(f, 2, 3), U(5));
    };
    std::vector<std::size_t> coords;
    if (opt.coordinates_per_tensor && opt.coordinates_per_tensor < tensor.size()) {
      coords.resize(tensor.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coordinates_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    out.params.push_back({name, gradient_check(loss_of, tensor, opt.h, std::span<const std::size_t>(coords), opt.scale_floor)});
  }
  return out;
}

inline nlohmann::json to_json(const ModelCheck& m) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& p : m.params) per[p.name] = p.result.max_relative_error;
  return {{"objective", to_string(m.objective)},
          {"max_relative_error", m.max_relative_error()},
          {"checked", m.checked()},
          {"near_kinks", m.near_kinks},
          {"draws", m.draws},
          {"per_tensor", per}};
}

}  // namespace cdim
