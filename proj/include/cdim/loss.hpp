#pragma once

#include "cdim/backbone.hpp"

namespace cdim {

inline constexpr double kDefaultMargin = 0.3;

template <typename T>
struct TripletBatch {
  Tensor<T> q;
  Tensor<T> p_plus;
  Tensor<T> p_minus;
  std::optional<std::size_t> q_instance;
  std::optional<std::size_t> p_plus_instance;
  std::optional<std::size_t> p_minus_instance;
};

/// max(0, margin + d(q, p+) - d(q, p-)) with Euclidean d, averaged over
/// rows when the features are batched.
template <typename T>
Var<T> triplet_ranking_loss(Var<T> fq, Var<T> fp_plus, Var<T> fp_minus,
                            T margin = static_cast<T>(kDefaultMargin)) {
  if (fq.shape() != fp_plus.shape() || fq.shape() != fp_minus.shape()) {
    throw ShapeError("triplet feature shapes differ: " + to_string(fq.shape()) + ", " +
                     to_string(fp_plus.shape()) + ", " + to_string(fp_minus.shape()));
  }
  Var<T> gap = sub(euclidean_distance(fq, fp_plus), euclidean_distance(fq, fp_minus));
  return mean(relu(affine(gap, T{1}, margin)));
}

/// Plain-value form for evaluation and tests.
template <typename T>
T triplet_ranking_loss(std::span<const T> fq, std::span<const T> fp_plus,
                       std::span<const T> fp_minus, T margin = static_cast<T>(kDefaultMargin)) {
  if (fq.size() != fp_plus.size() || fq.size() != fp_minus.size()) {
    throw ShapeError("triplet feature lengths differ");
  }
  const T v = margin + kernels::euclidean_distance(fq, fp_plus) -
              kernels::euclidean_distance(fq, fp_minus);
  return std::max(v, T{0});
}

inline constexpr const char* kHeadLayer = "head";

/// Identity classifier over fused features: logits = f W + b, W is (D, K).
struct ClassifierHead {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;

  void validate() const {
    if (num_classes < 2) {
      throw ConfigError("classifier needs at least 2 identities, got " +
                        std::to_string(num_classes));
    }
    if (feature_dim == 0) throw ConfigError("classifier feature width must be positive");
  }
};

/// Adds "head.weight" (D,K) and "head.bias" (K). Weights are small so the
/// initial softmax is close to uniform.
template <typename T>
void init_head(NetworkParams<T>& params, const ClassifierHead& head, std::uint64_t seed) {
  head.validate();
  Rng rng = make_rng(seed, 0x68656164ull);
  std::normal_distribution<double> normal(0.0, 0.01);
  Tensor<T> w(Shape{head.feature_dim, head.num_classes});
  for (T& v : w.data()) v = static_cast<T>(normal(rng));
  params.tensors[std::string(kHeadLayer) + ".weight"] = std::move(w);
  params.tensors[std::string(kHeadLayer) + ".bias"] = Tensor<T>(Shape{head.num_classes});
}

/// Cross-entropy of softmax(f W + b) against identity labels.
template <typename T>
Var<T> identity_classification_loss(Var<T> f_final, Var<T> weights, Var<T> bias,
                                    std::span<const std::size_t> labels) {
  if (weights.shape().size() != 2 || weights.shape()[1] < 2) {
    throw ConfigError("classifier head needs K >= 2 classes");
  }
  return softmax_cross_entropy(fully_connected(f_final, weights, bias), labels);
}

template <typename T>
Var<T> identity_classification_loss(Var<T> f_final, BoundParams<T>& params,
                                    std::span<const std::size_t> labels) {
  return identity_classification_loss(f_final, params(std::string(kHeadLayer) + ".weight"),
                                      params(std::string(kHeadLayer) + ".bias"), labels);
}

}  // namespace cdim
