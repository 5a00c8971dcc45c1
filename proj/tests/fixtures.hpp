#pragma once

// Small networks and helpers shared by the test binaries.

#include <random>

#include "cdim/fusion.hpp"
#include "cdim/loss.hpp"

namespace fixtures {

using cdim::BackboneConfig;
using cdim::LayerSpec;

/// 8x8x2 input, conv/pool/conv with the second conv "c2" (4x4x6) as tap,
/// flatten and a 5-wide fc. Small enough for exhaustive gradient checks.
inline BackboneConfig tiny_net() {
  BackboneConfig c;
  c.name = "tiny";
  c.input_shape = {8, 8, 2};
  c.layers = {LayerSpec::conv("c1", 3, 4, 1), LayerSpec::maxpool("p1", 2, 2),
              LayerSpec::conv("c2", 3, 6, 1), LayerSpec::flatten("flat"),
              LayerSpec::fc("f", 5)};
  c.tap_points = {"c2"};
  c.final_layer = "f";
  return c;
}

/// Tiny view-style net ending in GAP, with two same-resolution taps.
inline BackboneConfig tiny_gap_net() {
  BackboneConfig c;
  c.name = "tiny_gap";
  c.input_shape = {6, 6, 3};
  c.layers = {LayerSpec::conv("c1", 3, 4, 1), LayerSpec::maxpool("p1", 2, 2),
              LayerSpec::conv("a", 3, 4, 1), LayerSpec::conv("b", 3, 4, 1),
              LayerSpec::conv("c", 3, 5, 1), LayerSpec::gap("pool")};
  c.tap_points = {"a", "b"};
  c.final_layer = "pool";
  return c;
}

inline cdim::Tensor<float> random_image(const cdim::Shape& shape, std::uint64_t seed,
                                        std::size_t batch = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.f, 1.f);
  cdim::Shape s = shape;
  if (batch) s.insert(s.begin(), batch);
  cdim::Tensor<float> t(s);
  for (float& v : t.data()) v = n(rng);
  return t;
}

/// Biases drawn away from zero so relu units are not sitting on a kink.
inline void randomize_biases(cdim::NetworkParams<float>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.05f, 0.3f);
  for (auto& [name, t] : p.tensors)
    if (name.ends_with(".bias"))
      for (float& v : t.data()) v = (rng() & 1 ? 1.f : -1.f) * u(rng);
}

}  // namespace fixtures
