#include <gtest/gtest.h>

#include "cdim/gradcheck.hpp"
#include "fixtures.hpp"

using namespace cdim;

namespace {

Tensor<float> run_final(const NetworkParams<float>& p, const BackboneConfig& c, const Tensor<float>& x) {
  return forward_with_taps(p, c, x).final_feature;
}

/// Random shape-valid config: conv stages with optional pooling, ending in
/// gap or flatten+fc.
BackboneConfig random_config(std::mt19937_64& rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  BackboneConfig c;
  c.name = "random";
  c.input_shape = {pick(6, 14), pick(6, 14), pick(1, 3)};
  std::size_t h = c.input_shape[0], w = c.input_shape[1];
  const std::size_t stages = pick(1, 3);
  for (std::size_t s = 0; s < stages; ++s) {
    const std::size_t k = std::min({pick(1, 3), h, w});
    const std::size_t pad = pick(0, k / 2);
    const std::size_t stride = pick(1, 2);
    c.layers.push_back(LayerSpec::conv("conv" + std::to_string(s), k, pick(1, 5), pad, pick(0, 1), stride));
    h = (h + 2 * pad - k) / stride + 1;
    w = (w + 2 * pad - k) / stride + 1;
    if (h >= 2 && w >= 2 && pick(0, 1)) {
      c.layers.push_back(LayerSpec::maxpool("pool" + std::to_string(s), 2, pick(1, 2)));
      h = (h - 2) / c.layers.back().stride + 1;
      w = (w - 2) / c.layers.back().stride + 1;
    }
  }
  c.tap_points = {c.layers.front().name};
  if (pick(0, 1)) {
    c.layers.push_back(LayerSpec::gap("gap"));
  } else {
    c.layers.push_back(LayerSpec::flatten("flat"));
    c.layers.push_back(LayerSpec::fc("fc", pick(1, 6), pick(0, 1)));
  }
  c.final_layer = c.layers.back().name;
  return c;
}

}  // namespace

TEST(Presets, AlignedNetShapes) {
  const auto c = mini_aligned_net();
  EXPECT_EQ(layer_shape(c, "conv3"), (Shape{4, 4, 64}));
  EXPECT_EQ(layer_shape(c, c.final_layer), (Shape{64}));
  const auto p = build_backbone(c, 1);
  EXPECT_EQ(p.at("fc_final.weight").shape(), (Shape{1024, 64}));
  const auto out = forward_with_taps(p, c, Tensor<float>(Shape{32, 32, 1}, 0.5f));
  ASSERT_EQ(out.taps.size(), 1u);
  EXPECT_EQ(out.taps.at("conv3").shape(), (Shape{4, 4, 64}));
  EXPECT_EQ(out.final_feature.shape(), (Shape{64}));
}

TEST(Presets, ViewNetShapes) {
  const auto c = mini_view_net();
  EXPECT_EQ(layer_shape(c, "blockA"), (Shape{8, 8, 64}));
  EXPECT_EQ(layer_shape(c, "blockB"), (Shape{8, 8, 64}));
  EXPECT_EQ(layer_shape(c, c.final_layer), (Shape{64}));
  const auto out = forward_with_taps(build_backbone(c, 1), c, Tensor<float>(Shape{32, 32, 3}, 0.1f));
  EXPECT_EQ(out.taps.size(), 2u);
  EXPECT_EQ(out.final_feature.shape(), (Shape{64}));
}

TEST(Presets, LookupByName) {
  for (const auto& name : preset_names()) EXPECT_EQ(preset(name).name, name);
  EXPECT_THROW(preset("no_such_net"), ConfigError);
}

TEST(Build, SameSeedIsBitIdentical) {
  const auto c = mini_aligned_net();
  EXPECT_EQ(build_backbone(c, 42), build_backbone(c, 42));
  EXPECT_FALSE(build_backbone(c, 42) == build_backbone(c, 43));
}

TEST(Build, HeInitialization) {
  const auto p = build_backbone(mini_aligned_net(), 5);
  const auto& w = p.at("fc_final.weight");  // fan_in 1024
  double s = 0, ss = 0;
  for (float v : w.data()) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w.size());
  const double mean = s / n, sd = std::sqrt(ss / n - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.003);
  EXPECT_NEAR(sd, std::sqrt(2.0 / 1024.0), 0.03 * std::sqrt(2.0 / 1024.0));
  for (const auto& [name, t] : p.tensors) {
    if (name.ends_with(".bias")) {
      for (float v : t.data()) EXPECT_EQ(v, 0.f);
    }
  }
}

TEST(Build, FcWidthMismatchNamesLayerPair) {
  auto c = mini_aligned_net();
  c.layers.back().in_features = 512;
  try {
    build_backbone(c, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("fc_final"), std::string::npos) << msg;
    EXPECT_NE(msg.find("flatten"), std::string::npos) << msg;
  }
}

TEST(Build, InvalidConfigs) {
  auto dup = mini_aligned_net();
  dup.layers[1].name = "conv1";
  EXPECT_THROW(infer_shapes(dup), ConfigError);

  auto late_tap = mini_aligned_net();
  late_tap.tap_points = {"fc_final"};
  EXPECT_THROW(infer_shapes(late_tap), ConfigError);

  auto missing = mini_aligned_net();
  missing.tap_points = {"conv9"};
  EXPECT_THROW(infer_shapes(missing), ConfigError);

  auto conv_after_flat = mini_aligned_net();
  conv_after_flat.layers.insert(conv_after_flat.layers.begin() + 7, LayerSpec::conv("bad", 3, 4, 1));
  EXPECT_THROW(infer_shapes(conv_after_flat), ConfigError);
}

TEST(Build, CheckCompatibleListsMismatches) {
  auto c = mini_aligned_net();
  auto p = build_backbone(c, 1);
  p.tensors["conv2.weight"] = Tensor<float>(Shape{3, 3, 16, 8});
  p.tensors.erase("fc_final.bias");
  try {
    check_compatible(p, c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("conv2.weight"), std::string::npos) << msg;
    EXPECT_NE(msg.find("fc_final.bias"), std::string::npos) << msg;
  }
}

TEST(ShapePropagation, AgreesWithForwardOnRandomConfigs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_config(rng);
    const auto shapes = infer_shapes(c);
    const auto p = build_backbone(c, static_cast<std::uint64_t>(trial));
    Tape<float> tape;
    BoundParams<float> bound(tape, p);
    BackboneConfig all = c;
    all.tap_points.clear();
    for (std::size_t i = 0; i + 1 < c.layers.size(); ++i) all.tap_points.push_back(c.layers[i].name);
    const auto out = forward_with_taps(bound, all, tape.constant(fixtures::random_image(c.input_shape, trial)));
    for (const auto& [name, v] : out.taps) EXPECT_EQ(v.shape(), shapes[c.index_of(name)]) << name;
    EXPECT_EQ(out.final_feature.shape(), shapes.back()) << to_json(c).dump();
  }
}

TEST(Forward, ZeroImageZeroBiasGivesZeros) {
  const auto c = mini_aligned_net();
  const auto out = forward_with_taps(build_backbone(c, 3), c, Tensor<float>(Shape{32, 32, 1}));
  for (float v : out.taps.at("conv3").data()) EXPECT_EQ(v, 0.f);
  for (float v : out.final_feature.data()) EXPECT_EQ(v, 0.f);
}

TEST(Forward, WrongInputShapeThrows) {
  const auto c = mini_aligned_net();
  EXPECT_THROW(forward_with_taps(build_backbone(c, 1), c, Tensor<float>(Shape{32, 32, 3})), ShapeError);
}

TEST(Forward, ParamsAfterTapDoNotChangeTap) {
  const auto c = mini_aligned_net();
  auto p = build_backbone(c, 1);
  const auto x = fixtures::random_image(c.input_shape, 2);
  const auto before = forward_with_taps(p, c, x);
  p.at("fc_final.weight")[17] += 1.f;
  const auto after = forward_with_taps(p, c, x);
  EXPECT_EQ(before.taps.at("conv3"), after.taps.at("conv3"));
  EXPECT_FALSE(before.final_feature == after.final_feature);
}

TEST(Forward, BatchRowsMatchSingleImages) {
  const auto c = mini_view_net();
  const auto p = build_backbone(c, 4);
  const auto batch = fixtures::random_image(c.input_shape, 8, 3);
  Tape<float> tape;
  BoundParams<float> bound(tape, p);
  const auto out = forward_with_taps(bound, c, tape.constant(batch));
  for (std::size_t i = 0; i < 3; ++i) {
    const auto single = run_final(p, c, slice_rows(batch, i, i + 1).reshaped(c.input_shape));
    const auto row = slice_rows(out.final_feature.value(), i, i + 1).reshaped(single.shape());
    EXPECT_EQ(row, single);
  }
}

TEST(Triplet, IdenticalImagesGiveIdenticalBranches) {
  const auto c = mini_aligned_net();
  const auto p = build_backbone(c, 1);
  const auto x = fixtures::random_image(c.input_shape, 3);
  Tape<float> tape;
  BoundParams<float> bound(tape, p);
  const auto out = triplet_forward(bound, c, x, x, x);
  EXPECT_EQ(out[0].final_feature.value(), out[1].final_feature.value());
  EXPECT_EQ(out[0].final_feature.value(), out[2].final_feature.value());
  EXPECT_EQ(out[1].taps.at("conv3").value(), out[2].taps.at("conv3").value());
  EXPECT_EQ(out[0].final_feature.value(), run_final(p, c, x));
}

TEST(Triplet, SwappingSlotsSwapsOutputs) {
  const auto c = mini_aligned_net();
  const auto p = build_backbone(c, 1);
  const auto q = fixtures::random_image(c.input_shape, 1);
  const auto a = fixtures::random_image(c.input_shape, 2);
  const auto b = fixtures::random_image(c.input_shape, 3);
  Tape<float> tape;
  BoundParams<float> bound(tape, p);
  const auto x = triplet_forward(bound, c, q, a, b);
  const auto y = triplet_forward(bound, c, q, b, a);
  EXPECT_EQ(x[1].final_feature.value(), y[2].final_feature.value());
  EXPECT_EQ(x[2].final_feature.value(), y[1].final_feature.value());
  EXPECT_EQ(x[0].final_feature.value(), y[0].final_feature.value());
}

TEST(Triplet, RejectsMismatchedSlots) {
  const auto c = fixtures::tiny_net();
  const auto p = build_backbone(c, 1);
  Tape<float> tape;
  BoundParams<float> bound(tape, p);
  EXPECT_THROW(triplet_forward(bound, c, Tensor<float>(Shape{8, 8, 2}), Tensor<float>(Shape{8, 8, 2}),
                               Tensor<float>(Shape{1, 8, 8, 2})),
               ShapeError);
}

TEST(Triplet, SharedParameterGradientMatchesFiniteDifferences) {
  const auto c = fixtures::tiny_net();
  auto base = build_backbone(c, 7);
  fixtures::randomize_biases(base, 8);
  const auto q = fixtures::random_image(c.input_shape, 1);
  const auto pp = fixtures::random_image(c.input_shape, 2);
  const auto pn = fixtures::random_image(c.input_shape, 3);
  const FusionSpec spec{{{"c2", Pooling::kFlatten}}, std::nullopt, true};

  for (const std::string name : {"c1.weight", "f.weight"}) {
    auto loss_of = [&](auto w) {
      using U = typename decltype(w)::value_type;
      const NetworkParams<U> params = base.template cast<U>();
      BoundParams<U> bound(w.tape(), params);
      bound.bind(name, w);
      auto out = triplet_forward(bound, c, q.cast<U>(), pp.cast<U>(), pn.cast<U>());
      std::array<Var<U>, 3> f;
      for (int i = 0; i < 3; ++i) f[i] = fuse(out[i].final_feature, out[i].taps, spec, bound);
      // large margin keeps the hinge active
      return triplet_ranking_loss(f[0], f[1], f[2], U(5));
    };
    const auto r = gradient_check(loss_of, base.at(name), 1e-6);
    EXPECT_LT(r.max_relative_error, 1e-3) << name << " worst " << r.worst_index << " analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst;
  }
}

TEST(Triplet, BranchesAccumulateIntoSharedParams) {
  // With q, p+, p- all different, the shared gradient is the sum of the
  // gradients each branch would produce with the others held constant.
  const auto c = fixtures::tiny_net();
  auto p = build_backbone(c, 2);
  fixtures::randomize_biases(p, 3);
  p.set_requires_grad(true);
  const auto q = fixtures::random_image(c.input_shape, 4);
  const auto a = fixtures::random_image(c.input_shape, 5);
  const auto b = fixtures::random_image(c.input_shape, 6);
  Tape<float> tape;
  BoundParams<float> bound(tape, p);
  const auto out = triplet_forward(bound, c, q, a, b);
  tape.backward(triplet_ranking_loss(out[0].final_feature, out[1].final_feature, out[2].final_feature, 10.f));
  const std::vector<float> shared(p.at("c1.weight").grad().begin(), p.at("c1.weight").grad().end());

  std::vector<double> summed(shared.size(), 0.0);
  const std::array<const Tensor<float>*, 3> imgs{&q, &a, &b};
  for (int branch = 0; branch < 3; ++branch) {
    p.zero_grad();
    Tape<float> t2;
    BoundParams<float> live(t2, p);
    const NetworkParams<float> frozen_copy = p;
    BoundParams<float> frozen(t2, frozen_copy);
    std::array<Var<float>, 3> f;
    for (int s = 0; s < 3; ++s) {
      auto& bp = s == branch ? live : frozen;
      f[s] = forward_with_taps(bp, c, t2.constant(*imgs[s])).final_feature;
    }
    t2.backward(triplet_ranking_loss(f[0], f[1], f[2], 10.f));
    for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += p.at("c1.weight").grad()[i];
  }
  for (std::size_t i = 0; i < shared.size(); ++i) EXPECT_NEAR(shared[i], summed[i], 1e-5) << i;
}

TEST(DeepSupervision, MidPathCarriesGradientToConv1) {
  const auto c = fixtures::tiny_net();
  auto base = build_backbone(c, 3);
  fixtures::randomize_biases(base, 4);
  const auto q = fixtures::random_image(c.input_shape, 11);
  const auto pp = fixtures::random_image(c.input_shape, 12);
  const auto pn = fixtures::random_image(c.input_shape, 13);
  const FusionSpec spec{{{"c2", Pooling::kFlatten}}, std::nullopt, true};
  const std::vector<std::size_t> coord{5};
  // Gradient of the mid block alone: the final block is dropped by
  // weighting only the first mid_length coordinates.
  const std::size_t mid = mid_length(c, spec);
  auto mid_only = [&](auto w) {
    using U = typename decltype(w)::value_type;
    const NetworkParams<U> params = base.template cast<U>();
    BoundParams<U> bound(w.tape(), params);
    bound.bind("c1.weight", w);
    auto out = triplet_forward(bound, c, q.cast<U>(), pp.cast<U>(), pn.cast<U>());
    std::array<Var<U>, 3> f;
    Tensor<U> mask(Shape{mid + 5});
    for (std::size_t i = 0; i < mid; ++i) mask[i] = U(1);
    for (int i = 0; i < 3; ++i)
      f[i] = mul(fuse(out[i].final_feature, out[i].taps, spec, bound), w.tape().constant(mask));
    return triplet_ranking_loss(f[0], f[1], f[2], U(5));
  };
  const auto r = gradient_check(mid_only, base.at("c1.weight"), 1e-6, coord);
  EXPECT_GT(std::abs(r.numeric_at_worst), 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(Json, ConfigRoundTrip) {
  for (const auto& name : preset_names()) {
    const auto c = preset(name);
    EXPECT_EQ(backbone_from_json(to_json(c)), c);
    EXPECT_EQ(backbone_from_json(nlohmann::json(name)), c);
  }
  EXPECT_THROW(backbone_from_json(nlohmann::json::parse(R"({"layers": []})")), ConfigError);
}
