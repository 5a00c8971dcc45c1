#include <gtest/gtest.h>

#include <filesystem>

#include "cdim/checkpoint.hpp"
#include "cdim/train.hpp"
#include "fixtures.hpp"

using namespace cdim;

namespace {

using Orders = std::vector<std::vector<std::size_t>>;

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> o(n);
  std::iota(o.begin(), o.end(), std::size_t{0});
  return o;
}

/// Area under the stepwise precision-recall curve: sum over cutoffs of
/// (recall gain) x (precision at that cutoff).
double pr_area(const std::vector<std::size_t>& order, const std::vector<bool>& rel) {
  const double total = static_cast<double>(std::count(rel.begin(), rel.end(), true));
  double area = 0, prev_recall = 0, hits = 0;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    hits += rel[order[k - 1]] ? 1 : 0;
    const double recall = hits / total, precision = hits / static_cast<double>(k);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

std::vector<bool> random_relevance(std::mt19937_64& rng, std::size_t n, double p) {
  std::bernoulli_distribution b(p);
  std::vector<bool> rel(n);
  for (std::size_t i = 0; i < n; ++i) rel[i] = b(rng);
  return rel;
}

synth::DatasetItem item(std::size_t instance, synth::Domain d, std::size_t view = 0) {
  synth::DatasetItem it;
  it.instance = instance;
  it.domain = d;
  it.view = view;
  it.split = synth::Split::kTest;
  it.path = synth::item_path(instance, d, view);
  return it;
}

}  // namespace

TEST(Rank, QueryInGalleryRanksFirst) {
  Tensor<float> g(Shape{3, 2}, {1.f, 1.f, 0.f, 0.f, 2.f, 0.f});
  const std::vector<float> q{0.f, 0.f};
  const auto r = rank_gallery<float>(std::span<const float>(q), g);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_EQ(r.distances[0], 0.0);
  EXPECT_NEAR(r.distances[1], std::sqrt(2.0), 1e-12);
}

TEST(Rank, TiesKeepGalleryOrder) {
  Tensor<float> g(Shape{4, 1}, {1.f, -1.f, 1.f, 0.5f});
  const std::vector<float> q{0.f};
  EXPECT_EQ(rank_gallery<float>(std::span<const float>(q), g).order, (std::vector<std::size_t>{3, 0, 1, 2}));
  EXPECT_THROW(rank_gallery<float>(std::span<const float>(std::vector<float>{0.f, 0.f}), g), ShapeError);
}

TEST(Rank, MatchesFullSortOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.f, 1.f);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<float> g(Shape{50, 8});
    for (float& v : g.data()) v = n(rng);
    // a few duplicates to exercise ties
    for (std::size_t k = 0; k < 8; ++k) g[10 * 8 + k] = g[30 * 8 + k];
    std::vector<float> q(8);
    for (float& v : q) v = n(rng);
    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t i = 0; i < 50; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 8; ++k) s += (static_cast<double>(q[k]) - g[i * 8 + k]) * (static_cast<double>(q[k]) - g[i * 8 + k]);
      oracle.emplace_back(s, i);
    }
    std::sort(oracle.begin(), oracle.end());
    const auto r = rank_gallery<float>(std::span<const float>(q), g);
    for (std::size_t i = 0; i < 50; ++i) ASSERT_EQ(r.order[i], oracle[i].second);
  }
}

TEST(Metrics, AccAtKExamples) {
  const Orders orders{{0, 1, 2}};
  const Relevance rel{{false, true, false}};
  EXPECT_EQ(acc_at_k(orders, rel, 1), 0.0);
  EXPECT_EQ(acc_at_k(orders, rel, 2), 1.0);
  EXPECT_EQ(acc_at_k(orders, rel, 3), 1.0);
  EXPECT_THROW(acc_at_k(orders, rel, 0), ConfigError);
}

TEST(Metrics, FractionGranularityOf115Queries) {
  // 64.35% of 115 queries is reachable by exactly one hit count.
  std::vector<int> matches;
  for (int hits = 0; hits <= 115; ++hits) {
    Orders orders(115, std::vector<std::size_t>{0, 1});
    Relevance rel(115, std::vector<bool>{false, true});
    for (int q = 0; q < hits; ++q) rel[static_cast<std::size_t>(q)] = {true, false};
    if (std::lround(acc_at_k(orders, rel, 1) * 10000) == 6435) matches.push_back(hits);
  }
  EXPECT_EQ(matches, std::vector<int>{74});
}

TEST(Metrics, AveragePrecisionExamples) {
  EXPECT_DOUBLE_EQ(*average_precision(identity_order(5), {false, false, false, true, false}), 0.25);
  EXPECT_NEAR(*average_precision(identity_order(4), {true, false, true, false}), 0.833333, 1e-6);
  EXPECT_FALSE(average_precision(identity_order(3), {false, false, false}).has_value());
}

TEST(Metrics, ZeroRelevantQueriesAreSkippedAndCounted) {
  const Orders orders{identity_order(3), identity_order(3)};
  const Relevance rel{{false, true, false}, {false, false, false}};
  const auto m = mean_average_precision(orders, rel);
  EXPECT_DOUBLE_EQ(m.map, 0.5);
  EXPECT_EQ(m.skipped_queries, 1u);
}

TEST(Metrics, AveragePrecisionMatchesPrCurveOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + trial % 40;
    auto rel = random_relevance(rng, n, 0.3);
    rel[rng() % n] = true;
    auto order = identity_order(n);
    std::shuffle(order.begin(), order.end(), rng);
    EXPECT_NEAR(*average_precision(order, rel), pr_area(order, rel), 1e-9);
  }
}

TEST(Metrics, InvariantsOverRandomPatterns) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1500; ++trial) {
    const std::size_t queries = 1 + trial % 7, n = 2 + trial % 31;
    Orders orders;
    Relevance rel;
    for (std::size_t q = 0; q < queries; ++q) {
      auto r = random_relevance(rng, n, 0.2);
      r[rng() % n] = true;
      auto o = identity_order(n);
      std::shuffle(o.begin(), o.end(), rng);
      orders.push_back(o);
      rel.push_back(r);
    }
    double prev = 0;
    for (std::size_t k = 1; k <= n; ++k) {
      const double a = acc_at_k(orders, rel, k);
      ASSERT_GE(a, prev);
      ASSERT_GE(a, 0.0);
      ASSERT_LE(a, 1.0);
      prev = a;
    }
    ASSERT_EQ(acc_at_k(orders, rel, n), 1.0);
    const double m = mean_average_precision(orders, rel).map;
    ASSERT_GE(m, 0.0);
    ASSERT_LE(m, 1.0);

    // all relevant
    Relevance all(queries, std::vector<bool>(n, true));
    ASSERT_EQ(mean_average_precision(orders, all).map, 1.0);

    // exactly one relevant per query: AP = 1/r, mAP = mean reciprocal rank
    Relevance one(queries, std::vector<bool>(n, false));
    double mrr = 0;
    for (std::size_t q = 0; q < queries; ++q) {
      const std::size_t target = rng() % n;
      one[q][target] = true;
      const std::size_t r = first_hit_rank(orders[q], one[q]);
      ASSERT_DOUBLE_EQ(*average_precision(orders[q], one[q]), 1.0 / static_cast<double>(r));
      mrr += 1.0 / static_cast<double>(r);
    }
    ASSERT_NEAR(mean_average_precision(orders, one).map, mrr / static_cast<double>(queries), 1e-12);
  }
}

TEST(Metrics, GalleryPermutationWithDistinctDistances) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.f, 1.f);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t gsize = 12;
    Tensor<float> g(Shape{gsize, 4});
    for (float& v : g.data()) v = n(rng);
    std::vector<float> q(4);
    for (float& v : q) v = n(rng);
    const auto rel = random_relevance(rng, gsize, 0.3);
    auto perm = identity_order(gsize);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<float> gp(Shape{gsize, 4});
    std::vector<bool> relp(gsize);
    for (std::size_t i = 0; i < gsize; ++i) {
      for (std::size_t k = 0; k < 4; ++k) gp[i * 4 + k] = g[perm[i] * 4 + k];
      relp[i] = rel[perm[i]];
    }
    const auto a = rank_gallery<float>(std::span<const float>(q), g), b = rank_gallery<float>(std::span<const float>(q), gp);
    EXPECT_EQ(first_hit_rank(a.order, rel), first_hit_rank(b.order, relp));
    EXPECT_EQ(average_precision(a.order, rel), average_precision(b.order, relp));
  }
}

TEST(MultiQuery, Pooling) {
  const std::vector<float> f{3.f, 4.f};
  EXPECT_EQ(multi_query_feature<float>({f}), (std::vector<float>{0.6f, 0.8f}));
  const std::vector<float> unit{0.6f, 0.8f};
  EXPECT_EQ(multi_query_feature<float>({unit, unit}), unit);
  const auto m = multi_query_feature<double>({{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_NEAR(m[0], std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(m[1], std::sqrt(0.5), 1e-12);
  EXPECT_THROW(multi_query_feature<float>({}), ShapeError);
}

TEST(MultiQuery, OrderingMatchesDefinition) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> feats(3, std::vector<double>(6));
    for (auto& f : feats)
      for (double& v : f) v = n(rng);
    Tensor<double> g(Shape{20, 6});
    for (double& v : g.data()) v = n(rng);
    std::vector<double> pooled(6, 0.0);
    for (const auto& f : feats)
      for (std::size_t k = 0; k < 6; ++k) pooled[k] += f[k] / 3.0;
    double norm = 0;
    for (double v : pooled) norm += v * v;
    for (double& v : pooled) v /= std::sqrt(norm);
    EXPECT_EQ(rank_gallery<double>(std::span<const double>(multi_query_feature(feats)), g).order, rank_gallery<double>(std::span<const double>(pooled), g).order);
  }
}

TEST(Protocol, EvaluateRetrievalOnHandMadeFeatures) {
  synth::Dataset ds;
  // instances 0..2: contour queries, filled gallery; instance 1 has two gallery views
  ds.items = {item(0, synth::Domain::kFilled), item(0, synth::Domain::kContour),
              item(1, synth::Domain::kFilled), item(1, synth::Domain::kFilled, 1),
              item(1, synth::Domain::kContour), item(2, synth::Domain::kFilled),
              item(2, synth::Domain::kContour)};
  Tensor<float> f(Shape{7, 1}, {0.f, 0.1f, 1.f, 5.f, 0.9f, 2.f, 0.05f});
  RetrievalProtocol p;
  p.ks = {1, 2, 3};
  const auto r = evaluate_retrieval(f, ds, p);
  ASSERT_EQ(r.per_query.size(), 3u);
  EXPECT_EQ(r.gallery_instances, 3u);
  EXPECT_EQ(r.per_query[0].ranks, (std::vector<std::size_t>{0, 2, 5, 3}));
  EXPECT_EQ(r.per_query[0].first_hit_rank, 1u);
  EXPECT_EQ(r.per_query[1].first_hit_rank, 1u);
  EXPECT_NEAR(*r.per_query[1].ap, (1.0 + 2.0 / 4.0) / 2.0, 1e-12);
  EXPECT_EQ(r.per_query[2].first_hit_rank, 3u);
  EXPECT_NEAR(r.acc_at(1), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.acc_at(3), 1.0, 1e-12);
  EXPECT_NEAR(r.map, (1.0 + 0.75 + 1.0 / 3.0) / 3.0, 1e-12);

  const auto j = to_json(r);
  EXPECT_EQ(j.at("per_query").size(), 3u);
  EXPECT_EQ(j.at("per_query")[0].at("query"), ds.items[1].path);
  EXPECT_TRUE(j.at("acc").contains("2"));
  EXPECT_DOUBLE_EQ(j.at("map").get<double>(), r.map);

  p.multi_query = true;
  const auto m = evaluate_retrieval(f, ds, p);
  EXPECT_EQ(m.per_query.size(), 3u);
  EXPECT_EQ(m.per_query[0].query, "instance:0");
}

TEST(Protocol, ExclusionDropsTheQueryItemItself) {
  synth::Dataset ds;
  ds.items = {item(0, synth::Domain::kFilled), item(0, synth::Domain::kFilled, 1),
              item(1, synth::Domain::kFilled)};
  Tensor<float> f(Shape{3, 1}, {0.f, 0.5f, 0.2f});
  RetrievalProtocol p;
  p.query_domain = p.gallery_domain = synth::Domain::kFilled;
  p.ks = {1};
  const auto r = evaluate_retrieval(f, ds, p);
  EXPECT_EQ(r.per_query[0].ranks, (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(r.per_query[0].first_hit_rank, 2u);
  EXPECT_EQ(r.per_query[2].ranks, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.per_query[2].ap, std::nullopt);
  EXPECT_EQ(r.skipped_queries, 1u);
}

TEST(Extract, DeterministicRowsWithUnitBlocks) {
  const auto c = mini_aligned_net();
  auto p = build_backbone(c, 3);
  fixtures::randomize_biases(p, 3);
  const FusionSpec spec{{{"conv3", Pooling::kFlatten}}, std::nullopt, true};
  const auto a = fixtures::random_image(c.input_shape, 1), b = fixtures::random_image(c.input_shape, 2);
  const auto f = extract_features(p, c, spec, std::vector<Tensor<float>>{a, b, a});
  ASSERT_EQ(f.shape(), (Shape{3, 1088}));
  for (std::size_t k = 0; k < 1088; ++k) EXPECT_EQ(f[k], f[2 * 1088 + k]);
  for (std::size_t r = 0; r < 3; ++r) {
    double s1 = 0, s2 = 0;
    for (std::size_t k = 0; k < 1024; ++k) s1 += static_cast<double>(f[r * 1088 + k]) * f[r * 1088 + k];
    for (std::size_t k = 1024; k < 1088; ++k) s2 += static_cast<double>(f[r * 1088 + k]) * f[r * 1088 + k];
    EXPECT_NEAR(s1, 1.0, 1e-5);
    EXPECT_NEAR(s2, 1.0, 1e-5);
  }
  EXPECT_EQ(f, extract_features(p, c, spec, std::vector<Tensor<float>>{a, b, a}));
  // chunking does not change rows
  std::vector<const Tensor<float>*> ptrs{&a, &b, &a};
  EXPECT_EQ(f, extract_features(p, c, spec, ptrs, 1));
}

TEST(Extract, IncompatibleCheckpointListsLayers) {
  const auto c = mini_view_net();
  auto p = build_backbone(c, 1);
  p.tensors["blockB.weight"] = Tensor<float>(Shape{3, 3, 64, 32});
  const FusionSpec spec{{{"blockA", Pooling::kGap}}, 16, true};
  try {
    extract_features(p, c, spec, std::vector<Tensor<float>>{Tensor<float>(Shape{32, 32, 3})});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("blockB.weight"), std::string::npos) << e.what();
  }
  auto q = build_backbone(c, 1);
  try {
    extract_features(q, c, spec, std::vector<Tensor<float>>{Tensor<float>(Shape{32, 32, 3})});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("reduce.weight"), std::string::npos) << e.what();
  }
}

TEST(Heatmap, ConstantMapIsZeroAndSizeMatches) {
  const auto img = heatmap_image(std::vector<double>(16, 0.0), 4, 4, 32, 32);
  EXPECT_EQ(img.width, 32u);
  EXPECT_EQ(img.height, 32u);
  for (auto v : img.pixels) EXPECT_EQ(v, 0);
  const auto ramp = heatmap_image({0.0, 1.0, 2.0, 3.0}, 2, 2, 4, 4);
  EXPECT_EQ(ramp.pixels.front(), 0);
  EXPECT_EQ(ramp.pixels.back(), 255);
}

TEST(Heatmap, ExportWritesInputSizedPgm) {
  const auto c = mini_aligned_net();
  const auto p = build_backbone(c, 2);
  const auto path = std::filesystem::temp_directory_path() / "cdim_test_heatmap.pgm";
  const auto written = export_activation_heatmap(p, c, Tensor<float>(Shape{32, 32, 1}), "conv3", 5, path);
  const auto read = read_pgm(path);
  EXPECT_EQ(read.width, 32u);
  EXPECT_EQ(read.height, 32u);
  EXPECT_EQ(read.pixels, written.pixels);
  for (auto v : read.pixels) EXPECT_EQ(v, 0);  // zero image, zero bias
  std::filesystem::remove(path);
  EXPECT_THROW(export_activation_heatmap(p, c, Tensor<float>(Shape{32, 32, 1}), "conv3", 64, path), ConfigError);
  EXPECT_THROW(activation_map(p, c, Tensor<float>(Shape{32, 32, 1}), "fc_final", 0), ConfigError);
}

TEST(Heatmap, TrainedModelFiresOnPartMarkers) {
  // Mean activation inside the glyph mask vs outside, averaged over test
  // images of both domains, for the best conv3 channel.
  synth::DatasetConfig dc;
  dc.instances = 24;
  dc.train_instances = 16;
  dc.seed = 2;
  const auto ds = synth::generate_dataset(dc);
  const auto specs = synth::generate_instances(dc.instances, dc.seed);
  OptimizerConfig o = optimizer_profile("toy_sgd");
  o.max_iterations = 60;
  o.batch_size = 16;
  EarlyStopConfig es;
  es.enabled = false;
  const auto c = mini_aligned_net();
  const FusionSpec spec{{{"conv3", Pooling::kFlatten}}, std::nullopt, true};
  const auto trained = train_triplet_model<float>(ds, c, spec, o, {}, es, 1);
  double best_ratio = 0;
  for (std::size_t ch = 0; ch < 64; ++ch) {
    double in = 0, out = 0, n_in = 0, n_out = 0;
    for (std::size_t i : ds.select(synth::Split::kTest)) {
      const auto& it = ds.items[i];
      const auto mask = synth::part_mask(specs[it.instance], 32);
      const auto map = activation_map(trained.params, c, it.image, "conv3", ch);
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          const double a = map[(y / 8) * 4 + x / 8];  // nearest 8x8 cell
          const double m = mask[y * 32 + x];
          in += m * a;
          n_in += m;
          out += (1 - m) * a;
          n_out += 1 - m;
        }
    }
    if (out > 0) best_ratio = std::max(best_ratio, (in / n_in) / (out / n_out));
  }
  EXPECT_GT(best_ratio, 1.5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = mini_view_net();
  const FusionSpec spec{{{"blockA", Pooling::kGap}, {"blockB", Pooling::kFlatten}}, 32, true};
  Checkpoint ck{c, spec, build_backbone(c, 4)};
  init_fusion_params(ck.params, c, spec, 4);
  const auto dir = std::filesystem::temp_directory_path() / "cdim_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(ck, dir);
  const auto back = load_checkpoint(dir);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.fusion, spec);
  EXPECT_EQ(to_json(back.backbone), to_json(c));
  std::filesystem::remove(dir / "blockA.weight.cdtf");
  EXPECT_ANY_THROW(load_checkpoint(dir));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir), IoError);
}
