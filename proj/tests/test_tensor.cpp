#include <gtest/gtest.h>

#include <filesystem>

#include "cdim/cdtf.hpp"
#include "cdim/kernels.hpp"
#include "oracles.hpp"

using cdim::Shape;
using cdim::Tensor;
namespace k = cdim::kernels;

TEST(Tensor, RejectsLengthMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), cdim::ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), cdim::ShapeError);
}

TEST(Tensor, GradBufferFollowsRequiresGrad) {
  Tensor<float> t(Shape{3}, 1.f);
  EXPECT_FALSE(t.has_grad());
  t.set_requires_grad(true);
  ASSERT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
  t.set_requires_grad(false);
  EXPECT_FALSE(t.has_grad());
}

TEST(Conv2d, ScalarAffine) {
  Tensor<float> in(Shape{1, 1, 1}, {5.f});
  Tensor<float> ker(Shape{1, 1, 1, 1}, {2.f});
  Tensor<float> bias(Shape{1}, {1.f});
  const auto out = k::conv2d(in, ker, bias, 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_FLOAT_EQ(out[0], 11.f);
}

TEST(Conv2d, WindowSum) {
  Tensor<float> in(Shape{3, 3, 1}, 1.f);
  Tensor<float> ker(Shape{2, 2, 1, 1}, 1.f);
  Tensor<float> bias(Shape{1}, 0.f);
  const auto out = k::conv2d(in, ker, bias, 1, 0);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 1}));
  for (float v : out.data()) EXPECT_FLOAT_EQ(v, 4.f);
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<float> in(Shape{4, 4, 2});
  Tensor<float> ker(Shape{3, 3, 3, 1});
  Tensor<float> bias(Shape{1});
  try {
    k::conv2d(in, ker, bias, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const cdim::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(4,4,2)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(3,3,3,1)"), std::string::npos) << msg;
  }
}

TEST(Conv2d, MatchesLoopOracleOnRandomGeometries) {
  std::mt19937_64 rng(11);
  {
    const auto in = oracle::random_tensor({8, 8, 3}, rng);
    const auto ker = oracle::random_tensor({3, 3, 3, 4}, rng);
    const auto bias = oracle::random_tensor({4}, rng);
    const auto got = k::conv2d(in, ker, bias, 1, 0);
    const auto want = oracle::conv2d(in, ker, bias, 1, 0);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-5);
  }
  std::uniform_int_distribution<std::size_t> dim(1, 9), ch(1, 4), ks(1, 4), st(1, 3), pd(0, 2);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t h = dim(rng), w = dim(rng), c = ch(rng), co = ch(rng);
    const std::size_t kh = ks(rng), kw = ks(rng), s = st(rng), p = pd(rng);
    if (kh > h + 2 * p || kw > w + 2 * p) continue;
    const auto in = oracle::random_tensor({h, w, c}, rng);
    const auto ker = oracle::random_tensor({kh, kw, c, co}, rng);
    const auto bias = oracle::random_tensor({co}, rng);
    const auto got = k::conv2d(in, ker, bias, s, p);
    const auto want = oracle::conv2d(in, ker, bias, s, p);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-5);
  }
}

TEST(Conv2d, BatchRowsEqualSingleSamples) {
  std::mt19937_64 rng(3);
  const auto a = oracle::random_tensor({6, 6, 2}, rng);
  const auto b = oracle::random_tensor({6, 6, 2}, rng);
  const auto ker = oracle::random_tensor({3, 3, 2, 5}, rng);
  const auto bias = oracle::random_tensor({5}, rng);
  const auto batch = k::conv2d(cdim::stack(std::vector<Tensor<float>>{a, b}), ker, bias, 1, 1);
  EXPECT_EQ(cdim::slice_rows(batch, 0, 1).storage(), k::conv2d(a, ker, bias, 1, 1).storage());
  EXPECT_EQ(cdim::slice_rows(batch, 1, 2).storage(), k::conv2d(b, ker, bias, 1, 1).storage());
}

TEST(MaxPool, Basic) {
  Tensor<float> in(Shape{2, 2, 1}, {1, 2, 3, 4});
  const auto out = k::maxpool2d(in, 2, 2);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 4.f);
  Tensor<float> constant(Shape{6, 6, 2}, 3.5f);
  const auto pooled = k::maxpool2d(constant, 2, 2);
  EXPECT_EQ(pooled.shape(), (Shape{3, 3, 2}));
  for (float v : pooled.data()) EXPECT_EQ(v, 3.5f);
}

TEST(MaxPool, ZeroWindowOrStrideRejected) {
  Tensor<float> in(Shape{4, 4, 1});
  EXPECT_THROW(k::maxpool2d(in, 0, 1), cdim::ShapeError);
  EXPECT_THROW(k::maxpool2d(in, 2, 0), cdim::ShapeError);
  EXPECT_THROW(k::maxpool2d(in, 5, 1), cdim::ShapeError);
}

TEST(MaxPool, TiesPickLowestFlatIndex) {
  Tensor<float> in(Shape{2, 2, 1}, 1.f);
  std::vector<std::size_t> arg;
  k::maxpool2d(in, 2, 2, &arg);
  EXPECT_EQ(arg.at(0), 0u);
}

TEST(MaxPool, MatchesLoopOracleExactly) {
  std::mt19937_64 rng(5);
  const auto in = oracle::random_tensor({8, 8, 2}, rng);
  EXPECT_EQ(k::maxpool2d(in, 2, 2), oracle::maxpool2d(in, 2, 2));
  std::uniform_int_distribution<std::size_t> dim(1, 10), ch(1, 4), win(1, 4), st(1, 3);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t h = dim(rng), w = dim(rng), window = win(rng), s = st(rng);
    if (window > h || window > w) continue;
    const auto x = oracle::random_tensor({h, w, ch(rng)}, rng);
    ASSERT_EQ(k::maxpool2d(x, window, s), oracle::maxpool2d(x, window, s));
  }
}

TEST(GlobalAveragePool, Values) {
  Tensor<float> sevens(Shape{3, 5, 4}, 7.f);
  const auto pooled = k::global_average_pool(sevens);
  for (float v : pooled.data()) EXPECT_FLOAT_EQ(v, 7.f);
  Tensor<float> in(Shape{2, 2, 2}, {1, 0, 2, 0, 3, 0, 4, 0});
  const auto out = k::global_average_pool(in);
  ASSERT_EQ(out.shape(), (Shape{2}));
  EXPECT_FLOAT_EQ(out[0], 2.5f);
  EXPECT_FLOAT_EQ(out[1], 0.f);
}

TEST(GlobalAveragePool, MatchesSummationOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = oracle::random_tensor({dim(rng), dim(rng), dim(rng)}, rng);
    const auto got = k::global_average_pool(x);
    const auto want = oracle::channel_means(x);
    for (std::size_t c = 0; c < want.size(); ++c) ASSERT_NEAR(got[c], want[c], 1e-6);
  }
}

TEST(FullyConnected, IdentityAndRelu) {
  Tensor<float> x(Shape{2}, {1.f, -1.f});
  Tensor<float> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<float> zero(Shape{2});
  EXPECT_EQ(k::fully_connected(x, eye, zero).storage(), x.storage());
  const auto r = k::fully_connected(x, eye, zero, true);
  EXPECT_EQ(r[0], 1.f);
  EXPECT_EQ(r[1], 0.f);
  EXPECT_THROW(k::fully_connected(x, Tensor<float>(Shape{3, 2}), zero), cdim::ShapeError);
}

TEST(FullyConnected, MatchesDotProductOracle) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> dim(1, 40);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = dim(rng), m = dim(rng);
    const auto x = oracle::random_tensor({n}, rng);
    const auto w = oracle::random_tensor({n, m}, rng);
    const auto b = oracle::random_tensor({m}, rng);
    const bool relu = trial % 2 == 0;
    const auto got = k::fully_connected(x, w, b, relu);
    const auto want = oracle::fully_connected(x, w, b, relu);
    for (std::size_t j = 0; j < m; ++j) ASSERT_NEAR(got[j], want[j], 1e-5);
  }
}

TEST(L2Normalize, Values) {
  const auto v = k::l2_normalize(Tensor<float>::vector({3.f, 4.f}));
  EXPECT_FLOAT_EQ(v[0], 0.6f);
  EXPECT_FLOAT_EQ(v[1], 0.8f);
  const auto z = k::l2_normalize(Tensor<float>(Shape{5}));
  for (float x : z.data()) EXPECT_EQ(x, 0.f);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = k::l2_normalize(oracle::random_tensor({static_cast<std::size_t>(1 + trial % 17)}, rng));
    double ss = 0;
    for (float e : x.data()) ss += double(e) * e;
    ASSERT_NEAR(std::sqrt(ss), 1.0, 1e-6);
  }
}

TEST(EuclideanDistance, Values) {
  std::vector<float> a{0, 0}, b{3, 4};
  EXPECT_FLOAT_EQ(k::euclidean_distance<float>(a, a), 0.f);
  EXPECT_FLOAT_EQ(k::euclidean_distance<float>(a, b), 5.f);
  std::vector<float> c{1, 2, 3};
  EXPECT_THROW(k::euclidean_distance<float>(a, c), cdim::ShapeError);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = oracle::random_tensor({9}, rng), y = oracle::random_tensor({9}, rng);
    ASSERT_NEAR(k::euclidean_distance<float>(x.data(), y.data()),
                k::euclidean_distance<float>(y.data(), x.data()), 1e-6);
  }
}

TEST(Cdtf, HeaderLayoutIsBitExact) {
  Tensor<float> t(Shape{2, 1}, {1.0f, -2.5f});
  const auto bytes = cdim::cdtf::encode(t);
  const std::vector<std::uint8_t> header{0x43, 0x44, 0x54, 0x46, 0x01, 0x00, 0x01, 0x02,
                                         0x02, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00};
  ASSERT_EQ(bytes.size(), header.size() + 8);
  EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
  // 1.0f = 0x3f800000, little-endian
  EXPECT_EQ(bytes[16], 0x00);
  EXPECT_EQ(bytes[19], 0x3f);
}

TEST(Cdtf, RoundTripPreservesShapeAndValues) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    for (int r = 0; r < 1 + trial % 4; ++r) s.push_back(1 + rng() % 5);
    const auto t = oracle::random_tensor(s, rng);
    EXPECT_EQ(cdim::cdtf::decode<float>(cdim::cdtf::encode(t)), t);
  }
  const auto path = std::filesystem::temp_directory_path() / "cdim_test_tensor.cdtf";
  const auto t = oracle::random_tensor({4, 4, 3}, rng);
  cdim::cdtf::write(path, t);
  EXPECT_EQ(cdim::cdtf::read<float>(path), t);
  std::filesystem::remove(path);
}

TEST(Cdtf, RejectsCorruptInput) {
  std::vector<std::uint8_t> bad{0x43, 0x44, 0x54, 0x47, 1, 0, 1, 0};
  EXPECT_THROW(cdim::cdtf::decode<float>(bad), cdim::IoError);
  auto bytes = cdim::cdtf::encode(Tensor<float>(Shape{3}));
  bytes.pop_back();
  EXPECT_THROW(cdim::cdtf::decode<float>(bytes), cdim::IoError);
  EXPECT_THROW(cdim::cdtf::read<float>("/nonexistent/x.cdtf"), cdim::IoError);
}
