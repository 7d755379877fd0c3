#include <gtest/gtest.h>

#include "support.hpp"

using namespace iterseg;
using testsupport::random_tensor;

TEST(Tensor, ChwIndexingIsRowMajor) {
  Tensor<float> t = Tensor<float>::chw(2, 3, 4);
  t(1, 2, 3) = 7.0f;
  EXPECT_EQ(t[1 * 12 + 2 * 4 + 3], 7.0f);
  EXPECT_EQ(t.plane(), 12u);
}

TEST(Tensor, ShapeDataMismatchThrows) {
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, ThresholdIsStrict) {
  Tensor<double> t({1, 1, 3}, std::vector<double>{0.5, 0.5 + 1e-9, 0.4});
  const Mask m = threshold_mask(t, 0.5);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 0);
}

TEST(Resize, BilinearAlignsCorners) {
  Tensor<double> t({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const auto r = resize_bilinear(t, 3, 3);
  EXPECT_DOUBLE_EQ(r(0, 0, 0), 0);
  EXPECT_DOUBLE_EQ(r(0, 0, 2), 1);
  EXPECT_DOUBLE_EQ(r(0, 2, 2), 3);
  EXPECT_DOUBLE_EQ(r(0, 1, 1), 1.5);
}

TEST(Resize, AreaAveragesBlocks) {
  Tensor<double> t({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  const auto r = resize_area(t, 1, 2);
  EXPECT_DOUBLE_EQ(r(0, 0, 0), (1 + 2 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(r(0, 0, 1), (3 + 4 + 7 + 8) / 4.0);
}

TEST(Resize, AreaPreservesMeanForFractionalRatios) {
  std::mt19937_64 rng(1);
  const auto t = random_tensor<double>({2, 7, 5}, rng);
  const auto r = resize_area(t, 3, 2);
  for (int c = 0; c < 2; ++c) {
    double a = 0, b = 0;
    for (std::size_t i = 0; i < t.plane(); ++i) a += t.channel(c)[i];
    for (std::size_t i = 0; i < r.plane(); ++i) b += r.channel(c)[i];
    EXPECT_NEAR(a / t.plane(), b / r.plane(), 1e-12);
  }
}

TEST(Resize, AdjointMatchesInnerProduct) {
  std::mt19937_64 rng(2);
  for (auto [ih, iw, oh, ow] : {std::array<int, 4>{5, 6, 9, 3}, {8, 8, 2, 2}, {3, 4, 7, 7}}) {
    const auto rs = scale_resampler(ih, iw, oh, ow);
    const auto x = random_tensor<double>({1, ih, iw}, rng);
    const auto g = random_tensor<double>({1, oh, ow}, rng);
    const auto y = rs.apply(x);
    Tensor<double> gx = Tensor<double>::chw(1, ih, iw);
    rs.apply_adjoint(g, gx);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Resize, NearestKeepsValuesExactly) {
  Mask m({1, 2, 2}, std::vector<std::uint8_t>{1, 0, 0, 1});
  const Mask r = resize_nearest(m, 4, 4);
  EXPECT_EQ(r(0, 0, 0), 1);
  EXPECT_EQ(r(0, 1, 1), 1);
  EXPECT_EQ(r(0, 0, 3), 0);
  EXPECT_EQ(r(0, 3, 3), 1);
  EXPECT_EQ(foreground_count(r), 8u);
}

TEST(Resize, InvalidSizeThrows) {
  EXPECT_THROW(resize_bilinear(Tensor<float>::chw(1, 2, 2), 0, 2), ShapeError);
}

TEST(Netpbm, PpmRoundTrip) {
  std::mt19937_64 rng(3);
  auto img = io::quantize(random_tensor<float>({3, 5, 7}, rng, 0, 1));
  EXPECT_EQ(io::decode_pnm(io::encode_ppm(img), "t"), img);
}

TEST(Netpbm, PgmRoundTripAndComments) {
  Mask m({1, 1, 3}, std::vector<std::uint8_t>{0, 255, 0});
  EXPECT_EQ(io::decode_pnm(io::encode_pgm(m), "t"), m);
  const std::string with_comment = "P5\n# note\n3 1\n255\n" + std::string("\x00\xff\x00", 3);
  EXPECT_EQ(io::decode_pnm(with_comment, "t"), m);
}

TEST(Netpbm, RejectsGarbage) {
  EXPECT_THROW(io::decode_pnm("P3\n1 1\n255\n0 0 0", "t"), IoError);
  EXPECT_THROW(io::decode_pnm("P5\n4 4\n255\nab", "t"), IoError);
}

TEST(Container, RoundTripIsLossless) {
  io::Container c;
  c.meta = {{"kind", "x"}, {"n", 3}};
  std::mt19937_64 rng(4);
  c.tensors["a"] = random_tensor<float>({2, 3, 4}, rng);
  c.tensors["b"] = random_tensor<float>({5}, rng);
  const auto d = io::decode_container(io::encode_container(c), "t");
  EXPECT_EQ(d.meta, c.meta);
  ASSERT_EQ(d.tensors.size(), 2u);
  EXPECT_EQ(d.tensors.at("a"), c.tensors.at("a"));
  EXPECT_EQ(d.tensors.at("b"), c.tensors.at("b"));
}

TEST(Container, CorruptionIsDetected) {
  io::Container c;
  c.tensors["a"] = Tensor<float>({2}, 1.0f);
  std::string bytes = io::encode_container(c);
  EXPECT_THROW(io::decode_container(bytes.substr(0, bytes.size() - 1), "t"), IoError);
  EXPECT_THROW(io::decode_container(bytes + "x", "t"), IoError);
  bytes[0] = 'X';
  EXPECT_THROW(io::decode_container(bytes, "t"), IoError);
}

TEST(Container, LittleEndianHeader) {
  const std::string b = io::encode_container(io::Container{});
  EXPECT_EQ(b.substr(0, 4), "ITSG");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);
  EXPECT_EQ(b[5], 0);
}
