#include "tap/kernels.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tap/common.hpp"

namespace tap::kernels {
namespace {

std::vector<float> random_vector(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}

void expect_close(const std::vector<float>& a, const std::vector<float>& b, float tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_NEAR(a[i], b[i], tol * (1.0f + std::abs(b[i]))) << "at " << i;
  }
}


class ConvAgainstReference : public ::testing::TestWithParam<ConvGeometry> {};

TEST_P(ConvAgainstReference, ForwardMatches) {
  const ConvGeometry g = GetParam();
  Rng rng(11);
  const auto x = random_vector(static_cast<std::size_t>(g.input_size()), rng);
  const auto w = random_vector(static_cast<std::size_t>(g.weight_size()), rng);
  std::vector<float> fast(static_cast<std::size_t>(g.output_size()));
  std::vector<float> slow(fast.size());
  conv2d_forward(g, x, w, fast);
  reference::conv2d_forward(g, x, w, slow);
  expect_close(fast, slow, 1e-4f);
}

TEST_P(ConvAgainstReference, BackwardMatches) {
  const ConvGeometry g = GetParam();
  Rng rng(12);
  const auto x = random_vector(static_cast<std::size_t>(g.input_size()), rng);
  const auto w = random_vector(static_cast<std::size_t>(g.weight_size()), rng);
  const auto dy = random_vector(static_cast<std::size_t>(g.output_size()), rng);
  std::vector<float> dx_fast(x.size()), dx_slow(x.size());
  conv2d_backward_data(g, dy, w, dx_fast);
  reference::conv2d_backward_data(g, dy, w, dx_slow);
  expect_close(dx_fast, dx_slow, 1e-4f);
  std::vector<float> dw_fast(w.size(), 0.5f), dw_slow(w.size(), 0.5f);
  conv2d_backward_weight(g, x, dy, dw_fast);
  reference::conv2d_backward_weight(g, x, dy, dw_slow);
  expect_close(dw_fast, dw_slow, 1e-4f);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvAgainstReference,
                         ::testing::Values(ConvGeometry{3, 5, 3, 1, 1, 2, 7, 6},
                                           ConvGeometry{4, 8, 7, 2, 3, 3, 12, 9},
                                           ConvGeometry{6, 4, 1, 2, 0, 2, 5, 5},
                                           ConvGeometry{2, 3, 3, 2, 1, 1, 2, 1}));

TEST(Gemm, MatchesReferenceForAllTransposes) {
  Rng rng(3);
  const int m = 5, n = 7, k = 4;
  const auto a = random_vector(m * k, rng);
  const auto b = random_vector(k * n, rng);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      std::vector<float> c1(m * n, 1.0f), c2(m * n, 1.0f);
      gemm(ta, tb, m, n, k, 0.5f, a.data(), ta ? m : k, b.data(), tb ? k : n, 2.0f, c1.data(), n);
      reference::gemm(ta, tb, m, n, k, 0.5f, a.data(), ta ? m : k, b.data(), tb ? k : n, 2.0f, c2.data(), n);
      expect_close(c1, c2, 1e-5f);
    }
  }
}

TEST(BatchNorm, TrainForwardAndBackwardMatchReference) {
  Rng rng(5);
  const int channels = 3;
  const std::int64_t per = 50;
  const auto x = random_vector(channels * per, rng);
  const auto dy = random_vector(channels * per, rng);
  const std::vector<float> gamma = {1.5f, -0.5f, 0.25f};
  const std::vector<float> beta = {0.1f, 0.2f, -0.3f};
  std::vector<float> y1(x.size()), y2(x.size());
  std::vector<float> m1(3), m2(3), s1(3), s2(3), v1(3), v2(3);
  batchnorm_forward_train(channels, per, x, gamma, beta, 1e-5f, y1, m1, s1, v1);
  reference::batchnorm_forward_train(channels, per, x, gamma, beta, 1e-5f, y2, m2, s2, v2);
  expect_close(y1, y2, 1e-5f);
  expect_close(v1, v2, 1e-5f);
  std::vector<float> dx1(x.size()), dx2(x.size()), dg1(3), dg2(3), db1(3), db2(3);
  batchnorm_backward_train(channels, per, x, dy, gamma, m1, s1, dx1, dg1, db1);
  reference::batchnorm_backward_train(channels, per, x, dy, gamma, m2, s2, dx2, dg2, db2);
  expect_close(dx1, dx2, 1e-4f);
  expect_close(dg1, dg2, 1e-4f);
  expect_close(db1, db2, 1e-4f);
}

TEST(MaxPool, MatchesReferenceAndRoutesGradient) {
  Rng rng(9);
  PoolGeometry g{2, 3, 9, 8, 3, 2, 1};
  const auto x = random_vector(static_cast<std::size_t>(g.planes() * 9 * 8), rng);
  std::vector<float> y1(static_cast<std::size_t>(g.output_size())), y2(y1.size());
  std::vector<std::int32_t> a1(y1.size()), a2(y1.size());
  maxpool_forward(g, x, y1, a1);
  reference::maxpool_forward(g, x, y2, a2);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(a1, a2);
  std::vector<float> dy(y1.size(), 1.0f), dx(x.size());
  maxpool_backward(g, dy, a1, dx);
  double total = 0.0;
  for (float v : dx) total += v;
  EXPECT_DOUBLE_EQ(total, static_cast<double>(dy.size()));
}

TEST(InputPooling, MatchesReferenceAndUnpoolIsAdjoint) {
  Rng rng(21);
  const int h = 12, w = 9, c = 4, f = 3, batch = 2;
  const auto image = random_vector(h * w * c, rng);
  std::vector<float> p1(static_cast<std::size_t>(c * batch * (h / f) * (w / f)), 0.0f), p2(p1.size(), 0.0f);
  pool_interleaved_to_cnhw(image, h, w, c, f, batch, 1, p1);
  reference::pool_interleaved_to_cnhw(image, h, w, c, f, batch, 1, p2);
  expect_close(p1, p2, 1e-6f);

  // <pool(x), g> == <x, unpool(g)>
  const auto g = random_vector(p1.size(), rng);
  std::vector<float> back(image.size());
  unpool_cnhw_to_interleaved(g, h, w, c, f, batch, 1, back);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i) lhs += static_cast<double>(p1[i]) * g[i];
  for (std::size_t i = 0; i < image.size(); ++i) rhs += static_cast<double>(image[i]) * back[i];
  EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(Distances, ParallelScanEqualsSerialScanBitwise) {
  Rng rng(4);
  const int rows = 37, dim = 16;
  const auto m = random_vector(rows * dim, rng);
  const auto q = random_vector(dim, rng);
  std::vector<double> d1(rows), d2(rows);
  squared_distances(m, rows, dim, q, d1);
  reference::squared_distances(m, rows, dim, q, d2);
  EXPECT_EQ(d1, d2);
}

}  // namespace
}  // namespace tap::kernels
