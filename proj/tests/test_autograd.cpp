#include <gtest/gtest.h>

#include <map>
#include <random>

#include "test_support.hpp"

using namespace fundusam;
using ag::Index;
using ag::Var;
using M = ag::Matrix<double>;

namespace {

class GradCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};

  Var<double> param(Index r, Index c, double s = 1.0) {
    return Var<double>(test::random_matrix<double>(r, c, rng, s), true);
  }

  /// Random linear functional of y so every output entry gets a distinct weight.
  Var<double> project(const Var<double>& y) {
    auto& w = weights_[{y.rows(), y.cols()}];
    if (w.size() == 0) w = test::random_matrix<double>(y.rows(), y.cols(), rng);
    return ag::sum(ag::mul(y, ag::constant<double>(w)));
  }

 private:
  std::map<std::pair<Index, Index>, M> weights_;
};

constexpr double kTol = 1e-6;

}  // namespace

TEST_F(GradCheck, Matmul) {
  auto a = param(3, 4);
  auto b = param(4, 5);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::matmul(a, b)); }), kTol);
  EXPECT_LT(test::max_fd_error(b, [&] { return project(ag::matmul(a, b)); }), kTol);
  auto c = param(5, 4);
  EXPECT_LT(test::max_fd_error(c, [&] { return project(ag::matmul_nt(a, c)); }), kTol);
}

TEST_F(GradCheck, LinearWithBias) {
  auto x = param(6, 4);
  auto w = param(4, 3);
  auto b = param(1, 3);
  auto f = [&] { return project(ag::linear(x, w, b)); };
  EXPECT_LT(test::max_fd_error(x, f), kTol);
  EXPECT_LT(test::max_fd_error(w, f), kTol);
  EXPECT_LT(test::max_fd_error(b, f), kTol);
}

TEST_F(GradCheck, Elementwise) {
  auto a = param(3, 3);
  auto b = param(3, 3);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::add(a, b)); }), kTol);
  EXPECT_LT(test::max_fd_error(b, [&] { return project(ag::sub(a, b)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::mul(a, b)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::scale(a, 2.5)); }), kTol);
  auto r = param(1, 3);
  auto c = param(3, 1);
  EXPECT_LT(test::max_fd_error(r, [&] { return project(ag::add_row(a, r)); }), kTol);
  EXPECT_LT(test::max_fd_error(r, [&] { return project(ag::mul_row(a, r)); }), kTol);
  EXPECT_LT(test::max_fd_error(c, [&] { return project(ag::mul_col(a, c)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::mul_col(a, c)); }), kTol);
}

TEST_F(GradCheck, Activations) {
  M v(2, 4);
  v << -1.3, -0.4, 0.35, 1.7, 0.9, -2.2, 0.15, -0.05;  // away from the relu kink
  Var<double> x(v, true);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::relu(x)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::gelu(x)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::sigmoid(x)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::tanh(x)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::sin(x)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::cos(x)); }), kTol);
}

TEST_F(GradCheck, LayerNorm) {
  auto x = param(4, 6);
  auto g = param(1, 6);
  auto b = param(1, 6);
  auto f = [&] { return project(ag::layer_norm(x, g, b)); };
  EXPECT_LT(test::max_fd_error(x, f), 1e-5);
  EXPECT_LT(test::max_fd_error(g, f), kTol);
  EXPECT_LT(test::max_fd_error(b, f), kTol);
}

TEST_F(GradCheck, SlicingAndConcat) {
  auto a = param(4, 5);
  auto b = param(4, 2);
  auto c = param(3, 5);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::slice_cols(a, 1, 3)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::slice_rows(a, 2, 2)); }), kTol);
  EXPECT_LT(test::max_fd_error(b, [&] { return project(ag::concat_cols<double>({a, b})); }), kTol);
  EXPECT_LT(test::max_fd_error(c, [&] { return project(ag::concat_rows<double>({a, c, a})); }), kTol);
  auto idx = std::make_shared<const std::vector<Index>>(std::vector<Index>{3, 0, 0, 2});
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::gather_rows(a, idx)); }), kTol);
}

TEST_F(GradCheck, Reductions) {
  auto a = param(4, 5);
  EXPECT_LT(test::max_fd_error(a, [&] { return ag::sum(a); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return ag::mean(a); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::row_mean(a)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::row_max(a)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::col_mean(a)); }), kTol);
  EXPECT_LT(test::max_fd_error(a, [&] { return project(ag::col_max(a)); }), kTol);
}

TEST_F(GradCheck, AttentionGroupedAndMasked) {
  auto q = param(6, 4);
  auto k = param(8, 4);
  auto v = param(8, 6);
  auto valid = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 1, 0, 1, 1, 1, 1, 0});
  auto f = [&] { return project(ag::attention(q, k, v, 2, 3, 4, valid)); };
  EXPECT_LT(test::max_fd_error(q, f), 1e-5);
  EXPECT_LT(test::max_fd_error(k, f), 1e-5);
  EXPECT_LT(test::max_fd_error(v, f), 1e-5);
}

TEST_F(GradCheck, SpatialOps) {
  auto x = param(12, 3);  // 3 x 4 grid
  auto w = param(27, 2);
  auto b = param(1, 2);
  auto f = [&] { return project(ag::conv2d(x, 3, 4, w, b, 3)); };
  EXPECT_LT(test::max_fd_error(x, f), kTol);
  EXPECT_LT(test::max_fd_error(w, f), kTol);
  EXPECT_LT(test::max_fd_error(b, f), kTol);
  auto y = param(6, 8);  // 2 x 3 grid, 4 * 2 channels
  EXPECT_LT(test::max_fd_error(y, [&] { return project(ag::depth_to_space2(y, 2, 3)); }), kTol);
  EXPECT_LT(test::max_fd_error(x, [&] { return project(ag::resize_bilinear(x, 3, 4, 7, 5)); }), kTol);
}

TEST(Autograd, MaskedKeysGetNoWeight) {
  M q = M::Ones(1, 2);
  M k(3, 2);
  k << 1, 0, 5, 5, 0, 1;
  M v(3, 1);
  v << 1, 100, 3;
  auto valid = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1});
  auto out = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), 1, 1, 3, valid);
  EXPECT_NEAR(out.item(), 2.0, 1e-12);  // equal scores on keys 0 and 2
}

TEST(Autograd, DepthToSpaceLayout) {
  M x(1, 4);
  x << 10, 11, 12, 13;
  auto y = ag::depth_to_space2(ag::constant(x), 1, 1);
  ASSERT_EQ(y.rows(), 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(y.value()(i, 0), 10 + i);
}

TEST(Autograd, ConvIdentityKernel) {
  std::mt19937_64 rng(1);
  M x = test::random_matrix<double>(20, 2, rng);
  M w = M::Zero(18, 2);
  w(4 * 2 + 0, 0) = 1.0;  // centre tap
  w(4 * 2 + 1, 1) = 1.0;
  auto y = ag::conv2d(ag::constant(x), 4, 5, ag::constant(w), Var<double>(), 3);
  EXPECT_LT((y.value() - x).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  Var<double> x(M::Constant(1, 1, 3.0), true);
  ag::backward(ag::mul(x, x));
  ag::backward(ag::mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 12.0);
  x.zero_grad();
  ag::backward(ag::scale(x, 2.0));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 2.0);
}

TEST(Autograd, SharedSubgraphCountsBothPaths) {
  Var<double> x(M::Constant(1, 1, 2.0), true);
  auto y = ag::mul(x, x);
  ag::backward(ag::add(y, y));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 8.0);
}

TEST(Autograd, NoGradGuardStopsRecording) {
  Var<double> x(M::Ones(2, 2), true);
  {
    ag::NoGradGuard g;
    EXPECT_FALSE(ag::grad_enabled());
    EXPECT_FALSE(ag::sum(x).requires_grad());
  }
  EXPECT_TRUE(ag::grad_enabled());
  EXPECT_TRUE(ag::sum(x).requires_grad());
}

TEST(Autograd, BackwardNeedsScalarRoot) {
  Var<double> x(M::Ones(2, 2), true);
  EXPECT_THROW(ag::backward(ag::scale(x, 2.0)), InvalidArgument);
}

TEST(Autograd, ShapeErrors) {
  Var<double> a(M::Ones(2, 3));
  Var<double> b(M::Ones(2, 3));
  EXPECT_THROW(ag::matmul(a, b), InvalidArgument);
  EXPECT_THROW(ag::conv2d(a, 2, 2, b, Var<double>(), 3), InvalidArgument);
  EXPECT_THROW(ag::attention(a, b, b, 2, 1, 1), InvalidArgument);
}
