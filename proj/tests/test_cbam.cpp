#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "test_support.hpp"

using namespace fundusam;
using ag::Index;
using M = ag::Matrix<double>;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

M permute_cols(const M& x, const std::vector<Index>& perm) {
  M out(x.rows(), x.cols());
  for (Index c = 0; c < x.cols(); ++c) out.col(c) = x.col(perm[static_cast<std::size_t>(c)]);
  return out;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.depth = 2;
  c.window_size = 2;
  c.global_blocks = {1};
  c.mlp_ratio = 2.0;
  c.neck_dim = 16;
  return c;
}

}  // namespace

TEST(CbamConfigTest, Validation) {
  EXPECT_THROW((SpatialAttnConfig{4}).validate(), InvalidArgument);
  EXPECT_THROW((SpatialAttnConfig{1}).validate(), InvalidArgument);
  EXPECT_NO_THROW((SpatialAttnConfig{3}).validate());
  EXPECT_THROW((ChannelAttnConfig{0}).validate(), InvalidArgument);
  EXPECT_EQ((ChannelAttnConfig{16}).hidden_dim(8), 1);
  EXPECT_EQ((ChannelAttnConfig{16}).hidden_dim(192), 12);
}

TEST(SpatialGate, SingleChannelPoolsCoincide) {
  std::mt19937_64 rng(1);
  const auto f = ag::constant(test::random_matrix<double>(9, 1, rng));
  EXPECT_EQ(ag::row_max(f).value(), ag::row_mean(f).value());
}

TEST(SpatialGate, ChannelPermutationInvariance) {
  ParameterStore<double> store(2, false);
  SpatialAttention<double> sa(store, "s", SpatialAttnConfig{});
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const M f = test::random_matrix<double>(6 * 5, 7, rng);
    std::vector<Index> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const M fp = permute_cols(f, perm);
    const auto g = sa.gate(ag::constant(f), 6, 5).value();
    const auto gp = sa.gate(ag::constant(fp), 6, 5).value();
    EXPECT_LT((g - gp).cwiseAbs().maxCoeff(), 1e-12);
    const auto out = sa(ag::constant(f), 6, 5).value();
    const auto outp = sa(ag::constant(fp), 6, 5).value();
    EXPECT_LT((permute_cols(out, perm) - outp).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SpatialGate, CentreTapOracle) {
  ParameterStore<double> store(4, false);
  SpatialAttention<double> sa(store, "s", SpatialAttnConfig{});
  store.all()[0].var.mutable_value().setZero();
  store.all()[0].var.mutable_value()((3 * 7 + 3) * 2 + 0, 0) = 1.0;  // max map, centre tap
  store.all()[0].var.mutable_value()((3 * 7 + 3) * 2 + 1, 0) = 1.0;  // mean map, centre tap
  M f(4, 2);  // 2 x 2 grid, 2 channels
  f << 0.3, -0.7, 1.2, 0.4, -0.5, -0.9, 0.0, 2.0;
  const auto g = sa.gate(ag::constant(f), 2, 2).value();
  for (Index i = 0; i < 4; ++i) {
    const double mx = std::max(f(i, 0), f(i, 1));
    const double mean = 0.5 * (f(i, 0) + f(i, 1));
    EXPECT_NEAR(g(i, 0), sigmoid(mx + mean), 1e-15);
  }
}

TEST(SpatialGate, GateInOpenIntervalAndShrinks) {
  ParameterStore<double> store(5, false);
  SpatialAttention<double> sa(store, "s", SpatialAttnConfig{});
  std::mt19937_64 rng(6);
  const M f = test::random_matrix<double>(64, 5, rng, 3.0);
  const auto g = sa.gate(ag::constant(f), 8, 8).value();
  EXPECT_GT(g.minCoeff(), 0.0);
  EXPECT_LT(g.maxCoeff(), 1.0);
  const auto out = sa(ag::constant(f), 8, 8).value();
  EXPECT_TRUE((out.cwiseAbs().array() <= f.cwiseAbs().array()).all());
}

TEST(ChannelGate, ZeroMlpGivesHalf) {
  ParameterStore<double> store(7, false);
  ChannelAttention<double> ca(store, "c", 8, ChannelAttnConfig{4});
  for (auto& p : store.all()) p.var.mutable_value().setZero();
  std::mt19937_64 rng(8);
  const M f = test::random_matrix<double>(12, 8, rng);
  const auto w = ca.weights(ag::constant(f)).value();
  for (Index c = 0; c < 8; ++c) EXPECT_EQ(w(0, c), 0.5);
  EXPECT_LT((ca(ag::constant(f)).value() - 0.5 * f).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ChannelGate, ConstantFieldUsesTwiceMlp) {
  ParameterStore<double> store(9, false);
  ChannelAttention<double> ca(store, "c", 8, ChannelAttnConfig{2});
  std::mt19937_64 rng(10);
  const M v = test::random_matrix<double>(1, 8, rng);
  const auto mlp = ca.mlp(ag::constant(v)).value();
  for (Index n : {1, 4, 25}) {
    const M f = v.replicate(n, 1);
    const auto w = ca.weights(ag::constant(f)).value();
    for (Index c = 0; c < 8; ++c) EXPECT_NEAR(w(0, c), sigmoid(2.0 * mlp(0, c)), 1e-14);
  }
}

TEST(ChannelGate, IndependentOracle) {
  ParameterStore<double> store(11, false);
  ChannelAttention<double> ca(store, "c", 8, ChannelAttnConfig{2});
  // Biases start at zero; give them values so the oracle exercises them.
  std::mt19937_64 rng(12);
  for (auto& p : store.all()) p.var.mutable_value() = test::random_matrix<double>(p.rows, p.cols, rng);
  const M f = test::random_matrix<double>(16, 8, rng);  // 4 x 4 x 8
  const M& w1 = ca.fc1().weight.value();
  const M& b1 = ca.fc1().bias.value();
  const M& w2 = ca.fc2().weight.value();
  const M& b2 = ca.fc2().bias.value();
  std::vector<double> avg(8, 0.0);
  std::vector<double> mx(8, -INFINITY);
  for (int i = 0; i < 16; ++i) {
    for (int c = 0; c < 8; ++c) {
      avg[c] += f(i, c) / 16.0;
      mx[c] = std::max(mx[c], f(i, c));
    }
  }
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> h(4, 0.0);
    for (int j = 0; j < 4; ++j) {
      double s = b1(0, j);
      for (int c = 0; c < 8; ++c) s += v[c] * w1(c, j);
      h[j] = std::max(0.0, s);
    }
    std::vector<double> o(8, 0.0);
    for (int c = 0; c < 8; ++c) {
      double s = b2(0, c);
      for (int j = 0; j < 4; ++j) s += h[j] * w2(j, c);
      o[c] = s;
    }
    return o;
  };
  const auto a = mlp(avg);
  const auto m = mlp(mx);
  const auto out = ca(ag::constant(f)).value();
  double worst = 0.0;
  for (int i = 0; i < 16; ++i) {
    for (int c = 0; c < 8; ++c) worst = std::max(worst, std::abs(out(i, c) - f(i, c) * sigmoid(a[c] + m[c])));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(CbamGradients, FiniteDifferences) {
  ParameterStore<double> store(13, false);
  SpatialAttention<double> sa(store, "s", SpatialAttnConfig{3});
  ChannelAttention<double> ca(store, "c", 6, ChannelAttnConfig{2});
  std::mt19937_64 rng(14);
  ag::Var<double> f(test::random_matrix<double>(20, 6, rng), true);
  const auto w = ag::constant(test::random_matrix<double>(20, 6, rng));
  auto spatial_loss = [&] { return ag::sum(ag::mul(sa(f, 4, 5), w)); };
  auto channel_loss = [&] { return ag::sum(ag::mul(ca(f), w)); };
  EXPECT_LT(test::max_fd_error(f, spatial_loss), 1e-3);
  EXPECT_LT(test::max_fd_error(sa.weight(), spatial_loss), 1e-3);
  EXPECT_LT(test::max_fd_error(f, channel_loss), 1e-3);
  EXPECT_LT(test::max_fd_error(ca.fc1().weight, channel_loss), 1e-3);
}

TEST(CbamHooks, DoubleInstallFails) {
  ParameterStore<double> store(15, false);
  ImageEncoder<double> enc(store, tiny_encoder(), std::nullopt);
  EXPECT_FALSE(enc.hooks_installed());
  enc.install_hooks(CbamConfig{});
  EXPECT_TRUE(enc.hooks_installed());
  EXPECT_THROW(enc.install_hooks(CbamConfig{}), InvalidState);
}

class CbamVsPlain : public ::testing::Test {
 protected:
  CbamVsPlain() : plain_store(21, false), hooked_store(21, false),
                  plain(plain_store, tiny_encoder(), AdapterConfig{}),
                  hooked(hooked_store, tiny_encoder(), AdapterConfig{}) {
    hooked.install_hooks(CbamConfig{});
    std::mt19937_64 rng(22);
    img = test::random_polar(32, 32, 3, rng);
  }

  ParameterStore<double> plain_store;
  ParameterStore<double> hooked_store;
  ImageEncoder<double> plain;
  ImageEncoder<double> hooked;
  PolarRaster img;
};

TEST_F(CbamVsPlain, BypassEqualsPlainExactly) {
  ag::NoGradGuard g;
  EXPECT_EQ(hooked.encode(img, {true, false}).tokens.value(), plain.encode(img).tokens.value());
}

TEST_F(CbamVsPlain, ForcedOpenGatesEqualPlain) {
  ag::NoGradGuard g;
  hooked.cbam_config().force_open_gates = true;
  const auto a = hooked.encode(img).tokens.value();
  const auto b = plain.encode(img).tokens.value();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5);
  hooked.cbam_config().spatial_on_pixels = true;
  EXPECT_LT((hooked.encode(img).tokens.value() - b).cwiseAbs().maxCoeff(), 1e-5);
}

TEST_F(CbamVsPlain, ActiveGatesChangeOutput) {
  ag::NoGradGuard g;
  EXPECT_GT((hooked.encode(img).tokens.value() - plain.encode(img).tokens.value()).cwiseAbs().maxCoeff(), 1e-6);
  hooked.cbam_config().spatial_on_pixels = true;
  const auto pix = hooked.encode(img).tokens.value();
  EXPECT_TRUE(pix.allFinite());
  EXPECT_EQ(pix.rows(), 16);
}

TEST_F(CbamVsPlain, PixelGateGradientFlows) {
  hooked.cbam_config().spatial_on_pixels = true;
  const auto out = hooked.encode(img);
  ag::backward(ag::mean(ag::mul(out.tokens, out.tokens)));
  const auto& g = hooked.spatial_attention().weight().grad();
  ASSERT_GT(g.size(), 0);
  EXPECT_GT(g.cwiseAbs().maxCoeff(), 0.0);
}
