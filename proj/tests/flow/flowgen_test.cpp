#include <mucodec/flow/flowgen.hpp>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"

#include <cmath>
#include <random>

namespace {

using namespace mucodec;
using namespace mucodec::flow;

DitConfig tiny() {
  DitConfig c;
  c.n_layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.norm_groups = 4;
  c.latent_dim = 3;
  c.cond_dim = 5;
  c.ff_mult = 2;
  return c;
}

Tensor<double> randn(Shape s, std::mt19937_64& rng, double sd = 1) {
  std::normal_distribution<double> n(0, sd);
  Tensor<double> t(std::move(s));
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

TEST(Flow, TimestepIndexEndpoints) {
  EXPECT_EQ(timestep_index(0.0), 0u);
  EXPECT_EQ(timestep_index(1.0), 999u);
  EXPECT_EQ(timestep_index(0.5), 499u);
  EXPECT_THROW(timestep_index(-0.01), std::invalid_argument);
  EXPECT_THROW(timestep_index(1.5), std::invalid_argument);
}

TEST(Flow, PathEndpointsAndZeroLossAtTrueVelocity) {
  std::mt19937_64 rng(1);
  const auto x0 = randn(Shape{4, 3}, rng), x1 = randn(Shape{4, 3}, rng);
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  EXPECT_THROW(interpolate(x0, x1, 1.1), std::invalid_argument);
  std::vector<FlowItem<double>> items{{x1, x0, 0.3, std::nullopt, false}, {x1, x0, 0.9, std::nullopt, false}};
  Graph<double> g;
  const auto loss = fm_loss(g, items, [&](const Var<double>&, const FlowItem<double>& it) {
    return g.constant(target_velocity(it.x0, it.x1));
  });
  EXPECT_EQ(loss.value().item(), 0.0);
}

TEST(Dit, OutputShapeMatchesLatent) {
  DitConfig c;
  c.cond_dim = 192;
  Dit<float> m(c, 1);
  std::mt19937_64 rng(2);
  const auto x = randn(Shape{128, 16}, rng), cond = randn(Shape{128, 192}, rng);
  const auto v = m.velocity(x, 0.4, &cond);
  EXPECT_EQ(v.shape(), x.shape());
  EXPECT_TRUE(v.all_finite());
  const auto wrong = randn(Shape{127, 192}, rng);
  EXPECT_THROW(m.velocity(x, 0.4, &wrong), std::invalid_argument);
  EXPECT_THROW(m.check_condition_dim(64), std::invalid_argument);
}

TEST(Dit, ConditionChangesOutputAndNullIsUnconditional) {
  Dit<double> m(tiny(), 3);
  std::mt19937_64 rng(4);
  const auto x = randn(Shape{6, 3}, rng), c1 = randn(Shape{6, 5}, rng), c2 = randn(Shape{6, 5}, rng);
  const auto a = m.velocity(x, 0.5, &c1), b = m.velocity(x, 0.5, &c2);
  EXPECT_FALSE(a == b);
  EXPECT_EQ(m.velocity(x, 0.5, nullptr), m.velocity(x, 0.5, nullptr));
}

TEST(Dit, FlowLossGradientMatchesFiniteDifferences) {
  Dit<double> m(tiny(), 5);
  std::mt19937_64 rng(6);
  std::vector<Tensor<double>> lat{randn(Shape{5, 3}, rng), randn(Shape{5, 3}, rng)};
  std::vector<Tensor<double>> cond{randn(Shape{5, 5}, rng), randn(Shape{5, 5}, rng)};
  Rng r(7);
  auto items = make_items(lat, &cond, 0.0, r);
  items[1].drop = true;  // exercise both branches
  auto params = m.params();
  const auto res =
      mucodec::testing::check_params([&](Graph<double>& g) { return fm_loss(g, m, items); }, params, 200, 8);
  EXPECT_GT(res.checked, 150u);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Dit, NullEmbeddingUntouchedWithoutDropout) {
  Dit<double> m(tiny(), 9);
  std::mt19937_64 rng(10);
  std::vector<Tensor<double>> lat{randn(Shape{5, 3}, rng)}, cond{randn(Shape{5, 5}, rng)};
  Rng r(11);
  for (int i = 0; i < 20; ++i) {
    const auto items = make_items(lat, &cond, 0.0, r);
    ASSERT_FALSE(items[0].drop);
    Graph<double> g;
    g.backward(fm_loss(g, m, items));
    for (auto v : m.null_condition().grad.vec()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Sampler, GuidanceIdentitiesAreExact) {
  Dit<double> m(tiny(), 12);
  std::mt19937_64 rng(13);
  const auto x = randn(Shape{6, 3}, rng), c = randn(Shape{6, 5}, rng);
  auto field = [&](const Tensor<double>& xx, double t, bool cond) { return m.velocity(xx, t, cond ? &c : nullptr); };
  EXPECT_EQ(guided_velocity(field, x, 0.3, 1.0), m.velocity(x, 0.3, &c));
  EXPECT_EQ(guided_velocity(field, x, 0.3, 0.0), m.velocity(x, 0.3, nullptr));
  const auto mid = guided_velocity(field, x, 0.3, 1.5);
  const auto vc = m.velocity(x, 0.3, &c), vu = m.velocity(x, 0.3, nullptr);
  for (std::size_t i = 0; i < mid.size(); ++i) EXPECT_NEAR(mid[i], vu[i] + 1.5 * (vc[i] - vu[i]), 1e-12);

  SamplerConfig s{10, 1.0, 5};
  auto cond_only = [&](const Tensor<double>& xx, double t, bool) { return m.velocity(xx, t, &c); };
  EXPECT_EQ(sample(m, c, s), sample_euler_cfg(cond_only, gaussian_noise(Shape{6, 3}, 5), s));
  s.guidance = 0;
  auto uncond_only = [&](const Tensor<double>& xx, double t, bool) { return m.velocity(xx, t, nullptr); };
  EXPECT_EQ(sample(m, c, s), sample_euler_cfg(uncond_only, gaussian_noise(Shape{6, 3}, 5), s));
}

TEST(Sampler, EulerIsExactOnConstantShift) {
  std::mt19937_64 rng(14);
  const auto x0 = randn(Shape{8, 2}, rng);
  const double c[] = {0.75, -1.25};
  auto field = [&](const Tensor<double>& x, double, bool) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = c[i % 2];
    return v;
  };
  for (std::size_t n : {1, 2, 7, 50, 1000}) {
    const auto x1 = sample_euler_cfg(field, x0, SamplerConfig{n, 1.5, 0});
    for (std::size_t i = 0; i < x1.size(); ++i) EXPECT_NEAR(x1[i], x0[i] + c[i % 2], 1e-12) << n;
  }
  // dyadic data and step sizes leave no rounding at all
  Tensor<double> z(Shape{1, 2});
  for (std::size_t n : {1, 4, 64}) {
    const auto x1 = sample_euler_cfg(field, z, SamplerConfig{n, 1.0, 0});
    EXPECT_EQ(x1[0], 0.75);
    EXPECT_EQ(x1[1], -1.25);
  }
}

// x1 = a x0: probability-flow velocity u(x,t) = (a-1) x / ((1-t) + t a).
double terminal_scale(double a, std::size_t n) {
  auto field = [a](const Tensor<double>& x, double t, bool) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (a - 1) * x[i] / ((1 - t) + t * a);
    return v;
  };
  Tensor<double> one(Shape{1, 1}, 1.0);  // linear field: the terminal std is the image of 1
  return sample_euler_cfg(field, one, SamplerConfig{n, 1.0, 0})[0];
}

TEST(Sampler, ScalingCaseMatchesOdeOracle) {
  for (double a : {0.5, 2.0, 3.0}) {
    const double oracle = terminal_scale(a, 100000);
    EXPECT_NEAR(oracle, a, 1e-3 * a);
    const double s50 = terminal_scale(a, 50), s25 = terminal_scale(a, 25);
    EXPECT_LT(std::abs(s50 - oracle), 0.02 * oracle) << a;
    EXPECT_LE(std::abs(s50 - oracle), std::abs(s25 - oracle)) << a;
  }
  // same statistic from sampled noise
  std::mt19937_64 rng(15);
  const auto x0 = randn(Shape{20000, 1}, rng);
  auto field = [](const Tensor<double>& x, double t, bool) {
    Tensor<double> v(x.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] / ((1 - t) + 2 * t);
    return v;
  };
  const auto x1 = sample_euler_cfg(field, x0, SamplerConfig{50, 1.5, 0});
  double s0 = 0, s1 = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    s0 += x0[i] * x0[i];
    s1 += x1[i] * x1[i];
  }
  EXPECT_NEAR(std::sqrt(s1 / s0), 2.0, 0.02 * 2.0);
}

TEST(Dit, LearnsTwoGaussianMixture) {
  DitConfig c;
  c.n_layers = 2;
  c.heads = 2;
  c.head_dim = 32;
  c.latent_dim = 2;
  c.cond_dim = 0;
  c.ff_mult = 2;
  c.positions = false;
  c.norm_groups = 1;
  Dit<float> m(c, 16);
  const double w0 = 0.3;
  const double mode[2][2] = {{-2.0, 0.0}, {2.0, 0.5}};
  Rng rng(17);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t B = 128;
  // points are independent: every frame attends only to itself
  auto identity_mask = [](std::size_t F) {
    Tensor<float> mask(Shape{F, F}, -1e9f);
    for (std::size_t i = 0; i < F; ++i) mask(i, i) = 0;
    return mask;
  };
  const auto mask = identity_mask(B);
  const int steps = 1500;
  Adam<float> opt(m.params(), AdamOptions{.lr = 3e-3});
  for (int step = 0; step < steps; ++step) {
    opt.set_lr(3e-3 * (1.0 - double(step) / steps));  // the final iterate sets the mode split
    Tensor<float> xt(Shape{B, 2}), target(Shape{B, 2});
    std::vector<std::size_t> tidx(B);
    for (std::size_t i = 0; i < B; ++i) {
      const int k = u(rng) < w0 ? 0 : 1;
      const double t = u(rng);
      tidx[i] = timestep_index(t);
      for (int d = 0; d < 2; ++d) {
        const double x1 = mode[k][d] + 0.3 * n(rng), x0 = n(rng);
        xt(i, std::size_t(d)) = float((1 - t) * x0 + t * x1);
        target(i, std::size_t(d)) = float(x1 - x0);
      }
    }
    Graph<float> g;
    auto loss = ops::mse_loss(m.forward(g.constant(xt), tidx, std::nullopt, mask), g.constant(target));
    g.backward(loss);
    ASSERT_FALSE(opt.step().has_value());
  }
  const std::size_t N = 1000;
  const auto big_mask = identity_mask(N);
  auto field = [&](const Tensor<double>& x, double t, bool) {
    Graph<float> g;
    return m.forward(g.constant(x.cast<float>()), {timestep_index(t)}, std::nullopt, big_mask).value().cast<double>();
  };
  const auto pts = sample_euler_cfg(field, gaussian_noise(Shape{N, 2}, 18), SamplerConfig{50, 1.0, 0});
  std::size_t first = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double d0 = std::hypot(pts(i, 0) - mode[0][0], pts(i, 1) - mode[0][1]);
    const double d1 = std::hypot(pts(i, 0) - mode[1][0], pts(i, 1) - mode[1][1]);
    first += d0 < d1;
  }
  const double p = double(first) / double(N);
  RecordProperty("first_mode_fraction", std::to_string(p));
  EXPECT_NEAR(p, w0, 0.1 * w0);
}

TEST(Dit, CheckpointEmbedsSamplerDefaults) {
  Dit<float> a(tiny(), 19);
  SamplerConfig s{25, 2.0, 7};
  const auto ck = decode_checkpoint(encode_checkpoint(a.params(), to_meta(a.config(), s)));
  const auto [d, s2] = from_meta(ck);
  EXPECT_EQ(s2.n_steps, 25u);
  EXPECT_EQ(s2.guidance, 2.0);
  EXPECT_EQ(d.cond_dim, 5u);
  Dit<float> b(d, 0);
  auto bp = b.params();
  restore(ck, bp);
  std::mt19937_64 rng(20);
  const auto x = randn(Shape{4, 3}, rng), c = randn(Shape{4, 5}, rng);
  EXPECT_EQ(a.velocity(x, 0.2, &c), b.velocity(x, 0.2, &c));
}

}  // namespace
