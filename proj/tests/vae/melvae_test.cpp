#include <mucodec/vae/melvae.hpp>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"

#include <cmath>
#include <random>

namespace {

using namespace mucodec;
using namespace mucodec::vae;

VaeConfig tiny() {
  VaeConfig c;
  c.n_mels = 6;
  c.latent = 3;
  c.hidden = 8;
  return c;
}

Tensor<double> random_mel(std::size_t T, std::size_t bins, std::mt19937_64& rng) {
  std::normal_distribution<double> n(-4, 2);
  Tensor<double> t(Shape{T, bins});
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

TEST(Kl, ClosedFormExamples) {
  Tensor<double> zero(Shape{5, 4}), one(Shape{1, 1}, 1.0), lv(Shape{1, 1});
  EXPECT_EQ(kl_closed_form(zero, zero), 0.0);
  EXPECT_DOUBLE_EQ(kl_closed_form(one, lv), 0.5);
  Graph<double> g;
  EXPECT_DOUBLE_EQ(kl_divergence(g.constant(one), g.constant(lv)).value().item(), 0.5);
  EXPECT_EQ(kl_divergence(g.constant(zero), g.constant(zero)).value().item(), 0.0);
}

TEST(Kl, ClosedFormMatchesMonteCarlo) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (auto [mu, sigma] : {std::pair{0.8, 0.9}, std::pair{-0.5, 1.1}, std::pair{1.5, 1.0}}) {
    Tensor<double> m(Shape{1, 1}, mu), lv(Shape{1, 1}, 2 * std::log(sigma));
    double acc = 0;
    const int N = 100000;
    for (int i = 0; i < N; ++i) {
      const double e = n(rng), z = mu + sigma * e;
      acc += (-0.5 * e * e - std::log(sigma)) - (-0.5 * z * z);  // log q(z) - log p(z)
    }
    EXPECT_NEAR(acc / N, kl_closed_form(m, lv), 0.02 * kl_closed_form(m, lv)) << mu << " " << sigma;
  }
}

TEST(MelVae, ShapeContract) {
  MelVae<float> v(VaeConfig{}, 1);
  std::mt19937_64 rng(2);
  const auto mel = random_mel(512, 80, rng);
  const auto [mu, lv] = v.encode_posterior(mel);
  EXPECT_EQ(mu.shape(), (Shape{128, 16}));
  EXPECT_EQ(lv.shape(), (Shape{128, 16}));
  const auto back = v.decode_mel(mu);
  EXPECT_EQ(back.shape(), (Shape{512, 80}));
}

TEST(MelVae, PadsToMultipleOfFourAndRejectsEmpty) {
  MelVae<double> v(tiny(), 1);
  std::mt19937_64 rng(3);
  EXPECT_EQ(v.encode_mean(random_mel(13, 6, rng)).rows(), 4u);
  EXPECT_THROW(v.encode_mean(Tensor<double>(Shape{0, 6})), std::invalid_argument);
  Graph<double> g;
  EXPECT_THROW(v.encode(g.constant(Tensor<double>(Shape{6, 6}))), std::invalid_argument);
}

TEST(MelVae, DeterministicAndZeroLatentIsFixed) {
  MelVae<double> v(tiny(), 4);
  std::mt19937_64 rng(5);
  const auto mel = random_mel(20, 6, rng);
  EXPECT_EQ(v.encode_posterior(mel), v.encode_posterior(mel));
  const Tensor<double> z(Shape{5, 3});
  const auto a = v.decode_mel(z), b = v.decode_mel(z);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.all_finite());
  Tensor<double> bad(Shape{2, 3});
  bad[1] = std::nan("");
  EXPECT_THROW(v.decode_mel(bad), std::invalid_argument);
}

TEST(MelVae, TranslationCovariantInFourFrameSteps) {
  MelVae<double> v(tiny(), 6);
  std::mt19937_64 rng(7);
  const auto x = v.normalize(random_mel(48, 6, rng));
  Tensor<double> shifted(Shape{44, 6});
  std::copy(x.vec().begin() + 24, x.vec().end(), shifted.vec().begin());
  Graph<double> g;
  const auto a = v.encode(g.constant(x)).mu.value(), b = v.encode(g.constant(shifted)).mu.value();
  ASSERT_EQ(b.rows(), 11u);
  for (std::size_t t = 2; t + 2 < 11; ++t)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a(t + 1, c), b(t, c), 1e-12);
  Tensor<double> za(Shape{12, 3});
  for (auto& z : za.vec()) z = std::normal_distribution<double>(0, 1)(rng);
  Tensor<double> zb(Shape{11, 3});
  std::copy(za.vec().begin() + 3, za.vec().end(), zb.vec().begin());
  const auto da = v.decode(g.constant(za)).value(), db = v.decode(g.constant(zb)).value();
  for (std::size_t t = 12; t + 12 < 44; ++t)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(da(t + 4, c), db(t, c), 1e-12);
}

TEST(MelVae, GradientMatchesFiniteDifferences) {
  MelVae<double> v(tiny(), 8);
  std::mt19937_64 rng(9);
  const auto x = v.normalize(random_mel(16, 6, rng));
  auto params = v.params();
  const auto r = mucodec::testing::check_params(
      [&](Graph<double>& g) {
        Rng eps(10);
        return v.loss(g, x, eps).total;
      },
      params, 200, 11);
  EXPECT_GT(r.checked, 150u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(MelVae, TrainingReducesReconstruction) {
  auto c = tiny();
  c.n_mels = 16;
  c.hidden = 24;
  MelVae<float> v(c, 12);
  std::mt19937_64 rng(13);
  // smooth spectro-temporal patterns so the latent has structure to keep
  std::vector<Tensor<float>> clips;
  std::uniform_real_distribution<double> u(0, 6.28);
  for (int i = 0; i < 16; ++i) {
    Tensor<double> m(Shape{32, 16});
    const double p1 = u(rng), p2 = u(rng);
    for (std::size_t t = 0; t < 32; ++t)
      for (std::size_t b = 0; b < 16; ++b) m(t, b) = std::sin(0.3 * double(t) + p1) * std::cos(0.4 * double(b) + p2);
    clips.push_back(v.normalize(m));
  }
  Adam<float> opt(v.params(), AdamOptions{.lr = 2e-3});
  Rng eps(14);
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    std::vector<Tensor<float>> batch(clips.begin() + (step % 4) * 4, clips.begin() + (step % 4) * 4 + 4);
    const auto t = v.train_step(batch, opt, eps);
    if (step == 0) first = t.recon_l1;
    last = t.recon_l1;
  }
  EXPECT_LT(last, first);
  EXPECT_LT(last, 0.6 * first);
}

TEST(MelVae, CheckpointRoundTrip) {
  MelVae<float> a(tiny(), 15);
  a.set_normalization(std::vector<double>(6, -2.0), std::vector<double>(6, 3.0));
  const auto bytes = encode_checkpoint(a.params(), a.config().to_meta());
  const auto ck = decode_checkpoint(bytes);
  MelVae<float> b(VaeConfig::from_meta(ck), 99);
  auto bp = b.params();
  restore(ck, bp);
  std::mt19937_64 rng(16);
  const auto mel = random_mel(24, 6, rng);
  EXPECT_EQ(a.encode_mean(mel), b.encode_mean(mel));
}

}  // namespace
