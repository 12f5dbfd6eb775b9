#include <mucodec/encoder/muencoder.hpp>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"

#include <cmath>
#include <filesystem>
#include <random>

namespace {

using namespace mucodec;
using namespace mucodec::encoder;

// ---------------------------------------------------------------- CTC

Tensor<double> log_softmax(const Tensor<double>& logits) {
  Tensor<double> out = logits;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    auto r = out.row(t);
    double m = *std::max_element(r.begin(), r.end()), z = 0;
    for (double v : r) z += std::exp(v - m);
    for (auto& v : r) v = v - m - std::log(z);
  }
  return out;
}

Tensor<double> random_logits(std::size_t T, std::size_t C, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1.5);
  Tensor<double> t(Shape{T, C});
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

// Sum over every length-T path whose collapse equals y.
double brute_force_nll(const Tensor<double>& lp, const std::vector<std::size_t>& y, std::size_t blank) {
  const std::size_t T = lp.rows(), C = lp.cols();
  std::vector<std::size_t> path(T, 0);
  double total = 0;
  while (true) {
    std::vector<std::size_t> collapsed;
    std::size_t prev = blank;
    double logp = 0;
    for (std::size_t t = 0; t < T; ++t) {
      logp += lp(t, path[t]);
      if (path[t] != blank && path[t] != prev) collapsed.push_back(path[t]);
      prev = path[t];
    }
    if (collapsed == y) total += std::exp(logp);
    std::size_t i = 0;
    while (i < T && ++path[i] == C) path[i++] = 0;
    if (i == T) break;
  }
  return -std::log(total);
}

TEST(Ctc, SingleFrameUniform) {
  Tensor<double> lp(Shape{1, 3}, std::log(1.0 / 3));
  EXPECT_NEAR(ctc::nll(lp, {0}, 2), std::log(3.0), 1e-12);
}

TEST(Ctc, EmptyTranscriptIsAllBlank) {
  std::mt19937_64 rng(1);
  const auto lp = log_softmax(random_logits(2, 3, rng));
  EXPECT_NEAR(ctc::nll(lp, {}, 2), -(lp(0, 2) + lp(1, 2)), 1e-12);
}

TEST(Ctc, MatchesExhaustivePathSum) {
  std::mt19937_64 rng(2);
  int cases = 0;
  for (std::size_t T = 1; T <= 6; ++T) {
    for (std::size_t len = 0; len <= 3; ++len) {
      for (std::size_t code = 0; code < (1u << len); ++code) {
        std::vector<std::size_t> y;
        for (std::size_t i = 0; i < len; ++i) y.push_back((code >> i) & 1);
        if (ctc::min_frames(y) > T) {
          EXPECT_THROW(ctc::nll(log_softmax(random_logits(T, 3, rng)), y, 2), std::invalid_argument);
          continue;
        }
        const auto lp = log_softmax(random_logits(T, 3, rng));
        EXPECT_NEAR(ctc::nll(lp, y, 2), brute_force_nll(lp, y, 2), 1e-9) << "T=" << T << " len=" << len;
        ++cases;
      }
    }
  }
  EXPECT_EQ(cases, 60);
}

TEST(Ctc, RepeatedSymbolsNeedSeparatingBlank) {
  EXPECT_EQ(ctc::min_frames({1, 1}), 3u);
  EXPECT_EQ(ctc::min_frames({0, 1, 1, 1}), 6u);
  Tensor<double> lp(Shape{2, 3}, std::log(1.0 / 3));
  EXPECT_THROW(ctc::nll(lp, {1, 1}, 2), std::invalid_argument);
  EXPECT_THROW(ctc::nll(lp, {2}, 2), std::invalid_argument);
  EXPECT_THROW(ctc::nll(lp, {5}, 2), std::invalid_argument);
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (const auto& y : std::vector<std::vector<std::size_t>>{{}, {0}, {1, 1}, {0, 1, 0}, {3, 2, 3}}) {
    const auto x = random_logits(8, 5, rng);
    const auto r = mucodec::testing::check_input(
        [&](Graph<double>&, Var<double> in) { return ctc::loss_from_logits(in, y, 4); }, x);
    EXPECT_LT(r.max_rel_error, 1e-6);
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Ctc, OccupancyRowsSumToOne) {
  std::mt19937_64 rng(4);
  const auto lp = log_softmax(random_logits(10, 4, rng));
  Graph<double> g;
  auto in = g.input(lp);
  g.backward(ctc::loss(in, {0, 2, 2}, 3));
  const auto gr = g.grad(in);
  for (std::size_t t = 0; t < 10; ++t) {
    double s = 0;
    for (double v : gr.row(t)) s += v;
    EXPECT_NEAR(s, -1.0, 1e-12);
  }
}

TEST(Ctc, GreedyDecodeAndEditDistance) {
  Tensor<double> s(Shape{7, 3});
  const std::size_t best[] = {0, 0, 2, 0, 1, 2, 1};
  for (std::size_t t = 0; t < 7; ++t) s(t, best[t]) = 1;
  EXPECT_EQ(ctc::greedy_decode(s, 2), (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_EQ(ctc::edit_distance({0, 1, 2}, {0, 2}), 1u);
  EXPECT_EQ(ctc::edit_distance({}, {1, 1}), 2u);
  EXPECT_EQ(ctc::edit_distance({3, 1, 4, 1, 5}, {3, 1, 4, 1, 5}), 0u);
  EXPECT_EQ(ctc::edit_distance({1, 2, 3}, {3, 2, 1}), 2u);
}

// ---------------------------------------------------------------- model

MuEncoderConfig tiny() {
  MuEncoderConfig c;
  c.n_layers = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.conv_kernel = 3;
  c.ff_mult = 2;
  c.tap_layer = 1;
  c.n_mels = 6;
  c.n_cqt = 5;
  c.vocab = 3;
  c.head_hidden = 8;
  c.mlm_vocab = 8;
  c.mlm_dim = 4;
  c.mlm_span = 2;
  return c;
}

Tensor<double> random_mel(std::size_t T, std::size_t bins, std::mt19937_64& rng) {
  std::normal_distribution<double> n(-4, 2);
  Tensor<double> t(Shape{T, bins});
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

dsp::MelSpec as_mel(Tensor<double> frames) { return dsp::MelSpec{std::move(frames), 240, 24000, frames.cols()}; }

TEST(MuEncoder, StemDownsamplesByFour) {
  MuEncoder<double> m(tiny(), 1);
  std::mt19937_64 rng(5);
  for (std::size_t T = 4; T <= 13; ++T) {
    Graph<double> g;
    const auto layers = m.forward(g.constant(m.normalize_mel(random_mel(T, 6, rng))));
    ASSERT_EQ(layers.size(), 2u);
    for (const auto& l : layers) {
      EXPECT_EQ(l.rows(), (T + 3) / 4) << T;
      EXPECT_EQ(l.cols(), 8u);
    }
  }
}

TEST(MuEncoder, StemIsLengthCovariant) {
  MuEncoder<double> m(tiny(), 1);
  std::mt19937_64 rng(21);
  const auto a = m.normalize_mel(random_mel(16, 6, rng)), b = m.normalize_mel(random_mel(12, 6, rng));
  Tensor<double> ab(Shape{28, 6});
  std::copy(a.vec().begin(), a.vec().end(), ab.vec().begin());
  std::copy(b.vec().begin(), b.vec().end(), ab.vec().begin() + 96);
  Graph<double> g;
  const auto sa = m.stem(g.constant(a)).value(), sb = m.stem(g.constant(b)).value();
  const auto sab = m.stem(g.constant(ab)).value();
  ASSERT_EQ(sab.rows(), 7u);
  // receptive field of the two stride-2 convs reaches one token frame across the seam
  for (std::size_t t = 0; t + 1 < 4; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(sab(t, c), sa(t, c));
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(sab(4 + t, c), sb(t, c));
}

TEST(MuEncoder, TooShortInputRejected) {
  MuEncoder<double> m(tiny(), 1);
  std::mt19937_64 rng(6);
  EXPECT_THROW(m.encode(as_mel(random_mel(3, 6, rng))), std::invalid_argument);
  EXPECT_THROW(m.encode(as_mel(random_mel(8, 7, rng))), std::invalid_argument);
}

TEST(MuEncoder, EncodeReportsTokenRateAndTaps) {
  MuEncoder<double> m(tiny(), 2);
  std::mt19937_64 rng(7);
  const auto layers = m.encode(as_mel(random_mel(40, 6, rng)));
  ASSERT_EQ(layers.size(), 2u);
  EXPECT_DOUBLE_EQ(layers[0].token_rate_hz, 25.0);
  EXPECT_EQ(tap(layers, 1).frames(), 10u);
  EXPECT_FALSE(tap(layers, 1).values == tap(layers, 2).values);
  EXPECT_THROW(tap(layers, 0), std::out_of_range);
  EXPECT_THROW(tap(layers, 3), std::out_of_range);
}

TEST(MuEncoder, ConfigValidation) {
  auto c = tiny();
  c.tap_layer = 3;
  EXPECT_THROW(MuEncoder<double>(c, 0), std::invalid_argument);
  c = tiny();
  c.mlm_coverage = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny();
  c.downsample = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NO_THROW(MuEncoderConfig::desk().validate());
  const auto r = MuEncoderConfig::reference();
  EXPECT_EQ(r.n_layers, 13u);
  EXPECT_EQ(r.tap_layer, 7u);
}

TEST(MuEncoder, Stage2GradientMatchesFiniteDifferences) {
  MuEncoder<double> m(tiny(), 3);
  std::mt19937_64 rng(8);
  Stage2Example ex{random_mel(14, 6, rng), random_mel(14, 5, rng), {0, 2}};
  m.set_normalization(std::vector<double>(6, -4.0), std::vector<double>(6, 2.0), std::vector<double>(5, -4.0),
                      std::vector<double>(5, 2.0));
  auto params = m.params();
  const auto r = mucodec::testing::check_params(
      [&](Graph<double>& g) { return stage2_loss(g, m, ex).total; }, params, 200, 9);
  EXPECT_GT(r.checked, 150u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(MuEncoder, MlmGradientMatchesFiniteDifferences) {
  MuEncoder<double> m(tiny(), 4);
  MlmTargets<double> targets(m.config(), 77);
  std::mt19937_64 rng(10);
  const auto mel = m.normalize_mel(random_mel(20, 6, rng));
  Rng mask_rng(3);
  const auto mask = make_mask(5, 2, 0.3, mask_rng);
  auto params = m.params();
  const auto r = mucodec::testing::check_params(
      [&](Graph<double>& g) {
        Rng noise(11);  // same noise in every evaluation
        return mlm_loss(g, m, targets, mel, mask, noise);
      },
      params, 200, 12);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(MuEncoder, CtcAblationLeavesCtcHeadUntouched) {
  MuEncoder<double> m(tiny(), 5);
  std::mt19937_64 rng(13);
  Stage2Example ex{random_mel(16, 6, rng), random_mel(16, 5, rng), {1}};
  Graph<double> g;
  auto terms = stage2_loss(g, m, ex, false);
  EXPECT_NEAR(terms.total.value().item(), terms.mel.value().item() + terms.cqt.value().item(), 1e-12);
  g.backward(terms.total);
  for (auto v : m.ctc_head().weight.grad.vec()) EXPECT_EQ(v, 0.0);
  Graph<double> g2;
  auto with = stage2_loss(g2, m, ex, true);
  EXPECT_NEAR(with.total.value().item() - terms.total.value().item(), 0.2 * with.ctc.value().item(), 1e-12);
}

TEST(Mlm, MaskCoverageAndSpans) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = make_mask(160, 10, 0.3, rng);
    EXPECT_GE(m.coverage(), 0.3);
    EXPECT_LE(m.coverage(), 0.4);
    for (auto [s, len] : m.spans) EXPECT_LE(s + len, 160u);
  }
  EXPECT_THROW(make_mask(160, 10, 0.0, rng), std::invalid_argument);
}

TEST(Mlm, TargetsAreFrozenAndReproducible) {
  auto c = tiny();
  MlmTargets<double> a(c, 21), b(c, 21), other(c, 22);
  std::mt19937_64 rng(15);
  const auto mel = random_mel(64, 6, rng);
  const auto la = a.labels(mel, 4);
  EXPECT_EQ(la.size(), 16u);
  EXPECT_EQ(la, b.labels(mel, 4));
  EXPECT_NE(la, other.labels(mel, 4));
  EXPECT_FALSE(a.projection.trainable);
  EXPECT_FALSE(a.codebook.trainable);

  MuEncoder<double> m(c, 6);
  NamedParams<double> tp;
  a.collect(tp, "mlm_targets");
  const auto before = a.projection.value;
  Adam<double> opt(tp, AdamOptions{});
  for (auto& [n, p] : tp) p->grad.fill(1.0);
  ASSERT_FALSE(opt.step().has_value());
  EXPECT_EQ(a.projection.value, before);
}

TEST(Mlm, InitialLossIsNearLogVocabulary) {
  MuEncoder<float> m(MuEncoderConfig::desk(), 7);
  MlmTargets<float> targets(m.config(), 8);
  std::mt19937_64 rng(16);
  const auto mel = m.normalize_mel(random_mel(128, 80, rng));
  Rng mr(17);
  const auto mask = make_mask(32, 10, 0.3, mr);
  Graph<float> g;
  const double loss = mlm_loss(g, m, targets, mel, mask, mr).value().item();
  EXPECT_NEAR(loss, std::log(64.0), 0.05);
}

TEST(Mlm, PretrainStepReducesLossOnFixedBatch) {
  auto c = tiny();
  MuEncoder<double> m(c, 8);
  MlmTargets<double> targets(c, 9);
  std::mt19937_64 rng(18);
  std::vector<Tensor<double>> batch{m.normalize_mel(random_mel(40, 6, rng)), m.normalize_mel(random_mel(40, 6, rng))};
  Adam<double> opt(m.params(), AdamOptions{.lr = 3e-3});
  Rng r(19);
  double first = 0, last = 0;
  for (int s = 0; s < 150; ++s) {
    Rng step_rng(100);  // same masks every step
    const double l = mlm_pretrain_step(m, targets, batch, opt, step_rng);
    if (s == 0) first = l;
    last = l;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(MuEncoder, CheckpointRoundTrip) {
  auto c = tiny();
  c.tap_layer = 2;
  MuEncoder<float> a(c, 10);
  std::mt19937_64 rng(20);
  a.set_normalization(std::vector<double>(6, -3.0), std::vector<double>(6, 1.5), std::vector<double>(5, -2.0),
                      std::vector<double>(5, 0.5));
  const auto path = (std::filesystem::temp_directory_path() / "muc_encoder_ck.bin").string();
  save_checkpoint(path, a.params(), a.config().to_meta());
  const auto ck = load_checkpoint(path);
  const auto cfg = MuEncoderConfig::from_meta(ck);
  EXPECT_EQ(cfg.tap_layer, 2u);
  MuEncoder<float> b(cfg, 999);
  auto bp = b.params();
  restore(ck, bp);
  const auto mel = as_mel(random_mel(24, 6, rng));
  const auto ea = a.encode(mel), eb = b.encode(mel);
  for (std::size_t l = 0; l < ea.size(); ++l) EXPECT_EQ(ea[l].values, eb[l].values);
  std::filesystem::remove(path);
}

}  // namespace
