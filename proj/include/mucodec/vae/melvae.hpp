#pragma once

#include <mucodec/core/adam.hpp>
#include <mucodec/core/checkpoint.hpp>
#include <mucodec/core/nn.hpp>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::vae {

/// Convolutional VAE over log-mel frames. Two stride-2 convolutions take
/// 100 Hz mel to a 25 Hz latent; the decoder mirrors them with nearest
/// upsampling.
struct VaeConfig {
  std::size_t n_mels = 80;
  std::size_t latent = 16;
  std::size_t hidden = 128;
  std::size_t kernel = 3;
  double beta = 1e-2;

  static constexpr std::size_t kCompression = 4;

  void validate() const {
    if (n_mels == 0 || latent == 0 || hidden == 0) throw std::invalid_argument("vae: dimensions must be positive");
    if (kernel % 2 == 0) throw std::invalid_argument("vae: kernel must be odd");
    if (!(beta >= 0)) throw std::invalid_argument("vae: beta must be >= 0");
  }

  Metadata to_meta() const {
    return {{"kind", "melvae"},
            {"n_mels", std::to_string(n_mels)},
            {"latent", std::to_string(latent)},
            {"hidden", std::to_string(hidden)},
            {"kernel", std::to_string(kernel)},
            {"beta", std::to_string(beta)}};
  }

  static VaeConfig from_meta(const Checkpoint& ck) {
    if (ck.require_meta("kind") != "melvae") throw std::runtime_error("checkpoint is not a melvae checkpoint");
    VaeConfig c;
    c.n_mels = std::stoull(ck.require_meta("n_mels"));
    c.latent = std::stoull(ck.require_meta("latent"));
    c.hidden = std::stoull(ck.require_meta("hidden"));
    c.kernel = std::stoull(ck.require_meta("kernel"));
    c.beta = std::stod(ck.require_meta("beta"));
    c.validate();
    return c;
  }
};

/// Repeats the last frame until the frame count is a multiple of `m`.
inline Tensor<double> pad_frames(const Tensor<double>& x, std::size_t m) {
  if (x.rows() == 0) throw std::invalid_argument("pad_frames: empty input");
  const std::size_t T = (x.rows() + m - 1) / m * m, C = x.cols();
  Tensor<double> out(Shape{T, C});
  for (std::size_t t = 0; t < T; ++t) {
    const auto src = x.row(std::min(t, x.rows() - 1));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

/// KL(N(mu, exp(logvar)) || N(0, 1)) summed over channels, averaged over frames.
template <typename T>
Var<T> kl_divergence(const Var<T>& mu, const Var<T>& logvar) {
  // 0.5 * (mu^2 + e^logvar - 1 - logvar)
  Var<T> e = ops::sub(ops::add(ops::square(mu), ops::exp(logvar)), ops::add_scalar(logvar, T(1)));
  return ops::scale(ops::sum(e), T(0.5) / T(mu.rows()));
}

template <typename T>
double kl_closed_form(const Tensor<T>& mu, const Tensor<T>& logvar) {
  double s = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu[i], lv = logvar[i];
    s += 0.5 * (m * m + std::exp(lv) - 1 - lv);
  }
  return s / double(mu.rows());
}

template <typename T>
struct Posterior {
  Var<T> mu, logvar;
};

struct VaeTerms {
  double loss = 0, recon_l1 = 0, kl = 0;
};

template <typename T>
class MelVae {
 public:
  MelVae() = default;
  MelVae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t H = cfg.hidden, K = cfg.kernel, p = K / 2;
    mean_ = Parameter<T>(Tensor<T>(Shape{cfg.n_mels}), false);
    inv_std_ = Parameter<T>(Tensor<T>(Shape{cfg.n_mels}, T(1)), false);
    enc_in_ = nn::Conv1d<T>(cfg.n_mels, H, K, 1, p, p, rng);
    enc_down1_ = nn::Conv1d<T>(H, H, 4, 2, 1, 1, rng);
    enc_down2_ = nn::Conv1d<T>(H, H, 4, 2, 1, 1, rng);
    enc_out_ = nn::Conv1d<T>(H, 2 * cfg.latent, K, 1, p, p, rng);
    dec_in_ = nn::Conv1d<T>(cfg.latent, H, K, 1, p, p, rng);
    dec_up1_ = nn::Conv1d<T>(H, H, K, 1, p, p, rng);
    dec_up2_ = nn::Conv1d<T>(H, H, K, 1, p, p, rng);
    dec_out_ = nn::Conv1d<T>(H, cfg.n_mels, K, 1, p, p, rng);
  }

  const VaeConfig& config() const { return cfg_; }

  NamedParams<T> params() {
    NamedParams<T> out;
    out.emplace_back("norm.mean", &mean_);
    out.emplace_back("norm.inv_std", &inv_std_);
    enc_in_.collect(out, "enc.in");
    enc_down1_.collect(out, "enc.down1");
    enc_down2_.collect(out, "enc.down2");
    enc_out_.collect(out, "enc.out");
    dec_in_.collect(out, "dec.in");
    dec_up1_.collect(out, "dec.up1");
    dec_up2_.collect(out, "dec.up2");
    dec_out_.collect(out, "dec.out");
    return out;
  }

  void set_normalization(const std::vector<double>& mean, const std::vector<double>& std) {
    if (mean.size() != cfg_.n_mels || std.size() != cfg_.n_mels) {
      throw std::invalid_argument("vae: normalization size mismatch");
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean_.value[i] = T(mean[i]);
      inv_std_.value[i] = T(1.0 / std::max(std[i], 1e-3));
    }
  }

  Tensor<T> normalize(const Tensor<double>& mel) const {
    if (mel.cols() != cfg_.n_mels) throw std::invalid_argument("vae: mel bin count mismatch");
    Tensor<T> out(mel.shape());
    const std::size_t C = mel.cols();
    for (std::size_t i = 0; i < mel.size(); ++i)
      out[i] = T((mel[i] - double(mean_.value[i % C])) * double(inv_std_.value[i % C]));
    return out;
  }

  Tensor<double> denormalize(const Tensor<T>& x) const {
    Tensor<double> out(x.shape());
    const std::size_t C = x.cols();
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = double(x[i]) / double(inv_std_.value[i % C]) + double(mean_.value[i % C]);
    return out;
  }

  /// Normalized mel [T, n_mels], T a positive multiple of 4 -> (mu, logvar) [T/4, latent].
  Posterior<T> encode(const Var<T>& x) {
    if (x.rows() == 0) throw std::invalid_argument("vae_encode: empty input");
    if (x.rows() % VaeConfig::kCompression != 0) {
      throw std::invalid_argument("vae_encode: " + std::to_string(x.rows()) + " frames is not a multiple of 4");
    }
    Var<T> h = ops::gelu(enc_in_(x));
    h = ops::gelu(enc_down1_(h));
    h = ops::gelu(enc_down2_(h));
    h = enc_out_(h);
    return {ops::slice_cols(h, 0, cfg_.latent), ops::slice_cols(h, cfg_.latent, 2 * cfg_.latent)};
  }

  /// Latent [T', latent] -> normalized mel [4 T', n_mels].
  Var<T> decode(const Var<T>& z) {
    if (z.cols() != cfg_.latent) throw std::invalid_argument("vae_decode: latent width mismatch");
    Var<T> h = ops::gelu(dec_in_(z));
    h = ops::gelu(dec_up1_(ops::repeat_rows(h, 2)));
    h = ops::gelu(dec_up2_(ops::repeat_rows(h, 2)));
    return dec_out_(h);
  }

  /// Posterior mean of a raw log-mel (padded to a multiple of 4 frames).
  Tensor<double> encode_mean(const Tensor<double>& mel) {
    Graph<T> g;
    return encode(g.constant(normalize(pad_frames(mel, VaeConfig::kCompression)))).mu.value().template cast<double>();
  }

  std::pair<Tensor<double>, Tensor<double>> encode_posterior(const Tensor<double>& mel) {
    Graph<T> g;
    auto p = encode(g.constant(normalize(pad_frames(mel, VaeConfig::kCompression))));
    return {p.mu.value().template cast<double>(), p.logvar.value().template cast<double>()};
  }

  /// Raw log-mel reconstruction of a latent.
  Tensor<double> decode_mel(const Tensor<double>& z) {
    for (double v : z.vec())
      if (!std::isfinite(v)) throw std::invalid_argument("vae_decode: non-finite latent");
    Graph<T> g;
    return denormalize(decode(g.constant(z.template cast<T>())).value());
  }

  /// L1(x, decode(mu + sigma * eps)) + beta * KL, on normalized mel.
  struct Loss {
    Var<T> total, recon, kl;
  };
  Loss loss(Graph<T>& g, const Tensor<T>& x_norm, Rng& rng) {
    auto post = encode(g.constant(x_norm));
    Tensor<T> eps(post.mu.shape());
    std::normal_distribution<double> n(0, 1);
    for (auto& v : eps.vec()) v = T(n(rng));
    Var<T> sigma = ops::exp(ops::scale(post.logvar, T(0.5)));
    Var<T> z = ops::add(post.mu, ops::mul(sigma, g.constant(std::move(eps))));
    Loss out;
    out.recon = ops::l1_loss(decode(z), g.constant(x_norm));
    out.kl = kl_divergence(post.mu, post.logvar);
    out.total = ops::add(out.recon, ops::scale(out.kl, T(cfg_.beta)));
    return out;
  }

  /// One optimizer step over normalized mels; NaN aborts with the offending parameter.
  VaeTerms train_step(const std::vector<Tensor<T>>& batch, Adam<T>& opt, Rng& rng) {
    Graph<T> g;
    VaeTerms v;
    Var<T> total;
    for (const auto& x : batch) {
      auto l = loss(g, x, rng);
      total = total.valid() ? ops::add(total, l.total) : l.total;
      v.recon_l1 += double(l.recon.value().item());
      v.kl += double(l.kl.value().item());
    }
    total = ops::scale(total, T(1.0 / double(batch.size())));
    v.loss = double(total.value().item());
    v.recon_l1 /= double(batch.size());
    v.kl /= double(batch.size());
    if (!std::isfinite(v.loss)) {
      throw std::runtime_error("vae: non-finite loss (recon " + std::to_string(v.recon_l1) + ", kl " +
                               std::to_string(v.kl) + ")");
    }
    g.backward(total);
    if (auto bad = opt.step()) throw std::runtime_error("vae: non-finite gradient in " + *bad);
    return v;
  }

 private:
  VaeConfig cfg_;
  Parameter<T> mean_, inv_std_;
  nn::Conv1d<T> enc_in_, enc_down1_, enc_down2_, enc_out_;
  nn::Conv1d<T> dec_in_, dec_up1_, dec_up2_, dec_out_;
};

}  // namespace mucodec::vae
