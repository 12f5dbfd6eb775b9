#pragma once

#include <mucodec/core/adam.hpp>
#include <mucodec/core/checkpoint.hpp>
#include <mucodec/core/nn.hpp>
#include <mucodec/data/vocab.hpp>
#include <mucodec/dsp/spectral.hpp>
#include <mucodec/encoder/ctc.hpp>

#include <bit>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::encoder {

struct MuEncoderConfig {
  std::size_t n_layers = 6;
  std::size_t model_dim = 192;
  std::size_t heads = 4;
  std::size_t conv_kernel = 15;
  std::size_t ff_mult = 4;
  std::size_t downsample = 4;  // mel rate / token rate, one stride-2 conv per factor of 2
  std::size_t tap_layer = 4;   // 1-based
  std::size_t n_mels = 80;
  std::size_t n_cqt = 84;
  std::size_t vocab = data::kNumSymbols;  // CTC classes = vocab + 1 (blank last)
  std::size_t head_hidden = 256;
  std::size_t mlm_vocab = 64;
  std::size_t mlm_dim = 16;
  std::size_t mlm_span = 10;
  double mlm_coverage = 0.3;
  double recon_weight = 1.0;
  double ctc_weight = 0.2;

  static MuEncoderConfig desk() { return {}; }

  /// 13 blocks tapped at 7. Width, heads and kernel are conventional
  /// Conformer values.
  static MuEncoderConfig reference() {
    MuEncoderConfig c;
    c.n_layers = 13;
    c.model_dim = 512;
    c.heads = 8;
    c.conv_kernel = 31;
    c.tap_layer = 7;
    c.head_hidden = 512;
    return c;
  }

  std::size_t stem_layers() const { return std::size_t(std::countr_zero(downsample)); }
  std::size_t blank() const { return vocab; }

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("muencoder: n_layers must be >= 1");
    if (tap_layer < 1 || tap_layer > n_layers) {
      throw std::invalid_argument("muencoder: tap_layer " + std::to_string(tap_layer) + " outside [1, " +
                                  std::to_string(n_layers) + "]");
    }
    if (downsample < 1 || (downsample & (downsample - 1)) != 0) {
      throw std::invalid_argument("muencoder: downsample must be a power of two");
    }
    if (model_dim % heads != 0) throw std::invalid_argument("muencoder: model_dim not divisible by heads");
    if (conv_kernel % 2 == 0) throw std::invalid_argument("muencoder: conv kernel must be odd");
    if (!(mlm_coverage >= 0.2 && mlm_coverage <= 0.4)) {
      throw std::invalid_argument("muencoder: mask coverage must lie in [0.2, 0.4]");
    }
  }

  Metadata to_meta() const {
    return {{"kind", "muencoder"},
            {"n_layers", std::to_string(n_layers)},
            {"model_dim", std::to_string(model_dim)},
            {"heads", std::to_string(heads)},
            {"conv_kernel", std::to_string(conv_kernel)},
            {"ff_mult", std::to_string(ff_mult)},
            {"downsample", std::to_string(downsample)},
            {"tap_layer", std::to_string(tap_layer)},
            {"n_mels", std::to_string(n_mels)},
            {"n_cqt", std::to_string(n_cqt)},
            {"vocab", std::to_string(vocab)},
            {"head_hidden", std::to_string(head_hidden)},
            {"mlm_vocab", std::to_string(mlm_vocab)},
            {"mlm_dim", std::to_string(mlm_dim)},
            {"mlm_span", std::to_string(mlm_span)},
            {"mlm_coverage", std::to_string(mlm_coverage)},
            {"recon_weight", std::to_string(recon_weight)},
            {"ctc_weight", std::to_string(ctc_weight)}};
  }

  static MuEncoderConfig from_meta(const Checkpoint& ck) {
    if (ck.require_meta("kind") != "muencoder") throw std::runtime_error("checkpoint is not a muencoder checkpoint");
    auto u = [&](const char* k) { return std::size_t(std::stoull(ck.require_meta(k))); };
    MuEncoderConfig c;
    c.n_layers = u("n_layers");
    c.model_dim = u("model_dim");
    c.heads = u("heads");
    c.conv_kernel = u("conv_kernel");
    c.ff_mult = u("ff_mult");
    c.downsample = u("downsample");
    c.tap_layer = u("tap_layer");
    c.n_mels = u("n_mels");
    c.n_cqt = u("n_cqt");
    c.vocab = u("vocab");
    c.head_hidden = u("head_hidden");
    c.mlm_vocab = u("mlm_vocab");
    c.mlm_dim = u("mlm_dim");
    c.mlm_span = u("mlm_span");
    c.mlm_coverage = std::stod(ck.require_meta("mlm_coverage"));
    c.recon_weight = std::stod(ck.require_meta("recon_weight"));
    c.ctc_weight = std::stod(ck.require_meta("ctc_weight"));
    c.validate();
    return c;
  }
};

/// Time-major features at the token rate.
struct FeatureSeq {
  Tensor<double> values;  // [T, D]
  double token_rate_hz = 25.0;

  std::size_t frames() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
};

inline std::size_t token_frames(std::size_t mel_frames, std::size_t downsample) {
  return (mel_frames + downsample - 1) / downsample;
}

/// Macaron Conformer block: half FFN, self-attention, convolution module,
/// half FFN, final LayerNorm. The convolution module normalizes with
/// LayerNorm (batch statistics are meaningless at batch size 1).
template <typename T>
struct ConformerBlock {
  ConformerBlock() = default;
  ConformerBlock(const MuEncoderConfig& c, Rng& rng)
      : ln_ff1(c.model_dim),
        ff1(c.model_dim, c.ff_mult * c.model_dim, rng, true),
        ln_att(c.model_dim),
        att(c.model_dim, c.heads, rng),
        ln_conv(c.model_dim),
        pw_in(c.model_dim, 2 * c.model_dim, rng),
        dw(c.model_dim, c.conv_kernel, rng),
        ln_dw(c.model_dim),
        pw_out(c.model_dim, c.model_dim, rng),
        ln_ff2(c.model_dim),
        ff2(c.model_dim, c.ff_mult * c.model_dim, rng, true),
        ln_out(c.model_dim),
        dim(c.model_dim) {}

  nn::LayerNorm<T> ln_ff1;
  nn::FeedForward<T> ff1;
  nn::LayerNorm<T> ln_att;
  nn::MultiHeadAttention<T> att;
  nn::LayerNorm<T> ln_conv;
  nn::Linear<T> pw_in;
  nn::DepthwiseConv1d<T> dw;
  nn::LayerNorm<T> ln_dw;
  nn::Linear<T> pw_out;
  nn::LayerNorm<T> ln_ff2;
  nn::FeedForward<T> ff2;
  nn::LayerNorm<T> ln_out;
  std::size_t dim = 0;

  Var<T> operator()(Var<T> x) {
    using namespace ops;
    x = add(x, scale(ff1(ln_ff1(x)), T(0.5)));
    Var<T> h = ln_att(x);
    x = add(x, att(h, h, h));
    h = pw_in(ln_conv(x));
    h = mul(slice_cols(h, 0, dim), sigmoid(slice_cols(h, dim, 2 * dim)));  // GLU
    h = pw_out(silu(ln_dw(dw(h))));
    x = add(x, h);
    x = add(x, scale(ff2(ln_ff2(x)), T(0.5)));
    return ln_out(x);
  }

  void collect(NamedParams<T>& out, const std::string& p) {
    ln_ff1.collect(out, p + ".ln_ff1");
    ff1.collect(out, p + ".ff1");
    ln_att.collect(out, p + ".ln_att");
    att.collect(out, p + ".att");
    ln_conv.collect(out, p + ".ln_conv");
    pw_in.collect(out, p + ".pw_in");
    dw.collect(out, p + ".dw");
    ln_dw.collect(out, p + ".ln_dw");
    pw_out.collect(out, p + ".pw_out");
    ln_ff2.collect(out, p + ".ln_ff2");
    ff2.collect(out, p + ".ff2");
    ln_out.collect(out, p + ".ln_out");
  }
};

/// Two-layer MLP head.
template <typename T>
struct MlpHead {
  MlpHead() = default;
  MlpHead(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : l1(in, hidden, rng), l2(hidden, out, rng) {}
  nn::Linear<T> l1, l2;
  Var<T> operator()(const Var<T>& x) { return l2(ops::gelu(l1(x))); }
  void collect(NamedParams<T>& out, const std::string& p) {
    l1.collect(out, p + ".l1");
    l2.collect(out, p + ".l2");
  }
};

/// Frozen BEST-RQ style target quantizer: 4 stacked normalized mel frames
/// are randomly projected, L2-normalized and matched to the nearest entry of
/// a random unit-norm codebook.
template <typename T>
struct MlmTargets {
  MlmTargets() = default;
  MlmTargets(const MuEncoderConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t in = c.downsample * c.n_mels;
    projection = Parameter<T>(normal_tensor<T>(Shape{in, c.mlm_dim}, T(std::sqrt(2.0 / double(in + c.mlm_dim))), rng), false);
    Tensor<T> cb = normal_tensor<T>(Shape{c.mlm_vocab, c.mlm_dim}, T(1), rng);
    for (std::size_t v = 0; v < c.mlm_vocab; ++v) {
      double n = 0;
      for (T x : cb.row(v)) n += double(x) * double(x);
      n = std::sqrt(n);
      for (auto& x : cb.row(v)) x = T(double(x) / n);
    }
    codebook = Parameter<T>(std::move(cb), false);
  }

  Parameter<T> projection;  // [downsample * n_mels, mlm_dim]
  Parameter<T> codebook;    // [mlm_vocab, mlm_dim]

  /// One label per token frame of a normalized mel [Tm, n_mels].
  std::vector<std::size_t> labels(const Tensor<T>& mel_norm, std::size_t downsample) const {
    const std::size_t Tm = mel_norm.rows(), M = mel_norm.cols(), Tt = token_frames(Tm, downsample);
    const std::size_t P = projection.value.cols(), V = codebook.value.rows();
    std::vector<std::size_t> out(Tt);
    std::vector<double> z(P);
    for (std::size_t t = 0; t < Tt; ++t) {
      std::fill(z.begin(), z.end(), 0.0);
      for (std::size_t f = 0; f < downsample; ++f) {
        const std::size_t src = t * downsample + f;
        if (src >= Tm) break;
        for (std::size_t m = 0; m < M; ++m) {
          const double x = mel_norm[src * M + m];
          const auto w = projection.value.row(f * M + m);
          for (std::size_t p = 0; p < P; ++p) z[p] += x * double(w[p]);
        }
      }
      double best = -1e300;
      for (std::size_t v = 0; v < V; ++v) {
        double d = 0;
        for (std::size_t p = 0; p < P; ++p) d += z[p] * double(codebook.value[v * P + p]);
        if (d > best) best = d, out[t] = v;  // argmax cosine; |z| is common to all entries
      }
    }
    return out;
  }

  void collect(NamedParams<T>& out, const std::string& p) {
    out.emplace_back(p + ".projection", &projection);
    out.emplace_back(p + ".codebook", &codebook);
  }
};

/// Span mask on the token grid.
struct MaskSpans {
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (start, length)
  std::vector<bool> masked;

  std::vector<std::size_t> positions() const {
    std::vector<std::size_t> p;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (masked[i]) p.push_back(i);
    return p;
  }
  double coverage() const { return masked.empty() ? 0.0 : double(positions().size()) / double(masked.size()); }
};

/// Random spans of `span` frames until at least `coverage` of the frames are masked.
inline MaskSpans make_mask(std::size_t frames, std::size_t span, double coverage, Rng& rng) {
  if (!(coverage > 0)) throw std::invalid_argument("mlm: mask coverage must be positive");
  if (frames == 0) throw std::invalid_argument("mlm: empty sequence");
  span = std::min(span, frames);
  MaskSpans m;
  m.masked.assign(frames, false);
  const auto target = std::size_t(std::ceil(coverage * double(frames)));
  std::size_t count = 0;
  std::uniform_int_distribution<std::size_t> start(0, frames - span);
  for (int guard = 0; count < target && guard < 10000; ++guard) {
    const std::size_t s = start(rng);
    std::size_t len = 0;
    for (std::size_t i = s; i < s + span; ++i) {
      if (m.masked[i]) continue;
      m.masked[i] = true;
      ++count;
      ++len;
      if (count >= target) break;
    }
    if (len > 0) m.spans.emplace_back(s, span);
  }
  return m;
}

template <typename T>
class MuEncoder {
 public:
  MuEncoder() = default;
  MuEncoder(const MuEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t D = cfg.model_dim;
    mel_mean_ = Parameter<T>(Tensor<T>(Shape{cfg.n_mels}), false);
    mel_inv_std_ = Parameter<T>(Tensor<T>(Shape{cfg.n_mels}, T(1)), false);
    cqt_mean_ = Parameter<T>(Tensor<T>(Shape{cfg.n_cqt}), false);
    cqt_inv_std_ = Parameter<T>(Tensor<T>(Shape{cfg.n_cqt}, T(1)), false);
    for (std::size_t i = 0; i < cfg.stem_layers(); ++i) {
      stem_.emplace_back(i == 0 ? cfg.n_mels : D, D, 3, 2, 1, 1, rng);
    }
    if (stem_.empty()) stem_.emplace_back(cfg.n_mels, D, 3, 1, 1, 1, rng);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) blocks_.emplace_back(cfg, rng);
    // prediction heads start near zero so the initial MLM loss is ~ln V
    mlm_head_ = nn::Linear<T>(D, cfg.mlm_vocab, rng, true, T(0.01));
    mel_head_ = MlpHead<T>(D, cfg.head_hidden, cfg.n_mels, rng);
    cqt_head_ = MlpHead<T>(D, cfg.head_hidden, cfg.n_cqt, rng);
    ctc_head_ = nn::Linear<T>(D, cfg.vocab + 1, rng);
  }

  const MuEncoderConfig& config() const { return cfg_; }

  /// Every parameter including the frozen normalization statistics.
  NamedParams<T> params() {
    NamedParams<T> out;
    out.emplace_back("norm.mel_mean", &mel_mean_);
    out.emplace_back("norm.mel_inv_std", &mel_inv_std_);
    out.emplace_back("norm.cqt_mean", &cqt_mean_);
    out.emplace_back("norm.cqt_inv_std", &cqt_inv_std_);
    for (std::size_t i = 0; i < stem_.size(); ++i) stem_[i].collect(out, "stem" + std::to_string(i));
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "block" + std::to_string(i));
    mlm_head_.collect(out, "mlm_head");
    mel_head_.collect(out, "mel_head");
    cqt_head_.collect(out, "cqt_head");
    ctc_head_.collect(out, "ctc_head");
    return out;
  }

  /// Per-bin statistics of the training corpus.
  void set_normalization(const std::vector<double>& mel_mean, const std::vector<double>& mel_std,
                         const std::vector<double>& cqt_mean, const std::vector<double>& cqt_std) {
    auto fill = [](Parameter<T>& p, const std::vector<double>& v, bool invert) {
      if (v.size() != p.value.size()) throw std::invalid_argument("muencoder: normalization size mismatch");
      for (std::size_t i = 0; i < v.size(); ++i) p.value[i] = T(invert ? 1.0 / std::max(v[i], 1e-3) : v[i]);
    };
    fill(mel_mean_, mel_mean, false);
    fill(mel_inv_std_, mel_std, true);
    fill(cqt_mean_, cqt_mean, false);
    fill(cqt_inv_std_, cqt_std, true);
  }

  Tensor<T> normalize_mel(const Tensor<double>& mel) const { return normalize(mel, mel_mean_, mel_inv_std_); }
  Tensor<T> normalize_cqt(const Tensor<double>& cqt) const { return normalize(cqt, cqt_mean_, cqt_inv_std_); }

  /// Stem only: [Tm, n_mels] normalized mel -> [ceil(Tm/ds), D].
  Var<T> stem(const Var<T>& mel_norm) {
    Var<T> h = mel_norm;
    for (auto& c : stem_) h = ops::gelu(c(h));
    return h;
  }

  /// Outputs of every block, in order.
  std::vector<Var<T>> forward(const Var<T>& mel_norm) {
    if (mel_norm.rows() < cfg_.downsample) {
      throw std::invalid_argument("muencoder: input has " + std::to_string(mel_norm.rows()) +
                                  " mel frames, need at least " + std::to_string(cfg_.downsample));
    }
    if (mel_norm.cols() != cfg_.n_mels) throw std::invalid_argument("muencoder: mel bin count mismatch");
    std::vector<Var<T>> layers;
    Var<T> h = stem(mel_norm);
    for (auto& b : blocks_) layers.push_back(h = b(h));
    return layers;
  }

  /// All per-layer feature sequences of one spectrogram (inference).
  std::vector<FeatureSeq> encode(const dsp::MelSpec& mel) {
    Graph<T> g;
    const auto layers = forward(g.constant(normalize_mel(mel.frames)));
    const double rate = double(mel.sample_rate) / double(mel.hop) / double(cfg_.downsample);
    std::vector<FeatureSeq> out;
    for (const auto& v : layers) out.push_back({v.value().template cast<double>(), rate});
    return out;
  }

  nn::Linear<T>& mlm_head() { return mlm_head_; }
  MlpHead<T>& mel_head() { return mel_head_; }
  MlpHead<T>& cqt_head() { return cqt_head_; }
  nn::Linear<T>& ctc_head() { return ctc_head_; }

 private:
  static Tensor<T> normalize(const Tensor<double>& x, const Parameter<T>& mean, const Parameter<T>& inv_std) {
    if (x.cols() != mean.value.size()) throw std::invalid_argument("muencoder: feature bin count mismatch");
    Tensor<T> out(x.shape());
    const std::size_t C = x.cols();
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = T((x[i] - double(mean.value[i % C])) * double(inv_std.value[i % C]));
    return out;
  }

  MuEncoderConfig cfg_;
  Parameter<T> mel_mean_, mel_inv_std_, cqt_mean_, cqt_inv_std_;
  std::vector<nn::Conv1d<T>> stem_;
  std::vector<ConformerBlock<T>> blocks_;
  nn::Linear<T> mlm_head_;
  MlpHead<T> mel_head_, cqt_head_;
  nn::Linear<T> ctc_head_;
};

/// 1-based layer selection.
inline const FeatureSeq& tap(const std::vector<FeatureSeq>& layers, std::size_t tap_layer) {
  if (tap_layer < 1 || tap_layer > layers.size()) {
    throw std::out_of_range("tap: layer " + std::to_string(tap_layer) + " outside [1, " +
                            std::to_string(layers.size()) + "]");
  }
  return layers[tap_layer - 1];
}

// ---------------------------------------------------------------- stage 1

template <typename T>
Var<T> sum_scalars(const std::vector<Var<T>>& xs) {
  Var<T> acc = xs.at(0);
  for (std::size_t i = 1; i < xs.size(); ++i) acc = ops::add(acc, xs[i]);
  return acc;
}

/// Masked prediction loss of one utterance. Masked token frames have their
/// four mel frames replaced by N(0, 0.1^2) noise in the normalized domain.
template <typename T>
Var<T> mlm_loss(Graph<T>& g, MuEncoder<T>& model, const MlmTargets<T>& targets, const Tensor<T>& mel_norm,
                const MaskSpans& mask, Rng& rng) {
  const auto& c = model.config();
  const auto labels = targets.labels(mel_norm, c.downsample);
  if (mask.masked.size() != labels.size()) throw std::invalid_argument("mlm: mask length does not match token frames");
  const auto pos = mask.positions();
  if (pos.empty()) throw std::invalid_argument("mlm: empty mask set");
  Tensor<T> x = mel_norm;
  std::normal_distribution<double> noise(0.0, 0.1);
  const std::size_t M = x.cols();
  for (auto t : pos)
    for (std::size_t f = t * c.downsample; f < std::min(x.rows(), (t + 1) * c.downsample); ++f)
      for (std::size_t m = 0; m < M; ++m) x[f * M + m] = T(noise(rng));
  const auto layers = model.forward(g.constant(std::move(x)));
  return ops::cross_entropy(model.mlm_head()(layers.back()), labels, pos);
}

/// One optimizer step over a batch of normalized mels; returns the mean loss.
template <typename T>
double mlm_pretrain_step(MuEncoder<T>& model, const MlmTargets<T>& targets, const std::vector<Tensor<T>>& batch,
                         Adam<T>& opt, Rng& rng) {
  Graph<T> g;
  std::vector<Var<T>> losses;
  const auto& c = model.config();
  for (const auto& mel : batch) {
    const auto mask = make_mask(token_frames(mel.rows(), c.downsample), c.mlm_span, c.mlm_coverage, rng);
    losses.push_back(mlm_loss(g, model, targets, mel, mask, rng));
  }
  Var<T> total = ops::scale(sum_scalars(losses), T(1.0 / double(losses.size())));
  g.backward(total);
  if (auto bad = opt.step()) throw std::runtime_error("mlm: non-finite gradient in " + *bad);
  return double(total.value().item());
}

// ---------------------------------------------------------------- stage 2

struct Stage2Example {
  Tensor<double> mel;  // [Tm, n_mels] raw log-mel
  Tensor<double> cqt;  // [Tm, n_cqt] raw log-CQT
  std::vector<std::size_t> transcript;
};

template <typename T>
struct Stage2Terms {
  Var<T> total, mel, cqt, ctc;
};

/// total = recon_weight * (L1 mel + L1 CQT) + ctc_weight * CTC.
/// Reconstruction heads read the tap layer, repeated back to the mel rate;
/// CTC reads the last layer and is normalized by max(1, |transcript|).
template <typename T>
Stage2Terms<T> stage2_loss(Graph<T>& g, MuEncoder<T>& model, const Stage2Example& ex, bool use_ctc = true) {
  const auto& c = model.config();
  for (auto s : ex.transcript)
    if (s >= c.vocab) throw std::invalid_argument("stage2: transcript symbol outside the vocabulary");
  const std::size_t Tm = ex.mel.rows();
  if (ex.cqt.rows() != Tm) throw std::invalid_argument("stage2: mel and CQT frame counts differ");
  const auto layers = model.forward(g.constant(model.normalize_mel(ex.mel)));
  const Var<T>& tapped = layers[c.tap_layer - 1];
  auto upsample = [&](const Var<T>& v) { return ops::slice_rows(ops::repeat_rows(v, c.downsample), 0, Tm); };
  Stage2Terms<T> out;
  out.mel = ops::l1_loss(upsample(model.mel_head()(tapped)), g.constant(model.normalize_mel(ex.mel)));
  out.cqt = ops::l1_loss(upsample(model.cqt_head()(tapped)), g.constant(model.normalize_cqt(ex.cqt)));
  const T norm = T(1) / T(std::max<std::size_t>(1, ex.transcript.size()));
  out.ctc = ops::scale(ctc::loss_from_logits(model.ctc_head()(layers.back()), ex.transcript, c.blank()), norm);
  out.total = ops::scale(ops::add(out.mel, out.cqt), T(c.recon_weight));
  if (use_ctc) out.total = ops::add(out.total, ops::scale(out.ctc, T(c.ctc_weight)));
  return out;
}

struct Stage2Values {
  double total = 0, mel = 0, cqt = 0, ctc = 0;
};

template <typename T>
Stage2Values stage2_step(MuEncoder<T>& model, const std::vector<Stage2Example>& batch, Adam<T>& opt,
                         bool use_ctc = true) {
  Graph<T> g;
  std::vector<Var<T>> totals;
  Stage2Values v;
  for (const auto& ex : batch) {
    auto terms = stage2_loss(g, model, ex, use_ctc);
    totals.push_back(terms.total);
    v.mel += double(terms.mel.value().item());
    v.cqt += double(terms.cqt.value().item());
    v.ctc += double(terms.ctc.value().item());
  }
  Var<T> total = ops::scale(sum_scalars(totals), T(1.0 / double(totals.size())));
  g.backward(total);
  if (auto bad = opt.step()) throw std::runtime_error("stage2: non-finite gradient in " + *bad);
  const double n = double(batch.size());
  v.total = double(total.value().item());
  v.mel /= n;
  v.cqt /= n;
  v.ctc /= n;
  return v;
}

}  // namespace mucodec::encoder
