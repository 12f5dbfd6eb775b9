#pragma once

#include <mucodec/data/corpus.hpp>
#include <mucodec/encoder/ctc.hpp>
#include <mucodec/pipeline/codec.hpp>

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace mucodec::pipeline {

// ---------------------------------------------------------------- corpus features

/// Analysis-rate features of one manifest clip.
struct ClipFeatures {
  std::string id;
  std::size_t samples = 0;
  Tensor<double> mel, cqt;  // [Tm, bins], Tm = samples / 240 + 1
  std::vector<std::size_t> transcript;
  std::vector<data::SymbolSpan> alignment;
};

inline data::Manifest corpus_manifest(const PipelineConfig& cfg) {
  const auto p = cfg.corpus / "manifest.tsv";
  if (!fs::exists(p)) throw StageError("corpus", "missing manifest " + p.string());
  return data::read_manifest(p);
}

inline std::vector<ClipFeatures> load_split(const PipelineConfig& cfg, const std::string& split, bool with_cqt = true) {
  return in_stage("corpus", [&] {
    std::vector<ClipFeatures> out;
    for (const auto& e : corpus_manifest(cfg)) {
      if (e.split != split) continue;
      const fs::path p = cfg.corpus / e.path;
      auto audio = dsp::read_wav(p.string());
      audio = dsp::resample(audio.channels == 1 ? audio : audio.channel(0), cfg.sample_rate);
      if (audio.samples.size() < kSamplesPerToken) audio.samples.resize(kSamplesPerToken, 0.0f);
      ClipFeatures c;
      c.id = e.id;
      c.samples = audio.samples.size();
      c.mel = dsp::mel_spectrogram(audio).frames;
      if (with_cqt) c.cqt = dsp::cqt(audio).frames;
      c.transcript = data::parse_transcript(e.transcript);
      c.alignment = data::read_alignment(fs::path(p).replace_extension(".lab"));
      out.push_back(std::move(c));
    }
    if (out.empty()) throw std::invalid_argument("split '" + split + "' is empty");
    return out;
  });
}

/// Per-bin mean and standard deviation over every frame of every clip.
inline std::pair<std::vector<double>, std::vector<double>> bin_stats(const std::vector<ClipFeatures>& clips,
                                                                     Tensor<double> ClipFeatures::*which) {
  const std::size_t C = (clips.front().*which).cols();
  std::vector<double> s(C, 0.0), s2(C, 0.0);
  double n = 0;
  for (const auto& c : clips) {
    const auto& x = c.*which;
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t b = 0; b < C; ++b) s[b] += x(t, b), s2[b] += x(t, b) * x(t, b);
    n += double(x.rows());
  }
  for (std::size_t b = 0; b < C; ++b) {
    s[b] /= n;
    s2[b] = std::sqrt(std::max(s2[b] / n - s[b] * s[b], 0.0));
  }
  return {s, s2};
}

inline Tensor<double> slice_rows(const Tensor<double>& x, std::size_t r0, std::size_t n) {
  Tensor<double> out(Shape{n, x.cols()});
  std::copy_n(x.vec().begin() + std::ptrdiff_t(r0 * x.cols()), n * x.cols(), out.vec().begin());
  return out;
}

struct Crop {
  Tensor<double> mel, cqt;
  std::vector<std::size_t> transcript;
};

/// Token-aligned random crop of `frames` Mel frames. Symbols with at least
/// half their span inside the crop are kept; without an alignment the full
/// transcript is used.
inline Crop random_crop(const ClipFeatures& c, std::size_t frames, Rng& rng) {
  const std::size_t Tm = c.mel.rows();
  frames = std::min(frames, Tm / 4 * 4);
  const std::size_t o = std::uniform_int_distribution<std::size_t>(0, (Tm - frames) / 4)(rng) * 4;
  Crop out;
  out.mel = slice_rows(c.mel, o, frames);
  if (c.cqt.size()) out.cqt = slice_rows(c.cqt, o, frames);
  if (c.alignment.empty()) {
    out.transcript = c.transcript;
  } else {
    const double a = double(o) * 0.01, b = double(o + frames) * 0.01;
    for (const auto& s : c.alignment)
      if (std::min(b, s.end_s) - std::max(a, s.start_s) >= 0.5 * (s.end_s - s.start_s)) out.transcript.push_back(s.symbol);
  }
  return out;
}

inline std::vector<Crop> sample_crops(const std::vector<ClipFeatures>& clips, std::size_t n, std::size_t frames,
                                      Rng& rng) {
  std::vector<Crop> out;
  std::uniform_int_distribution<std::size_t> pick(0, clips.size() - 1);
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_crop(clips[pick(rng)], frames, rng));
  return out;
}

inline std::size_t segment_frames(const PipelineConfig& cfg) {
  return std::max<std::size_t>(4, std::size_t(std::llround(cfg.segment_s * 100.0)) / 4 * 4);
}

/// Linear warm-up over 20 steps, then linear decay to 10% of the base rate.
inline double lr_at(std::size_t step, std::size_t steps, double base) {
  const double warm = std::min(1.0, double(step + 1) / 20.0);
  const double decay = 1.0 - 0.9 * double(step) / double(std::max<std::size_t>(1, steps));
  return base * warm * decay;
}

// ---------------------------------------------------------------- run bookkeeping

/// Exclusive per checkpoint directory; removed on destruction.
class TrainLock {
 public:
  explicit TrainLock(const fs::path& dir) : path_(dir / ".train.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw StageError("train", "checkpoint directory " + dir.string() + " is locked by another training run (" +
                                    path_.string() + ")");
    }
    std::fclose(f);
  }
  ~TrainLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  TrainLock(const TrainLock&) = delete;
  TrainLock& operator=(const TrainLock&) = delete;

 private:
  fs::path path_;
};

/// One JSON object per line.
class MetricsLog {
 public:
  MetricsLog(const fs::path& path) : out_((fs::create_directories(path.parent_path()), path)) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const nlohmann::json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

template <typename T>
void save_atomic(const fs::path& path, const NamedParams<T>& params, const Metadata& meta) {
  const auto tmp = fs::path(path.string() + ".tmp");
  save_checkpoint(tmp.string(), params, meta);
  fs::rename(tmp, path);
}

inline void save_rvq_atomic(const fs::path& path, const quant::Codebooks& b) {
  const auto tmp = fs::path(path.string() + ".tmp");
  quant::save_codebooks(tmp.string(), b);
  fs::rename(tmp, path);
}

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order = {"stage1", "stage2", "rvq", "vae", "flowgen", "ablation"};
  return order;
}

/// Stage-name readable prerequisites of `stage`.
inline std::vector<std::pair<std::string, fs::path>> prerequisites(const PipelineConfig& cfg, const std::string& stage) {
  if (stage == "stage2" || stage == "ablation") return {{"stage1", cfg.stage1_path()}};
  if (stage == "rvq") return {{"stage2", cfg.muencoder_path()}};
  if (stage == "flowgen") {
    std::vector<std::pair<std::string, fs::path>> p = {{"stage2", cfg.muencoder_path()},
                                                       {"rvq", cfg.rvq_low_path()},
                                                       {"rvq", cfg.rvq_high_path()},
                                                       {"vae", cfg.vae_path()}};
    return p;
  }
  return {};
}

inline void check_prerequisites(const PipelineConfig& cfg, const std::string& stage) {
  std::string missing;
  for (const auto& [name, path] : prerequisites(cfg, stage)) {
    if (!fs::exists(path)) missing += (missing.empty() ? "" : ", ") + name + " (" + path.string() + ")";
  }
  if (!missing.empty()) {
    throw StageError(stage, "missing prerequisite checkpoint from stage " + missing + "; train that stage first");
  }
}

inline std::uint64_t stage_seed(const PipelineConfig& cfg, std::uint64_t k) { return cfg.seed * 1000003ull + k; }

// ---------------------------------------------------------------- stages

inline encoder::MuEncoderConfig encoder_config(const PipelineConfig& cfg) {
  auto e = cfg.encoder_arch == "reference" ? encoder::MuEncoderConfig::reference() : encoder::MuEncoderConfig::desk();
  if (cfg.tap_layer) e.tap_layer = cfg.tap_layer;
  e.validate();
  return e;
}

struct TrainContext {
  const PipelineConfig& cfg;
  std::ostream& log;
  std::vector<ClipFeatures> train;  // loaded on first use

  const std::vector<ClipFeatures>& clips() {
    if (train.empty()) {
      train = load_split(cfg, "train");
      log << "loaded " << train.size() << " training clips\n";
    }
    return train;
  }
};

inline void progress(std::ostream& log, const std::string& stage, std::size_t step, std::size_t steps, double loss) {
  if (step == 0 || (step + 1) % 50 == 0 || step + 1 == steps) {
    log << stage << " step " << (step + 1) << "/" << steps << " loss " << loss << "\n";
    log.flush();
  }
}

inline void train_stage1(TrainContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& clips = ctx.clips();
  const auto ec = encoder_config(cfg);
  encoder::MuEncoder<Real> model(ec, stage_seed(cfg, 1));
  const auto [mm, ms] = bin_stats(clips, &ClipFeatures::mel);
  const auto [cm, cs] = bin_stats(clips, &ClipFeatures::cqt);
  model.set_normalization(mm, ms, cm, cs);
  const encoder::MlmTargets<Real> targets(ec, stage_seed(cfg, 2));
  Adam<Real> opt(model.params(), AdamOptions{.lr = cfg.stage1_lr, .clip_norm = 1.0});
  MetricsLog mlog(cfg.log_dir() / "stage1.jsonl");
  Rng rng(stage_seed(cfg, 3));
  auto meta = ec.to_meta();
  meta["stage"] = "1";
  for (std::size_t step = 0; step < cfg.stage1_steps; ++step) {
    opt.set_lr(lr_at(step, cfg.stage1_steps, cfg.stage1_lr));
    std::vector<Tensor<Real>> batch;
    for (auto& c : sample_crops(clips, cfg.batch_size, segment_frames(cfg), rng)) batch.push_back(model.normalize_mel(c.mel));
    const double loss = encoder::mlm_pretrain_step(model, targets, batch, opt, rng);
    mlog.write({{"step", step}, {"loss", loss}});
    progress(ctx.log, "stage1", step, cfg.stage1_steps, loss);
    if (cfg.save_every && (step + 1) % cfg.save_every == 0) save_atomic(cfg.stage1_path(), model.params(), meta);
  }
  save_atomic(cfg.stage1_path(), model.params(), meta);
}

/// Stage 2 from the stage-1 checkpoint into `out`; `use_ctc` false is the ablation.
inline void train_stage2(TrainContext& ctx, bool use_ctc, const fs::path& out, const std::string& log_name) {
  const auto& cfg = ctx.cfg;
  const auto& clips = ctx.clips();
  auto model = load_encoder(cfg.stage1_path());
  Adam<Real> opt(model.params(), AdamOptions{.lr = cfg.stage2_lr, .clip_norm = 1.0});
  MetricsLog mlog(cfg.log_dir() / (log_name + ".jsonl"));
  Rng rng(stage_seed(cfg, 4));
  auto meta = model.config().to_meta();
  meta["stage"] = "2";
  meta["ctc"] = use_ctc ? "1" : "0";
  for (std::size_t step = 0; step < cfg.stage2_steps; ++step) {
    opt.set_lr(lr_at(step, cfg.stage2_steps, cfg.stage2_lr));
    std::vector<encoder::Stage2Example> batch;
    for (auto& c : sample_crops(clips, cfg.batch_size, segment_frames(cfg), rng))
      batch.push_back({std::move(c.mel), std::move(c.cqt), std::move(c.transcript)});
    const auto v = encoder::stage2_step(model, batch, opt, use_ctc);
    mlog.write({{"step", step}, {"loss", v.total}, {"mel", v.mel}, {"cqt", v.cqt}, {"ctc", v.ctc}});
    progress(ctx.log, log_name, step, cfg.stage2_steps, v.total);
    if (cfg.save_every && (step + 1) % cfg.save_every == 0) save_atomic(out, model.params(), meta);
  }
  save_atomic(out, model.params(), meta);
}

/// Tapped features of whole clips, each trimmed to token_count(samples) rows.
/// `shift` drops that many leading Mel frames (a sub-token time shift).
inline std::vector<Tensor<double>> clip_features(encoder::MuEncoder<Real>& enc, std::size_t tap_layer,
                                                 const std::vector<ClipFeatures>& clips, std::size_t shift = 0) {
  std::vector<Tensor<double>> out;
  for (const auto& c : clips) {
    dsp::MelSpec mel{slice_rows(c.mel, shift, c.mel.rows() - shift), 240, 24000, c.mel.cols()};
    const auto layers = enc.encode(mel);
    const auto& f = encoder::tap(layers, tap_layer).values;
    out.push_back(slice_rows(f, 0, std::min(f.rows(), token_count(c.samples - shift * 240))));
  }
  return out;
}

inline Tensor<double> stack_rows(const std::vector<Tensor<double>>& xs) {
  std::size_t n = 0;
  for (const auto& x : xs) n += x.rows();
  Tensor<double> out(Shape{n, xs.front().cols()});
  auto it = out.vec().begin();
  for (const auto& x : xs) it = std::copy(x.vec().begin(), x.vec().end(), it);
  return out;
}

inline std::vector<quant::RvqConfig> rvq_configs(const PipelineConfig& cfg, std::size_t dim) {
  std::vector<quant::RvqConfig> out = {quant::RvqConfig::low(dim), quant::RvqConfig::high(dim)};
  if (cfg.custom_codebooks) out.push_back({cfg.custom_codebooks, cfg.custom_size, dim, 0.99, 0.01 / double(cfg.custom_size), quant::ConfigId::kCustom});
  return out;
}

/// k-means++ initialization then EMA passes over frozen stage-2 features.
inline void train_rvq(TrainContext& ctx) {
  const auto& cfg = ctx.cfg;
  auto enc = load_encoder(cfg.muencoder_path());
  std::vector<Tensor<double>> parts;
  for (std::size_t k = 0; k < cfg.rvq_shifts; ++k) {
    const auto f = clip_features(enc, enc.config().tap_layer, ctx.clips(), k * 4 / cfg.rvq_shifts);
    parts.insert(parts.end(), f.begin(), f.end());
  }
  const auto X = stack_rows(parts);
  ctx.log << "rvq: " << X.rows() << " feature frames of width " << X.cols() << "\n";
  MetricsLog mlog(cfg.log_dir() / "rvq.jsonl");
  for (const auto& rc : rvq_configs(cfg, X.cols())) {
    const std::string name = quant::config_name(rc.id);
    const auto t0 = std::chrono::steady_clock::now();
    auto books = quant::kmeanspp_init(rc, X, stage_seed(cfg, 5));
    ctx.log << "rvq " << name << ": k-means++ init in "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    std::vector<std::size_t> order(X.rows());
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng(stage_seed(cfg, 6));
    std::size_t step = 0;
    const std::size_t B = 1024;
    for (std::size_t pass = 0; pass < cfg.rvq_passes; ++pass) {
      std::shuffle(order.begin(), order.end(), rng);
      double pass_err = 0;
      for (std::size_t r0 = 0; r0 < order.size(); r0 += B, ++step) {
        const std::size_t n = std::min(B, order.size() - r0);
        Tensor<double> batch(Shape{n, X.cols()});
        for (std::size_t i = 0; i < n; ++i) std::copy_n(X.row(order[r0 + i]).begin(), X.cols(), batch.row(i).begin());
        const double err = quant::quantize(batch, books).residual_energy.back() / double(n);
        pass_err += err * double(n) / double(order.size());
        quant::ema_update(books, batch);
        mlog.write({{"preset", name}, {"step", step}, {"loss", err}});
      }
      // dead entries are refilled from the most recent batches of the pass
      const std::size_t recent = std::min<std::size_t>(order.size(), 4 * B);
      Tensor<double> tail(Shape{recent, X.cols()});
      for (std::size_t i = 0; i < recent; ++i)
        std::copy_n(X.row(order[order.size() - recent + i]).begin(), X.cols(), tail.row(i).begin());
      const auto dead = quant::reseed_dead(books, tail, rc.reseed_threshold, stage_seed(cfg, 7 + pass));
      ctx.log << "rvq " << name << " pass " << (pass + 1) << ": mean residual energy " << pass_err << ", reseeded "
              << dead << "\n";
    }
    save_rvq_atomic(cfg.rvq_path(preset_of(rc.id)), books);
  }
}

inline void train_vae(TrainContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& clips = ctx.clips();
  vae::VaeConfig vc;
  vc.n_mels = clips.front().mel.cols();
  vae::MelVae<Real> model(vc, stage_seed(cfg, 8));
  const auto [mm, ms] = bin_stats(clips, &ClipFeatures::mel);
  model.set_normalization(mm, ms);
  Adam<Real> opt(model.params(), AdamOptions{.lr = cfg.vae_lr, .clip_norm = 1.0});
  MetricsLog mlog(cfg.log_dir() / "vae.jsonl");
  Rng rng(stage_seed(cfg, 9));
  for (std::size_t step = 0; step < cfg.vae_steps; ++step) {
    opt.set_lr(lr_at(step, cfg.vae_steps, cfg.vae_lr));
    std::vector<Tensor<Real>> batch;
    for (auto& c : sample_crops(clips, cfg.batch_size, segment_frames(cfg), rng)) batch.push_back(model.normalize(c.mel));
    const auto v = model.train_step(batch, opt, rng);
    mlog.write({{"step", step}, {"loss", v.loss}, {"recon_l1", v.recon_l1}, {"kl", v.kl}});
    progress(ctx.log, "vae", step, cfg.vae_steps, v.loss);
    if (cfg.save_every && (step + 1) % cfg.save_every == 0) save_atomic(cfg.vae_path(), model.params(), vc.to_meta());
  }
  save_atomic(cfg.vae_path(), model.params(), vc.to_meta());
}

/// Flow targets: VAE posterior means, conditions: dequantized tap features
/// of a randomly chosen preset (LOW or HIGH with equal probability).
inline void train_flowgen(TrainContext& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& clips = ctx.clips();
  auto enc = load_encoder(cfg.muencoder_path());
  auto vae_model = load_vae(cfg.vae_path());
  const auto low = load_rvq(cfg.rvq_low_path()), high = load_rvq(cfg.rvq_high_path());
  const std::size_t tap_layer = enc.config().tap_layer;
  const auto feats = clip_features(enc, tap_layer, clips);
  std::vector<Tensor<double>> lat, cond_low, cond_high;
  double sq = 0, n = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto z = vae_model.encode_mean(clips[i].mel);
    lat.push_back(slice_rows(z, 0, std::min(z.rows(), feats[i].rows())));
    for (double v : lat.back().vec()) sq += v * v, n += 1;
    cond_low.push_back(slice_rows(quant::quantize(feats[i], low).dequantized, 0, lat.back().rows()));
    cond_high.push_back(slice_rows(quant::quantize(feats[i], high).dequantized, 0, lat.back().rows()));
  }
  ctx.log << "flowgen: latent rms " << std::sqrt(sq / n) << " over " << lat.size() << " clips\n";

  flow::DitConfig dc;
  dc.latent_dim = vae_model.config().latent;
  dc.cond_dim = enc.config().model_dim;
  flow::Dit<Real> model(dc, stage_seed(cfg, 10));
  Adam<Real> opt(model.params(), AdamOptions{.lr = cfg.flow_lr, .clip_norm = 1.0});
  MetricsLog mlog(cfg.log_dir() / "flowgen.jsonl");
  auto meta = flow::to_meta(dc, flow::SamplerConfig{});
  meta["tap_layer"] = std::to_string(tap_layer);
  Rng rng(stage_seed(cfg, 11));
  std::uniform_int_distribution<std::size_t> pick(0, clips.size() - 1);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t step = 0; step < cfg.flow_steps; ++step) {
    opt.set_lr(lr_at(step, cfg.flow_steps, cfg.flow_lr));
    std::vector<Tensor<Real>> xs, cs;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = pick(rng), F = lat[i].rows(), len = std::min(cfg.flow_frames, F);
      const std::size_t o = std::uniform_int_distribution<std::size_t>(0, F - len)(rng);
      xs.push_back(slice_rows(lat[i], o, len).cast<Real>());
      cs.push_back(slice_rows(coin(rng) ? cond_high[i] : cond_low[i], o, len).cast<Real>());
    }
    const auto items = flow::make_items(xs, &cs, cfg.cond_drop, rng);
    const double loss = flow::fm_train_step(model, items, opt);
    mlog.write({{"step", step}, {"loss", loss}});
    progress(ctx.log, "flowgen", step, cfg.flow_steps, loss);
    if (cfg.save_every && (step + 1) % cfg.save_every == 0) save_atomic(cfg.flowgen_path(), model.params(), meta);
  }
  save_atomic(cfg.flowgen_path(), model.params(), meta);
}

// ---------------------------------------------------------------- linear probe

struct ProbeResult {
  double symbol_error_rate = 0;  // edit distance / reference symbols on the evaluation clips
  double final_loss = 0;
};

/// Linear CTC read-out trained on frozen features. Features are standardized
/// with the training statistics so probes of different encoders share one
/// optimizer setting.
inline ProbeResult linear_probe(const std::vector<Tensor<double>>& train_x,
                                const std::vector<std::vector<std::size_t>>& train_y,
                                const std::vector<Tensor<double>>& eval_x,
                                const std::vector<std::vector<std::size_t>>& eval_y, std::size_t vocab,
                                std::size_t steps, double lr, std::uint64_t seed) {
  const std::size_t D = train_x.front().cols();
  std::vector<double> mean(D, 0.0), sd(D, 0.0);
  double n = 0;
  for (const auto& x : train_x)
    for (std::size_t t = 0; t < x.rows(); ++t, n += 1)
      for (std::size_t j = 0; j < D; ++j) mean[j] += x(t, j), sd[j] += x(t, j) * x(t, j);
  for (std::size_t j = 0; j < D; ++j) {
    mean[j] /= n;
    sd[j] = std::sqrt(std::max(sd[j] / n - mean[j] * mean[j], 0.0)) + 1e-6;
  }
  auto standardize = [&](const Tensor<double>& x) {
    Tensor<double> o(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = (x[i] - mean[i % D]) / sd[i % D];
    return o;
  };
  Rng rng(seed);
  nn::Linear<double> head(D, vocab + 1, rng);
  NamedParams<double> params;
  head.collect(params, "probe");
  Adam<double> opt(params, AdamOptions{.lr = lr});
  std::uniform_int_distribution<std::size_t> pick(0, train_x.size() - 1);
  ProbeResult r;
  const std::size_t B = std::min<std::size_t>(8, train_x.size());
  for (std::size_t step = 0; step < steps; ++step) {
    Graph<double> g;
    std::vector<Var<double>> losses;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = pick(rng);
      const double norm = 1.0 / double(std::max<std::size_t>(1, train_y[i].size()));
      losses.push_back(
          ops::scale(ctc::loss_from_logits(head(g.constant(standardize(train_x[i]))), train_y[i], vocab), norm));
    }
    Var<double> total = ops::scale(encoder::sum_scalars(losses), 1.0 / double(B));
    r.final_loss = total.value().item();
    g.backward(total);
    if (auto bad = opt.step()) throw StageError("probe", "non-finite gradient in " + *bad);
  }
  std::size_t errors = 0, symbols = 0;
  for (std::size_t i = 0; i < eval_x.size(); ++i) {
    Graph<double> g;
    const auto scores = head(g.constant(standardize(eval_x[i]))).value();
    errors += ctc::edit_distance(ctc::greedy_decode(scores, vocab), eval_y[i]);
    symbols += eval_y[i].size();
  }
  r.symbol_error_rate = symbols ? double(errors) / double(symbols) : 0.0;
  return r;
}

/// Probe of one encoder checkpoint: train on the train split, score on test.
inline ProbeResult probe_encoder(const PipelineConfig& cfg, const fs::path& encoder_path,
                                 const std::vector<ClipFeatures>& train, const std::vector<ClipFeatures>& test) {
  auto enc = load_encoder(encoder_path);
  const auto tap_layer = enc.config().tap_layer;
  std::vector<std::vector<std::size_t>> ty, ey;
  for (const auto& c : train) ty.push_back(c.transcript);
  for (const auto& c : test) ey.push_back(c.transcript);
  return linear_probe(clip_features(enc, tap_layer, train), ty, clip_features(enc, tap_layer, test), ey,
                      enc.config().vocab, cfg.probe_steps, cfg.probe_lr, stage_seed(cfg, 12));
}

struct AblationResult {
  ProbeResult with_ctc, without_ctc;
};

/// Stage 2 without the CTC term from the same stage-1 weights, then a linear
/// probe of the tapped features of both encoders.
inline AblationResult run_ablation(TrainContext& ctx) {
  const auto& cfg = ctx.cfg;
  if (!fs::exists(cfg.ablation_path())) train_stage2(ctx, false, cfg.ablation_path(), "stage2_noctc");
  const auto test = load_split(cfg, "test", false);
  AblationResult r;
  r.with_ctc = probe_encoder(cfg, cfg.muencoder_path(), ctx.clips(), test);
  r.without_ctc = probe_encoder(cfg, cfg.ablation_path(), ctx.clips(), test);
  MetricsLog mlog(cfg.log_dir() / "ablation.jsonl");
  mlog.write({{"encoder", "with_ctc"}, {"probe_ser", r.with_ctc.symbol_error_rate}, {"probe_loss", r.with_ctc.final_loss}});
  mlog.write({{"encoder", "without_ctc"},
              {"probe_ser", r.without_ctc.symbol_error_rate},
              {"probe_loss", r.without_ctc.final_loss}});
  ctx.log << "ablation: probe symbol error with CTC " << r.with_ctc.symbol_error_rate << ", without "
          << r.without_ctc.symbol_error_rate << "\n";
  return r;
}

// ---------------------------------------------------------------- driver

inline fs::path stage_output(const PipelineConfig& cfg, const std::string& stage) {
  if (stage == "stage1") return cfg.stage1_path();
  if (stage == "stage2") return cfg.muencoder_path();
  if (stage == "rvq") return cfg.rvq_high_path();
  if (stage == "vae") return cfg.vae_path();
  if (stage == "flowgen") return cfg.flowgen_path();
  return cfg.log_dir() / "ablation.jsonl";
}

/// Expands "all" and orders the requested stages by dependency.
inline std::vector<std::string> resolve_stages(const std::vector<std::string>& requested) {
  std::set<std::string> want;
  for (const auto& s : requested) {
    if (s == "all") {
      for (const auto& o : stage_order())
        if (o != "ablation") want.insert(o);
    } else if (std::find(stage_order().begin(), stage_order().end(), s) != stage_order().end()) {
      want.insert(s);
    } else {
      throw StageError("train", "unknown stage '" + s + "' (stage1, stage2, rvq, vae, flowgen, ablation, all)");
    }
  }
  std::vector<std::string> out;
  for (const auto& o : stage_order())
    if (want.count(o)) out.push_back(o);
  return out;
}

struct TrainSummary {
  std::vector<std::string> ran, skipped;
  std::map<std::string, double> seconds;
  std::optional<AblationResult> ablation;
};

/// Runs the requested stages in dependency order under the directory lock.
/// Stages whose checkpoint exists are skipped unless `overwrite`.
inline TrainSummary train_all(const PipelineConfig& cfg, const std::vector<std::string>& requested, bool overwrite,
                              std::ostream& log) {
  const auto stages = resolve_stages(requested);
  TrainLock lock(cfg.checkpoint_dir);
  TrainContext ctx{cfg, log, {}};
  TrainSummary s;
  for (const auto& st : stages) {
    if (!overwrite && fs::exists(stage_output(cfg, st))) {
      log << st << ": checkpoint exists, skipping (overwrite to retrain)\n";
      s.skipped.push_back(st);
      continue;
    }
    check_prerequisites(cfg, st);
    if (st == "ablation" && !fs::exists(cfg.muencoder_path())) {
      throw StageError(st, "missing prerequisite checkpoint from stage stage2 (" + cfg.muencoder_path().string() +
                               "); train that stage first");
    }
    if (overwrite && st == "ablation") fs::remove(cfg.ablation_path());
    const auto t0 = std::chrono::steady_clock::now();
    log << st << ": start\n";
    in_stage(st, [&] {
      if (st == "stage1") train_stage1(ctx);
      else if (st == "stage2") train_stage2(ctx, cfg.stage2_ctc, cfg.muencoder_path(), "stage2");
      else if (st == "rvq") train_rvq(ctx);
      else if (st == "vae") train_vae(ctx);
      else if (st == "flowgen") train_flowgen(ctx);
      else s.ablation = run_ablation(ctx);
    });
    s.seconds[st] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << st << ": done in " << s.seconds[st] << " s\n";
    s.ran.push_back(st);
  }
  return s;
}

}  // namespace mucodec::pipeline
