#pragma once

#include <mucodec/pipeline/codec.hpp>
#include <mucodec/pipeline/metrics.hpp>
#include <mucodec/pipeline/train.hpp>

#include <json.hpp>

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mucodec::pipeline {

/// Objective scores of one encode -> decode round trip.
struct ClipEval {
  std::string clip;
  std::size_t frames = 0;
  double kbps = 0;                       // from the actual stream size
  double lsd_db = 0;
  double mel_distortion = 0;             // decoded audio vs reference, L1 on log-Mel
  std::optional<double> mel_distortion_random;  // same, decoding uniformly random codes
  double latent_mse = 0;                 // sampled latent vs VAE posterior mean of the reference
  std::vector<quant::StageStats> stats;  // per codebook stage
};

struct EvalReport {
  std::string split;
  Preset preset = Preset::kLow;
  std::vector<ClipEval> clips;
  ClipEval mean;  // per-field means; stats over all clips' codes together
};

inline nlohmann::json to_json(const ClipEval& c, const std::string& split, Preset p) {
  nlohmann::json j = {{"split", split},       {"clip", c.clip},           {"preset", preset_name(p)},
                      {"frames", c.frames},   {"kbps", c.kbps},           {"lsd_db", c.lsd_db},
                      {"mel_distortion", c.mel_distortion}, {"latent_mse", c.latent_mse}};
  if (c.mel_distortion_random) j["mel_distortion_random"] = *c.mel_distortion_random;
  std::vector<double> u, px;
  for (const auto& s : c.stats) u.push_back(s.utilization), px.push_back(s.perplexity);
  j["utilization"] = u;
  j["perplexity"] = px;
  return j;
}

/// Encodes and decodes every clip of `split` with the configured preset.
/// One JSON record per clip, then one with clip = "mean", go to `jsonl`.
inline EvalReport evaluate(const PipelineConfig& cfg, Models& m, const std::string& split, std::ostream* jsonl,
                           std::ostream& log) {
  EvalReport rep{split, cfg.preset, {}, {}};
  std::vector<const data::ManifestEntry*> entries;
  const auto manifest = corpus_manifest(cfg);
  for (const auto& e : manifest)
    if (e.split == split) entries.push_back(&e);
  if (entries.empty()) throw StageError("eval", "split '" + split + "' is empty");
  quant::CodeSeq all;
  std::size_t size = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = *entries[i];
    const auto audio = in_stage("wav", [&] { return dsp::read_wav((cfg.corpus / e.path).string()); });
    const auto enc = encode_audio(audio, m, cfg);
    const auto dec = decode_codes(enc.header, enc.codes, m, cfg);
    const auto ref = dsp::resample(audio.channel(0), cfg.sample_rate);
    const auto out = dsp::resample(dec.audio.channel(0), cfg.sample_rate);
    const auto ref_mel = dsp::mel_spectrogram(ref).frames;
    ClipEval c;
    c.clip = e.id;
    c.frames = enc.header.n_frames;
    c.kbps = enc.kbps;
    c.lsd_db = log_spectral_distance(ref.samples, out.samples);
    c.mel_distortion = mel_distortion(ref_mel, dsp::mel_spectrogram(out).frames);
    c.latent_mse = latent_mse(m.vae.encode_mean(ref_mel), dec.latents.front());
    const auto& books = m.codebooks(cfg, cfg.preset);
    size = books.cfg.codebook_size;
    c.stats = quant::codebook_stats(enc.codes.front(), size);
    if (cfg.random_baseline) {
      const auto rnd = random_codes(enc.codes.front(), size, cfg.seed * 7919 + i + 1);
      const auto rdec = decode_codes(enc.header, {rnd}, m, cfg);
      c.mel_distortion_random =
          mel_distortion(ref_mel, dsp::mel_spectrogram(dsp::resample(rdec.audio.channel(0), cfg.sample_rate)).frames);
    }
    all.n_codebooks = enc.codes.front().n_codebooks;
    all.frames += enc.codes.front().frames;
    all.indices.insert(all.indices.end(), enc.codes.front().indices.begin(), enc.codes.front().indices.end());
    if (jsonl) *jsonl << to_json(c, split, cfg.preset).dump() << "\n";
    log << e.id << ": lsd " << c.lsd_db << " dB, mel " << c.mel_distortion;
    if (c.mel_distortion_random) log << " (random codes " << *c.mel_distortion_random << ")";
    log << ", latent mse " << c.latent_mse << ", " << c.kbps << " kbps\n";
    rep.clips.push_back(std::move(c));
  }
  auto& mean = rep.mean;
  mean.clip = "mean";
  const double n = double(rep.clips.size());
  double rnd = 0;
  for (const auto& c : rep.clips) {
    mean.frames += c.frames;
    mean.kbps += c.kbps / n;
    mean.lsd_db += c.lsd_db / n;
    mean.mel_distortion += c.mel_distortion / n;
    mean.latent_mse += c.latent_mse / n;
    if (c.mel_distortion_random) rnd += *c.mel_distortion_random / n;
  }
  if (cfg.random_baseline) mean.mel_distortion_random = rnd;
  mean.stats = quant::codebook_stats(all, size);
  if (jsonl) {
    auto j = to_json(mean, split, cfg.preset);
    j["n_clips"] = rep.clips.size();
    *jsonl << j.dump() << "\n";
  }
  return rep;
}

}  // namespace mucodec::pipeline
