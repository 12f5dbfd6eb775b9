#pragma once

#include <mucodec/codec/bitstream.hpp>
#include <mucodec/dsp/audio.hpp>
#include <mucodec/dsp/resample.hpp>
#include <mucodec/dsp/spectral.hpp>
#include <mucodec/pipeline/models.hpp>

#include <algorithm>
#include <ostream>
#include <random>
#include <vector>

namespace mucodec::pipeline {

/// Samples per token at the 24 kHz analysis rate (240-sample hop x 4).
inline constexpr std::size_t kSamplesPerToken = 960;

/// Tokens covering `samples` analysis-rate samples; never zero.
inline std::size_t token_count(std::size_t samples) {
  return std::max<std::size_t>(1, (samples + kSamplesPerToken - 1) / kSamplesPerToken);
}

inline Preset preset_of(quant::ConfigId id) {
  return id == quant::ConfigId::kLow ? Preset::kLow : id == quant::ConfigId::kHigh ? Preset::kHigh : Preset::kCustom;
}

/// Channels of `in` as mono buffers at the analysis rate.
inline std::vector<dsp::AudioBuffer> analysis_channels(const dsp::AudioBuffer& in, int rate) {
  in.validate();
  std::vector<dsp::AudioBuffer> out;
  for (int c = 0; c < in.channels; ++c) out.push_back(dsp::resample(in.channel(c), rate));
  return out;
}

/// Tapped encoder features [token_count, D] of one analysis-rate mono buffer.
/// Clips shorter than one token are zero-padded before analysis.
inline Tensor<double> tap_features(encoder::MuEncoder<Real>& enc, std::size_t tap_layer, const dsp::AudioBuffer& mono) {
  const std::size_t n = token_count(mono.samples.size());
  dsp::AudioBuffer a = mono;
  if (a.samples.size() < kSamplesPerToken) a.samples.resize(kSamplesPerToken, 0.0f);
  const auto mel = in_stage("mel", [&] { return dsp::mel_spectrogram(a); });
  auto f = in_stage("muencoder", [&] { return encoder::tap(enc.encode(mel), tap_layer).values; });
  Tensor<double> out(Shape{n, f.cols()});
  std::copy_n(f.vec().begin(), out.size(), out.vec().begin());
  return out;
}

inline codec::StreamHeader header_for(const quant::Codebooks& b, const PipelineConfig& cfg) {
  codec::StreamHeader h;
  h.config = b.cfg.id;
  h.n_codebooks = std::uint8_t(b.cfg.n_codebooks);
  h.codebook_size = std::uint32_t(b.cfg.codebook_size);
  h.block_len = b.cfg.id == quant::ConfigId::kLow ? codec::StreamHeader::low().block_len : cfg.block_len;
  return h;
}

struct EncodeResult {
  io::Bytes stream;
  codec::StreamHeader header;
  std::vector<quant::CodeSeq> codes;       // per channel
  std::vector<Tensor<double>> features;    // per channel, tapped
  double kbps = 0;
};

/// resample -> mel -> MuEncoder tap -> RVQ -> bitstream.
inline EncodeResult encode_audio(const dsp::AudioBuffer& in, Models& m, const PipelineConfig& cfg) {
  const auto channels = in_stage("resample", [&] { return analysis_channels(in, cfg.sample_rate); });
  const auto& books = m.codebooks(cfg, cfg.preset);
  EncodeResult r;
  r.header = header_for(books, cfg);
  r.header.sample_rate = std::uint32_t(in.sample_rate);
  r.header.channels = std::uint8_t(in.channels);
  for (const auto& ch : channels) {
    r.features.push_back(tap_features(m.encoder, m.tap_layer, ch));
    r.codes.push_back(in_stage("rvq", [&] { return quant::quantize(r.features.back(), books).codes; }));
  }
  r.header.n_frames = std::uint32_t(r.codes.front().frames);
  r.stream = in_stage("bitstream", [&] { return codec::encode_stream(std::span<const quant::CodeSeq>(r.codes), r.header); });
  r.kbps = codec::achieved_kbps(r.header, r.stream.size());
  return r;
}

inline EncodeResult encode_file(const fs::path& wav, const fs::path& out, Models& m, const PipelineConfig& cfg,
                                std::ostream& log) {
  const auto audio = in_stage("wav", [&] { return dsp::read_wav(wav.string()); });
  auto r = encode_audio(audio, m, cfg);
  in_stage("write", [&] { io::write_file(out.string(), r.stream); });
  log << "encoded " << wav.string() << " -> " << out.string() << ": preset " << quant::config_name(r.header.config)
      << ", " << r.header.n_frames << " frames, " << (r.stream.size() - codec::kHeaderBytes) << " payload bytes, "
      << r.kbps << " kbps\n";
  return r;
}

struct DecodeResult {
  dsp::AudioBuffer audio;
  std::vector<Tensor<double>> latents;  // per channel, sampled
  std::vector<Tensor<double>> mels;     // per channel, VAE output
  flow::SamplerConfig sampler;
};

/// dequantize -> flow sampling -> VAE decode -> Griffin-Lim -> resample.
/// Channel c samples with seed + c.
inline DecodeResult decode_codes(const codec::StreamHeader& h, const std::vector<quant::CodeSeq>& codes, Models& m,
                                 const PipelineConfig& cfg) {
  if (!m.flow) throw StageError("decode", "decoder models are not loaded");
  const auto& books = m.codebooks(cfg, preset_of(h.config));
  if (books.cfg.n_codebooks != h.n_codebooks || books.cfg.codebook_size != h.codebook_size) {
    throw StageError("decode", "stream/checkpoint mismatch: stream is " + std::to_string(h.n_codebooks) + " x " +
                                   std::to_string(h.codebook_size) + ", codebooks are " +
                                   std::to_string(books.cfg.n_codebooks) + " x " +
                                   std::to_string(books.cfg.codebook_size));
  }
  DecodeResult r;
  r.sampler = cfg.sampler(m.flow->sampler);
  std::vector<dsp::AudioBuffer> outs;
  for (std::size_t c = 0; c < codes.size(); ++c) {
    auto s = r.sampler;
    s.seed = r.sampler.seed + c;
    const auto cond = in_stage("rvq", [&] { return quant::dequantize(codes[c], books); });
    r.latents.push_back(in_stage("flowgen", [&] { return flow::sample(m.flow->dit, cond, s); }));
    r.mels.push_back(in_stage("vae", [&] { return m.vae.decode_mel(r.latents.back()); }));
    auto audio = in_stage("griffin_lim", [&] {
      dsp::MelSpec mel{r.mels.back(), 240, cfg.sample_rate, r.mels.back().cols()};
      return dsp::griffin_lim(mel, cfg.gl_iterations, dsp::SpectralConfig{}, s.seed).audio;
    });
    audio.samples.resize(codes[c].frames * kSamplesPerToken, 0.0f);
    outs.push_back(in_stage("resample", [&] { return dsp::resample(audio, int(h.sample_rate)); }));
  }
  r.audio = dsp::AudioBuffer::interleave(outs);
  return r;
}

inline DecodeResult decode_stream_bytes(const io::Bytes& bytes, Models& m, const PipelineConfig& cfg) {
  const auto d = in_stage("bitstream", [&] { return codec::decode_stream(bytes); });
  return decode_codes(d.header, d.channels, m, cfg);
}

inline DecodeResult decode_file(const fs::path& muc, const fs::path& out, Models& m, const PipelineConfig& cfg,
                                std::ostream& log) {
  const auto bytes = in_stage("read", [&] { return io::read_file(muc.string()); });
  auto r = decode_stream_bytes(bytes, m, cfg);
  in_stage("wav", [&] { dsp::write_wav(out.string(), r.audio); });
  log << "decoded " << muc.string() << " -> " << out.string() << ": " << r.audio.frames() << " samples at "
      << r.audio.sample_rate << " Hz, sampler n_steps " << r.sampler.n_steps << (cfg.sampler_steps ? " (override)" : "")
      << ", guidance " << r.sampler.guidance << (cfg.sampler_guidance ? " (override)" : "") << ", seed "
      << r.sampler.seed << "\n";
  return r;
}

/// Uniformly random valid codes with the shape of `like`.
inline quant::CodeSeq random_codes(const quant::CodeSeq& like, std::size_t codebook_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> u(0, std::uint32_t(codebook_size - 1));
  auto c = like;
  for (auto& i : c.indices) i = u(rng);
  return c;
}

}  // namespace mucodec::pipeline
