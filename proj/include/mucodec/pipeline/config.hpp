#pragma once

#include <mucodec/codec/bitstream.hpp>
#include <mucodec/dsp/audio.hpp>
#include <mucodec/flow/flowgen.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace mucodec::pipeline {

namespace fs = std::filesystem;

enum class Preset { kLow, kHigh, kCustom };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::kLow: return "low";
    case Preset::kHigh: return "high";
    default: return "custom";
  }
}

inline Preset parse_preset(const std::string& s) {
  if (s == "low") return Preset::kLow;
  if (s == "high") return Preset::kHigh;
  if (s == "custom") return Preset::kCustom;
  throw std::invalid_argument("unknown preset '" + s + "' (expected low, high or custom)");
}

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything the encode/decode/train/eval commands read. Plain key=value
/// text; see format_config for the full key list.
struct PipelineConfig {
  Preset preset = Preset::kLow;
  int sample_rate = 24000;     // analysis rate of every model
  std::size_t tap_layer = 0;   // 0: architecture default
  std::uint16_t block_len = 64;
  std::uint64_t seed = 0;
  int gl_iterations = 32;

  fs::path checkpoint_dir = "checkpoints";
  fs::path muencoder, rvq_low, rvq_high, rvq_custom, vae, flowgen;  // empty: default name in checkpoint_dir

  std::optional<std::size_t> sampler_steps;
  std::optional<double> sampler_guidance;

  // training
  fs::path corpus = "corpus";
  std::string encoder_arch = "desk";
  std::size_t batch_size = 8;
  double segment_s = 2.56;
  std::size_t stage1_steps = 400;
  double stage1_lr = 5e-4;
  std::size_t stage2_steps = 800;
  double stage2_lr = 5e-4;
  bool stage2_ctc = true;
  std::size_t rvq_passes = 4;
  std::size_t rvq_shifts = 2;  // sub-token shifts of the training features, 1..4
  std::size_t custom_codebooks = 0;
  std::size_t custom_size = 0;
  std::size_t vae_steps = 1000;
  double vae_lr = 1e-3;
  std::size_t flow_steps = 2000;
  double flow_lr = 1e-3;
  std::size_t flow_frames = 64;
  double cond_drop = 0.1;
  std::size_t probe_steps = 300;
  double probe_lr = 1e-2;
  std::size_t save_every = 100;
  bool random_baseline = true;

  fs::path path_for(const fs::path& explicit_path, const char* name) const {
    return explicit_path.empty() ? checkpoint_dir / name : explicit_path;
  }
  fs::path muencoder_path() const { return path_for(muencoder, "muencoder.ck"); }
  fs::path stage1_path() const { return checkpoint_dir / "muencoder_stage1.ck"; }
  fs::path ablation_path() const { return checkpoint_dir / "muencoder_noctc.ck"; }
  fs::path rvq_low_path() const { return path_for(rvq_low, "rvq_low.mucb"); }
  fs::path rvq_high_path() const { return path_for(rvq_high, "rvq_high.mucb"); }
  fs::path rvq_custom_path() const { return path_for(rvq_custom, "rvq_custom.mucb"); }
  fs::path rvq_path(Preset p) const {
    return p == Preset::kLow ? rvq_low_path() : p == Preset::kHigh ? rvq_high_path() : rvq_custom_path();
  }
  fs::path vae_path() const { return path_for(vae, "vae.ck"); }
  fs::path flowgen_path() const { return path_for(flowgen, "flowgen.ck"); }
  fs::path log_dir() const { return checkpoint_dir / "logs"; }

  void validate() const {
    if (!dsp::supported_rate(sample_rate)) throw ConfigError("sample_rate must be 16000, 24000 or 48000");
    if (sample_rate != 24000) throw ConfigError("sample_rate: the shipped models analyse audio at 24000 Hz");
    if (block_len == 0 || block_len > codec::kMaxBlockDigits / 4) throw ConfigError("block_len must be in [1, 1024]");
    if (gl_iterations < 1) throw ConfigError("griffin_lim.iterations must be >= 1");
    if (encoder_arch != "desk" && encoder_arch != "reference") throw ConfigError("encoder.arch must be desk or reference");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(segment_s >= 0.16)) throw ConfigError("train.segment_s must be >= 0.16");
    if (!(cond_drop >= 0 && cond_drop < 1)) throw ConfigError("flow.cond_drop must lie in [0, 1)");
    if (flow_frames == 0) throw ConfigError("flow.frames must be >= 1");
    if (rvq_shifts < 1 || rvq_shifts > 4) throw ConfigError("rvq.shifts must be in [1, 4]");
    for (double lr : {stage1_lr, stage2_lr, vae_lr, flow_lr, probe_lr})
      if (!(lr > 0)) throw ConfigError("learning rates must be positive");
    if (sampler_steps && *sampler_steps == 0) throw ConfigError("sampler.n_steps must be >= 1");
    if (sampler_guidance && !std::isfinite(*sampler_guidance)) throw ConfigError("sampler.guidance must be finite");
    if ((custom_codebooks == 0) != (custom_size == 0)) {
      throw ConfigError("rvq.custom_codebooks and rvq.custom_size must be set together");
    }
    if (custom_size == 1 || custom_codebooks * std::size_t(block_len) > codec::kMaxBlockDigits) {
      throw ConfigError("custom RVQ shape is not representable in the stream format");
    }
  }

  /// Sampler settings: checkpoint defaults with this config's overrides applied.
  flow::SamplerConfig sampler(const flow::SamplerConfig& defaults) const {
    auto s = defaults;
    if (sampler_steps) s.n_steps = *sampler_steps;
    if (sampler_guidance) s.guidance = *sampler_guidance;
    s.seed = seed;
    return s;
  }
};

/// Bitrate of a preset recomputed from the stream layout.
inline double preset_kbps(Preset p, std::uint16_t block_len) {
  if (p == Preset::kCustom) throw std::invalid_argument("preset_kbps: custom presets depend on the codebook file");
  const auto h = p == Preset::kLow ? codec::StreamHeader::low() : codec::StreamHeader::high(block_len);
  return codec::bits_per_frame(h.n_codebooks, h.codebook_size, block_len).packed_bps(h.token_rate) / 1000.0;
}

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;

template <typename T, typename M>
Setter num(M PipelineConfig::*m) {
  return [m](PipelineConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<T>(k, v); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"preset", [](PipelineConfig& c, const std::string&, const std::string& v) { c.preset = parse_preset(v); }},
      {"sample_rate", num<int>(&PipelineConfig::sample_rate)},
      {"tap_layer", num<std::size_t>(&PipelineConfig::tap_layer)},
      {"block_len", num<std::uint16_t>(&PipelineConfig::block_len)},
      {"seed", num<std::uint64_t>(&PipelineConfig::seed)},
      {"griffin_lim.iterations", num<int>(&PipelineConfig::gl_iterations)},
      {"checkpoint_dir", [](PipelineConfig& c, const std::string&, const std::string& v) { c.checkpoint_dir = v; }},
      {"checkpoint.muencoder", [](PipelineConfig& c, const std::string&, const std::string& v) { c.muencoder = v; }},
      {"checkpoint.rvq_low", [](PipelineConfig& c, const std::string&, const std::string& v) { c.rvq_low = v; }},
      {"checkpoint.rvq_high", [](PipelineConfig& c, const std::string&, const std::string& v) { c.rvq_high = v; }},
      {"checkpoint.rvq_custom", [](PipelineConfig& c, const std::string&, const std::string& v) { c.rvq_custom = v; }},
      {"checkpoint.vae", [](PipelineConfig& c, const std::string&, const std::string& v) { c.vae = v; }},
      {"checkpoint.flowgen", [](PipelineConfig& c, const std::string&, const std::string& v) { c.flowgen = v; }},
      {"sampler.n_steps",
       [](PipelineConfig& c, const std::string& k, const std::string& v) { c.sampler_steps = parse_number<std::size_t>(k, v); }},
      {"sampler.guidance",
       [](PipelineConfig& c, const std::string& k, const std::string& v) { c.sampler_guidance = parse_number<double>(k, v); }},
      {"corpus", [](PipelineConfig& c, const std::string&, const std::string& v) { c.corpus = v; }},
      {"encoder.arch", [](PipelineConfig& c, const std::string&, const std::string& v) { c.encoder_arch = v; }},
      {"train.batch_size", num<std::size_t>(&PipelineConfig::batch_size)},
      {"train.segment_s", num<double>(&PipelineConfig::segment_s)},
      {"train.save_every", num<std::size_t>(&PipelineConfig::save_every)},
      {"stage1.steps", num<std::size_t>(&PipelineConfig::stage1_steps)},
      {"stage1.lr", num<double>(&PipelineConfig::stage1_lr)},
      {"stage2.steps", num<std::size_t>(&PipelineConfig::stage2_steps)},
      {"stage2.lr", num<double>(&PipelineConfig::stage2_lr)},
      {"stage2.ctc",
       [](PipelineConfig& c, const std::string& k, const std::string& v) { c.stage2_ctc = parse_bool(k, v); }},
      {"rvq.passes", num<std::size_t>(&PipelineConfig::rvq_passes)},
      {"rvq.shifts", num<std::size_t>(&PipelineConfig::rvq_shifts)},
      {"rvq.custom_codebooks", num<std::size_t>(&PipelineConfig::custom_codebooks)},
      {"rvq.custom_size", num<std::size_t>(&PipelineConfig::custom_size)},
      {"vae.steps", num<std::size_t>(&PipelineConfig::vae_steps)},
      {"vae.lr", num<double>(&PipelineConfig::vae_lr)},
      {"flow.steps", num<std::size_t>(&PipelineConfig::flow_steps)},
      {"flow.lr", num<double>(&PipelineConfig::flow_lr)},
      {"flow.frames", num<std::size_t>(&PipelineConfig::flow_frames)},
      {"flow.cond_drop", num<double>(&PipelineConfig::cond_drop)},
      {"probe.steps", num<std::size_t>(&PipelineConfig::probe_steps)},
      {"probe.lr", num<double>(&PipelineConfig::probe_lr)},
      {"eval.random_baseline",
       [](PipelineConfig& c, const std::string& k, const std::string& v) { c.random_baseline = parse_bool(k, v); }},
  };
  return table;
}

}  // namespace detail

/// Applies one key=value pair; unknown keys are errors so typos never pass silently.
inline void set_option(PipelineConfig& c, const std::string& key, const std::string& value) {
  const auto& t = detail::setters();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second(c, key, value);
}

/// `key = value` lines; '#' starts a comment; blank lines ignored.
inline PipelineConfig parse_config(const std::string& text, PipelineConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key or value");
    try {
      set_option(base, key, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Text that parse_config reads back to the same configuration.
inline std::string format_config(const PipelineConfig& c) {
  std::ostringstream o;
  auto kv = [&](const char* k, const auto& v) {
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      char buf[32];
      const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;  // shortest round-trip form
      o << k << " = " << std::string_view(buf, std::size_t(end - buf)) << "\n";
    } else {
      o << k << " = " << v << "\n";
    }
  };
  kv("preset", preset_name(c.preset));
  kv("sample_rate", c.sample_rate);
  kv("tap_layer", c.tap_layer);
  kv("block_len", c.block_len);
  kv("seed", c.seed);
  kv("griffin_lim.iterations", c.gl_iterations);
  kv("checkpoint_dir", c.checkpoint_dir.string());
  if (!c.muencoder.empty()) kv("checkpoint.muencoder", c.muencoder.string());
  if (!c.rvq_low.empty()) kv("checkpoint.rvq_low", c.rvq_low.string());
  if (!c.rvq_high.empty()) kv("checkpoint.rvq_high", c.rvq_high.string());
  if (!c.rvq_custom.empty()) kv("checkpoint.rvq_custom", c.rvq_custom.string());
  if (!c.vae.empty()) kv("checkpoint.vae", c.vae.string());
  if (!c.flowgen.empty()) kv("checkpoint.flowgen", c.flowgen.string());
  if (c.sampler_steps) kv("sampler.n_steps", *c.sampler_steps);
  if (c.sampler_guidance) kv("sampler.guidance", *c.sampler_guidance);
  kv("corpus", c.corpus.string());
  kv("encoder.arch", c.encoder_arch);
  kv("train.batch_size", c.batch_size);
  kv("train.segment_s", c.segment_s);
  kv("train.save_every", c.save_every);
  kv("stage1.steps", c.stage1_steps);
  kv("stage1.lr", c.stage1_lr);
  kv("stage2.steps", c.stage2_steps);
  kv("stage2.lr", c.stage2_lr);
  kv("stage2.ctc", c.stage2_ctc ? 1 : 0);
  kv("rvq.passes", c.rvq_passes);
  kv("rvq.shifts", c.rvq_shifts);
  kv("rvq.custom_codebooks", c.custom_codebooks);
  kv("rvq.custom_size", c.custom_size);
  kv("vae.steps", c.vae_steps);
  kv("vae.lr", c.vae_lr);
  kv("flow.steps", c.flow_steps);
  kv("flow.lr", c.flow_lr);
  kv("flow.frames", c.flow_frames);
  kv("flow.cond_drop", c.cond_drop);
  kv("probe.steps", c.probe_steps);
  kv("probe.lr", c.probe_lr);
  kv("eval.random_baseline", c.random_baseline ? 1 : 0);
  return o.str();
}

}  // namespace mucodec::pipeline
