#pragma once

#include <mucodec/encoder/muencoder.hpp>
#include <mucodec/flow/flowgen.hpp>
#include <mucodec/pipeline/config.hpp>
#include <mucodec/quant/rvq.hpp>
#include <mucodec/vae/melvae.hpp>

#include <map>
#include <memory>
#include <stdexcept>
#include <string>

namespace mucodec::pipeline {

using Real = float;

/// Error tagged with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Runs `f`, rethrowing any failure as a StageError named `stage`.
template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

inline void require_file(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw StageError(stage, "missing checkpoint " + p.string());
}

inline encoder::MuEncoder<Real> load_encoder(const fs::path& path) {
  return in_stage("muencoder", [&] {
    require_file(path, "muencoder");
    const auto ck = load_checkpoint(path.string());
    encoder::MuEncoder<Real> m(encoder::MuEncoderConfig::from_meta(ck), 0);
    auto p = m.params();
    restore(ck, p);
    return m;
  });
}

inline vae::MelVae<Real> load_vae(const fs::path& path) {
  return in_stage("vae", [&] {
    require_file(path, "vae");
    const auto ck = load_checkpoint(path.string());
    vae::MelVae<Real> m(vae::VaeConfig::from_meta(ck), 0);
    auto p = m.params();
    restore(ck, p);
    return m;
  });
}

struct FlowModel {
  flow::Dit<Real> dit;
  flow::SamplerConfig sampler;
  std::size_t tap_layer = 0;  // encoder layer the conditions came from
};

inline FlowModel load_flow(const fs::path& path) {
  return in_stage("flowgen", [&] {
    require_file(path, "flowgen");
    const auto ck = load_checkpoint(path.string());
    const auto [dc, sc] = flow::from_meta(ck);
    FlowModel f{flow::Dit<Real>(dc, 0), sc, std::stoull(ck.require_meta("tap_layer"))};
    auto p = f.dit.params();
    restore(ck, p);
    return f;
  });
}

inline quant::Codebooks load_rvq(const fs::path& path) {
  return in_stage("rvq", [&] {
    require_file(path, "rvq");
    return quant::load_codebooks(path.string());
  });
}

/// Every model the codec needs, checked for mutual consistency. Codebooks
/// are loaded on demand per preset.
struct Models {
  encoder::MuEncoder<Real> encoder;
  vae::MelVae<Real> vae;
  std::unique_ptr<FlowModel> flow;
  std::map<Preset, quant::Codebooks> rvq;
  std::size_t tap_layer = 0;

  static Models load(const PipelineConfig& cfg, bool need_decoder = true) {
    Models m;
    m.encoder = load_encoder(cfg.muencoder_path());
    const auto& ec = m.encoder.config();
    m.tap_layer = cfg.tap_layer ? cfg.tap_layer : ec.tap_layer;
    if (m.tap_layer != ec.tap_layer) {
      throw StageError("config", "tap_layer " + std::to_string(m.tap_layer) + " differs from the layer " +
                                     std::to_string(ec.tap_layer) + " the codebooks were trained on");
    }
    if (need_decoder) {
      m.vae = load_vae(cfg.vae_path());
      m.flow = std::make_unique<FlowModel>(load_flow(cfg.flowgen_path()));
      const auto& dc = m.flow->dit.config();
      if (dc.cond_dim != ec.model_dim) {
        throw StageError("flowgen", "condition dim " + std::to_string(dc.cond_dim) + " != encoder width " +
                                        std::to_string(ec.model_dim));
      }
      if (dc.latent_dim != m.vae.config().latent) {
        throw StageError("flowgen", "latent dim " + std::to_string(dc.latent_dim) + " != VAE latent " +
                                        std::to_string(m.vae.config().latent));
      }
      if (m.vae.config().n_mels != ec.n_mels) throw StageError("vae", "Mel band count differs from the encoder");
      if (m.flow->tap_layer != m.tap_layer) {
        throw StageError("flowgen", "trained on layer " + std::to_string(m.flow->tap_layer) + " features, config taps " +
                                        std::to_string(m.tap_layer));
      }
    }
    return m;
  }

  const quant::Codebooks& codebooks(const PipelineConfig& cfg, Preset p) {
    auto it = rvq.find(p);
    if (it != rvq.end()) return it->second;
    auto b = load_rvq(cfg.rvq_path(p));
    if (b.cfg.dim != encoder.config().model_dim) {
      throw StageError("rvq", "codebook dim " + std::to_string(b.cfg.dim) + " != encoder width " +
                                  std::to_string(encoder.config().model_dim));
    }
    const auto want = p == Preset::kLow ? quant::ConfigId::kLow : p == Preset::kHigh ? quant::ConfigId::kHigh
                                                                                   : quant::ConfigId::kCustom;
    if (b.cfg.id != want) {
      throw StageError("rvq", cfg.rvq_path(p).string() + " holds " + quant::config_name(b.cfg.id) +
                                  " codebooks, preset is " + preset_name(p));
    }
    return rvq.emplace(p, std::move(b)).first->second;
  }
};

}  // namespace mucodec::pipeline
