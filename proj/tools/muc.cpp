// muc: encode, decode, train, eval and inspect MuCodec streams.

#include <mucodec/data/vocab.hpp>
#include <mucodec/pipeline/eval.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace mucodec;
using namespace mucodec::pipeline;

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file");
  cmd->add_option("--preset", c.preset, "low | high | custom")->check(CLI::IsMember({"low", "high", "custom"}));
  cmd->add_option("--seed", c.seed, "sampling / training seed");
  cmd->add_option("--set", c.set, "override one configuration key (key=value)");
}

PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
  if (!c.preset.empty()) cfg.preset = parse_preset(c.preset);
  if (c.seed) cfg.seed = *c.seed;
  for (const auto& kv : c.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_option(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void print_info(const std::string& path) {
  const auto bytes = io::read_file(path);
  const auto h = codec::decode_header(bytes);
  const auto fr = codec::bits_per_frame(h);
  std::cout << "file          " << path << "\n"
            << "config        " << quant::config_name(h.config) << " (" << int(h.config) << ")\n"
            << "sample_rate   " << h.sample_rate << "\n"
            << "channels      " << int(h.channels) << "\n"
            << "token_rate    " << h.token_rate << " Hz\n"
            << "n_frames      " << h.n_frames << " per channel (" << double(h.n_frames) / h.token_rate << " s)\n"
            << "n_codebooks   " << int(h.n_codebooks) << "\n"
            << "codebook_size " << h.codebook_size << "\n"
            << "block_len     " << h.block_len << "\n"
            << "bits/frame    " << fr.packed_bits << " packed, " << fr.exact_bits << " entropy bound\n"
            << "payload       " << bytes.size() - codec::kHeaderBytes << " bytes\n"
            << "achieved      " << codec::achieved_kbps(h, bytes.size()) << " kbps\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MuCodec: low-bitrate music codec"};
  app.require_subcommand(1);

  Common ce, cd, ct, cv;
  std::string in, out;

  auto* enc = app.add_subcommand("encode", "WAV -> .muc");
  add_common(enc, ce);
  enc->add_option("input", in, "input WAV")->required();
  enc->add_option("--out", out, "output .muc")->required();

  std::optional<std::size_t> steps;
  std::optional<double> guidance;
  auto* dec = app.add_subcommand("decode", ".muc -> WAV");
  add_common(dec, cd);
  dec->add_option("input", in, "input .muc")->required();
  dec->add_option("--out", out, "output WAV")->required();
  dec->add_option("--steps", steps, "override sampler steps");
  dec->add_option("--guidance", guidance, "override guidance scale");

  std::vector<std::string> stages{"all"};
  bool overwrite = false;
  auto* tr = app.add_subcommand("train", "train the models stage by stage");
  add_common(tr, ct);
  tr->add_option("--stage", stages, "stage1 stage2 rvq vae flowgen ablation | all");
  tr->add_flag("--overwrite", overwrite, "retrain stages whose checkpoint exists");

  std::string split = "test";
  auto* ev = app.add_subcommand("eval", "objective metrics over a corpus split");
  add_common(ev, cv);
  ev->add_option("--split", split, "train | dev | test");
  ev->add_option("--out", out, "JSONL report (default: stdout)");

  auto* info = app.add_subcommand("info", "dump a .muc header");
  info->add_option("input", in, "input .muc")->required();

  std::size_t n_train = 80, n_dev = 10, n_test = 10;
  std::uint64_t corpus_seed = 0;
  double clip_s = 6.4;
  auto* corp = app.add_subcommand("corpus", "write the synthetic corpus");
  corp->add_option("--out", out, "corpus directory")->required();
  corp->add_option("--train", n_train, "training clips")->capture_default_str();
  corp->add_option("--dev", n_dev, "dev clips")->capture_default_str();
  corp->add_option("--test", n_test, "test clips")->capture_default_str();
  corp->add_option("--seed", corpus_seed, "corpus seed")->capture_default_str();
  corp->add_option("--clip-seconds", clip_s, "clip duration")->capture_default_str();

  auto* voc = app.add_subcommand("vocab", "write the symbol vocabulary");
  voc->add_option("--out", out, "vocabulary file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (enc->parsed()) {
      const auto cfg = resolve(ce);
      auto m = Models::load(cfg, false);
      encode_file(in, out, m, cfg, std::cerr);
    } else if (dec->parsed()) {
      auto cfg = resolve(cd);
      if (steps) cfg.sampler_steps = *steps;
      if (guidance) cfg.sampler_guidance = *guidance;
      cfg.validate();
      auto m = Models::load(cfg, true);
      decode_file(in, out, m, cfg, std::cerr);
    } else if (tr->parsed()) {
      const auto cfg = resolve(ct);
      const auto s = train_all(cfg, stages, overwrite, std::cerr);
      std::cerr << "trained:";
      for (const auto& x : s.ran) std::cerr << " " << x;
      std::cerr << "\n";
    } else if (ev->parsed()) {
      const auto cfg = resolve(cv);
      auto m = Models::load(cfg, true);
      std::ofstream file;
      if (!out.empty()) file.open(out);
      evaluate(cfg, m, split, out.empty() ? &std::cout : &file, std::cerr);
    } else if (info->parsed()) {
      print_info(in);
    } else if (corp->parsed()) {
      data::CorpusOptions opt;
      opt.clip_s = clip_s;
      const auto c = data::build_corpus(n_train, n_dev, n_test, corpus_seed, out, opt);
      std::cerr << "wrote " << c.manifest.size() << " clips to " << out << "\n";
    } else if (voc->parsed()) {
      std::ofstream(out) << data::vocabulary_file();
    }
  } catch (const StageError& e) {
    std::cerr << "muc: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "muc: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
