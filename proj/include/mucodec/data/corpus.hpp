#pragma once

#include <mucodec/data/synth.hpp>
#include <mucodec/dsp/resample.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::data {

namespace fs = std::filesystem;

enum class Scenario { kMixed, kVocalOnly, kBackgroundOnly };

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kMixed: return "mixed";
    case Scenario::kVocalOnly: return "vocal";
    case Scenario::kBackgroundOnly: return "background";
  }
  return "?";
}

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::string split;
  std::string transcript;
};

using Manifest = std::vector<ManifestEntry>;

inline void check_manifest(const Manifest& m) {
  std::set<std::string> ids;
  for (const auto& e : m) {
    if (e.id.empty()) throw std::invalid_argument("manifest: empty clip id");
    if (!ids.insert(e.id).second) throw std::invalid_argument("manifest: duplicate clip id " + e.id);
    if (e.split != "train" && e.split != "dev" && e.split != "test") {
      throw std::invalid_argument("manifest: bad split '" + e.split + "' for " + e.id);
    }
    parse_transcript(e.transcript);
  }
}

/// id \t path \t split \t transcript, one clip per line.
inline std::string format_manifest(const Manifest& m) {
  std::string out;
  for (const auto& e : m) out += e.id + '\t' + e.path + '\t' + e.split + '\t' + e.transcript + '\n';
  return out;
}

inline Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    if (f.size() == 3) f.emplace_back();
    if (f.size() != 4) throw std::invalid_argument("manifest line " + std::to_string(lineno) + ": expected 4 fields");
    m.push_back({f[0], f[1], f[2], f[3]});
  }
  check_manifest(m);
  return m;
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << format_manifest(m);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Alignment sidecar next to each synthetic clip: "start_s \t end_s \t symbol".
inline std::vector<SymbolSpan> read_alignment(const fs::path& path) {
  std::vector<SymbolSpan> out;
  std::ifstream in(path);
  if (!in) return out;
  double a, b;
  char c;
  while (in >> a >> b >> c) out.push_back({a, b, parse_transcript(std::string(1, c)).front()});
  return out;
}

inline void write_alignment(const fs::path& path, const std::vector<SymbolSpan>& spans) {
  std::ofstream out(path);
  char buf[64];
  for (const auto& s : spans) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%c\n", s.start_s, s.end_s, symbol_char(s.symbol));
    out << buf;
  }
}

struct CorpusOptions {
  double clip_s = 6.4;
  int sample_rate = 24000;
  double min_bpm = 140, max_bpm = 180;
};

struct Corpus {
  fs::path root;
  Manifest manifest;
  std::vector<Scenario> scenarios;  // parallel to manifest
};

namespace detail {

// Exact 70/15/15 quota for a split of n clips, shuffled under the seed.
inline std::vector<Scenario> scenario_plan(std::size_t n, std::mt19937_64& rng) {
  const auto v = std::size_t(std::lround(0.15 * double(n)));
  const auto b = std::min(n - std::min(n, v), std::size_t(std::lround(0.15 * double(n))));
  std::vector<Scenario> plan(n, Scenario::kMixed);
  std::fill_n(plan.begin(), std::min(n, v), Scenario::kVocalOnly);
  std::fill_n(plan.begin() + std::ptrdiff_t(std::min(n, v)), b, Scenario::kBackgroundOnly);
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

}  // namespace detail

/// Writes n_train + n_dev + n_test clips, their alignments and manifest.tsv
/// under `root`. Output depends only on the arguments.
inline Corpus build_corpus(std::size_t n_train, std::size_t n_dev, std::size_t n_test, std::uint64_t seed,
                           const fs::path& root, const CorpusOptions& opt = {}) {
  if (n_train < 1 || n_dev < 1 || n_test < 1) throw std::invalid_argument("build_corpus: split counts must be >= 1");
  std::error_code ec;
  fs::create_directories(root / "clips", ec);
  if (ec) throw std::runtime_error("build_corpus: cannot create " + (root / "clips").string() + ": " + ec.message());

  std::mt19937_64 rng(seed);
  Corpus corpus{root, {}, {}};
  std::size_t index = 0;
  for (auto [split, n] : {std::pair<const char*, std::size_t>{"train", n_train}, {"dev", n_dev}, {"test", n_test}}) {
    for (Scenario sc : detail::scenario_plan(n, rng)) {
      ClipSpec spec;
      spec.seed = rng();
      spec.duration_s = opt.clip_s;
      spec.sample_rate = opt.sample_rate;
      spec.tempo_bpm = std::uniform_real_distribution<double>(opt.min_bpm, opt.max_bpm)(rng);
      spec.chord_pattern = std::size_t(rng() % 4);
      spec.vocal_gain = sc == Scenario::kBackgroundOnly ? 0.0f : 1.0f;
      spec.background_gain =
          sc == Scenario::kVocalOnly ? 0.0f : float(std::uniform_real_distribution<double>(0.3, 0.7)(rng));
      if (spec.vocal_gain > 0) {
        const auto count = std::size_t(std::floor(spec.duration_s / spec.beat_s()));
        for (std::size_t i = 0; i < count; ++i) spec.symbols.push_back(std::size_t(rng() % kNumSymbols));
      }
      const auto clip = synth_clip(spec);
      char id[32];
      std::snprintf(id, sizeof id, "clip%05zu", index++);
      const std::string rel = std::string("clips/") + id + ".wav";
      dsp::write_wav((root / rel).string(), clip.mix);
      write_alignment(root / "clips" / (std::string(id) + ".lab"), clip.alignment);
      corpus.manifest.push_back({id, rel, split, format_transcript(clip.transcript)});
      corpus.scenarios.push_back(sc);
    }
  }
  write_manifest(root / "manifest.tsv", corpus.manifest);
  return corpus;
}

/// Manifest for a folder of real WAV files (recursive). A sibling .txt holds
/// an optional transcript. Splits are assigned by a seeded shuffle.
inline Manifest ingest_wav_folder(const fs::path& dir, double dev_frac, double test_frac, std::uint64_t seed) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  if (files.empty()) throw std::runtime_error("no .wav files under " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<std::size_t> order(files.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_dev = std::size_t(std::lround(dev_frac * double(files.size())));
  const auto n_test = std::size_t(std::lround(test_frac * double(files.size())));
  Manifest m(files.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    auto& e = m[i];
    e.id = fs::relative(files[i], dir).replace_extension().generic_string();
    std::replace(e.id.begin(), e.id.end(), '/', '_');
    e.path = fs::relative(files[i], dir).generic_string();
    e.split = r < n_dev ? "dev" : r < n_dev + n_test ? "test" : "train";
    std::ifstream txt{fs::path(files[i]).replace_extension(".txt")};
    if (txt) std::getline(txt, e.transcript);
  }
  check_manifest(m);
  return m;
}

struct Batch {
  std::vector<dsp::AudioBuffer> audio;                   // equal-length mono segments
  std::vector<std::vector<std::size_t>> transcripts;
  std::vector<std::string> ids;
  std::vector<std::size_t> offsets;                      // crop start, samples
};

/// Full-size batches over one split. Train crops are random (seeded, new
/// order each epoch); dev/test crops are centered and repeat exactly.
/// `next()` returns nullopt at the end of an epoch and then starts the next.
class BatchLoader {
 public:
  BatchLoader(const Manifest& manifest, const fs::path& root, const std::string& split, std::size_t batch_size,
              double segment_s, std::uint64_t seed = 0, int sample_rate = 24000)
      : batch_size_(batch_size), train_(split == "train"), rng_(seed) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    for (const auto& e : manifest) {
      if (e.split != split) continue;
      const fs::path p = root / e.path;
      if (!fs::exists(p)) throw std::runtime_error("manifest references missing file " + p.string());
      Clip c;
      c.id = e.id;
      auto audio = dsp::read_wav(p.string());
      if (audio.channels != 1) audio = audio.channel(0);
      c.audio = dsp::resample(audio, sample_rate);
      c.transcript = parse_transcript(e.transcript);
      c.alignment = read_alignment(fs::path(p).replace_extension(".lab"));
      clips_.push_back(std::move(c));
    }
    if (clips_.empty()) throw std::invalid_argument("split '" + split + "' is empty");
    segment_ = std::size_t(std::llround(segment_s * sample_rate));
    for (const auto& c : clips_) {
      if (c.audio.samples.size() < segment_) {
        throw std::invalid_argument("clip " + c.id + " is shorter than the segment length");
      }
    }
    if (clips_.size() < batch_size_) throw std::invalid_argument("split has fewer clips than batch_size");
    order_.resize(clips_.size());
    reset_order();
  }

  std::size_t segment_samples() const { return segment_; }
  std::size_t batches_per_epoch() const { return clips_.size() / batch_size_; }
  std::size_t clip_count() const { return clips_.size(); }

  std::optional<Batch> next() {
    if (cursor_ + batch_size_ > order_.size()) {
      reset_order();
      return std::nullopt;
    }
    Batch b;
    for (std::size_t k = 0; k < batch_size_; ++k) {
      const Clip& c = clips_[order_[cursor_++]];
      const std::size_t span = c.audio.samples.size() - segment_;
      const std::size_t off = train_ ? std::uniform_int_distribution<std::size_t>(0, span)(rng_) : span / 2;
      b.audio.push_back(dsp::AudioBuffer{
          std::vector<float>(c.audio.samples.begin() + std::ptrdiff_t(off),
                             c.audio.samples.begin() + std::ptrdiff_t(off + segment_)),
          c.audio.sample_rate, 1});
      b.transcripts.push_back(crop_transcript(c, off));
      b.ids.push_back(c.id);
      b.offsets.push_back(off);
    }
    return b;
  }

 private:
  struct Clip {
    std::string id;
    dsp::AudioBuffer audio;
    std::vector<std::size_t> transcript;
    std::vector<SymbolSpan> alignment;
  };

  // Keep symbols with at least half their span inside the crop. Without an
  // alignment the full transcript is passed through as-is.
  std::vector<std::size_t> crop_transcript(const Clip& c, std::size_t off) const {
    if (c.alignment.empty()) return c.transcript;
    const double sr = c.audio.sample_rate;
    const double a = double(off) / sr, b = double(off + segment_) / sr;
    std::vector<std::size_t> out;
    for (const auto& s : c.alignment) {
      const double inside = std::min(b, s.end_s) - std::max(a, s.start_s);
      if (inside >= 0.5 * (s.end_s - s.start_s)) out.push_back(s.symbol);
    }
    return out;
  }

  void reset_order() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (train_) std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<Clip> clips_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t segment_ = 0;
  std::size_t batch_size_;
  bool train_;
  std::mt19937_64 rng_;
};

}  // namespace mucodec::data
