#pragma once

#include <mucodec/core/binary_io.hpp>
#include <mucodec/core/tensor.hpp>

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::quant {

enum class ConfigId : std::uint8_t { kCustom = 0, kLow = 1, kHigh = 2 };

inline const char* config_name(ConfigId id) {
  switch (id) {
    case ConfigId::kLow: return "low";
    case ConfigId::kHigh: return "high";
    default: return "custom";
  }
}

struct RvqConfig {
  std::size_t n_codebooks = 1;
  std::size_t codebook_size = 16384;
  std::size_t dim = 0;
  double ema_decay = 0.99;
  double reseed_threshold = 1e-4;  // minimum usage fraction
  ConfigId id = ConfigId::kCustom;

  static RvqConfig low(std::size_t dim) { return {1, 16384, dim, 0.99, 1e-6, ConfigId::kLow}; }
  static RvqConfig high(std::size_t dim) { return {4, 10000, dim, 0.99, 1e-6, ConfigId::kHigh}; }

  void validate() const {
    if (n_codebooks < 1) throw std::invalid_argument("rvq: need at least one codebook");
    if (codebook_size < 2) throw std::invalid_argument("rvq: codebook_size must be >= 2");
    if (dim < 1) throw std::invalid_argument("rvq: dim must be >= 1");
    if (!(ema_decay > 0 && ema_decay < 1)) throw std::invalid_argument("rvq: ema_decay must lie in (0, 1)");
    if (!(reseed_threshold >= 0 && reseed_threshold < 1)) throw std::invalid_argument("rvq: bad reseed threshold");
  }
};

/// T x n_codebooks indices, frame-major.
struct CodeSeq {
  std::size_t frames = 0;
  std::size_t n_codebooks = 1;
  std::vector<std::uint32_t> indices;
  ConfigId config = ConfigId::kCustom;

  std::uint32_t at(std::size_t t, std::size_t k) const { return indices[t * n_codebooks + k]; }
  std::uint32_t& at(std::size_t t, std::size_t k) { return indices[t * n_codebooks + k]; }
  bool operator==(const CodeSeq&) const = default;
};

/// Codewords are stored as float; every distance is evaluated in double.
/// EMA state is (codeword, usage): the running cluster sum is always
/// codeword * usage, so it is never stored separately.
struct Codebooks {
  RvqConfig cfg;
  std::vector<float> codewords;  // [n_codebooks][codebook_size][dim]
  std::vector<double> usage;     // [n_codebooks][codebook_size]

  Codebooks() = default;
  explicit Codebooks(const RvqConfig& c)
      : cfg(c), codewords(c.n_codebooks * c.codebook_size * c.dim, 0.0f), usage(c.n_codebooks * c.codebook_size, 0.0) {
    c.validate();
  }

  const float* codeword(std::size_t stage, std::size_t k) const {
    return codewords.data() + (stage * cfg.codebook_size + k) * cfg.dim;
  }
  float* codeword(std::size_t stage, std::size_t k) { return codewords.data() + (stage * cfg.codebook_size + k) * cfg.dim; }
  double& use(std::size_t stage, std::size_t k) { return usage[stage * cfg.codebook_size + k]; }
  double use(std::size_t stage, std::size_t k) const { return usage[stage * cfg.codebook_size + k]; }
};

namespace detail {

inline double sq_dist(const double* x, const float* c, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double e = x[i] - double(c[i]);
    s += e * e;
  }
  return s;
}

// Exact nearest codeword in one stage for each of `n` residual rows. A
// single-precision GEMM over blocks of rows screens all codewords; every
// candidate within the screen's rounding bound of the screened minimum is
// then re-scored exactly in double, scanning in index order so ties go to
// the lowest index.
inline void nearest(const Codebooks& b, std::size_t stage, const double* rows, std::size_t n, std::uint32_t* out) {
  const std::size_t K = b.cfg.codebook_size, D = b.cfg.dim;
  using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const MatF> C(b.codeword(stage, 0), Eigen::Index(K), Eigen::Index(D));
  const Eigen::VectorXd cn = C.cast<double>().rowwise().squaredNorm();
  // |fl(x.c) - x.c| <= D u (|x|^2 + |c|^2) / 2 plus the rounding of x to float
  const double rel = 2.0 * double(D + 2) * std::numeric_limits<float>::epsilon();
  const Eigen::VectorXd cn_lo = cn * (1.0 - rel);
  constexpr std::size_t kBlock = 256;
  MatF xf, dots;
  for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
    const std::size_t m = std::min(kBlock, n - r0);
    xf = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
             rows + r0 * D, Eigen::Index(m), Eigen::Index(D))
             .cast<float>();
    dots.noalias() = xf * C.transpose();
    for (std::size_t r = 0; r < m; ++r) {
      const double* x = rows + (r0 + r) * D;
      double xn = 0;
      for (std::size_t j = 0; j < D; ++j) xn += x[j] * x[j];
      const float* dr = dots.data() + r * K;
      double best = std::numeric_limits<double>::infinity(), best_cn = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const double e = cn[Eigen::Index(k)] - 2.0 * double(dr[k]);
        if (e < best) best = e, best_cn = cn[Eigen::Index(k)];
      }
      const double thr = best + rel * (2 * xn + best_cn) + 1e-300;
      double exact_best = std::numeric_limits<double>::infinity();
      std::uint32_t arg = 0;
      for (std::size_t k = 0; k < K; ++k) {
        if (cn_lo[Eigen::Index(k)] - 2.0 * double(dr[k]) > thr) continue;
        const double d = sq_dist(x, b.codeword(stage, k), D);
        if (d < exact_best) {
          exact_best = d;
          arg = std::uint32_t(k);
        }
      }
      out[r0 + r] = arg;
    }
  }
}

}  // namespace detail

struct QuantizeResult {
  CodeSeq codes;
  Tensor<double> dequantized;            // [T, dim]
  std::vector<double> residual_energy;   // after each stage, summed over frames
};

inline void check_dims(const Tensor<double>& x, const Codebooks& b) {
  if (x.shape().size() != 2 || x.cols() != b.cfg.dim) {
    throw std::invalid_argument("rvq: feature dim " + shape_str(x.shape()) + " does not match codebook dim " +
                                std::to_string(b.cfg.dim));
  }
}

/// Greedy residual quantization: stage k picks the nearest codeword to the
/// residual left by stages < k.
inline QuantizeResult quantize(const Tensor<double>& features, const Codebooks& books) {
  check_dims(features, books);
  const std::size_t T = features.rows(), D = books.cfg.dim, S = books.cfg.n_codebooks;
  QuantizeResult r;
  r.codes = {T, S, std::vector<std::uint32_t>(T * S), books.cfg.id};
  r.dequantized = Tensor<double>(matrix_shape(T, D));
  std::vector<double> residual(features.vec().begin(), features.vec().end());
  std::vector<std::uint32_t> idx(T);
  for (std::size_t s = 0; s < S; ++s) {
    detail::nearest(books, s, residual.data(), T, idx.data());
    double energy = 0;
    for (std::size_t t = 0; t < T; ++t) {
      r.codes.at(t, s) = idx[t];
      const float* c = books.codeword(s, idx[t]);
      for (std::size_t j = 0; j < D; ++j) {
        residual[t * D + j] -= double(c[j]);
        r.dequantized.data()[t * D + j] += double(c[j]);
        energy += residual[t * D + j] * residual[t * D + j];
      }
    }
    r.residual_energy.push_back(energy);
  }
  return r;
}

/// Sum of addressed codewords per frame, accumulated in stage order (the
/// same arithmetic as quantize, so results are bit-identical).
inline Tensor<double> dequantize(const CodeSeq& codes, const Codebooks& books) {
  if (codes.n_codebooks != books.cfg.n_codebooks) {
    throw std::invalid_argument("rvq: stream has " + std::to_string(codes.n_codebooks) + " codebooks, model has " +
                                std::to_string(books.cfg.n_codebooks));
  }
  const std::size_t D = books.cfg.dim;
  Tensor<double> out(matrix_shape(codes.frames, D));
  for (std::size_t s = 0; s < codes.n_codebooks; ++s)
    for (std::size_t t = 0; t < codes.frames; ++t) {
      const auto k = codes.at(t, s);
      if (k >= books.cfg.codebook_size) throw std::out_of_range("rvq: code index out of range (corrupt stream)");
      const float* c = books.codeword(s, k);
      for (std::size_t j = 0; j < D; ++j) out.data()[t * D + j] += double(c[j]);
    }
  return out;
}

/// Residual entering each stage, [stage][T*dim].
inline std::vector<std::vector<double>> stage_inputs(const Tensor<double>& x, const Codebooks& b) {
  const auto q = quantize(x, b);
  std::vector<std::vector<double>> out;
  std::vector<double> res(x.vec().begin(), x.vec().end());
  const std::size_t D = b.cfg.dim;
  for (std::size_t s = 0; s < b.cfg.n_codebooks; ++s) {
    out.push_back(res);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const float* c = b.codeword(s, q.codes.at(t, s));
      for (std::size_t j = 0; j < D; ++j) res[t * D + j] -= double(c[j]);
    }
  }
  return out;
}

/// One EMA step per stage on the residuals of `batch`:
///   usage <- g*usage + (1-g)*n_k,  codeword <- (g*usage*c + (1-g)*sum x) / usage_new.
/// Unassigned entries only see usage decay.
inline void ema_update(Codebooks& b, const Tensor<double>& batch) {
  check_dims(batch, b);
  const std::size_t T = batch.rows(), D = b.cfg.dim, K = b.cfg.codebook_size;
  const double g = b.cfg.ema_decay;
  std::vector<double> res(batch.vec().begin(), batch.vec().end());
  std::vector<std::uint32_t> idx(T);
  for (std::size_t s = 0; s < b.cfg.n_codebooks; ++s) {
    detail::nearest(b, s, res.data(), T, idx.data());
    std::vector<double> count(K, 0.0);
    std::map<std::uint32_t, std::vector<double>> sums;
    for (std::size_t t = 0; t < T; ++t) {
      count[idx[t]] += 1;
      auto& acc = sums[idx[t]];
      acc.resize(D, 0.0);
      for (std::size_t j = 0; j < D; ++j) acc[j] += res[t * D + j];
    }
    // residuals for the next stage use the pre-update codewords
    for (std::size_t t = 0; t < T; ++t) {
      const float* c = b.codeword(s, idx[t]);
      for (std::size_t j = 0; j < D; ++j) res[t * D + j] -= double(c[j]);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double u_old = b.use(s, k);
      const double u_new = g * u_old + (1 - g) * count[k];
      if (count[k] > 0) {
        const auto& acc = sums[std::uint32_t(k)];
        float* c = b.codeword(s, k);
        for (std::size_t j = 0; j < D; ++j) c[j] = float((g * u_old * double(c[j]) + (1 - g) * acc[j]) / u_new);
      }
      b.use(s, k) = u_new;
    }
  }
}

/// Re-centres entries whose usage fraction is below `threshold` on randomly
/// drawn residuals of `recent`. Returns the number of reseeded entries.
inline std::size_t reseed_dead(Codebooks& b, const Tensor<double>& recent, double threshold, std::uint64_t seed) {
  if (recent.size() == 0) throw std::invalid_argument("rvq: reseed needs recent features");
  if (!(threshold >= 0 && threshold < 1)) throw std::invalid_argument("rvq: threshold must lie in [0, 1)");
  check_dims(recent, b);
  std::mt19937_64 rng(seed);
  const std::size_t T = recent.rows(), D = b.cfg.dim, K = b.cfg.codebook_size;
  const auto inputs = stage_inputs(recent, b);
  std::size_t reseeded = 0;
  for (std::size_t s = 0; s < b.cfg.n_codebooks; ++s) {
    double total = 0;
    for (std::size_t k = 0; k < K; ++k) total += b.use(s, k);
    if (total <= 0) continue;
    double live_mean = 0;
    std::size_t live = 0;
    for (std::size_t k = 0; k < K; ++k)
      if (b.use(s, k) / total >= threshold) live_mean += b.use(s, k), ++live;
    live_mean = live ? live_mean / double(live) : 1.0;
    std::uniform_int_distribution<std::size_t> pick(0, T - 1);
    for (std::size_t k = 0; k < K; ++k) {
      if (b.use(s, k) / total >= threshold) continue;
      const std::size_t t = pick(rng);
      float* c = b.codeword(s, k);
      for (std::size_t j = 0; j < D; ++j) c[j] = float(inputs[s][t * D + j]);
      b.use(s, k) = std::min(live_mean, 1.0);
      ++reseeded;
    }
  }
  return reseeded;
}

/// Seeded k-means++ initialization, stage by stage on successive residuals.
/// Seeds are drawn in rounds of up to 64 from the current D^2 distribution
/// and distances are refreshed once per round. With fewer distinct points
/// than entries the surplus entries are jittered copies of sampled points.
/// Initial usage is one pseudo-observation.
inline Codebooks kmeanspp_init(const RvqConfig& cfg, const Tensor<double>& x, std::uint64_t seed) {
  Codebooks b(cfg);
  check_dims(x, b);
  const std::size_t T = x.rows(), D = cfg.dim, K = cfg.codebook_size;
  if (T == 0) throw std::invalid_argument("rvq: empty initialization buffer");
  std::mt19937_64 rng(seed);
  std::vector<double> res(x.vec().begin(), x.vec().end());
  double scale = 0;
  for (double v : res) scale += v * v;
  scale = std::sqrt(scale / double(res.size())) + 1e-12;
  std::normal_distribution<double> jitter(0.0, 1e-3 * scale);
  constexpr std::size_t kRound = 64;

  for (std::size_t s = 0; s < cfg.n_codebooks; ++s) {
    const Eigen::Map<const RowMatrix<double>> R(res.data(), Eigen::Index(T), Eigen::Index(D));
    const Eigen::VectorXd rn = R.rowwise().squaredNorm();
    std::vector<double> d2(T, std::numeric_limits<double>::infinity());
    std::size_t chosen = 0;
    // d2 <- min(d2, |r - c|^2) for entries [first, chosen); GEMM screen, exact re-score near the minimum
    auto refresh = [&](std::size_t first) {
      const std::size_t m = chosen - first;
      const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> C(
          b.codeword(s, first), Eigen::Index(m), Eigen::Index(D));
      const RowMatrix<double> Cd = C.cast<double>();
      const Eigen::VectorXd cn = Cd.rowwise().squaredNorm();
      const RowMatrix<double> dots = R * Cd.transpose();
      for (std::size_t u = 0; u < T; ++u)
        for (std::size_t k = 0; k < m; ++k) {
          const double est = rn[Eigen::Index(u)] + cn[Eigen::Index(k)] - 2 * dots(Eigen::Index(u), Eigen::Index(k));
          const double margin = 1e-9 * (rn[Eigen::Index(u)] + cn[Eigen::Index(k)]) + 1e-300;
          if (est > d2[u] + margin) continue;
          double d = detail::sq_dist(res.data() + u * D, b.codeword(s, first + k), D);
          if (d <= 1e-12 * rn[Eigen::Index(u)]) d = 0;  // float rounding of the point itself
          d2[u] = std::min(d2[u], d);
        }
    };
    auto take = [&](std::size_t t) {
      float* c = b.codeword(s, chosen++);
      for (std::size_t j = 0; j < D; ++j) c[j] = float(res[t * D + j]);
    };
    take(std::uniform_int_distribution<std::size_t>(0, T - 1)(rng));
    refresh(0);
    std::vector<double> cum(T);
    while (chosen < K) {
      double total = 0;
      for (std::size_t u = 0; u < T; ++u) cum[u] = (total += d2[u]);
      if (!(total > 0)) break;
      const std::size_t first = chosen;
      std::vector<std::size_t> picked;
      for (std::size_t r = 0; r < std::min(kRound, K - chosen); ++r) {
        const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        const auto t = std::size_t(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
        const std::size_t pick = std::min(t, T - 1);
        if (d2[pick] > 0 && std::find(picked.begin(), picked.end(), pick) == picked.end()) picked.push_back(pick);
      }
      for (auto t : picked) take(t);
      if (chosen > first) refresh(first);
    }
    for (; chosen < K; ++chosen) {
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, T - 1)(rng);
      float* c = b.codeword(s, chosen);
      for (std::size_t j = 0; j < D; ++j) c[j] = float(res[t * D + j] + jitter(rng));
    }
    for (std::size_t k = 0; k < K; ++k) b.use(s, k) = 1.0;
    // residuals for the next stage
    std::vector<std::uint32_t> idx(T);
    detail::nearest(b, s, res.data(), T, idx.data());
    for (std::size_t t = 0; t < T; ++t) {
      const float* c = b.codeword(s, idx[t]);
      for (std::size_t j = 0; j < D; ++j) res[t * D + j] -= double(c[j]);
    }
  }
  return b;
}

struct StageStats {
  double utilization;
  double perplexity;
};

inline std::vector<StageStats> codebook_stats(const CodeSeq& codes, std::size_t codebook_size) {
  if (codes.frames == 0) throw std::invalid_argument("codebook_stats: empty code sequence");
  std::vector<StageStats> out;
  for (std::size_t s = 0; s < codes.n_codebooks; ++s) {
    std::map<std::uint32_t, std::size_t> hist;
    for (std::size_t t = 0; t < codes.frames; ++t) ++hist[codes.at(t, s)];
    double h = 0;
    for (const auto& [k, n] : hist) {
      const double p = double(n) / double(codes.frames);
      h -= p * std::log(p);
    }
    out.push_back({double(hist.size()) / double(codebook_size), std::exp(h)});
  }
  return out;
}

// Codebook file:
//   "MUCB" | u32 version | u8 config id | u32 n_codebooks | u32 size | u32 dim
//   | f64 ema_decay | f64 reseed_threshold | f32 codewords... | f64 usage...
//   | u32 crc32 of everything before it
inline constexpr std::uint32_t kCodebookVersion = 1;

inline io::Bytes encode_codebooks(const Codebooks& b) {
  io::ByteWriter w;
  w.put_bytes("MUCB", 4);
  w.put(kCodebookVersion);
  w.put(std::uint8_t(b.cfg.id));
  w.put(std::uint32_t(b.cfg.n_codebooks));
  w.put(std::uint32_t(b.cfg.codebook_size));
  w.put(std::uint32_t(b.cfg.dim));
  w.put_f64(b.cfg.ema_decay);
  w.put_f64(b.cfg.reseed_threshold);
  for (float v : b.codewords) w.put_f32(v);
  for (double v : b.usage) w.put_f64(v);
  auto bytes = w.take();
  const auto crc = std::uint32_t(crc32(0L, bytes.data(), uInt(bytes.size())));
  io::ByteWriter tail;
  tail.put(crc);
  const auto t = tail.take();
  bytes.insert(bytes.end(), t.begin(), t.end());
  return bytes;
}

inline Codebooks decode_codebooks(const io::Bytes& bytes) {
  if (bytes.size() < 8) throw std::runtime_error("codebook file: too short");
  const std::size_t body = bytes.size() - 4;
  io::ByteReader tail(bytes.data() + body, 4);
  const auto stored = tail.get<std::uint32_t>();
  if (std::uint32_t(crc32(0L, bytes.data(), uInt(body))) != stored) {
    throw std::runtime_error("codebook file: checksum mismatch");
  }
  io::ByteReader r(bytes.data(), body);
  std::string magic(4, '\0');
  r.get_bytes(magic.data(), 4);
  if (magic != "MUCB") throw std::runtime_error("codebook file: bad magic");
  if (r.get<std::uint32_t>() != kCodebookVersion) throw std::runtime_error("codebook file: unsupported version");
  RvqConfig cfg;
  cfg.id = ConfigId(r.get<std::uint8_t>());
  cfg.n_codebooks = r.get<std::uint32_t>();
  cfg.codebook_size = r.get<std::uint32_t>();
  cfg.dim = r.get<std::uint32_t>();
  cfg.ema_decay = r.get_f64();
  cfg.reseed_threshold = r.get_f64();
  Codebooks b(cfg);
  for (auto& v : b.codewords) v = r.get_f32();
  for (auto& v : b.usage) v = r.get_f64();
  if (r.remaining() != 0) throw std::runtime_error("codebook file: trailing bytes");
  return b;
}

inline void save_codebooks(const std::string& path, const Codebooks& b) { io::write_file(path, encode_codebooks(b)); }
inline Codebooks load_codebooks(const std::string& path) { return decode_codebooks(io::read_file(path)); }

}  // namespace mucodec::quant
