#pragma once

#include <mucodec/core/binary_io.hpp>
#include <mucodec/quant/rvq.hpp>

#include <boost/multiprecision/cpp_int.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::codec {

using BigInt = boost::multiprecision::cpp_int;
using quant::CodeSeq;
using quant::ConfigId;

inline constexpr char kMagic[4] = {'M', 'U', 'C', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 24;
inline constexpr std::size_t kMaxBlockDigits = 4096;  // block_len * n_codebooks

class StreamError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kBadHeader, kTruncated, kCorrupt, kInconsistent };
  StreamError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct StreamHeader {
  ConfigId config = ConfigId::kLow;
  std::uint32_t sample_rate = 24000;
  std::uint8_t channels = 1;
  std::uint16_t token_rate = 25;
  std::uint32_t n_frames = 0;  // per channel
  std::uint8_t n_codebooks = 1;
  std::uint32_t codebook_size = 16384;
  std::uint16_t block_len = 64;

  static StreamHeader low() { return {ConfigId::kLow, 24000, 1, 25, 0, 1, 16384, 64}; }
  static StreamHeader high(std::uint16_t block_len = 64) { return {ConfigId::kHigh, 24000, 1, 25, 0, 4, 10000, block_len}; }

  bool operator==(const StreamHeader&) const = default;

  void validate() const {
    using K = StreamError::Kind;
    if (config != ConfigId::kCustom && config != ConfigId::kLow && config != ConfigId::kHigh) {
      throw StreamError(K::kBadHeader, "stream: unknown config id " + std::to_string(int(config)));
    }
    if (sample_rate != 16000 && sample_rate != 24000 && sample_rate != 48000) {
      throw StreamError(K::kBadHeader, "stream: unsupported sample rate " + std::to_string(sample_rate));
    }
    if (channels != 1 && channels != 2) throw StreamError(K::kBadHeader, "stream: channels must be 1 or 2");
    if (token_rate == 0) throw StreamError(K::kBadHeader, "stream: token rate must be positive");
    if (n_codebooks == 0) throw StreamError(K::kBadHeader, "stream: need at least one codebook");
    if (codebook_size < 2) throw StreamError(K::kBadHeader, "stream: codebook size must be >= 2");
    if (block_len == 0) throw StreamError(K::kBadHeader, "stream: block_len must be >= 1");
    if (std::size_t(block_len) * n_codebooks > kMaxBlockDigits) {
      throw StreamError(K::kBadHeader, "stream: block_len * n_codebooks exceeds 4096");
    }
    if (config == ConfigId::kLow && (n_codebooks != 1 || codebook_size != 16384)) {
      throw StreamError(K::kBadHeader, "stream: LOW config must be 1 x 16384");
    }
    if (config == ConfigId::kHigh && (n_codebooks != 4 || codebook_size != 10000)) {
      throw StreamError(K::kBadHeader, "stream: HIGH config must be 4 x 10000");
    }
  }
};

/// Bits needed for `count` base-`base` digits: bit length of base^count - 1.
inline std::size_t block_bits(std::uint32_t base, std::size_t count) {
  if (count == 0) return 0;
  if ((base & (base - 1)) == 0) return std::size_t(std::countr_zero(base)) * count;
  static std::mutex mu;
  static std::map<std::pair<std::uint32_t, std::size_t>, std::size_t> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({base, count});
  if (it != cache.end()) return it->second;
  const BigInt top = boost::multiprecision::pow(BigInt(base), unsigned(count)) - 1;
  const std::size_t bits = std::size_t(boost::multiprecision::msb(top)) + 1;
  cache[{base, count}] = bits;
  return bits;
}

struct FrameRate {
  double exact_bits;   // n_codebooks * log2(codebook_size)
  double packed_bits;  // block_bits(size, block_len * n_codebooks) / block_len
  double exact_bps(double token_rate) const { return exact_bits * token_rate; }
  double packed_bps(double token_rate) const { return packed_bits * token_rate; }
};

inline FrameRate bits_per_frame(std::size_t n_codebooks, std::uint32_t codebook_size, std::size_t block_len) {
  return {double(n_codebooks) * std::log2(double(codebook_size)),
          double(block_bits(codebook_size, block_len * n_codebooks)) / double(block_len)};
}

inline FrameRate bits_per_frame(const StreamHeader& h) { return bits_per_frame(h.n_codebooks, h.codebook_size, h.block_len); }

/// value = sum_j idx[j] * base^j over the flattened block.
inline BigInt compose_block(std::span<const std::uint32_t> idx, std::uint32_t base) {
  BigInt v = 0;
  for (std::size_t j = idx.size(); j-- > 0;) {
    if (idx[j] >= base) {
      throw std::out_of_range("pack_block: index " + std::to_string(idx[j]) + " >= base " + std::to_string(base));
    }
    v = v * base + idx[j];
  }
  return v;
}

/// pack_block as a standalone value: ceil(bits / 8) little-endian bytes.
inline io::Bytes pack_block(std::span<const std::uint32_t> idx, std::uint32_t base) {
  const BigInt v = compose_block(idx, base);
  const std::size_t bits = block_bits(base, idx.size());
  io::Bytes out;
  boost::multiprecision::export_bits(v, std::back_inserter(out), 8, false);
  out.resize((bits + 7) / 8, 0);
  return out;
}

inline std::vector<std::uint32_t> unpack_block(const io::Bytes& bytes, std::uint32_t base, std::size_t count) {
  BigInt v = 0;
  if (!bytes.empty()) boost::multiprecision::import_bits(v, bytes.begin(), bytes.end(), 8, false);
  std::vector<std::uint32_t> out(count);
  for (std::size_t j = 0; j < count; ++j) {
    out[j] = std::uint32_t(v % base);
    v /= base;
  }
  if (v != 0) throw StreamError(StreamError::Kind::kCorrupt, "stream: block value exceeds base^count (corrupt payload)");
  return out;
}

namespace detail {

class BitWriter {
 public:
  void put(const io::Bytes& le, std::size_t bits) {
    for (std::size_t i = 0; i < bits; ++i) {
      const bool bit = i / 8 < le.size() && ((le[i / 8] >> (i % 8)) & 1u);
      if (pos_ % 8 == 0) out_.push_back(0);
      if (bit) out_.back() |= std::uint8_t(1u << (pos_ % 8));
      ++pos_;
    }
  }
  io::Bytes take() { return std::move(out_); }

 private:
  io::Bytes out_;
  std::size_t pos_ = 0;
};

class BitReader {
 public:
  BitReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  io::Bytes get(std::size_t bits) {
    io::Bytes out((bits + 7) / 8, 0);
    for (std::size_t i = 0; i < bits; ++i, ++pos_) {
      if ((p_[pos_ / 8] >> (pos_ % 8)) & 1u) out[i / 8] |= std::uint8_t(1u << (i % 8));
    }
    return out;
  }
  // every bit after the last block must be zero
  bool padding_clear() const {
    for (std::size_t i = pos_; i < n_ * 8; ++i)
      if ((p_[i / 8] >> (i % 8)) & 1u) return false;
    return true;
  }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Payload bits for one channel: full blocks plus a final partial block at
/// its own exact width.
inline std::uint64_t channel_payload_bits(const StreamHeader& h) {
  const std::uint64_t full = h.n_frames / h.block_len, rem = h.n_frames % h.block_len;
  return full * block_bits(h.codebook_size, std::size_t(h.block_len) * h.n_codebooks) +
         block_bits(h.codebook_size, std::size_t(rem) * h.n_codebooks);
}

inline std::uint64_t payload_bytes(const StreamHeader& h) { return (channel_payload_bits(h) * h.channels + 7) / 8; }

inline io::Bytes encode_header(const StreamHeader& h) {
  io::ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  w.put(std::uint8_t(h.config));
  w.put(h.sample_rate);
  w.put(h.channels);
  w.put(h.token_rate);
  w.put(h.n_frames);
  w.put(h.n_codebooks);
  w.put(h.codebook_size);
  w.put(h.block_len);
  return w.take();
}

inline StreamHeader decode_header(const io::Bytes& bytes) {
  using K = StreamError::Kind;
  if (bytes.size() < kHeaderBytes) throw StreamError(K::kTruncated, "stream: truncated header");
  io::ByteReader r(bytes.data(), kHeaderBytes);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4)) throw StreamError(K::kBadMagic, "stream: bad magic (not a .muc file)");
  const auto version = r.get<std::uint8_t>();
  if (version != kVersion) throw StreamError(K::kBadVersion, "stream: unsupported version " + std::to_string(version));
  StreamHeader h;
  h.config = ConfigId(r.get<std::uint8_t>());
  h.sample_rate = r.get<std::uint32_t>();
  h.channels = r.get<std::uint8_t>();
  h.token_rate = r.get<std::uint16_t>();
  h.n_frames = r.get<std::uint32_t>();
  h.n_codebooks = r.get<std::uint8_t>();
  h.codebook_size = r.get<std::uint32_t>();
  h.block_len = r.get<std::uint16_t>();
  h.validate();
  return h;
}

/// Header then payload. Channels are stored one after another, each as a
/// sequence of blocks of block_len frames (frame-major, codebook-minor).
inline io::Bytes encode_stream(std::span<const CodeSeq> channels, StreamHeader h) {
  using K = StreamError::Kind;
  if (channels.size() != h.channels) throw StreamError(K::kInconsistent, "stream: channel count disagrees with header");
  h.n_frames = channels.empty() ? 0 : std::uint32_t(channels[0].frames);
  h.validate();
  for (const auto& c : channels) {
    if (c.frames != h.n_frames) throw StreamError(K::kInconsistent, "stream: channels differ in frame count");
    if (c.n_codebooks != h.n_codebooks || c.indices.size() != c.frames * c.n_codebooks) {
      throw StreamError(K::kInconsistent, "stream: code sequence does not match header codebook count");
    }
  }
  io::Bytes out = encode_header(h);
  detail::BitWriter bw;
  const std::size_t S = h.n_codebooks;
  for (const auto& c : channels) {
    for (std::size_t t0 = 0; t0 < c.frames; t0 += h.block_len) {
      const std::size_t n = std::min<std::size_t>(h.block_len, c.frames - t0);
      std::span<const std::uint32_t> block(c.indices.data() + t0 * S, n * S);
      bw.put(pack_block(block, h.codebook_size), block_bits(h.codebook_size, n * S));
    }
  }
  const auto payload = bw.take();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline io::Bytes encode_stream(const CodeSeq& mono, StreamHeader h) {
  h.channels = 1;
  return encode_stream(std::span<const CodeSeq>(&mono, 1), h);
}

struct DecodedStream {
  StreamHeader header;
  std::vector<CodeSeq> channels;
};

inline DecodedStream decode_stream(const io::Bytes& bytes) {
  using K = StreamError::Kind;
  DecodedStream d;
  d.header = decode_header(bytes);
  const auto& h = d.header;
  const std::uint64_t expect = payload_bytes(h);
  const std::uint64_t have = bytes.size() - kHeaderBytes;
  if (have < expect) throw StreamError(K::kTruncated, "stream: truncated payload");
  if (have > expect) throw StreamError(K::kCorrupt, "stream: trailing bytes after payload");
  detail::BitReader br(bytes.data() + kHeaderBytes, std::size_t(have));
  const std::size_t S = h.n_codebooks;
  for (std::size_t ch = 0; ch < h.channels; ++ch) {
    CodeSeq c{h.n_frames, S, std::vector<std::uint32_t>(std::size_t(h.n_frames) * S), h.config};
    for (std::size_t t0 = 0; t0 < c.frames; t0 += h.block_len) {
      const std::size_t n = std::min<std::size_t>(h.block_len, c.frames - t0);
      const auto idx = unpack_block(br.get(block_bits(h.codebook_size, n * S)), h.codebook_size, n * S);
      std::copy(idx.begin(), idx.end(), c.indices.begin() + std::ptrdiff_t(t0 * S));
    }
    d.channels.push_back(std::move(c));
  }
  if (!br.padding_clear()) throw StreamError(K::kCorrupt, "stream: non-zero padding bits (corrupt payload)");
  return d;
}

/// Achieved rate (all channels) from the actual payload size.
inline double achieved_kbps(const StreamHeader& h, std::size_t stream_bytes) {
  if (h.n_frames == 0) return 0.0;
  const double seconds = double(h.n_frames) / double(h.token_rate);
  return double(stream_bytes - kHeaderBytes) * 8.0 / seconds / 1000.0;
}

}  // namespace mucodec::codec
