#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mucodec::data {

/// Lyric-proxy alphabet: 16 symbols written 'A'..'P'. The CTC blank is the
/// implicit extra class at index kNumSymbols.
inline constexpr std::size_t kNumSymbols = 16;
inline constexpr std::size_t kBlank = kNumSymbols;

inline char symbol_char(std::size_t s) {
  if (s >= kNumSymbols) throw std::out_of_range("symbol index out of range");
  return char('A' + s);
}

inline std::vector<std::size_t> parse_transcript(std::string_view text) {
  std::vector<std::size_t> out;
  out.reserve(text.size());
  for (char c : text) {
    if (c < 'A' || c >= char('A' + kNumSymbols)) {
      throw std::invalid_argument(std::string("transcript symbol '") + c + "' is not in the vocabulary");
    }
    out.push_back(std::size_t(c - 'A'));
  }
  return out;
}

inline std::string format_transcript(const std::vector<std::size_t>& symbols) {
  std::string s;
  for (auto v : symbols) s.push_back(symbol_char(v));
  return s;
}

/// Vocabulary file body: one symbol per line, blank implicit.
inline std::string vocabulary_file() {
  std::string s;
  for (std::size_t i = 0; i < kNumSymbols; ++i) {
    s.push_back(symbol_char(i));
    s.push_back('\n');
  }
  return s;
}

}  // namespace mucodec::data
