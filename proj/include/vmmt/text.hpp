#pragma once

// UTF-8 text handling: validation, lowercasing (ASCII + Latin-1, enough for
// German), and rule-based pre-BPE tokenization that splits punctuation into
// separate tokens.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmmt {

struct TextError : std::runtime_error {
  explicit TextError(const std::string& msg) : std::runtime_error(msg) {}
};

// Decodes UTF-8 into codepoints; throws with the byte offset on bad input.
inline std::vector<uint32_t> utf8_decode(const std::string& s) {
  std::vector<uint32_t> cps;
  size_t i = 0;
  auto fail = [&](size_t at) {
    throw TextError("invalid UTF-8 at byte offset " + std::to_string(at));
  };
  while (i < s.size()) {
    unsigned char c = s[i];
    uint32_t cp = 0;
    int extra = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      cp = c & 0x1F;
      extra = 1;
    } else if ((c & 0xF0) == 0xE0) {
      cp = c & 0x0F;
      extra = 2;
    } else if ((c & 0xF8) == 0xF0) {
      cp = c & 0x07;
      extra = 3;
    } else {
      fail(i);
    }
    if (i + extra >= s.size()) fail(i);
    for (int k = 1; k <= extra; ++k) {
      unsigned char cc = s[i + k];
      if ((cc & 0xC0) != 0x80) fail(i + k);
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Reject overlong encodings and out-of-range values.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) ||
        (extra == 3 && cp < 0x10000) || cp > 0x10FFFF ||
        (cp >= 0xD800 && cp <= 0xDFFF)) {
      fail(i);
    }
    cps.push_back(cp);
    i += extra + 1;
  }
  return cps;
}

inline void utf8_append(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline uint32_t lowercase_cp(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  // Latin-1 supplement: À..Þ map to à..þ, skipping the multiplication sign.
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
  if (cp == 0x178) return 0xFF;  // Ÿ
  return cp;
}

inline std::string lowercase_utf8(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (uint32_t cp : utf8_decode(s)) utf8_append(out, lowercase_cp(cp));
  return out;
}

inline bool is_space_cp(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == 0xA0;
}

inline bool is_punct_cp(uint32_t cp) {
  return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
         (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
}

// Lowercase, split on whitespace, and split punctuation characters into
// their own tokens: "A man runs." -> [a, man, runs, .].
inline std::vector<std::string> preprocess(const std::string& text) {
  std::vector<uint32_t> cps = utf8_decode(text);
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (uint32_t cp : cps) {
    if (is_space_cp(cp)) {
      flush();
    } else if (is_punct_cp(cp)) {
      flush();
      std::string p;
      utf8_append(p, cp);
      tokens.push_back(p);
    } else {
      utf8_append(cur, lowercase_cp(cp));
    }
  }
  flush();
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

}  // namespace vmmt
