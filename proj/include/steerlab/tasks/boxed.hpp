#pragma once

#include <cctype>
#include <optional>
#include <string>
#include <string_view>

namespace steerlab {

inline constexpr std::string_view kBoxedOpen = "\\boxed{";

// Contents of the last complete \boxed{...} group, with balanced braces.
// Among nested complete groups the one closing last (the outermost) wins.
inline std::optional<std::string> extract_boxed(std::string_view text) {
  std::optional<std::string> best;
  std::size_t best_close = 0;
  for (std::size_t start = text.find(kBoxedOpen); start != std::string_view::npos;
       start = text.find(kBoxedOpen, start + 1)) {
    const std::size_t body = start + kBoxedOpen.size();
    int depth = 1;
    std::size_t i = body;
    for (; i < text.size(); ++i) {
      if (text[i] == '{') {
        ++depth;
      } else if (text[i] == '}') {
        if (--depth == 0) break;
      }
    }
    if (depth != 0) continue;  // unbalanced: never closes
    if (!best || i > best_close) {
      best = std::string(text.substr(body, i - body));
      best_close = i;
    }
  }
  return best;
}

// Whitespace removed; integers lose '+' and leading zeros; "-0" becomes "0".
inline std::string canonicalize_answer(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    // U+2212 MINUS SIGN
    if (s.substr(i, 3) == "\xE2\x88\x92") {
      out.push_back('-');
      i += 2;
      continue;
    }
    if (!std::isspace(static_cast<unsigned char>(s[i]))) out.push_back(s[i]);
  }
  std::size_t pos = 0;
  bool negative = false;
  if (pos < out.size() && (out[pos] == '+' || out[pos] == '-')) {
    negative = out[pos] == '-';
    ++pos;
  }
  if (pos == out.size()) return out;
  for (std::size_t i = pos; i < out.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(out[i]))) return out;
  }
  while (pos + 1 < out.size() && out[pos] == '0') ++pos;
  std::string digits = out.substr(pos);
  if (digits == "0") return digits;
  return negative ? "-" + digits : digits;
}

// 1 iff the last boxed answer matches the gold answer after canonicalization.
inline int reward(std::string_view completion, std::string_view gold) {
  const auto boxed = extract_boxed(completion);
  if (!boxed) return 0;
  return canonicalize_answer(*boxed) == canonicalize_answer(gold) ? 1 : 0;
}

}  // namespace steerlab
