#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/error.hpp"

namespace steerlab {

using TokenId = int;

// Fixed vocabulary: specials, digits, arithmetic symbols, whitespace, a few
// punctuation marks, lower-case letters, and the literal "\boxed{" marker.
// Encoding is greedy longest match over the literal strings.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;

  Tokenizer() {
    pieces_ = {"<pad>", "<bos>", "<eos>", "\\boxed{", "}", "{", "\\"};
    for (char c = '0'; c <= '9'; ++c) pieces_.emplace_back(1, c);
    for (const char* s : {"+", "-", "*", "=", "?", ":", ".", ",", "(", ")", " ", "\n"}) {
      pieces_.emplace_back(s);
    }
    for (char c = 'a'; c <= 'z'; ++c) pieces_.emplace_back(1, c);
    boxed_ = id_of("\\boxed{");
    close_ = id_of("}");
  }

  int size() const { return static_cast<int>(pieces_.size()); }
  TokenId boxed_open() const { return boxed_; }
  TokenId brace_close() const { return close_; }

  const std::string& piece(TokenId id) const {
    if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " out of range");
    return pieces_[static_cast<std::size_t>(id)];
  }

  TokenId id_of(std::string_view piece) const {
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (pieces_[i] == piece) return static_cast<TokenId>(i);
    }
    throw InputError("no token for piece '" + std::string(piece) + "'");
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      TokenId best = -1;
      std::size_t best_len = 0;
      // specials are never produced from raw text
      for (std::size_t i = 3; i < pieces_.size(); ++i) {
        const std::string& p = pieces_[i];
        if (p.size() > best_len && text.substr(pos, p.size()) == p) {
          best = static_cast<TokenId>(i);
          best_len = p.size();
        }
      }
      if (best < 0) {
        throw InputError("cannot tokenize character '" + std::string(1, text[pos]) +
                         "' at offset " + std::to_string(pos));
      }
      out.push_back(best);
      pos += best_len;
    }
    return out;
  }

  // Specials render as empty text.
  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kPad || id == kBos || id == kEos) continue;
      out += piece(id);
    }
    return out;
  }

  // Human-readable, diffable rendering for reports.
  std::string display(TokenId id) const {
    const std::string& p = piece(id);
    std::string out;
    for (unsigned char c : p) {
      switch (c) {
        case ' ': out += "<sp>"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        default:
          if (c < 0x20 || c == 0x7f) {
            static constexpr char hex[] = "0123456789abcdef";
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 15];
          } else {
            out += static_cast<char>(c);
          }
      }
    }
    return out;
  }

 private:
  std::vector<std::string> pieces_;
  TokenId boxed_ = -1;
  TokenId close_ = -1;
};

}  // namespace steerlab
