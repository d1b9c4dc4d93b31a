#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "adl/digest.hpp"
#include "adl/errors.hpp"

namespace adl {

// Word-level tokenizer for the toy models. Tokens are whitespace-separated
// words; "\n" is always its own token. A BOS token is prepended on encode,
// so position 0 of every document is BOS.
class WordTokenizer {
 public:
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kPad = "<pad>";

  WordTokenizer() = default;

  explicit WordTokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (int i = 0; i < int(tokens_.size()); ++i) {
      auto [it, fresh] = index_.emplace(tokens_[i], i);
      if (!fresh) throw ValidationError("duplicate vocab entry: " + tokens_[i]);
    }
    bos_ = require(kBos);
    eos_ = require(kEos);
    unk_ = require(kUnk);
    pad_ = require(kPad);
  }

  int vocab_size() const { return int(tokens_.size()); }
  int bos_id() const { return bos_; }
  int eos_id() const { return eos_; }
  int unk_id() const { return unk_; }
  int pad_id() const { return pad_; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<int> token_to_id(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& id_to_token(int id) const {
    if (id < 0 || id >= vocab_size()) throw ValidationError("token id out of range");
    return tokens_[size_t(id)];
  }

  std::vector<int> encode(std::string_view text, bool add_bos = true) const {
    std::vector<int> ids;
    if (add_bos) ids.push_back(bos_);
    size_t i = 0;
    auto flush_word = [&](size_t start, size_t end) {
      if (end <= start) return;
      auto it = index_.find(std::string(text.substr(start, end - start)));
      ids.push_back(it == index_.end() ? unk_ : it->second);
    };
    size_t word_start = 0;
    for (i = 0; i < text.size(); ++i) {
      char c = text[i];
      if (c == ' ' || c == '\t' || c == '\r') {
        flush_word(word_start, i);
        word_start = i + 1;
      } else if (c == '\n') {
        flush_word(word_start, i);
        ids.push_back(newline_id());
        word_start = i + 1;
      }
    }
    flush_word(word_start, text.size());
    return ids;
  }

  /// Joins tokens with spaces; special tokens are dropped, "\n" renders literally.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == bos_ || id == eos_ || id == pad_) continue;
      const std::string& tok = id_to_token(id);
      if (tok == "\n") {
        out += '\n';
        continue;
      }
      if (!out.empty() && out.back() != '\n') out += ' ';
      out += tok;
    }
    return out;
  }

  /// Digest of the vocabulary; two models are tokenizer-compatible iff equal.
  std::string fingerprint() const {
    Sha256 h;
    for (const auto& t : tokens_) {
      h.update(t);
      h.update("\x1f", 1);
    }
    auto d = h.finish();
    return to_hex(d.data(), 8);
  }

 private:
  int require(const char* tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) throw ValidationError(std::string("vocab missing special token ") + tok);
    return it->second;
  }

  int newline_id() const {
    auto it = index_.find("\n");
    return it == index_.end() ? unk_ : it->second;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int bos_ = -1, eos_ = -1, unk_ = -1, pad_ = -1;
};

}  // namespace adl
