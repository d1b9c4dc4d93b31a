#pragma once

#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace adl {

/// First base-10 integer appearing anywhere in the text, if any.
inline std::optional<long> find_first_integer(std::string_view text) {
  size_t i = 0;
  while (i < text.size()) {
    if (std::isdigit(static_cast<unsigned char>(text[i])) ||
        (text[i] == '-' && i + 1 < text.size() &&
         std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
      size_t j = i + (text[i] == '-' ? 1 : 0);
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
      try {
        return std::stol(std::string(text.substr(i, j - i)));
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
    ++i;
  }
  return std::nullopt;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = char(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::istringstream ss{std::string(s)};
  std::vector<std::string> out;
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

/// Strips common punctuation from both ends of a word.
inline std::string strip_punct(std::string_view s) {
  size_t b = 0, e = s.size();
  auto is_punct = [](char c) {
    return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' || c == '"' ||
           c == '\'' || c == '(' || c == ')' || c == '[' || c == ']';
  };
  while (b < e && is_punct(s[b])) ++b;
  while (e > b && is_punct(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace adl
