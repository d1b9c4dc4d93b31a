#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "adl/digest.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"

namespace adl {

// ============================================================================
// Corpus files. Two layouts:
//   *.txt    one document per line (documents must not embed newlines)
//   *.jsonl  one JSON object per line: {"text": ...} for plain documents or
//            {"messages": [{"role": ..., "content": ...}, ...]} for chats
// ============================================================================

struct ChatMessage {
  std::string role;
  std::string content;
};

struct CorpusDoc {
  std::string text;                   // full document (chats rendered as a transcript)
  std::vector<ChatMessage> messages;  // empty for plain documents

  bool is_chat() const { return !messages.empty(); }

  /// Concatenated assistant turns; falls back to the whole text for plain docs.
  std::string assistant_text() const {
    if (messages.empty()) return text;
    std::string out;
    for (const auto& m : messages) {
      if (m.role != "assistant") continue;
      if (!out.empty()) out += '\n';
      out += m.content;
    }
    return out;
  }
};

inline std::string render_chat_transcript(const std::vector<ChatMessage>& messages) {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += '\n';
    if (m.role == "user") out += "User: " + m.content;
    else if (m.role == "assistant") out += "Assistant: " + m.content;
    else out += m.role + ": " + m.content;
  }
  return out;
}

inline std::vector<CorpusDoc> load_corpus(const fs::path& path) {
  if (!fs::exists(path)) throw UpstreamArtifactError("corpus file not found: " + path.string());
  std::string raw = read_file(path);
  std::vector<CorpusDoc> docs;
  bool jsonl = path.extension() == ".jsonl" || path.extension() == ".json";
  size_t start = 0;
  int line_no = 0;
  while (start <= raw.size()) {
    size_t end = raw.find('\n', start);
    if (end == std::string::npos) end = raw.size();
    std::string_view line(raw.data() + start, end - start);
    ++line_no;
    start = end + 1;
    if (line.empty()) {
      if (start > raw.size()) break;
      continue;
    }
    CorpusDoc doc;
    if (jsonl) {
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded())
        throw ValidationError("bad JSON at " + path.string() + ":" + std::to_string(line_no));
      if (j.contains("messages")) {
        for (const auto& m : j.at("messages"))
          doc.messages.push_back(
              {m.at("role").get<std::string>(), m.at("content").get<std::string>()});
        doc.text = render_chat_transcript(doc.messages);
      } else if (j.contains("text")) {
        doc.text = j.at("text").get<std::string>();
      } else {
        throw ValidationError("jsonl line lacks 'text' or 'messages' at " + path.string() + ":" +
                              std::to_string(line_no));
      }
    } else {
      doc.text = std::string(line);
    }
    if (!doc.text.empty()) docs.push_back(std::move(doc));
    if (end == raw.size()) break;
  }
  if (docs.empty()) throw ValidationError("corpus is empty: " + path.string());
  return docs;
}

inline void save_corpus_txt(const fs::path& path, const std::vector<std::string>& docs) {
  std::string out;
  for (const auto& d : docs) {
    if (d.find('\n') != std::string::npos)
      throw ValidationError("txt corpus documents must not contain newlines; use jsonl");
    out += d;
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline void save_corpus_jsonl(const fs::path& path, const std::vector<std::string>& docs) {
  std::string out;
  for (const auto& d : docs) {
    nlohmann::json j = {{"text", d}};
    out += j.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline std::vector<std::string> plain_texts(const std::vector<CorpusDoc>& docs) {
  std::vector<std::string> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.text);
  return out;
}

/// One entry per document: assistant turns only for chats, full text otherwise.
inline std::vector<std::string> assistant_texts(const std::vector<CorpusDoc>& docs) {
  std::vector<std::string> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.assistant_text());
  return out;
}

/// Stable identifier from document bytes, independent of file layout.
inline std::string corpus_digest(const std::vector<std::string>& docs) {
  Sha256 h;
  for (const auto& d : docs) {
    h.update(d);
    h.update("\x1e", 1);
  }
  auto dd = h.finish();
  return to_hex(dd.data(), 8);
}

}  // namespace adl
