#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "adl/corpus.hpp"
#include "adl/errors.hpp"
#include "adl/gateway.hpp"
#include "adl/model.hpp"
#include "adl/rng.hpp"
#include "adl/textutil.hpp"

namespace adl {

// ============================================================================
// Bias metrics: LLM-graded token relevance of lens readouts, and pairwise
// cosine-similarity reports between steered text, unsteered text, the
// finetuning corpus, and a generic chat baseline.
// ============================================================================

// ----------------------------------------------------------------------------
// Token frequency and stoplist handling
// ----------------------------------------------------------------------------

/// One token per line; blank lines skipped.
inline std::set<std::string> load_stoplist(const fs::path& path) {
  if (!fs::exists(path)) throw UpstreamArtifactError("stoplist not found: " + path.string());
  std::set<std::string> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

namespace detail {

inline bool all_punct(const std::string& token) {
  for (char c : token)
    if (std::isalnum(static_cast<unsigned char>(c))) return false;
  return !token.empty();
}

inline bool stoplisted(const std::string& token, const std::set<std::string>& stoplist) {
  if (all_punct(token)) return true;
  std::string low = to_lower(token);
  if (stoplist.count(low)) return true;
  return stoplist.count(strip_punct(low)) > 0;
}

}  // namespace detail

/// Most frequent corpus tokens after stoplist removal, count-descending with
/// lexicographic tie-break.
inline std::vector<std::string> frequent_tokens(const std::vector<std::string>& corpus,
                                                const std::set<std::string>& stoplist,
                                                int n = 100) {
  if (corpus.empty()) throw ValidationError("token frequency needs a non-empty corpus");
  if (n < 1) throw ValidationError("token frequency needs n >= 1");
  std::unordered_map<std::string, long> counts;
  for (const auto& text : corpus)
    for (auto& word : split_whitespace(text))
      if (!detail::stoplisted(word, stoplist)) counts[std::move(word)] += 1;
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (int(ranked.size()) > n) ranked.resize(size_t(n));
  std::vector<std::string> out;
  out.reserve(ranked.size());
  for (auto& [tok, _] : ranked) out.push_back(std::move(tok));
  return out;
}

/// Fraction of the top readout tokens that match a keyword set exactly
/// (case-folded). The denominator stays at `denom` regardless of list length.
inline double keyword_fraction(const std::vector<std::string>& tokens,
                               const std::set<std::string>& keywords, int denom = 20) {
  if (denom < 1) throw ValidationError("keyword fraction needs denom >= 1");
  int hits = 0;
  int seen = 0;
  for (const auto& tok : tokens) {
    if (seen == denom) break;
    ++seen;
    if (keywords.count(to_lower(strip_punct(tok)))) ++hits;
  }
  return double(hits) / double(denom);
}

// ----------------------------------------------------------------------------
// LLM-graded token relevance
// ----------------------------------------------------------------------------

inline const char* kDefaultRelevancePrompt =
    "You judge whether tokens surfaced by a model-diffing probe are related to a "
    "finetuning objective. You are given the objective, frequent tokens from the "
    "finetuning dataset, and a candidate token list. List every candidate token "
    "that is clearly related to the objective or dataset, one per line, exactly "
    "as written. Reply NONE if no candidate is related.";

struct PositionReadout {
  int position = 0;
  std::vector<std::string> tokens;  // ranked, most confident first
};

struct TokenVotes {
  std::string token;
  std::vector<bool> votes;  // one per grader run
  bool relevant = false;    // unanimous yes
};

struct RelevanceReport {
  std::string source;  // which lens produced the readout
  std::map<int, double> per_position_fraction;
  double max_fraction = 0.0;
  std::map<int, std::vector<TokenVotes>> votes;
};

struct RelevanceOptions {
  int top_tokens = 20;   // readout cap and the fraction's denominator
  int frequent_n = 100;  // dataset tokens shown to the grader
  int runs = 3;
  uint64_t seed = 0;
  std::string grader_model = "grader-v1";
  std::string grader_system_prompt = kDefaultRelevancePrompt;

  void validate() const {
    if (top_tokens < 1) throw ValidationError("top_tokens must be >= 1");
    if (frequent_n < 1) throw ValidationError("frequent_n must be >= 1");
    if (runs < 1) throw ValidationError("runs must be >= 1");
  }
};

namespace detail {

/// Whole entries of the reply (split on newlines and commas), trimmed.
inline std::set<std::string> parse_token_reply(const std::string& reply) {
  std::set<std::string> out;
  std::string entry;
  auto flush = [&] {
    size_t b = entry.find_first_not_of(" \t");
    size_t e = entry.find_last_not_of(" \t");
    if (b != std::string::npos) out.insert(entry.substr(b, e - b + 1));
    entry.clear();
  };
  for (char c : reply) {
    if (c == '\n' || c == ',') {
      flush();
    } else {
      entry += c;
    }
  }
  flush();
  return out;
}

}  // namespace detail

/// Grades one readout per position: three grader runs over the top tokens in
/// shuffled order; a token is relevant only when every run marks it. The
/// fraction divides by top_tokens even for shorter readouts.
inline RelevanceReport grade_token_relevance(const std::string& source,
                                             const std::vector<PositionReadout>& readouts,
                                             const std::string& objective,
                                             const std::vector<std::string>& finetune_corpus,
                                             const std::set<std::string>& stoplist, Gateway& gw,
                                             const RelevanceOptions& opt = {}) {
  opt.validate();
  auto frequent = frequent_tokens(finetune_corpus, stoplist, opt.frequent_n);
  std::string freq_line;
  for (const auto& t : frequent) {
    if (!freq_line.empty()) freq_line += ' ';
    freq_line += t;
  }

  RelevanceReport report;
  report.source = source;
  for (const auto& readout : readouts) {
    std::vector<std::string> tokens = readout.tokens;
    if (int(tokens.size()) > opt.top_tokens) tokens.resize(size_t(opt.top_tokens));
    if (tokens.empty()) {
      report.per_position_fraction[readout.position] = 0.0;
      report.votes[readout.position] = {};
      continue;
    }

    std::vector<std::set<std::string>> run_marks;
    for (int run = 0; run < opt.runs; ++run) {
      std::vector<std::string> shuffled = tokens;
      Rng rng(seed_from_label("relevance-" + source + "-pos" + std::to_string(readout.position) +
                                  "-run" + std::to_string(run),
                              opt.seed));
      rng.shuffle(shuffled);
      std::string listing;
      for (const auto& t : shuffled) {
        listing += t;
        listing += '\n';
      }
      ChatRequest req;
      req.role = ChatRole::grader_relevance;
      req.model_id = opt.grader_model;
      req.temperature = 0.0;
      req.messages = {{"system", opt.grader_system_prompt},
                      {"user", "Finetuning objective:\n" + objective +
                                   "\n\nFrequent dataset tokens:\n" + freq_line +
                                   "\n\nCandidate tokens (one per line):\n" + listing +
                                   "\nWhich candidates are related? One per line, exactly as "
                                   "written, or NONE."}};
      std::set<std::string> entries = detail::parse_token_reply(gw.chat(req).content);
      std::set<std::string> marks;
      for (const auto& t : tokens)
        if (entries.count(t)) marks.insert(t);
      run_marks.push_back(std::move(marks));
    }

    std::vector<TokenVotes> votes;
    int relevant = 0;
    for (const auto& t : tokens) {
      TokenVotes v;
      v.token = t;
      bool unanimous = true;
      for (const auto& marks : run_marks) {
        bool hit = marks.count(t) > 0;
        v.votes.push_back(hit);
        unanimous = unanimous && hit;
      }
      v.relevant = unanimous;
      if (unanimous) ++relevant;
      votes.push_back(std::move(v));
    }
    report.per_position_fraction[readout.position] = double(relevant) / double(opt.top_tokens);
    report.votes[readout.position] = std::move(votes);
  }

  report.max_fraction = 0.0;
  for (const auto& [_, f] : report.per_position_fraction)
    report.max_fraction = std::max(report.max_fraction, f);
  return report;
}

// ----------------------------------------------------------------------------
// Embeddings and pairwise cosine similarity
// ----------------------------------------------------------------------------

class Embedder {
 public:
  virtual ~Embedder() = default;
  /// One L2-normalized row per text; a text with no known features embeds to
  /// the zero row.
  virtual RMatF embed_all(const std::vector<std::string>& texts) = 0;
};

/// Deterministic local embedder: bag-of-words with smoothed idf weights
/// learned from a reference corpus.
class BowTfidfEmbedder : public Embedder {
 public:
  explicit BowTfidfEmbedder(const std::vector<std::string>& reference) {
    if (reference.empty()) throw ValidationError("embedder needs a non-empty reference corpus");
    std::map<std::string, long> doc_freq;
    for (const auto& text : reference) {
      std::set<std::string> seen;
      for (auto& w : split_whitespace(text)) seen.insert(to_lower(w));
      for (const auto& w : seen) doc_freq[w] += 1;
    }
    const double n = double(reference.size());
    for (const auto& [word, df] : doc_freq) {
      index_[word] = int(idf_.size());
      idf_.push_back(float(std::log((1.0 + n) / (1.0 + double(df))) + 1.0));
    }
  }

  int dim() const { return int(idf_.size()); }

  RMatF embed_all(const std::vector<std::string>& texts) override {
    RMatF out = RMatF::Zero(Eigen::Index(texts.size()), dim());
    for (size_t i = 0; i < texts.size(); ++i) {
      for (const auto& w : split_whitespace(texts[i])) {
        auto it = index_.find(to_lower(w));
        if (it != index_.end()) out(Eigen::Index(i), it->second) += idf_[size_t(it->second)];
      }
      float norm = out.row(Eigen::Index(i)).norm();
      if (norm > 0.0f) out.row(Eigen::Index(i)) /= norm;
    }
    return out;
  }

 private:
  std::unordered_map<std::string, int> index_;
  std::vector<float> idf_;
};

/// Remote embedder going through the gateway: the backend answers with a JSON
/// array of floats, so recorded fixtures replay byte-identically.
class GatewayEmbedder : public Embedder {
 public:
  GatewayEmbedder(Gateway& gw, std::string model_id, int expected_dim)
      : gw_(gw), model_id_(std::move(model_id)), dim_(expected_dim) {
    if (expected_dim < 1) throw ValidationError("embedder dimension must be >= 1");
  }

  RMatF embed_all(const std::vector<std::string>& texts) override {
    RMatF out = RMatF::Zero(Eigen::Index(texts.size()), dim_);
    for (size_t i = 0; i < texts.size(); ++i) {
      ChatRequest req;
      req.role = ChatRole::embedder;
      req.model_id = model_id_;
      req.temperature = 0.0;
      req.messages = {{"user", texts[i]}};
      std::string reply = gw_.chat(req).content;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(reply);
        if (!j.is_array() || int(j.size()) != dim_)
          throw ExternalServiceError("embedder returned " + std::to_string(j.size()) +
                                     " values, expected " + std::to_string(dim_));
        for (int c = 0; c < dim_; ++c) out(Eigen::Index(i), c) = j[size_t(c)].get<float>();
      } catch (const nlohmann::json::exception&) {
        throw ExternalServiceError("embedder reply is not a JSON float array");
      }
      float norm = out.row(Eigen::Index(i)).norm();
      if (norm > 0.0f) out.row(Eigen::Index(i)) /= norm;
    }
    return out;
  }

 private:
  Gateway& gw_;
  std::string model_id_;
  int dim_;
};

struct PairStats {
  double mean = 0.0;
  double stddev = 0.0;
  long pairs = 0;
};

struct SimilarityReport {
  PairStats steered_finetune;
  PairStats unsteered_finetune;
  PairStats finetune_finetune;
  PairStats steered_chat;
  PairStats unsteered_chat;
  int steered_count = 0;
  int unsteered_count = 0;
  int finetune_count = 0;  // after subsampling
  int chat_count = 0;      // after subsampling
};

struct SimilarityOptions {
  int subsample = 500;
  uint64_t seed = 0;
};

namespace detail {

inline PairStats cross_stats(const RMatF& a, const RMatF& b) {
  PairStats s;
  RMatF dots = a * b.transpose();
  s.pairs = long(dots.rows()) * long(dots.cols());
  double sum = 0.0;
  double sq = 0.0;
  for (Eigen::Index r = 0; r < dots.rows(); ++r)
    for (Eigen::Index c = 0; c < dots.cols(); ++c) {
      double v = double(dots(r, c));
      sum += v;
      sq += v * v;
    }
  s.mean = sum / double(s.pairs);
  s.stddev = std::sqrt(std::max(0.0, sq / double(s.pairs) - s.mean * s.mean));
  return s;
}

inline PairStats self_stats(const RMatF& a) {
  if (a.rows() < 2)
    throw ValidationError("self-similarity needs at least two samples");
  PairStats s;
  RMatF dots = a * a.transpose();
  double sum = 0.0;
  double sq = 0.0;
  for (Eigen::Index r = 0; r < dots.rows(); ++r)
    for (Eigen::Index c = r + 1; c < dots.cols(); ++c) {
      double v = double(dots(r, c));
      sum += v;
      sq += v * v;
      s.pairs += 1;
    }
  s.mean = sum / double(s.pairs);
  s.stddev = std::sqrt(std::max(0.0, sq / double(s.pairs) - s.mean * s.mean));
  return s;
}

inline std::vector<std::string> subsample_texts(const std::vector<std::string>& texts, int cap,
                                                uint64_t seed) {
  if (int(texts.size()) <= cap) return texts;
  std::vector<size_t> order;
  order.resize(texts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::string> out;
  out.reserve(size_t(cap));
  for (int i = 0; i < cap; ++i) out.push_back(texts[order[size_t(i)]]);
  return out;
}

}  // namespace detail

/// Mean and spread of pairwise cosines for every pair class. The finetune and
/// chat corpora are subsampled to opt.subsample texts; steered/unsteered lists
/// are used whole.
inline SimilarityReport similarity_report(const std::vector<std::string>& steered,
                                          const std::vector<std::string>& unsteered,
                                          const std::vector<std::string>& finetune_corpus,
                                          const std::vector<std::string>& chat_corpus,
                                          Embedder& embedder, const SimilarityOptions& opt = {}) {
  if (opt.subsample < 2) throw ValidationError("subsample cap must be >= 2");
  if (steered.empty() || unsteered.empty())
    throw ValidationError("similarity report needs steered and unsteered texts");
  if (finetune_corpus.empty() || chat_corpus.empty())
    throw ValidationError("similarity report needs non-empty corpora");

  auto ft = detail::subsample_texts(finetune_corpus, opt.subsample,
                                    seed_from_label("sim-ft", opt.seed));
  auto chat = detail::subsample_texts(chat_corpus, opt.subsample,
                                      seed_from_label("sim-chat", opt.seed));

  RMatF e_steered = embedder.embed_all(steered);
  RMatF e_unsteered = embedder.embed_all(unsteered);
  RMatF e_ft = embedder.embed_all(ft);
  RMatF e_chat = embedder.embed_all(chat);

  SimilarityReport report;
  report.steered_count = int(steered.size());
  report.unsteered_count = int(unsteered.size());
  report.finetune_count = int(ft.size());
  report.chat_count = int(chat.size());
  report.steered_finetune = detail::cross_stats(e_steered, e_ft);
  report.unsteered_finetune = detail::cross_stats(e_unsteered, e_ft);
  report.finetune_finetune = detail::self_stats(e_ft);
  report.steered_chat = detail::cross_stats(e_steered, e_chat);
  report.unsteered_chat = detail::cross_stats(e_unsteered, e_chat);
  return report;
}

}  // namespace adl
