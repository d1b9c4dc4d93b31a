#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "adl/diff.hpp"
#include "adl/errors.hpp"
#include "adl/gateway.hpp"
#include "adl/model.hpp"
#include "adl/textutil.hpp"

namespace adl {

// ============================================================================
// Interpretation lenses for an extracted activation difference:
//   - logit lens: read the difference vector straight through the unembedding
//   - patchscope: splice the rescaled difference into an identity prompt on
//     the finetuned model, rank induced tokens, and let a grader tournament
//     choose the injection scale
// ============================================================================

struct TokenScore {
  int token_id = 0;
  std::string token;
  float score = 0.0f;  // logit or probability, per producer
};

/// Top tokens when a residual vector is pushed through final norm + unembed.
/// Ties break toward the smaller token id so output order is reproducible.
inline std::vector<TokenScore> logit_lens(const ModelHandle& model, const Eigen::RowVectorXf& h,
                                          int top_k = 20) {
  if (h.size() != model.hidden_dim())
    throw ValidationError("logit lens vector has wrong dimension");
  if (top_k < 1) throw ValidationError("logit lens needs top_k >= 1");
  Eigen::VectorXf logits = model.readout_logits(h.transpose());
  const int v = int(logits.size());
  std::vector<int> order;
  order.resize(size_t(v));
  for (int i = 0; i < v; ++i) order[size_t(i)] = i;
  const int keep = std::min(top_k, v);
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int a, int b) {
    if (logits(a) != logits(b)) return logits(a) > logits(b);
    return a < b;
  });
  std::vector<TokenScore> out;
  out.reserve(size_t(keep));
  for (int i = 0; i < keep; ++i) {
    int id = order[size_t(i)];
    out.push_back({id, model.tokenizer().tokens()[size_t(id)], logits(id)});
  }
  return out;
}

// ----------------------------------------------------------------------------
// Patchscope
// ----------------------------------------------------------------------------

/// "tok1 → tok1\ntok2 → tok2\ntok3 → tok3\n?": the trailing ? is the position
/// whose residual gets replaced.
inline std::string identity_prompt(const std::array<std::string, 3>& triple) {
  std::string out;
  for (const auto& tok : triple) {
    out += tok;
    out += " → ";
    out += tok;
    out += '\n';
  }
  out += '?';
  return out;
}

/// The 30 injection scales swept by the tournament.
inline std::vector<double> default_scale_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 15; ++i) grid.push_back(0.5 + 0.1 * i);  // 0.5 .. 2.0
  grid.push_back(3.0);
  grid.push_back(4.0);
  grid.push_back(5.0);
  grid.push_back(10.0);
  grid.push_back(20.0);
  for (int s = 40; s <= 200; s += 20) grid.push_back(double(s));
  return grid;
}

struct PatchscopeOptions {
  int top_n = 16384;  // per-prompt candidate pool before intersecting
  std::vector<std::array<std::string, 3>> triples = {
      {"man", "1135", "hello"},
      {"bear", "42", "blue"},
      {"921", "target", "anna"},
  };
  std::vector<double> scales = default_scale_grid();
  int grader_batch = 10;
  int tokens_shown_to_grader = 12;
  std::string grader_model = "grader-v1";
  std::string grader_system_prompt =
      "You compare candidate token lists produced by an activation patching sweep. "
      "Pick the entry whose tokens most clearly name one specific topic or trait. "
      "Answer with the entry number only.";
};

/// Next-token distribution of the finetuned model when the layer-l residual at
/// `position` is replaced with `replacement`.
inline Eigen::VectorXf patched_next_token_probs(const ModelHandle& ft,
                                                const std::vector<int>& ids, int layer,
                                                int position,
                                                const Eigen::RowVectorXf& replacement) {
  Intervention iv;
  iv.kind = InterventionKind::replace_at_position;
  iv.layer = layer;
  iv.position = position;
  iv.payload = replacement;
  return ft.forward_with_patch(ids, iv);
}

/// Tokens ranked by probability, excluding the prompt's own tokens and the
/// tokenizer specials. Ties break toward the smaller token id.
inline std::vector<int> ranked_candidate_tokens(const ModelHandle& ft,
                                                const Eigen::VectorXf& probs,
                                                const std::vector<int>& prompt_ids, int top_n) {
  std::set<int> banned(prompt_ids.begin(), prompt_ids.end());
  const auto& tok = ft.tokenizer();
  for (const char* sp : {WordTokenizer::kBos, WordTokenizer::kEos, WordTokenizer::kUnk,
                         WordTokenizer::kPad})
    if (auto id = tok.token_to_id(sp)) banned.insert(*id);
  std::vector<int> order;
  order.reserve(size_t(probs.size()));
  for (int i = 0; i < int(probs.size()); ++i)
    if (!banned.count(i)) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs(a) != probs(b)) return probs(a) > probs(b);
    return a < b;
  });
  if (int(order.size()) > top_n) order.resize(size_t(top_n));
  return order;
}

/// Tokens present in every ranked list, ordered by mean rank; ties break on
/// the token string so the result is stable.
inline std::vector<std::string> ranked_intersection(
    const std::vector<std::vector<std::string>>& lists) {
  if (lists.empty()) return {};
  std::map<std::string, std::pair<int, double>> hits;  // token -> (lists seen, rank sum)
  for (const auto& list : lists) {
    std::set<std::string> seen_here;
    for (size_t r = 0; r < list.size(); ++r) {
      if (!seen_here.insert(list[r]).second) continue;
      auto& [n, rank_sum] = hits[list[r]];
      n += 1;
      rank_sum += double(r);
    }
  }
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& [token, stat] : hits)
    if (stat.first == int(lists.size()))
      ranked.push_back({stat.second / double(lists.size()), token});
  std::sort(ranked.begin(), ranked.end());
  std::vector<std::string> out;
  out.reserve(ranked.size());
  for (auto& [_, token] : ranked) out.push_back(token);
  return out;
}

struct PatchscopeScaleResult {
  double scale = 0.0;
  std::vector<std::string> intersection;  // ranked across the identity prompts
};

struct PatchscopeReport {
  int layer = 0;
  int position = 0;
  float delta_norm = 0.0f;
  float eta_ft = 0.0f;
  std::vector<PatchscopeScaleResult> scales;
  double chosen_scale = 0.0;
  std::vector<std::string> chosen_tokens;
};

namespace detail {

inline size_t grade_scale_batch(Gateway& gw, const PatchscopeOptions& opt,
                                const std::vector<const PatchscopeScaleResult*>& batch) {
  if (batch.size() == 1) return 0;
  std::string listing;
  for (size_t i = 0; i < batch.size(); ++i) {
    listing += std::to_string(i + 1) + ". scale " + std::to_string(batch[i]->scale) + ": ";
    const auto& toks = batch[i]->intersection;
    if (toks.empty()) listing += "(no shared tokens)";
    for (size_t t = 0; t < toks.size() && t < size_t(opt.tokens_shown_to_grader); ++t) {
      if (t) listing += ' ';
      listing += toks[t];
    }
    listing += '\n';
  }
  ChatRequest req;
  req.role = ChatRole::grader_scale;
  req.model_id = opt.grader_model;
  req.temperature = 0.0;
  req.messages = {{"system", opt.grader_system_prompt},
                  {"user", "Candidate token lists:\n" + listing + "Best entry number?"}};
  std::string reply = gw.chat(req).content;
  auto choice = find_first_integer(reply);
  if (!choice || *choice < 1 || *choice > long(batch.size()))
    throw ExternalServiceError("scale grader returned an unusable choice: '" + reply + "'");
  return size_t(*choice - 1);
}

}  // namespace detail

/// Full sweep: for every scale, splice scale * (eta / |delta|) * delta into
/// each identity prompt, intersect the induced token rankings, then run the
/// grader tournament (batches, batch winners, final round) to pick the scale.
inline PatchscopeReport run_patchscope(const ModelHandle& ft, const DiffStats& diff, int position,
                                       Gateway& gw, const PatchscopeOptions& opt) {
  if (opt.triples.empty()) throw ValidationError("patchscope needs at least one identity prompt");
  if (opt.scales.empty()) throw ValidationError("patchscope needs a scale grid");
  if (opt.grader_batch < 1) throw ValidationError("patchscope grader batch must be >= 1");
  Eigen::RowVectorXf delta = diff.delta(position);
  const float norm = delta.norm();
  if (!(norm > 0.0f)) throw NumericError("activation difference has zero norm; nothing to patch");
  if (!(diff.eta_ft > 0.0f))
    throw UpstreamArtifactError("diff artifact carries no usable activation norm estimate");
  Eigen::RowVectorXf unit_scaled = delta * (diff.eta_ft / norm);

  struct PromptCtx {
    std::vector<int> ids;
    int patch_pos;
  };
  std::vector<PromptCtx> prompts;
  for (const auto& triple : opt.triples) {
    PromptCtx ctx;
    ctx.ids = ft.encode(identity_prompt(triple));
    ctx.patch_pos = int(ctx.ids.size()) - 1;
    prompts.push_back(std::move(ctx));
  }

  PatchscopeReport report;
  report.layer = diff.layer;
  report.position = position;
  report.delta_norm = norm;
  report.eta_ft = diff.eta_ft;

  const auto& vocab = ft.tokenizer().tokens();
  for (double scale : opt.scales) {
    Eigen::RowVectorXf payload = unit_scaled * float(scale);
    std::vector<std::vector<std::string>> lists;
    for (const auto& p : prompts) {
      Eigen::VectorXf probs =
          patched_next_token_probs(ft, p.ids, diff.layer, p.patch_pos, payload);
      std::vector<int> ids = ranked_candidate_tokens(ft, probs, p.ids, opt.top_n);
      std::vector<std::string> names;
      names.reserve(ids.size());
      for (int id : ids) names.push_back(vocab[size_t(id)]);
      lists.push_back(std::move(names));
    }
    report.scales.push_back({scale, ranked_intersection(lists)});
  }

  // Tournament: fixed-order batches, winners advance until one remains.
  std::vector<const PatchscopeScaleResult*> round;
  for (const auto& r : report.scales) round.push_back(&r);
  while (round.size() > 1) {
    std::vector<const PatchscopeScaleResult*> winners;
    for (size_t at = 0; at < round.size(); at += size_t(opt.grader_batch)) {
      std::vector<const PatchscopeScaleResult*> batch(
          round.begin() + long(at),
          round.begin() + long(std::min(at + size_t(opt.grader_batch), round.size())));
      winners.push_back(batch[detail::grade_scale_batch(gw, opt, batch)]);
    }
    round = std::move(winners);
  }
  report.chosen_scale = round.front()->scale;
  report.chosen_tokens = round.front()->intersection;
  return report;
}

}  // namespace adl
