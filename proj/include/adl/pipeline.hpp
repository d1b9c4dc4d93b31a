#pragma once

#include <chrono>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "adl/agent.hpp"
#include "adl/artifacts.hpp"
#include "adl/causal.hpp"
#include "adl/config.hpp"
#include "adl/corpus.hpp"
#include "adl/diff.hpp"
#include "adl/lab.hpp"
#include "adl/lens.hpp"
#include "adl/metrics.hpp"
#include "adl/model.hpp"
#include "adl/report.hpp"
#include "adl/steering.hpp"

namespace adl {

// ============================================================================
// Pipeline: fixed stage order from organism training to the final report, with
// content-addressed caching. A stage is skipped when its stamp (parameters +
// input hashes) matches and its outputs are still present, so reruns only pay
// for what actually changed. model_passes counts model invocations: one
// generation or one scored sequence is one pass.
// ============================================================================

enum class Stage { organism, extract, lens, steer, metrics, causal, agent, report };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> order = {Stage::organism, Stage::extract, Stage::lens,
                                           Stage::steer,    Stage::metrics, Stage::causal,
                                           Stage::agent,    Stage::report};
  return order;
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::organism: return "organism";
    case Stage::extract: return "extract";
    case Stage::lens: return "lens";
    case Stage::steer: return "steer";
    case Stage::metrics: return "metrics";
    case Stage::causal: return "causal";
    case Stage::agent: return "agent";
    case Stage::report: return "report";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (Stage st : all_stages())
    if (s == to_string(st)) return st;
  throw ValidationError("unknown pipeline stage: '" + s + "'");
}

namespace detail {

// ----------------------------------------------------------------------------
// Shared state across stages: checkpoint locations, lazily loaded models and
// corpora, and the organism metadata that grading stages need.
// ----------------------------------------------------------------------------

struct PipelineContext {
  const RunConfig& cfg;
  ArtifactStore& store;
  fs::path base_dir;
  fs::path ft_dir;
  bool lab_organism = false;
  std::string organism_id;
  std::string objective_text;
  std::vector<std::string> domain_keywords;

  std::optional<ModelHandle> base_model;
  std::optional<ModelHandle> ft_model;
  std::optional<std::vector<std::string>> eval_docs;
  std::optional<std::vector<std::string>> narrow_docs;
  std::optional<std::vector<std::string>> chat_docs;

  PipelineContext(const RunConfig& config, ArtifactStore& s) : cfg(config), store(s) {
    if (!cfg.base_checkpoint.empty()) {
      base_dir = cfg.base_checkpoint;
      ft_dir = cfg.ft_checkpoint;
    } else {
      lab_organism = true;
      base_dir = fs::path(cfg.organism_dir) / "base";
      ft_dir = fs::path(cfg.organism_dir) / "finetuned";
      refresh_organism_metadata();
    }
  }

  void refresh_organism_metadata() {
    fs::path mf = fs::path(cfg.organism_dir) / "organism.json";
    if (!fs::exists(mf)) return;
    try {
      nlohmann::json j = nlohmann::json::parse(read_file(mf));
      organism_id = j.value("organism_id", "");
      objective_text = j.value("objective_text", "");
      domain_keywords = j.value("domain_keywords", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
      throw UpstreamArtifactError("corrupt organism manifest " + mf.string() + ": " + e.what());
    }
  }

  const ModelHandle& base() {
    if (!base_model) {
      if (!fs::exists(base_dir))
        throw UpstreamArtifactError("base checkpoint not found at " + base_dir.string() +
                                    "; run the organism stage first");
      base_model = ModelHandle::load(base_dir);
    }
    return *base_model;
  }

  const ModelHandle& ft() {
    if (!ft_model) {
      if (!fs::exists(ft_dir))
        throw UpstreamArtifactError("finetuned checkpoint not found at " + ft_dir.string() +
                                    "; run the organism stage first");
      ft_model = ModelHandle::load(ft_dir);
    }
    return *ft_model;
  }

  int resolved_layer() { return cfg.layer >= 0 ? cfg.layer : base().middle_layer(); }

  const std::vector<std::string>& eval_texts() {
    if (!eval_docs) {
      if (!cfg.eval_corpus.empty()) {
        eval_docs = plain_texts(load_corpus(cfg.eval_corpus));
      } else {
        eval_docs = lab::generate_general_corpus(cfg.max_corpus_samples,
                                                 seed_from_label("eval-corpus", cfg.seed));
      }
    }
    return *eval_docs;
  }

  const std::vector<std::string>& narrow_texts() {
    if (!narrow_docs) {
      if (!lab_organism)
        throw ValidationError(
            "this stage needs the narrow finetuning corpus, which only a lab organism provides; "
            "configure organism_spec instead of an explicit checkpoint pair");
      fs::path p = fs::path(cfg.organism_dir) / "narrow.jsonl";
      if (!fs::exists(p))
        throw UpstreamArtifactError("narrow corpus not found at " + p.string() +
                                    "; run the organism stage first");
      narrow_docs = plain_texts(load_corpus(p));
    }
    return *narrow_docs;
  }

  const std::vector<std::string>& chat_texts() {
    if (!chat_docs) {
      if (!cfg.chat_corpus.empty()) {
        chat_docs = plain_texts(load_corpus(cfg.chat_corpus));
      } else if (lab_organism) {
        fs::path p = fs::path(cfg.organism_dir) / "general.jsonl";
        if (!fs::exists(p))
          throw UpstreamArtifactError("general corpus not found at " + p.string() +
                                      "; run the organism stage first");
        chat_docs = plain_texts(load_corpus(p));
      } else {
        throw ValidationError("similarity baselines need chat_corpus or a lab organism");
      }
    }
    return *chat_docs;
  }

  const std::string& objective() {
    if (objective_text.empty()) {
      if (lab_organism)
        throw UpstreamArtifactError("organism manifest is missing; run the organism stage first");
      throw ValidationError(
          "grading stages need the true finetuning objective, which only a lab organism carries; "
          "configure organism_spec instead of an explicit checkpoint pair");
    }
    return objective_text;
  }

  std::set<std::string> stoplist() {
    if (cfg.stoplist.empty()) return {};
    return load_stoplist(cfg.stoplist);
  }

  DiffStats load_stored_diff() {
    if (!store.contains("diff.adlmeta.json") || !store.contains("diff.adlweights"))
      throw UpstreamArtifactError(
          "extracted activation difference not found; run the extract stage first");
    return load_diff(store.root() / "diff");
  }
};

// ----------------------------------------------------------------------------
// Stamp bookkeeping
// ----------------------------------------------------------------------------

inline bool outputs_present(const ArtifactStore& store, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (!store.contains(n)) return false;
    if (!fs::exists(store.root() / "objects" / store.hash_of(n))) return false;
  }
  return true;
}

inline bool stamp_current(const ArtifactStore& store, const std::string& stage,
                          const nlohmann::json& expected) {
  const std::string name = "stamp." + stage + ".json";
  if (!store.contains(name)) return false;
  try {
    return nlohmann::json::parse(store.read_text(name)) == expected;
  } catch (const Error&) {
    return false;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

inline void write_stamp(ArtifactStore& store, const std::string& stage,
                        const nlohmann::json& stamp) {
  store.put_text("stamp." + stage + ".json", stamp.dump(2) + "\n");
}

/// True when the stage may be skipped; otherwise the caller runs the stage
/// body and the stamp is written afterwards.
inline bool stage_is_fresh(const ArtifactStore& store, const std::string& stage,
                           const nlohmann::json& stamp, const std::vector<std::string>& outputs) {
  return stamp_current(store, stage, stamp) && outputs_present(store, outputs);
}

// ----------------------------------------------------------------------------
// Organism freshness: the on-disk manifest doubles as the stage stamp.
// ----------------------------------------------------------------------------

inline bool organism_matches(const fs::path& dir, const lab::OrganismSpec& spec,
                             const lab::LabDefaults& defaults) {
  fs::path mf = dir / "organism.json";
  if (!fs::exists(mf) || !fs::exists(dir / "base") || !fs::exists(dir / "finetuned")) return false;
  TrainRecipe base_recipe = defaults.base_recipe;
  base_recipe.seed = seed_from_label("base-train", spec.recipe.seed);
  try {
    nlohmann::json j = nlohmann::json::parse(read_file(mf));
    return j.value("organism_id", "") == spec.organism_id &&
           j.value("objective_text", "") == spec.objective_text &&
           j.value("domain_keywords", std::vector<std::string>{}) == spec.domain_keywords &&
           j.value("corpus_size", -1) == spec.corpus_size &&
           j.value("mix_ratio", -1.0) == spec.mix_ratio &&
           j.value("seed", uint64_t(0)) == spec.recipe.seed &&
           j.value("general_docs", -1) == defaults.general_docs &&
           j.value("finetune_recipe", nlohmann::json()) == lab::recipe_to_json(spec.recipe) &&
           j.value("base_recipe", nlohmann::json()) == lab::recipe_to_json(base_recipe);
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

/// Build the organism unless a matching build is already on disk. Returns true
/// when a build ran.
inline bool ensure_organism(const lab::OrganismSpec& spec, const fs::path& dir,
                            const lab::LabDefaults& defaults = {}) {
  if (organism_matches(dir, spec, defaults)) return false;
  lab::build_organism(spec, dir, defaults);
  return true;
}

// ----------------------------------------------------------------------------
// Artifact JSON formats
// ----------------------------------------------------------------------------

inline nlohmann::json logitlens_artifact(const ModelHandle& ft, const DiffStats& diff,
                                         const std::vector<int>& positions, int top_k) {
  nlohmann::json out = {{"layer", diff.layer}, {"top_k", top_k},
                        {"positions", nlohmann::json::array()}};
  for (int p : positions) {
    auto scored = logit_lens(ft, diff.delta(p), top_k);
    nlohmann::json tokens = nlohmann::json::array();
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& ts : scored) {
      tokens.push_back(ts.token);
      scores.push_back(ts.score);
    }
    out["positions"].push_back({{"position", p}, {"tokens", tokens}, {"scores", scores}});
  }
  return out;
}

inline nlohmann::json patchscope_artifact(const std::vector<PatchscopeReport>& reports) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json scales = nlohmann::json::array();
    for (const auto& s : r.scales) {
      std::vector<std::string> head = s.intersection;
      if (head.size() > 20) head.resize(20);
      scales.push_back({{"scale", s.scale}, {"tokens", head}});
    }
    out.push_back({{"position", r.position},
                   {"layer", r.layer},
                   {"delta_norm", r.delta_norm},
                   {"eta_ft", r.eta_ft},
                   {"chosen_scale", r.chosen_scale},
                   {"chosen_tokens", r.chosen_tokens},
                   {"scales", scales}});
  }
  return out;
}

inline nlohmann::json calibration_artifact(const SteeringCalibration& cal) {
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : cal.traces) {
    nlohmann::json probes = nlohmann::json::array();
    for (const auto& p : t.probes)
      probes.push_back({{"midpoint", p.midpoint},
                        {"passed", p.passed},
                        {"coherent_count", p.coherent_count}});
    traces.push_back({{"prompt", t.prompt}, {"pi", t.pi}, {"any_pass", t.any_pass},
                      {"probes", probes}});
  }
  return {{"position", cal.position},
          {"pi_values", {cal.pi_values[0], cal.pi_values[1], cal.pi_values[2]}},
          {"final_alpha", cal.final_alpha},
          {"any_coherent", cal.any_coherent},
          {"traces", traces}};
}

inline nlohmann::json relevance_artifact(const RelevanceReport& r) {
  nlohmann::json per_position = nlohmann::json::object();
  nlohmann::json relevant = nlohmann::json::object();
  for (const auto& [pos, frac] : r.per_position_fraction) {
    per_position[std::to_string(pos)] = frac;
    nlohmann::json toks = nlohmann::json::array();
    auto it = r.votes.find(pos);
    if (it != r.votes.end())
      for (const auto& v : it->second)
        if (v.relevant) toks.push_back(v.token);
    relevant[std::to_string(pos)] = toks;
  }
  return {{"source", r.source},
          {"max_fraction", r.max_fraction},
          {"per_position", per_position},
          {"relevant_tokens", relevant}};
}

inline nlohmann::json pair_stats_json(const PairStats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"pairs", s.pairs}};
}

inline nlohmann::json similarity_artifact(const SimilarityReport& r) {
  return {{"steered_finetune", pair_stats_json(r.steered_finetune)},
          {"unsteered_finetune", pair_stats_json(r.unsteered_finetune)},
          {"finetune_finetune", pair_stats_json(r.finetune_finetune)},
          {"steered_chat", pair_stats_json(r.steered_chat)},
          {"unsteered_chat", pair_stats_json(r.unsteered_chat)},
          {"steered_count", r.steered_count},
          {"unsteered_count", r.unsteered_count},
          {"finetune_count", r.finetune_count},
          {"chat_count", r.chat_count}};
}

inline std::vector<PositionReadout> readouts_from_logitlens(const nlohmann::json& j) {
  std::vector<PositionReadout> out;
  try {
    for (const auto& p : j.at("positions")) {
      PositionReadout r;
      r.position = p.at("position").get<int>();
      r.tokens = p.at("tokens").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError(std::string("bad logit lens artifact: ") + e.what());
  }
  return out;
}

inline std::vector<PositionReadout> readouts_from_patchscope(const nlohmann::json& j) {
  std::vector<PositionReadout> out;
  try {
    for (const auto& p : j) {
      PositionReadout r;
      r.position = p.at("position").get<int>();
      r.tokens = p.at("chosen_tokens").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError(std::string("bad patchscope artifact: ") + e.what());
  }
  return out;
}

// ----------------------------------------------------------------------------
// Stage bodies. Each returns the number of model passes it performed (0 when
// skipped) and records itself in the manifest.
// ----------------------------------------------------------------------------

inline void note_stage(RunManifest& m, const std::string& name, bool ran, long passes) {
  if (ran)
    m.stages_run.push_back(name);
  else
    m.stages_skipped.push_back(name);
  m.model_passes[name] = ran ? passes : 0;
}

inline void stage_organism(PipelineContext& px, RunManifest& m) {
  if (!px.lab_organism) {
    if (!fs::exists(px.base_dir))
      throw UpstreamArtifactError("base checkpoint not found: " + px.base_dir.string());
    if (!fs::exists(px.ft_dir))
      throw UpstreamArtifactError("finetuned checkpoint not found: " + px.ft_dir.string());
    note_stage(m, "organism", false, 0);
    return;
  }
  lab::OrganismSpec spec = lab::organism_spec_from_yaml(px.cfg.organism_spec);
  lab::LabDefaults defaults;
  bool built = ensure_organism(spec, px.cfg.organism_dir, defaults);
  px.refresh_organism_metadata();
  px.store.put_file("organism.json", fs::path(px.cfg.organism_dir) / "organism.json");
  long passes = long(defaults.base_recipe.steps) * defaults.base_recipe.batch_docs +
                long(spec.recipe.steps) * spec.recipe.batch_docs;
  note_stage(m, "organism", built, passes);
}

inline void stage_extract(PipelineContext& px, RunManifest& m) {
  const auto& texts = px.eval_texts();
  const int layer = px.resolved_layer();
  nlohmann::json stamp = {
      {"params",
       {{"k", px.cfg.k},
        {"layer", layer},
        {"max_corpus_samples", px.cfg.max_corpus_samples},
        {"seed", px.cfg.seed},
        {"eval_corpus", px.cfg.eval_corpus}}},
      {"inputs",
       {{"base_checkpoint", hash_path(px.base_dir)},
        {"ft_checkpoint", hash_path(px.ft_dir)},
        {"eval_corpus", corpus_digest(texts)}}}};
  const std::vector<std::string> outs = {"diff.adlweights", "diff.adlmeta.json"};
  if (stage_is_fresh(px.store, "extract", stamp, outs)) {
    note_stage(m, "extract", false, 0);
    return;
  }
  DiffOptions opt;
  opt.layer = layer;
  opt.k = px.cfg.k;
  opt.max_samples = size_t(px.cfg.max_corpus_samples);
  DiffStats stats = extract_model_diff(px.base(), px.ft(), texts, opt);

  fs::path work = fs::path(px.cfg.out_dir) / "work";
  fs::create_directories(work);
  save_diff(work / "diff", stats);
  px.store.put_file("diff.adlweights", work / "diff.adlweights");
  px.store.put_file("diff.adlmeta.json", work / "diff.adlmeta.json");
  write_stamp(px.store, "extract", stamp);
  note_stage(m, "extract", true, 2 * stats.samples_used);
}

inline void stage_lens(PipelineContext& px, RunManifest& m, Gateway& gw) {
  nlohmann::json stamp = {
      {"params", {{"positions", px.cfg.positions}, {"grader_model", px.cfg.grader_model}}},
      {"inputs",
       {{"diff.adlweights", px.store.hash_of("diff.adlweights")},
        {"diff.adlmeta.json", px.store.hash_of("diff.adlmeta.json")}}}};
  const std::vector<std::string> outs = {"logitlens.json", "patchscope.json"};
  if (stage_is_fresh(px.store, "lens", stamp, outs)) {
    note_stage(m, "lens", false, 0);
    return;
  }
  DiffStats diff = px.load_stored_diff();
  px.store.put_text("logitlens.json",
                    logitlens_artifact(px.ft(), diff, px.cfg.positions, 20).dump(2) + "\n");

  PatchscopeOptions popt;
  popt.grader_model = px.cfg.grader_model;
  std::vector<PatchscopeReport> reports;
  long passes = 0;
  for (int p : px.cfg.positions) {
    reports.push_back(run_patchscope(px.ft(), diff, p, gw, popt));
    passes += long(popt.scales.size()) * long(popt.triples.size());
  }
  px.store.put_text("patchscope.json", patchscope_artifact(reports).dump(2) + "\n");
  write_stamp(px.store, "lens", stamp);
  note_stage(m, "lens", true, passes);
}

inline void stage_steer(PipelineContext& px, RunManifest& m, Gateway& gw) {
  const int position = px.cfg.positions.front();
  nlohmann::json stamp = {
      {"params",
       {{"position", position}, {"grader_model", px.cfg.grader_model}, {"seed", px.cfg.seed}}},
      {"inputs",
       {{"diff.adlweights", px.store.hash_of("diff.adlweights")},
        {"diff.adlmeta.json", px.store.hash_of("diff.adlmeta.json")}}}};
  const std::vector<std::string> outs = {"calibration.json", "steering.jsonl"};
  if (stage_is_fresh(px.store, "steer", stamp, outs)) {
    note_stage(m, "steer", false, 0);
    return;
  }
  DiffStats diff = px.load_stored_diff();
  SteeringOptions opt;
  opt.grader_model = px.cfg.grader_model;
  opt.seed = px.cfg.seed;
  SteeringCalibration cal = calibrate_alpha(px.ft(), diff, position, gw, opt);
  px.store.put_text("calibration.json", calibration_artifact(cal).dump(2) + "\n");

  auto batches = steer_generate(px.ft(), diff, cal, default_steering_prompts(), opt);
  fs::path work = fs::path(px.cfg.out_dir) / "work";
  fs::create_directories(work);
  save_steered_batches(work / "steering.jsonl", batches);
  px.store.put_file("steering.jsonl", work / "steering.jsonl");
  write_stamp(px.store, "steer", stamp);

  long passes = long(batches.size()) * 2 * opt.final_samples;
  for (const auto& t : cal.traces) passes += long(t.probes.size()) * opt.gens_per_midpoint;
  note_stage(m, "steer", true, passes);
}

inline void stage_metrics(PipelineContext& px, RunManifest& m, Gateway& gw) {
  const auto& narrow = px.narrow_texts();
  const auto& chat = px.chat_texts();
  nlohmann::json stamp = {
      {"params",
       {{"grader_model", px.cfg.grader_model},
        {"embed_model", px.cfg.embed_model},
        {"embed_dim", px.cfg.embed_dim},
        {"stoplist", px.cfg.stoplist},
        {"seed", px.cfg.seed}}},
      {"inputs",
       {{"logitlens.json", px.store.hash_of("logitlens.json")},
        {"patchscope.json", px.store.hash_of("patchscope.json")},
        {"steering.jsonl", px.store.hash_of("steering.jsonl")},
        {"narrow_corpus", corpus_digest(narrow)},
        {"chat_corpus", corpus_digest(chat)}}}};
  const std::vector<std::string> outs = {"relevance.json", "similarity.json"};
  if (stage_is_fresh(px.store, "metrics", stamp, outs)) {
    note_stage(m, "metrics", false, 0);
    return;
  }

  auto ll_readouts =
      readouts_from_logitlens(nlohmann::json::parse(px.store.read_text("logitlens.json")));
  auto ps_readouts =
      readouts_from_patchscope(nlohmann::json::parse(px.store.read_text("patchscope.json")));
  RelevanceOptions ropt;
  ropt.grader_model = px.cfg.grader_model;
  ropt.seed = px.cfg.seed;
  auto stop = px.stoplist();
  RelevanceReport ll =
      grade_token_relevance("logitlens", ll_readouts, px.objective(), narrow, stop, gw, ropt);
  RelevanceReport ps =
      grade_token_relevance("patchscope", ps_readouts, px.objective(), narrow, stop, gw, ropt);
  px.store.put_text("relevance.json",
                    nlohmann::json{{"objective", px.objective()},
                                   {"logitlens", relevance_artifact(ll)},
                                   {"patchscope", relevance_artifact(ps)}}
                            .dump(2) +
                        "\n");

  auto batches = load_steered_batches(px.store.root() / "steering.jsonl");
  std::vector<std::string> steered;
  std::vector<std::string> unsteered;
  for (const auto& b : batches) {
    steered.insert(steered.end(), b.steered_texts.begin(), b.steered_texts.end());
    unsteered.insert(unsteered.end(), b.unsteered_texts.begin(), b.unsteered_texts.end());
  }
  SimilarityOptions sopt;
  sopt.seed = px.cfg.seed;
  SimilarityReport sim;
  if (px.cfg.embed_model.empty()) {
    std::vector<std::string> reference = narrow;
    reference.insert(reference.end(), chat.begin(), chat.end());
    BowTfidfEmbedder embedder(reference);
    sim = similarity_report(steered, unsteered, narrow, chat, embedder, sopt);
  } else {
    GatewayEmbedder embedder(gw, px.cfg.embed_model, px.cfg.embed_dim);
    sim = similarity_report(steered, unsteered, narrow, chat, embedder, sopt);
  }
  px.store.put_text("similarity.json", similarity_artifact(sim).dump(2) + "\n");
  write_stamp(px.store, "metrics", stamp);
  note_stage(m, "metrics", true, 0);
}

inline void stage_causal(PipelineContext& px, RunManifest& m) {
  const auto& narrow = px.narrow_texts();
  const auto& eval = px.eval_texts();
  nlohmann::json stamp = {
      {"params", {{"positions", px.cfg.positions}, {"seed", px.cfg.seed}}},
      {"inputs",
       {{"diff.adlweights", px.store.hash_of("diff.adlweights")},
        {"diff.adlmeta.json", px.store.hash_of("diff.adlmeta.json")},
        {"narrow_corpus", corpus_digest(narrow)},
        {"eval_corpus", corpus_digest(eval)}}}};
  const std::vector<std::string> outs = {"causal.json"};
  if (stage_is_fresh(px.store, "causal", stamp, outs)) {
    note_stage(m, "causal", false, 0);
    return;
  }
  DiffStats diff = px.load_stored_diff();
  CausalOptions opt;
  opt.seed = px.cfg.seed;

  auto scoreable = [&](const std::vector<std::string>& texts) {
    long n = 0;
    for (const auto& t : texts) {
      if (n == opt.max_docs) break;
      if (px.ft().encode(t).size() >= 2) ++n;
    }
    return n;
  };
  const long pt_docs = scoreable(eval);

  nlohmann::json arr = nlohmann::json::array();
  long passes = 0;
  for (int p : px.cfg.positions) {
    CausalEffectReport r = causal_report(px.base(), px.ft(), diff, p, narrow, eval, opt);
    arr.push_back(causal_report_to_json(r));
    const long ft_docs = r.num_eval_samples;
    passes += 3 * ft_docs + 3 * pt_docs + long(opt.num_random_vectors) * ft_docs;
  }
  px.store.put_text("causal.json", arr.dump(2) + "\n");
  write_stamp(px.store, "causal", stamp);
  note_stage(m, "causal", true, passes);
}

inline void stage_agent(PipelineContext& px, RunManifest& m, Gateway& gw) {
  nlohmann::json stamp = {
      {"params",
       {{"agent_variant", px.cfg.agent_variant},
        {"agent_budget", px.cfg.agent_budget},
        {"agent_reruns", px.cfg.agent_reruns},
        {"agent_model", px.cfg.agent_model},
        {"grader_model", px.cfg.grader_model},
        {"seed", px.cfg.seed}}},
      {"inputs",
       {{"logitlens.json", px.store.hash_of("logitlens.json")},
        {"patchscope.json", px.store.hash_of("patchscope.json")},
        {"steering.jsonl", px.store.hash_of("steering.jsonl")},
        {"calibration.json", px.store.hash_of("calibration.json")},
        {"base_checkpoint", hash_path(px.base_dir)},
        {"ft_checkpoint", hash_path(px.ft_dir)}}}};
  std::vector<std::string> outs = {"agent_grades.json"};
  for (int r = 1; r <= px.cfg.agent_reruns; ++r)
    outs.push_back("agent_run_" + std::to_string(r) + ".jsonl");
  if (stage_is_fresh(px.store, "agent", stamp, outs)) {
    note_stage(m, "agent", false, 0);
    return;
  }

  DiffStats diff = px.load_stored_diff();
  nlohmann::json cal;
  try {
    cal = nlohmann::json::parse(px.store.read_text("calibration.json"));
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError(std::string("bad calibration artifact: ") + e.what());
  }

  AgentConfig acfg;
  acfg.variant = agent_variant_from_string(px.cfg.agent_variant);
  acfg.interaction_budget = px.cfg.agent_budget;
  acfg.num_reruns = px.cfg.agent_reruns;
  acfg.agent_model_id = px.cfg.agent_model;
  acfg.seed = px.cfg.seed;

  AgentContext ctx;
  ctx.base = &px.base();
  ctx.ft = &px.ft();
  ctx.diff = &diff;
  ctx.alpha = cal.value("final_alpha", 0.0);
  ctx.position = cal.value("position", px.cfg.positions.front());
  ctx.artifacts.logitlens =
      readouts_from_logitlens(nlohmann::json::parse(px.store.read_text("logitlens.json")));
  ctx.artifacts.patchscope =
      readouts_from_patchscope(nlohmann::json::parse(px.store.read_text("patchscope.json")));
  ctx.artifacts.steering = load_steered_batches(px.store.root() / "steering.jsonl");

  GradeOptions gopt;
  gopt.grader_model = px.cfg.grader_model;
  AgentEvaluation eval = evaluate_agent(acfg, ctx, px.objective(), "sdf", gw, gopt);

  fs::path work = fs::path(px.cfg.out_dir) / "work";
  fs::create_directories(work);
  long passes = 0;
  nlohmann::json per_run = nlohmann::json::array();
  for (size_t r = 0; r < eval.transcripts.size(); ++r) {
    const auto& t = eval.transcripts[r];
    std::string name = "agent_run_" + std::to_string(r + 1) + ".jsonl";
    save_transcript(work / name, t);
    px.store.put_file(name, work / name);
    passes += 2 * t.interactions_used;
    per_run.push_back({{"interactions_used", t.interactions_used},
                       {"turns_used", t.turns_used},
                       {"stop_reason", to_string(t.terminated_reason)}});
  }
  px.store.put_text("agent_grades.json",
                    nlohmann::json{{"variant", px.cfg.agent_variant},
                                   {"interaction_budget", px.cfg.agent_budget},
                                   {"num_reruns", px.cfg.agent_reruns},
                                   {"mean_score", eval.aggregate.mean_score},
                                   {"scores", eval.aggregate.scores},
                                   {"grading_failures", eval.grading_failures},
                                   {"runs", per_run}}
                            .dump(2) +
                        "\n");
  write_stamp(px.store, "agent", stamp);
  note_stage(m, "agent", true, passes);
}

inline void stage_report(PipelineContext& px, RunManifest& m) {
  ReportResult res = emit_report(px.store, fs::path(px.cfg.out_dir) / "report");
  for (const auto& file : res.written)
    px.store.put_file(file.filename().string(), file);
  note_stage(m, "report", true, 0);
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Entry points
// ----------------------------------------------------------------------------

inline std::map<std::string, std::string> tool_versions() {
  return {{"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

inline RunManifest run_pipeline(const RunConfig& cfg, const std::set<Stage>& stages, Gateway& gw) {
  cfg.validate();
  if (stages.empty()) throw ValidationError("no pipeline stages requested");
  fs::create_directories(cfg.out_dir);
  ArtifactStore store(fs::path(cfg.out_dir) / "store");

  RunManifest manifest;
  manifest.config_digest = config_digest(cfg);
  manifest.tool_versions = tool_versions();

  detail::PipelineContext px(cfg, store);
  for (Stage s : all_stages()) {
    if (!stages.count(s)) continue;
    auto t0 = std::chrono::steady_clock::now();
    switch (s) {
      case Stage::organism: detail::stage_organism(px, manifest); break;
      case Stage::extract: detail::stage_extract(px, manifest); break;
      case Stage::lens: detail::stage_lens(px, manifest, gw); break;
      case Stage::steer: detail::stage_steer(px, manifest, gw); break;
      case Stage::metrics: detail::stage_metrics(px, manifest, gw); break;
      case Stage::causal: detail::stage_causal(px, manifest); break;
      case Stage::agent: detail::stage_agent(px, manifest, gw); break;
      case Stage::report: detail::stage_report(px, manifest); break;
    }
    manifest.timings_ms[to_string(s)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  manifest.artifacts = store.index();
  save_run_manifest(manifest, fs::path(cfg.out_dir) / "manifest.json");
  return manifest;
}

// ----------------------------------------------------------------------------
// Sweeps. Both are grader-free: relevance is scored as the exact keyword
// fraction against the organism's domain keywords, so a sweep costs model
// passes but no external calls.
// ----------------------------------------------------------------------------

inline nlohmann::json sweep_positions(const RunConfig& cfg, const std::vector<int>& positions) {
  cfg.validate();
  if (positions.empty()) throw ValidationError("position sweep needs at least one position");
  if (int(positions.size()) > 128) throw ValidationError("position sweep caps at 128 positions");
  int max_pos = 0;
  for (int p : positions) {
    if (p < 0) throw ValidationError("position sweep positions must be >= 0");
    max_pos = std::max(max_pos, p);
  }

  fs::create_directories(cfg.out_dir);
  ArtifactStore store(fs::path(cfg.out_dir) / "store");
  detail::PipelineContext px(cfg, store);
  if (px.domain_keywords.empty())
    throw UpstreamArtifactError(
        "position sweep needs organism domain keywords; run the organism stage first");
  std::set<std::string> keywords(px.domain_keywords.begin(), px.domain_keywords.end());

  DiffOptions opt;
  opt.layer = px.resolved_layer();
  opt.k = max_pos + 1;
  opt.max_samples = size_t(cfg.max_corpus_samples);
  DiffStats diff = extract_model_diff(px.base(), px.ft(), px.eval_texts(), opt);

  nlohmann::json rows = nlohmann::json::array();
  for (int p : positions) {
    auto scored = logit_lens(px.ft(), diff.delta(p), 20);
    std::vector<std::string> tokens;
    for (const auto& ts : scored) tokens.push_back(ts.token);
    rows.push_back({{"position", p},
                    {"delta_norm", diff.position_norms[size_t(p)]},
                    {"keyword_fraction", keyword_fraction(tokens, keywords)},
                    {"tokens", tokens}});
  }
  nlohmann::json out = {{"layer", diff.layer}, {"positions", rows}};
  store.put_text("sweep_positions.json", out.dump(2) + "\n");
  return out;
}

inline nlohmann::json sweep_mix_ratios(const RunConfig& cfg, const std::vector<double>& ratios) {
  cfg.validate();
  if (ratios.empty()) throw ValidationError("mix sweep needs at least one ratio");
  if (cfg.organism_spec.empty())
    throw ValidationError("mix sweep needs an organism_spec to vary");
  for (double r : ratios)
    if (r < 0.0) throw ValidationError("mix ratios must be >= 0");

  fs::create_directories(cfg.out_dir);
  ArtifactStore store(fs::path(cfg.out_dir) / "store");
  lab::OrganismSpec spec = lab::organism_spec_from_yaml(cfg.organism_spec);
  std::set<std::string> keywords(spec.domain_keywords.begin(), spec.domain_keywords.end());
  lab::LabDefaults defaults;

  auto eval =
      !cfg.eval_corpus.empty()
          ? plain_texts(load_corpus(cfg.eval_corpus))
          : lab::generate_general_corpus(cfg.max_corpus_samples,
                                         seed_from_label("eval-corpus", cfg.seed));

  nlohmann::json rows = nlohmann::json::array();
  for (size_t i = 0; i < ratios.size(); ++i) {
    lab::OrganismSpec variant = spec;
    variant.mix_ratio = ratios[i];
    variant.organism_id = spec.organism_id + "-mix" + std::to_string(i);
    fs::path dir = fs::path(cfg.out_dir) / "sweep_mix" / ("r" + std::to_string(i));
    detail::ensure_organism(variant, dir, defaults);

    ModelHandle base = ModelHandle::load(dir / "base");
    ModelHandle ft = ModelHandle::load(dir / "finetuned");
    DiffOptions opt;
    opt.layer = cfg.layer >= 0 ? cfg.layer : base.middle_layer();
    opt.k = cfg.k;
    opt.max_samples = size_t(cfg.max_corpus_samples);
    DiffStats diff = extract_model_diff(base, ft, eval, opt);

    const int best = diff.strongest_position();
    auto scored = logit_lens(ft, diff.delta(best), 20);
    std::vector<std::string> tokens;
    for (const auto& ts : scored) tokens.push_back(ts.token);
    rows.push_back({{"mix_ratio", ratios[i]},
                    {"best_position", best},
                    {"delta_norm", diff.position_norms[size_t(best)]},
                    {"keyword_fraction", keyword_fraction(tokens, keywords)}});
  }
  nlohmann::json out = {{"ratios", rows}};
  store.put_text("sweep_mix.json", out.dump(2) + "\n");
  return out;
}

}  // namespace adl
