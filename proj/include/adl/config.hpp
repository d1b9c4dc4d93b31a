#pragma once

#include <cstdint>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "adl/digest.hpp"
#include "adl/errors.hpp"
#include "adl/gateway.hpp"
#include "adl/io.hpp"

namespace adl {

// ============================================================================
// Run configuration: one declarative file drives the whole pipeline. String
// values may reference environment variables as ${NAME}; unknown keys are
// rejected so typos cannot silently fall back to defaults.
// ============================================================================

struct RunConfig {
  // Model pair: either a lab organism (spec builds/loads it) or an explicit
  // pair of checkpoint directories.
  std::string organism_spec;    // path to an organism yaml
  std::string organism_dir;     // defaults to <out_dir>/organism
  std::string base_checkpoint;  // explicit pair overrides the organism
  std::string ft_checkpoint;

  // Corpora and lexicons.
  std::string eval_corpus;  // unrelated text for extraction; "" = generated
  std::string chat_corpus;  // generic assistant baseline for similarity
  std::string stoplist;     // one token per line
  int max_corpus_samples = 10000;

  // Extraction and analysis geometry.
  int k = 5;
  int layer = -1;  // -1 picks the middle layer
  std::vector<int> positions = {0};

  // External model roles.
  std::string grader_model = "grader-v1";
  std::string agent_model = "agent-v1";
  std::string embed_model;  // "" = deterministic bag-of-words fallback
  int embed_dim = 0;        // required when embed_model is set

  // Agent harness.
  std::string agent_variant = "adl";
  int agent_budget = 5;
  int agent_reruns = 5;

  // Gateway.
  GatewayMode mode = GatewayMode::replay;
  std::string fixtures_dir = "fixtures/sessions";
  std::string session = "toy";

  // Run.
  std::string out_dir = "runs/out";
  uint64_t seed = 0;

  void validate() const {
    const bool have_pair = !base_checkpoint.empty() && !ft_checkpoint.empty();
    const bool half_pair = base_checkpoint.empty() != ft_checkpoint.empty();
    if (half_pair)
      throw ValidationError("config: base_checkpoint and ft_checkpoint must be set together");
    if (organism_spec.empty() && !have_pair)
      throw ValidationError("config: need an organism_spec or an explicit checkpoint pair");
    if (max_corpus_samples < 1) throw ValidationError("config: max_corpus_samples must be >= 1");
    if (k < 1) throw ValidationError("config: k must be >= 1");
    if (positions.empty()) throw ValidationError("config: positions is empty");
    for (int p : positions)
      if (p < 0 || p >= k)
        throw ValidationError("config: position " + std::to_string(p) +
                              " is outside [0, k)");
    if (grader_model.empty() || agent_model.empty())
      throw ValidationError("config: grader_model and agent_model are required");
    if (!embed_model.empty() && embed_dim < 1)
      throw ValidationError("config: embed_dim must be >= 1 when embed_model is set");
    if (agent_variant != "adl" && agent_variant != "blackbox")
      throw ValidationError("config: agent_variant must be adl or blackbox");
    if (agent_budget < 0) throw ValidationError("config: agent_budget must be >= 0");
    if (agent_reruns < 1) throw ValidationError("config: agent_reruns must be >= 1");
    if (session.empty()) throw ValidationError("config: session is required");
    if (out_dir.empty()) throw ValidationError("config: out_dir is required");
  }
};

namespace detail {

/// ${NAME} -> getenv(NAME); an unset variable is a configuration error.
inline std::string interpolate_env(const std::string& raw) {
  std::string out;
  size_t i = 0;
  while (i < raw.size()) {
    if (raw[i] == '$' && i + 1 < raw.size() && raw[i + 1] == '{') {
      size_t close = raw.find('}', i + 2);
      if (close == std::string::npos)
        throw ValidationError("config: unterminated ${ in value '" + raw + "'");
      std::string name = raw.substr(i + 2, close - i - 2);
      if (name.empty()) throw ValidationError("config: empty ${} in value '" + raw + "'");
      const char* v = std::getenv(name.c_str());
      if (!v)
        throw ValidationError("config: environment variable '" + name + "' is not set");
      out += v;
      i = close + 1;
    } else {
      out += raw[i++];
    }
  }
  return out;
}

}  // namespace detail

inline RunConfig run_config_from_yaml(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("config file not found: " + path.string());

  static const std::set<std::string> known = {
      "organism_spec", "organism_dir", "base_checkpoint", "ft_checkpoint",
      "eval_corpus",   "chat_corpus",  "stoplist",        "max_corpus_samples",
      "k",             "layer",        "positions",       "grader_model",
      "agent_model",   "embed_model",  "embed_dim",       "agent_variant",
      "agent_budget",  "agent_reruns", "mode",            "fixtures_dir",
      "session",       "out_dir",      "seed",
  };

  RunConfig c;
  try {
    YAML::Node root = YAML::LoadFile(path.string());
    if (!root.IsMap()) throw ValidationError("config must be a yaml mapping: " + path.string());
    for (const auto& kv : root) {
      const std::string key = kv.first.as<std::string>();
      if (!known.count(key))
        throw ValidationError("config: unknown key '" + key + "' in " + path.string());
    }
    auto str = [&](const char* key, std::string& into) {
      if (root[key]) into = detail::interpolate_env(root[key].as<std::string>());
    };
    str("organism_spec", c.organism_spec);
    str("organism_dir", c.organism_dir);
    str("base_checkpoint", c.base_checkpoint);
    str("ft_checkpoint", c.ft_checkpoint);
    str("eval_corpus", c.eval_corpus);
    str("chat_corpus", c.chat_corpus);
    str("stoplist", c.stoplist);
    if (root["max_corpus_samples"]) c.max_corpus_samples = root["max_corpus_samples"].as<int>();
    if (root["k"]) c.k = root["k"].as<int>();
    if (root["layer"]) c.layer = root["layer"].as<int>();
    if (root["positions"]) c.positions = root["positions"].as<std::vector<int>>();
    str("grader_model", c.grader_model);
    str("agent_model", c.agent_model);
    str("embed_model", c.embed_model);
    if (root["embed_dim"]) c.embed_dim = root["embed_dim"].as<int>();
    str("agent_variant", c.agent_variant);
    if (root["agent_budget"]) c.agent_budget = root["agent_budget"].as<int>();
    if (root["agent_reruns"]) c.agent_reruns = root["agent_reruns"].as<int>();
    if (root["mode"])
      c.mode = gateway_mode_from_string(detail::interpolate_env(root["mode"].as<std::string>()));
    str("fixtures_dir", c.fixtures_dir);
    str("session", c.session);
    str("out_dir", c.out_dir);
    if (root["seed"]) c.seed = root["seed"].as<uint64_t>();
  } catch (const YAML::Exception& e) {
    throw ValidationError("failed to parse config " + path.string() + ": " + e.what());
  }
  if (c.organism_dir.empty()) c.organism_dir = c.out_dir + "/organism";
  c.validate();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{{"organism_spec", c.organism_spec},
                        {"organism_dir", c.organism_dir},
                        {"base_checkpoint", c.base_checkpoint},
                        {"ft_checkpoint", c.ft_checkpoint},
                        {"eval_corpus", c.eval_corpus},
                        {"chat_corpus", c.chat_corpus},
                        {"stoplist", c.stoplist},
                        {"max_corpus_samples", c.max_corpus_samples},
                        {"k", c.k},
                        {"layer", c.layer},
                        {"positions", c.positions},
                        {"grader_model", c.grader_model},
                        {"agent_model", c.agent_model},
                        {"embed_model", c.embed_model},
                        {"embed_dim", c.embed_dim},
                        {"agent_variant", c.agent_variant},
                        {"agent_budget", c.agent_budget},
                        {"agent_reruns", c.agent_reruns},
                        {"mode", to_string(c.mode)},
                        {"fixtures_dir", c.fixtures_dir},
                        {"session", c.session},
                        {"out_dir", c.out_dir},
                        {"seed", c.seed}};
}

inline std::string config_digest(const RunConfig& c) {
  return sha256_hex(run_config_to_json(c).dump());
}

}  // namespace adl
