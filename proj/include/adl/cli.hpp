#pragma once

#include <cstdio>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adl/pipeline.hpp"

namespace adl {

namespace detail {

/// Backend selection: replay needs none; live and record need the HTTP stack,
/// which only the shipped binary compiles in.
inline Gateway make_cli_gateway(const RunConfig& cfg) {
  GatewayConfig g;
  g.mode = cfg.mode;
  g.fixtures_dir = cfg.fixtures_dir;
  g.session = cfg.session;
  std::unique_ptr<ChatBackend> backend;
  if (cfg.mode != GatewayMode::replay) {
#ifdef ADL_ENABLE_HTTP
    backend = std::make_unique<HttpChatBackend>();
#else
    throw ValidationError(
        "this binary was built without the HTTP backend; only replay mode is available");
#endif
  }
  return Gateway(std::move(g), std::move(backend));
}

inline void print_manifest_summary(const RunManifest& m, const RunConfig& cfg) {
  for (const auto& name : m.stages_run) {
    auto t = m.timings_ms.find(name);
    auto p = m.model_passes.find(name);
    std::printf("stage %-8s ran      %10.1f ms  %ld model passes\n", name.c_str(),
                t != m.timings_ms.end() ? t->second : 0.0,
                p != m.model_passes.end() ? p->second : 0L);
  }
  for (const auto& name : m.stages_skipped)
    std::printf("stage %-8s cached\n", name.c_str());
  std::printf("artifacts: %s\n", (fs::path(cfg.out_dir) / "store").string().c_str());
  std::printf("manifest:  %s\n", (fs::path(cfg.out_dir) / "manifest.json").string().c_str());
}

struct CliOverrides {
  std::optional<std::string> mode;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
};

inline RunConfig load_cli_config(const std::string& path, const CliOverrides& ov) {
  if (path.empty())
    throw ValidationError("this command needs --config pointing at a run configuration");
  RunConfig cfg = run_config_from_yaml(path);
  if (ov.mode) cfg.mode = gateway_mode_from_string(*ov.mode);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out) {
    const bool organism_dir_defaulted = cfg.organism_dir == cfg.out_dir + "/organism";
    cfg.out_dir = *ov.out;
    if (organism_dir_defaulted) cfg.organism_dir = cfg.out_dir + "/organism";
  }
  cfg.validate();
  return cfg;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"model diffing via per-position activation differences"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  detail::CliOverrides ov;
  app.add_option("--config", config_path, "run configuration yaml");
  app.add_option("--mode", ov.mode, "gateway mode override: live, record, or replay");
  app.add_option("--seed", ov.seed, "seed override");
  app.add_option("--out", ov.out, "output directory override");

  auto* c_extract = app.add_subcommand(
      "extract", "train or load the model pair and extract the activation difference");
  auto* c_lens = app.add_subcommand("lens", "logit lens and patchscope readouts");
  auto* c_steer = app.add_subcommand("steer", "calibrate the steering strength and generate");
  auto* c_metrics = app.add_subcommand("metrics", "token relevance and similarity scores");
  auto* c_causal = app.add_subcommand("causal", "projection-replacement causal probe");
  auto* c_report = app.add_subcommand("report", "render the markdown and HTML report");
  auto* c_all = app.add_subcommand("all", "run every pipeline stage in order");

  auto* c_agent = app.add_subcommand("agent", "interpretability agent harness");
  auto* c_agent_run = c_agent->add_subcommand("run", "evaluate the agent on this organism");
  std::optional<std::string> agent_variant;
  std::optional<int> agent_budget;
  std::optional<int> agent_reruns;
  c_agent_run->add_option("--variant", agent_variant, "adl or blackbox");
  c_agent_run->add_option("--budget", agent_budget, "model interaction budget");
  c_agent_run->add_option("--reruns", agent_reruns, "independent agent runs to average");

  auto* c_lab = app.add_subcommand("lab", "toy organism utilities");
  auto* c_lab_make = c_lab->add_subcommand("make-organism", "build a toy organism from a spec");
  std::string lab_spec;
  std::string lab_out = "runs/organism";
  c_lab_make->add_option("--spec", lab_spec, "organism spec yaml")->required();
  c_lab_make->add_option("--out", lab_out, "organism output directory");

  auto* c_sweep = app.add_subcommand("sweep", "grader-free parameter sweeps");
  std::vector<int> sweep_pos;
  std::vector<double> sweep_mix;
  c_sweep->add_option("--positions", sweep_pos, "positions to profile")->delimiter(',');
  c_sweep->add_option("--mix-ratios", sweep_mix, "pretraining-data mix ratios to train")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (c_lab_make->parsed()) {
      lab::OrganismSpec spec = lab::organism_spec_from_yaml(lab_spec);
      bool built = detail::ensure_organism(spec, lab_out);
      std::printf("%s organism '%s' at %s\n", built ? "built" : "found up-to-date",
                  spec.organism_id.c_str(), lab_out.c_str());
      std::printf("base:      %s\n", (fs::path(lab_out) / "base").string().c_str());
      std::printf("finetuned: %s\n", (fs::path(lab_out) / "finetuned").string().c_str());
      return 0;
    }

    if (c_sweep->parsed()) {
      if (sweep_pos.empty() == sweep_mix.empty())
        throw ValidationError("sweep needs exactly one of --positions or --mix-ratios");
      RunConfig cfg = detail::load_cli_config(config_path, ov);
      nlohmann::json out = sweep_pos.empty() ? sweep_mix_ratios(cfg, sweep_mix)
                                             : sweep_positions(cfg, sweep_pos);
      const char* name = sweep_pos.empty() ? "sweep_mix.json" : "sweep_positions.json";
      std::printf("wrote %s\n", (fs::path(cfg.out_dir) / "store" / name).string().c_str());
      return 0;
    }

    std::set<Stage> stages;
    if (c_extract->parsed()) stages = {Stage::organism, Stage::extract};
    else if (c_lens->parsed()) stages = {Stage::lens};
    else if (c_steer->parsed()) stages = {Stage::steer};
    else if (c_metrics->parsed()) stages = {Stage::metrics};
    else if (c_causal->parsed()) stages = {Stage::causal};
    else if (c_report->parsed()) stages = {Stage::report};
    else if (c_agent_run->parsed()) stages = {Stage::agent};
    else if (c_agent->parsed())
      throw ValidationError("the agent command needs a subcommand; try 'agent run'");
    else if (c_all->parsed())
      stages = {Stage::organism, Stage::extract, Stage::lens,  Stage::steer,
                Stage::metrics,  Stage::causal,  Stage::agent, Stage::report};
    else
      throw ValidationError("no command given");

    RunConfig cfg = detail::load_cli_config(config_path, ov);
    if (agent_variant) cfg.agent_variant = *agent_variant;
    if (agent_budget) cfg.agent_budget = *agent_budget;
    if (agent_reruns) cfg.agent_reruns = *agent_reruns;
    cfg.validate();

    Gateway gw = detail::make_cli_gateway(cfg);
    RunManifest manifest = run_pipeline(cfg, stages, gw);
    detail::print_manifest_summary(manifest, cfg);
    return 0;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return int(e.error_class());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace adl
