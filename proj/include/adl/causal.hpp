#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adl/diff.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"
#include "adl/model.hpp"
#include "adl/projection.hpp"
#include "adl/rng.hpp"

namespace adl {

// ============================================================================
// Causal probe: replace the finetuned model's residual component along a
// direction with the base model's component at every position, and measure
// the cross-entropy change against random-direction baselines.
// ============================================================================

struct CausalOptions {
  int max_docs = 512;          // evaluation subset cap per dataset
  int num_random_vectors = 50; // baseline directions
  uint64_t seed = 0;
};

struct CausalEffectReport {
  int position = 0;
  double delta_ce_ft = 0.0;      // on the finetuning dataset
  double delta_ce_pt = 0.0;      // on the pretraining-style dataset
  double baseline_mean = 0.0;    // random directions on the finetuning dataset
  double baseline_sigma = 0.0;
  int num_random_vectors = 0;
  int num_eval_samples = 0;      // finetuning documents actually used
};

namespace detail {

struct CausalSample {
  std::vector<int> ids;
  RMatF base_resid;  // layer-l residuals of the base model, one row per position
};

struct CausalDataset {
  int layer = 0;
  std::vector<CausalSample> samples;
  double clean_ce = 0.0;  // finetuned model, no intervention
};

inline CausalDataset prepare_causal_dataset(const ModelHandle& base, const ModelHandle& ft,
                                            const std::vector<std::string>& texts, int layer,
                                            int max_docs) {
  if (texts.empty()) throw ValidationError("causal probe needs a non-empty dataset");
  if (max_docs < 1) throw ValidationError("causal probe needs max_docs >= 1");
  if (base.tokenizer().fingerprint() != ft.tokenizer().fingerprint())
    throw ValidationError("causal probe needs models with identical tokenizers");
  if (base.num_layers() != ft.num_layers())
    throw ValidationError("causal probe needs models with matching depth");

  CausalDataset ds;
  ds.layer = layer;
  double ce_sum = 0.0;
  const size_t n = std::min(texts.size(), size_t(max_docs));
  for (size_t i = 0; i < n; ++i) {
    std::vector<int> ids = ft.encode(texts[i]);
    if (int(ids.size()) > ft.max_context()) ids.resize(size_t(ft.max_context()));
    if (ids.size() < 2) continue;
    CausalSample s;
    s.base_resid = base.capture_all(ids, layer);
    ce_sum += ft.sequence_ce(ids);
    s.ids = std::move(ids);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty())
    throw ValidationError("causal probe found no usable documents (all too short)");
  ds.clean_ce = ce_sum / double(ds.samples.size());
  return ds;
}

inline double intervened_ce(const ModelHandle& ft, const CausalDataset& ds,
                            const Eigen::VectorXf& direction) {
  double sum = 0.0;
  for (const auto& s : ds.samples) {
    Intervention iv;
    iv.kind = InterventionKind::project_replace;
    iv.layer = ds.layer;
    iv.payload = s.base_resid;
    iv.direction = direction;
    sum += ft.sequence_ce(s.ids, &iv);
  }
  return sum / double(ds.samples.size());
}

inline std::pair<double, double> baseline_on_dataset(const ModelHandle& ft,
                                                     const CausalDataset& ds, int num_vectors,
                                                     double norm, uint64_t seed) {
  if (num_vectors < 1) throw ValidationError("baseline needs num_vectors >= 1");
  if (!(norm > 0.0)) throw NumericError("baseline direction norm must be > 0");
  Rng rng(seed);
  const int d = ft.hidden_dim();
  double sum = 0.0;
  double sq = 0.0;
  for (int i = 0; i < num_vectors; ++i) {
    Eigen::VectorXf dir(d);
    for (int c = 0; c < d; ++c) dir(c) = float(rng.normal());
    float raw = dir.norm();
    if (raw == 0.0f) {
      dir.setZero();
      dir(0) = 1.0f;
      raw = 1.0f;
    }
    dir *= float(norm) / raw;
    double effect = intervened_ce(ft, ds, dir) - ds.clean_ce;
    sum += effect;
    sq += effect * effect;
  }
  double mean = sum / double(num_vectors);
  double var = std::max(0.0, sq / double(num_vectors) - mean * mean);
  return {mean, std::sqrt(var)};
}

}  // namespace detail

/// Mean intervened cross-entropy minus mean clean cross-entropy of the
/// finetuned model, where the intervention swaps in the base model's
/// component along `direction` at every position of the chosen layer.
inline double causal_effect(const ModelHandle& base, const ModelHandle& ft,
                            const Eigen::VectorXf& direction,
                            const std::vector<std::string>& texts, int layer,
                            const CausalOptions& opt = {}) {
  if (direction.norm() == 0.0f)
    throw NumericError("causal probe direction has zero norm");
  auto ds = detail::prepare_causal_dataset(base, ft, texts, layer, opt.max_docs);
  return detail::intervened_ce(ft, ds, direction) - ds.clean_ce;
}

/// Mean and standard deviation of causal_effect over isotropic random
/// directions scaled to `norm`. Deterministic in the seed.
inline std::pair<double, double> random_baseline(const ModelHandle& base, const ModelHandle& ft,
                                                 const std::vector<std::string>& texts, int layer,
                                                 int num_vectors, double norm, uint64_t seed,
                                                 const CausalOptions& opt = {}) {
  auto ds = detail::prepare_causal_dataset(base, ft, texts, layer, opt.max_docs);
  return detail::baseline_on_dataset(ft, ds, num_vectors, norm, seed);
}

/// Full position report: effect on both datasets plus the random baseline
/// band measured on the finetuning dataset at the probed direction's norm.
inline CausalEffectReport causal_report(const ModelHandle& base, const ModelHandle& ft,
                                        const DiffStats& diff, int position,
                                        const std::vector<std::string>& ft_texts,
                                        const std::vector<std::string>& pt_texts,
                                        const CausalOptions& opt = {}) {
  Eigen::VectorXf direction = diff.delta(position).transpose();
  const float norm = direction.norm();
  if (!(norm > 0.0f)) throw NumericError("activation difference has zero norm; nothing to probe");

  auto ft_ds = detail::prepare_causal_dataset(base, ft, ft_texts, diff.layer, opt.max_docs);
  auto pt_ds = detail::prepare_causal_dataset(base, ft, pt_texts, diff.layer, opt.max_docs);

  CausalEffectReport report;
  report.position = position;
  report.num_eval_samples = int(ft_ds.samples.size());
  report.delta_ce_ft = detail::intervened_ce(ft, ft_ds, direction) - ft_ds.clean_ce;
  report.delta_ce_pt = detail::intervened_ce(ft, pt_ds, direction) - pt_ds.clean_ce;

  auto [bmean, bsigma] = detail::baseline_on_dataset(
      ft, ft_ds, opt.num_random_vectors, double(norm),
      seed_from_label("causal-baseline", opt.seed));
  report.num_random_vectors = opt.num_random_vectors;
  report.baseline_mean = bmean;
  report.baseline_sigma = bsigma;

  if (!std::isfinite(report.delta_ce_ft) || !std::isfinite(report.delta_ce_pt) ||
      !std::isfinite(report.baseline_mean) || !std::isfinite(report.baseline_sigma))
    throw NumericError("causal effect report contains non-finite values");
  return report;
}

// ----------------------------------------------------------------------------
// Serialization
// ----------------------------------------------------------------------------

inline nlohmann::json causal_report_to_json(const CausalEffectReport& r) {
  return nlohmann::json{{"position", r.position},
                        {"delta_ce_ft", r.delta_ce_ft},
                        {"delta_ce_pt", r.delta_ce_pt},
                        {"baseline_mean", r.baseline_mean},
                        {"baseline_sigma", r.baseline_sigma},
                        {"num_random_vectors", r.num_random_vectors},
                        {"num_eval_samples", r.num_eval_samples}};
}

inline CausalEffectReport causal_report_from_json(const nlohmann::json& j) {
  try {
    CausalEffectReport r;
    r.position = j.at("position").get<int>();
    r.delta_ce_ft = j.at("delta_ce_ft").get<double>();
    r.delta_ce_pt = j.at("delta_ce_pt").get<double>();
    r.baseline_mean = j.at("baseline_mean").get<double>();
    r.baseline_sigma = j.at("baseline_sigma").get<double>();
    r.num_random_vectors = j.at("num_random_vectors").get<int>();
    r.num_eval_samples = j.at("num_eval_samples").get<int>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError(std::string("causal report json is malformed: ") + e.what());
  }
}

inline void save_causal_report(const fs::path& path, const CausalEffectReport& r) {
  write_file_atomic(path, causal_report_to_json(r).dump(2) + "\n");
}

inline CausalEffectReport load_causal_report(const fs::path& path) {
  if (!fs::exists(path))
    throw UpstreamArtifactError("causal report not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError("causal report " + path.string() +
                                " is not valid json: " + e.what());
  }
  return causal_report_from_json(j);
}

}  // namespace adl
