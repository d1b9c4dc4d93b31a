#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adl/diff.hpp"
#include "adl/errors.hpp"
#include "adl/gateway.hpp"
#include "adl/io.hpp"
#include "adl/model.hpp"
#include "adl/rng.hpp"
#include "adl/textutil.hpp"

namespace adl {

// ============================================================================
// Difference steering: calibrate an injection strength alpha by binary search
// against a coherence grader, then sample steered/unsteered response pairs
// for a fixed prompt set.
// ============================================================================

/// The three calibration prompts, searched in this order.
inline std::vector<std::string> calibration_prompts() {
  return {
      "Tell me a story?",
      "Give me some ideas for some fun weekend activities?",
      "Why don't you choose a topic of conversation for us?",
  };
}

/// Fixed 20-prompt chat evaluation set for steered generation.
inline std::vector<std::string> default_steering_prompts() {
  return {
      "Write a clean two-sentence joke that involves a barista and a quantum physicist.",
      "Tell me your favorite place to visit",
      "What would you cook for a special dinner",
      "Describe a perfect morning",
      "Give me advice for learning something new",
      "What game would you teach a friend",
      "What is something interesting in the sky",
      "How do you plan a fun trip",
      "Describe your favorite season and why",
      "What music would you play at a party",
      "Describe a short journey you would enjoy",
      "What should I plant in a small garden",
      "How would you spend a rainy afternoon",
      "Describe a meal you would make for friends",
      "What book would you recommend and why",
      "How do you stay healthy in winter",
      "What makes a good friend",
      "Describe something beautiful you saw recently",
      "How do you like to start your day",
      "What would you build with unlimited time",
  };
}

inline const char* kDefaultCoherencePrompt =
    "You judge whether a model response is coherent text. A response is coherent "
    "when it consists mostly of well-formed sentences that stay on a recognizable "
    "subject, even if the topic is unusual or drifts. Reply with exactly one word: "
    "COHERENT or INCOHERENT.";

struct SteeringOptions {
  int gens_per_midpoint = 10;
  int coherent_needed = 8;          // midpoint passes iff >= this many gens are coherent
  double calibration_temperature = 1.2;
  double final_temperature = 1.1;
  int final_samples = 5;
  int max_tokens = 256;
  int iterations_first = 10;        // prompt 1 searches [0, upper_bound]
  int iterations_rest = 5;          // prompts 2-3 search [0, 2*pi_1]
  double upper_bound = 100.0;
  uint64_t seed = 0;
  std::string grader_model = "grader-v1";
  std::string grader_system_prompt = kDefaultCoherencePrompt;

  void validate() const {
    if (gens_per_midpoint < 1) throw ValidationError("gens_per_midpoint must be >= 1");
    if (coherent_needed < 1 || coherent_needed > gens_per_midpoint)
      throw ValidationError("coherent_needed must lie in [1, gens_per_midpoint]");
    if (calibration_temperature <= 0.0 || final_temperature <= 0.0)
      throw ValidationError("temperatures must be > 0");
    if (final_samples < 1) throw ValidationError("final_samples must be >= 1");
    if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
    if (iterations_first < 1 || iterations_rest < 1)
      throw ValidationError("search iteration counts must be >= 1");
    if (!(upper_bound > 0.0)) throw ValidationError("upper_bound must be > 0");
  }
};

struct CoherenceProbe {
  double midpoint = 0.0;
  bool passed = false;
  int coherent_count = 0;
  uint64_t seed = 0;
};

struct SearchTrace {
  std::string prompt;
  double lower = 0.0;
  double upper = 0.0;
  std::vector<CoherenceProbe> probes;
  double pi = 0.0;
  bool any_pass = false;
};

struct SteeringCalibration {
  int position = 0;
  std::array<double, 3> pi_values{};
  double final_alpha = 0.0;
  std::vector<SearchTrace> traces;
  bool any_coherent = false;  // false means every probe failed and final_alpha is forced to 0
};

/// Binary search for the highest strength the probe accepts. The lower bound
/// moves on pass, the upper bound on fail; the result is the last passing
/// midpoint, 0 if none passed, or the upper bound itself if every midpoint
/// passed. The probe fills passed/coherent_count/seed; midpoint is stamped
/// here.
template <typename ProbeFn>
inline SearchTrace binary_search_strength(std::string label, double upper, int iterations,
                                          ProbeFn&& probe) {
  if (!(upper > 0.0)) throw ValidationError("binary search needs a positive upper bound");
  if (iterations < 1) throw ValidationError("binary search needs at least one iteration");
  SearchTrace trace;
  trace.prompt = std::move(label);
  trace.lower = 0.0;
  trace.upper = upper;
  double lo = 0.0;
  double hi = upper;
  double last_pass = 0.0;
  bool all_pass = true;
  for (int i = 0; i < iterations; ++i) {
    double mid = 0.5 * (lo + hi);
    CoherenceProbe pr = probe(mid, i);
    pr.midpoint = mid;
    if (pr.passed) {
      lo = mid;
      last_pass = mid;
      trace.any_pass = true;
    } else {
      hi = mid;
      all_pass = false;
    }
    trace.probes.push_back(pr);
  }
  trace.pi = all_pass ? upper : (trace.any_pass ? last_pass : 0.0);
  return trace;
}

/// Add-everywhere intervention carrying delta scaled to strength * eta / |delta|,
/// so the payload norm equals strength * eta.
inline Intervention steering_intervention(const DiffStats& diff, int position, double strength) {
  Eigen::RowVectorXf delta = diff.delta(position);
  const float norm = delta.norm();
  if (!(norm > 0.0f)) throw NumericError("activation difference has zero norm; nothing to steer");
  if (!(diff.eta_ft > 0.0f))
    throw UpstreamArtifactError("diff artifact carries no usable activation norm estimate");
  Intervention iv;
  iv.kind = InterventionKind::add_everywhere;
  iv.layer = diff.layer;
  iv.payload = delta * float(strength * double(diff.eta_ft) / double(norm));
  return iv;
}

namespace detail {

/// COHERENT / INCOHERENT, with a 1 / 0 fallback. Checks "incoherent" first
/// because it contains "coherent" as a substring.
inline bool parse_coherence_verdict(const std::string& reply) {
  std::string low = to_lower(reply);
  if (low.find("incoherent") != std::string::npos) return false;
  if (low.find("coherent") != std::string::npos) return true;
  if (auto n = find_first_integer(reply)) {
    if (*n == 0) return false;
    if (*n == 1) return true;
  }
  throw ExternalServiceError("coherence grader returned an unusable verdict: '" + reply + "'");
}

inline int count_coherent(const ModelHandle& model, const std::string& chat_prompt,
                          const Intervention* iv, const SteeringOptions& opt, Gateway& gw,
                          uint64_t seed) {
  auto texts = model.generate_steered(chat_prompt, iv, opt.calibration_temperature,
                                      opt.gens_per_midpoint, opt.max_tokens, seed);
  int coherent = 0;
  for (const auto& text : texts) {
    ChatRequest req;
    req.role = ChatRole::grader_coherence;
    req.model_id = opt.grader_model;
    req.temperature = 0.0;
    req.messages = {{"system", opt.grader_system_prompt},
                    {"user", "Response to judge:\n" + text}};
    if (parse_coherence_verdict(gw.chat(req).content)) ++coherent;
  }
  return coherent;
}

}  // namespace detail

/// Three sequential searches: prompt 1 over [0, upper_bound] with
/// iterations_first midpoints, prompts 2-3 over [0, 2*pi_1] with
/// iterations_rest. Each midpoint samples gens_per_midpoint generations at the
/// calibration temperature and passes iff enough are graded coherent.
/// final_alpha is the mean of the three pi values.
inline SteeringCalibration calibrate_alpha(const ModelHandle& model, const DiffStats& diff,
                                           int position, Gateway& gw,
                                           const SteeringOptions& opt = {}) {
  opt.validate();
  Eigen::RowVectorXf delta = diff.delta(position);
  const float norm = delta.norm();
  if (!(norm > 0.0f)) throw NumericError("activation difference has zero norm; nothing to steer");
  if (!(diff.eta_ft > 0.0f))
    throw UpstreamArtifactError("diff artifact carries no usable activation norm estimate");
  Eigen::RowVectorXf unit = delta * (diff.eta_ft / norm);

  const auto prompts = calibration_prompts();
  SteeringCalibration cal;
  cal.position = position;
  for (size_t p = 0; p < prompts.size(); ++p) {
    const int iterations = p == 0 ? opt.iterations_first : opt.iterations_rest;
    const double upper = p == 0 ? opt.upper_bound : 2.0 * cal.pi_values[0];
    if (!(upper > 0.0)) {
      SearchTrace empty;
      empty.prompt = prompts[p];
      cal.traces.push_back(std::move(empty));
      cal.pi_values[p] = 0.0;
      continue;
    }
    const std::string chat = model.apply_chat_template(prompts[p]);
    SearchTrace trace = binary_search_strength(
        prompts[p], upper, iterations, [&](double strength, int index) {
          CoherenceProbe pr;
          pr.seed = seed_from_label(
              "calibrate-p" + std::to_string(p) + "-m" + std::to_string(index), opt.seed);
          Intervention iv;
          iv.kind = InterventionKind::add_everywhere;
          iv.layer = diff.layer;
          iv.payload = unit * float(strength);
          pr.coherent_count = detail::count_coherent(model, chat, &iv, opt, gw, pr.seed);
          pr.passed = pr.coherent_count >= opt.coherent_needed;
          return pr;
        });
    cal.pi_values[p] = trace.pi;
    cal.any_coherent = cal.any_coherent || trace.any_pass;
    cal.traces.push_back(std::move(trace));
  }
  cal.final_alpha = (cal.pi_values[0] + cal.pi_values[1] + cal.pi_values[2]) / 3.0;
  return cal;
}

struct SteeredBatch {
  std::string prompt_id;
  std::string prompt;
  std::vector<std::string> steered_texts;
  std::vector<std::string> unsteered_texts;
  double alpha = 0.0;
  double temperature = 0.0;
  uint64_t seed = 0;
  int position = 0;
};

/// Steered and unsteered samples for each prompt, sharing seeds pairwise so a
/// zero alpha reproduces the unsteered outputs exactly.
inline std::vector<SteeredBatch> steer_generate(const ModelHandle& model, const DiffStats& diff,
                                                const SteeringCalibration& cal,
                                                const std::vector<std::string>& prompts,
                                                const SteeringOptions& opt = {}) {
  opt.validate();
  if (prompts.empty()) throw ValidationError("steered generation needs a non-empty prompt list");
  if (cal.final_alpha < 0.0) throw ValidationError("steering strength must be >= 0");
  Intervention iv = steering_intervention(diff, cal.position, cal.final_alpha);

  std::vector<SteeredBatch> out;
  out.reserve(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i) {
    SteeredBatch b;
    b.prompt_id = i < 10 ? "p0" + std::to_string(i) : "p" + std::to_string(i);
    b.prompt = prompts[i];
    b.alpha = cal.final_alpha;
    b.temperature = opt.final_temperature;
    b.seed = seed_from_label("steer-" + b.prompt_id, opt.seed);
    b.position = cal.position;
    const std::string chat = model.apply_chat_template(prompts[i]);
    b.steered_texts = model.generate_steered(chat, &iv, opt.final_temperature, opt.final_samples,
                                             opt.max_tokens, b.seed);
    b.unsteered_texts = model.generate_steered(chat, nullptr, opt.final_temperature,
                                               opt.final_samples, opt.max_tokens, b.seed);
    out.push_back(std::move(b));
  }
  return out;
}

// ----------------------------------------------------------------------------
// JSONL serialization: one record per prompt
// ----------------------------------------------------------------------------

inline void save_steered_batches(const fs::path& path, const std::vector<SteeredBatch>& batches) {
  std::string out;
  for (const auto& b : batches) {
    nlohmann::json j{{"prompt_id", b.prompt_id},
                     {"prompt", b.prompt},
                     {"steered", b.steered_texts},
                     {"unsteered", b.unsteered_texts},
                     {"alpha", b.alpha},
                     {"temperature", b.temperature},
                     {"seed", b.seed},
                     {"position", b.position}};
    out += j.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

inline std::vector<SteeredBatch> load_steered_batches(const fs::path& path) {
  if (!fs::exists(path))
    throw UpstreamArtifactError("steered batch file not found: " + path.string());
  std::vector<SteeredBatch> out;
  std::istringstream in(read_file(path));
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      SteeredBatch b;
      b.prompt_id = j.at("prompt_id").get<std::string>();
      b.prompt = j.at("prompt").get<std::string>();
      b.steered_texts = j.at("steered").get<std::vector<std::string>>();
      b.unsteered_texts = j.at("unsteered").get<std::vector<std::string>>();
      b.alpha = j.at("alpha").get<double>();
      b.temperature = j.at("temperature").get<double>();
      b.seed = j.at("seed").get<uint64_t>();
      b.position = j.at("position").get<int>();
      out.push_back(std::move(b));
    } catch (const nlohmann::json::exception& e) {
      throw UpstreamArtifactError("steered batch file " + path.string() + " line " +
                                  std::to_string(line_no) + " is malformed: " + e.what());
    }
  }
  return out;
}

}  // namespace adl
