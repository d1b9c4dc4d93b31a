#include <catch2/catch_amalgamated.hpp>

#include <memory>

#include "adl/lab.hpp"
#include "adl/steering.hpp"
#include "support/mock_backend.hpp"

using namespace adl;
using namespace adl::testing;

namespace {

ModelHandle tiny_model(uint64_t seed) {
  ModelConfig cfg = lab::toy_model_config();
  cfg.model_id = "steer-toy";
  return ModelHandle::random_init(cfg, lab::toy_tokenizer(), seed);
}

DiffStats fake_diff(const ModelHandle& m, const Eigen::RowVectorXf& delta, float eta) {
  DiffStats s;
  s.layer = m.middle_layer();
  s.k = 1;
  s.hidden_dim = m.hidden_dim();
  s.samples_used = 1;
  s.diff = delta;
  s.mean_base = RMatF::Zero(1, m.hidden_dim());
  s.mean_ft = delta;
  s.position_norms = {delta.norm()};
  s.eta_ft = eta;
  return s;
}

DiffStats random_diff(const ModelHandle& m, uint64_t seed, float eta) {
  Rng rng(seed);
  Eigen::RowVectorXf delta(m.hidden_dim());
  for (int i = 0; i < m.hidden_dim(); ++i) delta(i) = float(rng.normal());
  return fake_diff(m, delta, eta);
}

MockedGateway live_mock(MockChatBackend::Handler handler) {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  return make_mock_gateway(std::move(cfg), std::move(handler));
}

// Grader whose verdicts follow a per-midpoint schedule: calls are consumed in
// blocks of ten and block b answers schedule(b, position_in_block).
MockChatBackend::Handler block_grader(std::function<bool(int block, int slot)> schedule) {
  auto counter = std::make_shared<int>(0);
  return [counter, schedule](const ChatRequest&) {
    int call = (*counter)++;
    return schedule(call / 10, call % 10) ? "COHERENT" : "INCOHERENT";
  };
}

void check_trace_brackets(const SearchTrace& t) {
  double lo = t.lower;
  double hi = t.upper;
  double last_pass = 0.0;
  bool all = true;
  bool any = false;
  for (const auto& pr : t.probes) {
    REQUIRE(pr.midpoint == Catch::Approx(0.5 * (lo + hi)).margin(1e-12));
    REQUIRE(pr.midpoint >= lo);
    REQUIRE(pr.midpoint <= hi);
    if (pr.passed) {
      lo = pr.midpoint;
      last_pass = pr.midpoint;
      any = true;
    } else {
      hi = pr.midpoint;
      all = false;
    }
  }
  REQUIRE(t.any_pass == any);
  REQUIRE(t.pi == (all ? t.upper : (any ? last_pass : 0.0)));
  if (any && !all) {
    double max_pass = 0.0;
    for (const auto& pr : t.probes)
      if (pr.passed) max_pass = std::max(max_pass, pr.midpoint);
    REQUIRE(t.pi == max_pass);  // last passing midpoint is also the largest
  }
}

CoherenceProbe oracle_probe(bool pass) {
  CoherenceProbe pr;
  pr.passed = pass;
  pr.coherent_count = pass ? 10 : 0;
  return pr;
}

}  // namespace

TEST_CASE("calibration prompts are the three fixed strings") {
  auto prompts = calibration_prompts();
  REQUIRE(prompts.size() == 3);
  REQUIRE(prompts[0] == "Tell me a story?");
  REQUIRE(prompts[1] == "Give me some ideas for some fun weekend activities?");
  REQUIRE(prompts[2] == "Why don't you choose a topic of conversation for us?");
}

TEST_CASE("evaluation prompt set has twenty distinct chat prompts in vocabulary") {
  auto prompts = default_steering_prompts();
  REQUIRE(prompts.size() == 20);
  REQUIRE(prompts[0] ==
          "Write a clean two-sentence joke that involves a barista and a quantum physicist.");
  std::set<std::string> distinct(prompts.begin(), prompts.end());
  REQUIRE(distinct.size() == 20);

  WordTokenizer tok = lab::toy_tokenizer();
  ModelHandle m = tiny_model(1);
  for (const auto& p : prompts) {
    for (const auto& word : split_whitespace(m.apply_chat_template(p)))
      REQUIRE(tok.token_to_id(word).has_value());
  }
  for (const auto& p : calibration_prompts())
    for (const auto& word : split_whitespace(m.apply_chat_template(p)))
      REQUIRE(tok.token_to_id(word).has_value());
}

TEST_CASE("binary search lands within the analytic bracket of a threshold oracle") {
  const double threshold = 37.2;
  auto trace = binary_search_strength("oracle", 100.0, 10, [&](double mid, int) {
    return oracle_probe(mid <= threshold);
  });
  REQUIRE(trace.probes.size() == 10);
  REQUIRE(trace.any_pass);
  REQUIRE(std::abs(trace.pi - threshold) <= 100.0 / 1024.0 + 1e-9);
  check_trace_brackets(trace);
}

TEST_CASE("binary search boundary cases") {
  auto all_pass = binary_search_strength("up", 100.0, 10, [](double, int) {
    return oracle_probe(true);
  });
  REQUIRE(all_pass.pi == 100.0);
  REQUIRE(all_pass.any_pass);
  check_trace_brackets(all_pass);

  auto none_pass = binary_search_strength("down", 100.0, 10, [](double, int) {
    return oracle_probe(false);
  });
  REQUIRE(none_pass.pi == 0.0);
  REQUIRE_FALSE(none_pass.any_pass);
  check_trace_brackets(none_pass);

  REQUIRE_THROWS_AS(
      binary_search_strength("bad", 0.0, 5, [](double, int) { return oracle_probe(true); }),
      ValidationError);
  REQUIRE_THROWS_AS(
      binary_search_strength("bad", 10.0, 0, [](double, int) { return oracle_probe(true); }),
      ValidationError);
}

TEST_CASE("binary search brackets random thresholds to the halving bound") {
  Rng rng(77);
  for (int round = 0; round < 20; ++round) {
    double threshold = 0.5 + 99.0 * rng.next_double();
    auto trace = binary_search_strength("rand", 100.0, 10, [&](double mid, int) {
      return oracle_probe(mid <= threshold);
    });
    check_trace_brackets(trace);
    REQUIRE(std::abs(trace.pi - threshold) <= 100.0 / 1024.0 + 1e-9);
  }
}

TEST_CASE("steering payload norm equals strength times activation norm") {
  ModelHandle m = tiny_model(2);
  DiffStats diff = random_diff(m, 11, 4.0f);
  for (double alpha : {0.5, 3.0, 100.0}) {
    Intervention iv = steering_intervention(diff, 0, alpha);
    REQUIRE(iv.kind == InterventionKind::add_everywhere);
    REQUIRE(iv.layer == diff.layer);
    REQUIRE(std::abs(double(iv.payload.norm()) - alpha * 4.0) <= 1e-4);
  }

  DiffStats zero = fake_diff(m, Eigen::RowVectorXf::Zero(m.hidden_dim()), 4.0f);
  REQUIRE_THROWS_AS(steering_intervention(zero, 0, 1.0), NumericError);
  DiffStats no_eta = random_diff(m, 12, 0.0f);
  REQUIRE_THROWS_AS(steering_intervention(no_eta, 0, 1.0), UpstreamArtifactError);
}

TEST_CASE("calibration with an always-coherent grader returns the upper bounds") {
  ModelHandle m = tiny_model(3);
  DiffStats diff = random_diff(m, 13, 4.0f);
  auto mg = live_mock(block_grader([](int, int) { return true; }));

  SteeringOptions opt;
  opt.max_tokens = 8;
  opt.seed = 5;
  SteeringCalibration cal = calibrate_alpha(m, diff, 0, mg.gateway, opt);

  REQUIRE(cal.pi_values[0] == 100.0);
  REQUIRE(cal.pi_values[1] == 200.0);
  REQUIRE(cal.pi_values[2] == 200.0);
  REQUIRE(cal.final_alpha == Catch::Approx(500.0 / 3.0));
  REQUIRE(cal.any_coherent);
  REQUIRE(cal.position == 0);
  REQUIRE(cal.traces.size() == 3);
  REQUIRE(cal.traces[0].probes.size() == 10);
  REQUIRE(cal.traces[1].probes.size() == 5);
  REQUIRE(cal.traces[2].probes.size() == 5);
  REQUIRE(mg.backend->calls() == 200);  // (10 + 5 + 5) midpoints, ten gens each
  REQUIRE(mg.gateway.counters()["grader_coherence"].requests == 200);

  std::set<uint64_t> seeds;
  for (const auto& t : cal.traces) {
    check_trace_brackets(t);
    for (const auto& pr : t.probes) {
      REQUIRE(pr.coherent_count == 10);
      REQUIRE(pr.passed);
      seeds.insert(pr.seed);
    }
  }
  REQUIRE(seeds.size() == 20);  // fresh seed per midpoint, recorded in the trace
}

TEST_CASE("calibration with no coherent strength is flagged and skips the narrow searches") {
  ModelHandle m = tiny_model(4);
  DiffStats diff = random_diff(m, 14, 4.0f);
  auto mg = live_mock(block_grader([](int, int) { return false; }));

  SteeringOptions opt;
  opt.max_tokens = 8;
  SteeringCalibration cal = calibrate_alpha(m, diff, 0, mg.gateway, opt);

  REQUIRE(cal.final_alpha == 0.0);
  REQUIRE_FALSE(cal.any_coherent);
  REQUIRE(cal.pi_values == std::array<double, 3>{0.0, 0.0, 0.0});
  REQUIRE(cal.traces.size() == 3);
  REQUIRE(cal.traces[0].probes.size() == 10);
  REQUIRE(cal.traces[1].probes.empty());  // [0, 2*pi_1] is empty when pi_1 = 0
  REQUIRE(cal.traces[2].probes.empty());
  REQUIRE(mg.backend->calls() == 100);
}

TEST_CASE("calibration keeps the last passing midpoint when coherence collapses") {
  ModelHandle m = tiny_model(5);
  DiffStats diff = random_diff(m, 15, 4.0f);
  auto mg = live_mock(block_grader([](int block, int) { return block == 0; }));

  SteeringOptions opt;
  opt.max_tokens = 8;
  SteeringCalibration cal = calibrate_alpha(m, diff, 0, mg.gateway, opt);

  REQUIRE(cal.pi_values[0] == 50.0);  // only the first midpoint of [0,100] passed
  REQUIRE(cal.pi_values[1] == 0.0);
  REQUIRE(cal.pi_values[2] == 0.0);
  REQUIRE(cal.final_alpha == Catch::Approx(50.0 / 3.0));
  REQUIRE(cal.any_coherent);
  REQUIRE(mg.backend->calls() == 200);

  const auto& first = cal.traces[0];
  REQUIRE(first.probes[0].midpoint == 50.0);
  REQUIRE(first.probes[0].passed);
  REQUIRE(first.probes[0].coherent_count == 10);
  REQUIRE(first.probes[1].midpoint == 75.0);
  REQUIRE_FALSE(first.probes[1].passed);
  REQUIRE(first.probes[2].midpoint == 62.5);
  for (const auto& t : cal.traces) check_trace_brackets(t);
}

TEST_CASE("a strength below the coherence quorum fails its midpoint") {
  ModelHandle m = tiny_model(6);
  DiffStats diff = random_diff(m, 16, 4.0f);
  auto mg = live_mock(block_grader([](int, int slot) { return slot < 7; }));

  SteeringOptions opt;
  opt.max_tokens = 8;
  SteeringCalibration cal = calibrate_alpha(m, diff, 0, mg.gateway, opt);

  REQUIRE(cal.final_alpha == 0.0);
  REQUIRE_FALSE(cal.any_coherent);
  for (const auto& pr : cal.traces[0].probes) {
    REQUIRE(pr.coherent_count == 7);  // seven of ten coherent misses the 8/10 rule
    REQUIRE_FALSE(pr.passed);
  }
  REQUIRE(mg.backend->calls() == 100);
}

TEST_CASE("coherence verdict parsing") {
  REQUIRE(detail::parse_coherence_verdict("COHERENT"));
  REQUIRE(detail::parse_coherence_verdict("coherent"));
  REQUIRE_FALSE(detail::parse_coherence_verdict("INCOHERENT"));
  REQUIRE_FALSE(detail::parse_coherence_verdict("The reply is incoherent."));
  REQUIRE(detail::parse_coherence_verdict("verdict: 1"));
  REQUIRE_FALSE(detail::parse_coherence_verdict("0"));
  REQUIRE_THROWS_AS(detail::parse_coherence_verdict("splendid gibberish"),
                    ExternalServiceError);

  ModelHandle m = tiny_model(7);
  DiffStats diff = random_diff(m, 17, 4.0f);
  auto mg = live_mock([](const ChatRequest&) { return "splendid gibberish"; });
  SteeringOptions opt;
  opt.max_tokens = 8;
  REQUIRE_THROWS_AS(calibrate_alpha(m, diff, 0, mg.gateway, opt), ExternalServiceError);
}

TEST_CASE("calibration validates its options and inputs") {
  ModelHandle m = tiny_model(8);
  DiffStats diff = random_diff(m, 18, 4.0f);
  auto mg = live_mock(nullptr);

  SteeringOptions bad;
  bad.gens_per_midpoint = 0;
  REQUIRE_THROWS_AS(calibrate_alpha(m, diff, 0, mg.gateway, bad), ValidationError);
  bad = SteeringOptions{};
  bad.coherent_needed = 11;
  REQUIRE_THROWS_AS(calibrate_alpha(m, diff, 0, mg.gateway, bad), ValidationError);

  DiffStats zero = fake_diff(m, Eigen::RowVectorXf::Zero(m.hidden_dim()), 4.0f);
  REQUIRE_THROWS_AS(calibrate_alpha(m, zero, 0, mg.gateway, SteeringOptions{}), NumericError);
  REQUIRE(mg.backend->calls() == 0);
}

TEST_CASE("zero steering strength reproduces unsteered generations exactly") {
  ModelHandle m = tiny_model(9);
  DiffStats diff = random_diff(m, 19, 4.0f);
  SteeringCalibration cal;
  cal.position = 0;
  cal.final_alpha = 0.0;

  SteeringOptions opt;
  opt.max_tokens = 12;
  auto prompts = default_steering_prompts();
  auto batches = steer_generate(m, diff, cal, prompts, opt);

  REQUIRE(batches.size() == 20);
  REQUIRE(batches.front().prompt_id == "p00");
  REQUIRE(batches.back().prompt_id == "p19");
  for (const auto& b : batches) {
    REQUIRE(b.steered_texts.size() == 5);
    REQUIRE(b.unsteered_texts.size() == 5);
    REQUIRE(b.steered_texts == b.unsteered_texts);
    REQUIRE(b.alpha == 0.0);
    REQUIRE(b.temperature == 1.1);
    REQUIRE(b.position == 0);
  }
}

TEST_CASE("nonzero steering changes outputs and reruns are deterministic") {
  ModelHandle m = tiny_model(10);
  DiffStats diff = random_diff(m, 20, 4.0f);
  SteeringCalibration cal;
  cal.position = 0;
  cal.final_alpha = 20.0;

  SteeringOptions opt;
  opt.max_tokens = 12;
  std::vector<std::string> prompts = {"Tell me a story?", "Describe a perfect morning"};
  auto batches = steer_generate(m, diff, cal, prompts, opt);
  REQUIRE(batches.size() == 2);
  bool any_differs = false;
  for (const auto& b : batches) any_differs = any_differs || b.steered_texts != b.unsteered_texts;
  REQUIRE(any_differs);

  auto rerun = steer_generate(m, diff, cal, prompts, opt);
  for (size_t i = 0; i < batches.size(); ++i) {
    REQUIRE(batches[i].steered_texts == rerun[i].steered_texts);
    REQUIRE(batches[i].unsteered_texts == rerun[i].unsteered_texts);
    REQUIRE(batches[i].seed == rerun[i].seed);
  }

  REQUIRE_THROWS_AS(steer_generate(m, diff, cal, {}, opt), ValidationError);
  SteeringCalibration negative = cal;
  negative.final_alpha = -1.0;
  REQUIRE_THROWS_AS(steer_generate(m, diff, negative, prompts, opt), ValidationError);
}

TEST_CASE("steered batches survive a jsonl round trip") {
  ModelHandle m = tiny_model(11);
  DiffStats diff = random_diff(m, 21, 4.0f);
  SteeringCalibration cal;
  cal.position = 0;
  cal.final_alpha = 3.5;
  SteeringOptions opt;
  opt.max_tokens = 10;
  auto batches = steer_generate(m, diff, cal, {"Tell me a story?"}, opt);

  fs::path dir = fs::temp_directory_path() / "adl_steer_test";
  fs::create_directories(dir);
  fs::path path = dir / "batches.jsonl";
  save_steered_batches(path, batches);
  auto loaded = load_steered_batches(path);
  REQUIRE(loaded.size() == batches.size());
  for (size_t i = 0; i < batches.size(); ++i) {
    REQUIRE(loaded[i].prompt_id == batches[i].prompt_id);
    REQUIRE(loaded[i].prompt == batches[i].prompt);
    REQUIRE(loaded[i].steered_texts == batches[i].steered_texts);
    REQUIRE(loaded[i].unsteered_texts == batches[i].unsteered_texts);
    REQUIRE(loaded[i].alpha == batches[i].alpha);
    REQUIRE(loaded[i].temperature == batches[i].temperature);
    REQUIRE(loaded[i].seed == batches[i].seed);
    REQUIRE(loaded[i].position == batches[i].position);
  }

  REQUIRE_THROWS_AS(load_steered_batches(dir / "absent.jsonl"), UpstreamArtifactError);
  write_file_atomic(dir / "broken.jsonl", "not json\n");
  REQUIRE_THROWS_AS(load_steered_batches(dir / "broken.jsonl"), UpstreamArtifactError);
  fs::remove_all(dir);
}
