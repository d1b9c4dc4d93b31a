#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "adl/causal.hpp"
#include "adl/lab.hpp"
#include "adl/projection.hpp"
#include "adl/rng.hpp"

using namespace adl;

namespace {

ModelHandle tiny_model(uint64_t seed, const std::string& id) {
  ModelConfig cfg = lab::toy_model_config();
  cfg.model_id = id;
  return ModelHandle::random_init(cfg, lab::toy_tokenizer(), seed);
}

std::vector<std::string> eval_texts() {
  return {
      "the cake was in the oven and the bread was warm",
      "a small dog ran across the garden in the morning",
      "she found a book about the river and the old bridge",
  };
}

Eigen::VectorXf random_direction(int dim, uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXf v(dim);
  for (int i = 0; i < dim; ++i) v(i) = float(rng.normal());
  return v;
}

// Reference path that never touches the intervention machinery: capture both
// models' residuals at the final block, project-replace each position by hand,
// and push the result through the readout on its own.
double oracle_effect(const ModelHandle& base, const ModelHandle& ft,
                     const Eigen::VectorXf& direction, const std::vector<std::string>& texts,
                     int layer) {
  double patched_sum = 0.0;
  double clean_sum = 0.0;
  for (const auto& text : texts) {
    std::vector<int> ids = ft.encode(text);
    RMatF hb = base.capture_all(ids, layer);
    RMatF hf = ft.capture_all(ids, layer);
    double doc = 0.0;
    for (Eigen::Index t = 0; t + 1 < Eigen::Index(ids.size()); ++t) {
      Eigen::VectorXf mixed =
          project_replace(Eigen::VectorXf(hf.row(t).transpose()),
                          Eigen::VectorXf(hb.row(t).transpose()), direction);
      Eigen::VectorXf logits = ft.readout_logits(mixed);
      float mx = logits.maxCoeff();
      double lse = 0.0;
      for (Eigen::Index v = 0; v < logits.size(); ++v) lse += std::exp(double(logits[v] - mx));
      lse = std::log(lse) + double(mx);
      doc += lse - double(logits[ids[size_t(t) + 1]]);
    }
    patched_sum += doc / double(ids.size() - 1);
    clean_sum += ft.sequence_ce(ids);
  }
  return (patched_sum - clean_sum) / double(texts.size());
}

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("adl_causal_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("projection replacement keeps off-direction content and swaps the rest") {
  Eigen::VectorXf d(2), hf(2), hb(2);
  d << 1.0f, 0.0f;
  hf << 3.0f, 5.0f;
  hb << 1.0f, 2.0f;
  Eigen::VectorXf out = project_replace(hf, hb, d);
  REQUIRE(out(0) == 1.0f);
  REQUIRE(out(1) == 5.0f);

  // P = d d^T / (d^T d) must be a symmetric idempotent that fixes d, and the
  // replacement must equal P hb + (I - P) hf for arbitrary vectors.
  const int dim = 6;
  Eigen::VectorXf dr = random_direction(dim, 11);
  Eigen::MatrixXf P = dr * dr.transpose() / dr.squaredNorm();
  REQUIRE((P * P - P).cwiseAbs().maxCoeff() <= 1e-6f);
  REQUIRE((P - P.transpose()).cwiseAbs().maxCoeff() <= 1e-6f);
  REQUIRE((P * dr - dr).cwiseAbs().maxCoeff() <= 1e-5f);

  Eigen::VectorXf t = random_direction(dim, 12);
  Eigen::VectorXf s = random_direction(dim, 13);
  Eigen::VectorXf composed = P * s + (Eigen::MatrixXf::Identity(dim, dim) - P) * t;
  Eigen::VectorXf direct = project_replace(t, s, dr);
  REQUIRE((composed - direct).cwiseAbs().maxCoeff() <= 1e-5f);

  // Orthogonal direction leaves the target untouched.
  Eigen::VectorXf d2(2), t2(2), s2(2);
  d2 << 0.0f, 1.0f;
  t2 << 4.0f, 7.0f;
  s2 << -2.0f, 7.0f;
  Eigen::VectorXf same = project_replace(t2, s2, d2);
  REQUIRE(same(0) == 4.0f);
  REQUIRE(same(1) == 7.0f);
}

TEST_CASE("replacing a model's own component leaves cross-entropy unchanged") {
  ModelHandle m = tiny_model(21, "causal-self");
  const int layer = m.num_layers() - 1;
  auto texts = eval_texts();
  for (uint64_t s : {101u, 102u, 103u}) {
    Eigen::VectorXf dir = random_direction(m.hidden_dim(), s);
    double effect = causal_effect(m, m, dir, texts, layer);
    REQUIRE(std::abs(effect) <= 1e-5);
  }
}

TEST_CASE("intervened cross-entropy matches an independent readout oracle") {
  ModelHandle base = tiny_model(31, "causal-base");
  ModelHandle ft = tiny_model(32, "causal-ft");
  auto texts = eval_texts();
  const int layer = ft.num_layers() - 1;

  SECTION("random direction") {
    Eigen::VectorXf dir = random_direction(base.hidden_dim(), 77);
    double expected = oracle_effect(base, ft, dir, texts, layer);
    double actual = causal_effect(base, ft, dir, texts, layer);
    REQUIRE(std::isfinite(actual));
    REQUIRE(actual == Catch::Approx(expected).margin(1e-5));
  }
  SECTION("axis-aligned direction") {
    Eigen::VectorXf dir = Eigen::VectorXf::Zero(base.hidden_dim());
    dir(0) = 2.5f;
    double expected = oracle_effect(base, ft, dir, texts, layer);
    double actual = causal_effect(base, ft, dir, texts, layer);
    REQUIRE(actual == Catch::Approx(expected).margin(1e-5));
  }
  SECTION("repeat runs agree bit for bit") {
    Eigen::VectorXf dir = random_direction(base.hidden_dim(), 78);
    double a = causal_effect(base, ft, dir, texts, layer);
    double b = causal_effect(base, ft, dir, texts, layer);
    REQUIRE(a == b);
  }
}

TEST_CASE("random baseline is seeded and collapses for identical models") {
  ModelHandle base = tiny_model(41, "causal-rb-base");
  ModelHandle ft = tiny_model(42, "causal-rb-ft");
  auto texts = eval_texts();
  const int layer = ft.num_layers() - 1;

  SECTION("identical models give a zero band") {
    auto [mean, sigma] = random_baseline(base, base, texts, layer, 5, 1.5, 9);
    REQUIRE(std::abs(mean) <= 1e-5);
    REQUIRE(sigma <= 1e-5);
  }
  SECTION("same seed reproduces, different seed does not") {
    auto a = random_baseline(base, ft, texts, layer, 4, 2.0, 9);
    auto b = random_baseline(base, ft, texts, layer, 4, 2.0, 9);
    auto c = random_baseline(base, ft, texts, layer, 4, 2.0, 10);
    REQUIRE(a.first == b.first);
    REQUIRE(a.second == b.second);
    REQUIRE(a.first != c.first);
  }
  SECTION("single vector has zero spread") {
    auto [mean, sigma] = random_baseline(base, ft, texts, layer, 1, 2.0, 5);
    REQUIRE(std::isfinite(mean));
    REQUIRE(sigma == 0.0);
  }
}

TEST_CASE("position report populates every field and respects the document cap") {
  ModelHandle base = tiny_model(51, "causal-rep-base");
  ModelHandle ft = tiny_model(52, "causal-rep-ft");
  auto ft_texts = eval_texts();
  ft_texts.push_back("the garden gate was open all day");
  ft_texts.push_back("he put the warm bread on the table");
  auto pt_texts = eval_texts();

  DiffStats diff = extract_model_diff(base, ft, ft_texts, [&] {
    DiffOptions o;
    o.layer = ft.num_layers() - 1;
    return o;
  }());

  CausalOptions opt;
  opt.max_docs = 3;
  opt.num_random_vectors = 4;
  opt.seed = 123;
  CausalEffectReport r = causal_report(base, ft, diff, 0, ft_texts, pt_texts, opt);

  REQUIRE(r.position == 0);
  REQUIRE(r.num_eval_samples == 3);
  REQUIRE(r.num_random_vectors == 4);
  REQUIRE(std::isfinite(r.delta_ce_ft));
  REQUIRE(std::isfinite(r.delta_ce_pt));
  REQUIRE(std::isfinite(r.baseline_mean));
  REQUIRE(r.baseline_sigma >= 0.0);

  CausalEffectReport again = causal_report(base, ft, diff, 0, ft_texts, pt_texts, opt);
  REQUIRE(causal_report_to_json(again).dump() == causal_report_to_json(r).dump());
}

TEST_CASE("degenerate causal inputs are rejected") {
  ModelHandle base = tiny_model(61, "causal-bad-base");
  ModelHandle ft = tiny_model(62, "causal-bad-ft");
  auto texts = eval_texts();
  const int layer = ft.num_layers() - 1;
  Eigen::VectorXf dir = random_direction(base.hidden_dim(), 7);

  SECTION("zero direction") {
    Eigen::VectorXf zero = Eigen::VectorXf::Zero(base.hidden_dim());
    REQUIRE_THROWS_AS(causal_effect(base, ft, zero, texts, layer), NumericError);
  }
  SECTION("empty dataset") {
    REQUIRE_THROWS_AS(causal_effect(base, ft, dir, {}, layer), ValidationError);
  }
  SECTION("every document too short to score") {
    std::vector<std::string> empties = {"", "", ""};
    REQUIRE_THROWS_AS(causal_effect(base, ft, dir, empties, layer), ValidationError);
  }
  SECTION("layer out of range") {
    REQUIRE_THROWS_AS(causal_effect(base, ft, dir, texts, 99), ValidationError);
  }
  SECTION("document cap must be positive") {
    CausalOptions opt;
    opt.max_docs = 0;
    REQUIRE_THROWS_AS(causal_effect(base, ft, dir, texts, layer, opt), ValidationError);
  }
  SECTION("baseline needs at least one vector and a positive norm") {
    REQUIRE_THROWS_AS(random_baseline(base, ft, texts, layer, 0, 1.0, 1), ValidationError);
    REQUIRE_THROWS_AS(random_baseline(base, ft, texts, layer, 3, 0.0, 1), NumericError);
  }
  SECTION("mismatched tokenizers") {
    auto vocab2 = lab::toy_vocabulary();
    vocab2.push_back("zzz-extra");
    WordTokenizer tok2(vocab2);
    ModelConfig cfg2 = lab::toy_model_config();
    cfg2.model_id = "causal-bad-tok";
    cfg2.vocab_size = int(vocab2.size());
    ModelHandle other = ModelHandle::random_init(cfg2, tok2, 63);
    REQUIRE_THROWS_AS(causal_effect(base, other, dir, texts, layer), ValidationError);
  }
}

TEST_CASE("causal report serialization round-trips and rejects damage") {
  CausalEffectReport r;
  r.position = 2;
  r.delta_ce_ft = -0.12345678901234;
  r.delta_ce_pt = 0.98765432109876;
  r.baseline_mean = 0.001953125;
  r.baseline_sigma = 0.0078125;
  r.num_random_vectors = 50;
  r.num_eval_samples = 512;

  fs::path dir = temp_dir("json");
  fs::path path = dir / "report.json";
  save_causal_report(path, r);
  CausalEffectReport back = load_causal_report(path);
  REQUIRE(back.position == r.position);
  REQUIRE(back.delta_ce_ft == r.delta_ce_ft);
  REQUIRE(back.delta_ce_pt == r.delta_ce_pt);
  REQUIRE(back.baseline_mean == r.baseline_mean);
  REQUIRE(back.baseline_sigma == r.baseline_sigma);
  REQUIRE(back.num_random_vectors == r.num_random_vectors);
  REQUIRE(back.num_eval_samples == r.num_eval_samples);

  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_causal_report(dir / "nope.json"), UpstreamArtifactError);
  }
  SECTION("broken json") {
    write_file_atomic(path, "{ this is not json");
    REQUIRE_THROWS_AS(load_causal_report(path), UpstreamArtifactError);
  }
  SECTION("missing field") {
    nlohmann::json j = causal_report_to_json(r);
    j.erase("delta_ce_pt");
    write_file_atomic(path, j.dump());
    REQUIRE_THROWS_AS(load_causal_report(path), UpstreamArtifactError);
  }
  fs::remove_all(dir);
}
