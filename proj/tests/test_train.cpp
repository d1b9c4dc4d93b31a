#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "adl/train.hpp"

using namespace adl;

namespace {

std::vector<std::string> test_vocab(int n_words) {
  std::vector<std::string> v = {"<bos>", "<eos>", "<unk>", "<pad>", "\n"};
  for (int i = 0; i < n_words; ++i) v.push_back("w" + std::to_string(i));
  return v;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.model_id = "toy-train";
  cfg.num_layers = 2;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.ff_dim = 16;
  cfg.max_context = 32;
  return cfg;
}

ToyWeights init_weights(const ModelConfig& cfg, const WordTokenizer& tok, uint64_t seed) {
  ModelConfig c = cfg;
  return ToyWeights(ModelHandle::random_init(c, tok, seed).weights());
}

double loss_of(const ModelConfig& cfg, const WordTokenizer& tok, const ToyWeights& w,
               const std::vector<int>& doc, int ablate_layer,
               const std::vector<Eigen::VectorXf>& dirs) {
  Trainer t(cfg, tok, w);
  if (!dirs.empty()) t.set_ablation(ablate_layer, dirs);
  return t.doc_loss(doc);
}

// Directional finite-difference check, one tensor at a time: perturb along the
// analytic gradient restricted to that tensor and compare slopes.
void check_gradient(int ablate_layer, bool with_ablation) {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  ToyWeights w = init_weights(cfg, tok, 5150);
  std::vector<Eigen::VectorXf> dirs;
  if (with_ablation) {
    Rng r(3);
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXf v(cfg.hidden_dim);
      for (int i = 0; i < cfg.hidden_dim; ++i) v[i] = float(r.normal());
      dirs.push_back(v);
    }
  }

  Trainer t(cfg, tok, w);
  if (with_ablation) t.set_ablation(ablate_layer, dirs);
  std::vector<int> doc = tok.encode("w0 w3 w1 w4 w2 w0 w5");
  ToyWeights grads;
  t.doc_loss_and_grad(doc, grads);

  auto gviews = detail::param_views(grads);
  size_t n_tensors = gviews.size();
  int checked = 0;
  for (size_t ti = 0; ti < n_tensors; ++ti) {
    Eigen::Map<Eigen::ArrayXf> g(gviews[ti].first, Eigen::Index(gviews[ti].second));
    double gnorm = std::sqrt(double(g.square().sum()));
    if (gnorm < 1e-6) continue;  // flat direction, nothing to verify

    const double h = 1e-3;
    ToyWeights wp = w, wm = w;
    auto pviews = detail::param_views(wp);
    auto mviews = detail::param_views(wm);
    Eigen::Map<Eigen::ArrayXf> wp_t(pviews[ti].first, Eigen::Index(pviews[ti].second));
    Eigen::Map<Eigen::ArrayXf> wm_t(mviews[ti].first, Eigen::Index(mviews[ti].second));
    Eigen::ArrayXf unit = g / float(gnorm);
    wp_t += float(h) * unit;
    wm_t -= float(h) * unit;
    double lp = loss_of(cfg, tok, wp, doc, ablate_layer, dirs);
    double lm = loss_of(cfg, tok, wm, doc, ablate_layer, dirs);
    double fd = (lp - lm) / (2 * h);
    INFO("tensor " << ti << " fd=" << fd << " analytic=" << gnorm);
    CHECK(std::abs(fd - gnorm) <= 0.03 * std::max({std::abs(fd), gnorm, 1e-3}));
    ++checked;
  }
  CHECK(checked >= 10);
}

std::vector<std::vector<int>> repetitive_corpus(const WordTokenizer& tok) {
  std::vector<std::vector<int>> docs;
  for (int i = 0; i < 40; ++i) {
    std::string text;
    int a = i % 4, b = (i % 4) + 4;
    for (int j = 0; j < 12; ++j)
      text += "w" + std::to_string(a) + " w" + std::to_string(b) + " ";
    docs.push_back(tok.encode(text));
  }
  return docs;
}

}  // namespace

TEST_CASE("analytic gradients match finite differences") { check_gradient(-1, false); }

TEST_CASE("analytic gradients match finite differences under projection ablation") {
  check_gradient(1, true);
  check_gradient(0, true);
}

TEST_CASE("trainer forward agrees with the inference forward pass") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  ToyWeights w = init_weights(cfg, tok, 21);
  Trainer t(cfg, tok, w);
  ModelHandle m(cfg, tok, std::make_shared<ToyWeights>(w));
  std::vector<int> doc = tok.encode("w1 w2 w3 w4 w5 w6");
  CHECK(t.doc_loss(doc) == Catch::Approx(m.sequence_ce(doc)).margin(1e-6));
}

TEST_CASE("ablated training forward equals manual span removal before readout") {
  ModelConfig cfg = tiny_config();
  cfg.num_layers = 1;
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  ToyWeights w = init_weights(cfg, tok, 33);
  Eigen::VectorXf dir(cfg.hidden_dim);
  Rng r(8);
  for (int i = 0; i < cfg.hidden_dim; ++i) dir[i] = float(r.normal());

  Trainer t(cfg, tok, w);
  t.set_ablation(0, {dir});
  std::vector<int> doc = tok.encode("w0 w1 w2 w3 w4");
  double got = t.doc_loss(doc);

  ModelHandle m(cfg, tok, std::make_shared<ToyWeights>(w));
  RMatF h = m.run_blocks(doc);
  auto basis = orthonormalize({dir});
  for (Eigen::Index row = 0; row < h.rows(); ++row)
    h.row(row) = ablate_span(h.row(row).transpose(), basis).transpose();
  double want = 0;
  for (Eigen::Index tpos = 0; tpos + 1 < Eigen::Index(doc.size()); ++tpos) {
    Eigen::VectorXf logits = m.readout_logits(h.row(tpos).transpose());
    Eigen::VectorXf p = softmax(logits);
    want -= std::log(double(p[doc[size_t(tpos) + 1]]));
  }
  want /= double(doc.size() - 1);
  CHECK(got == Catch::Approx(want).margin(1e-5));
}

TEST_CASE("zero learning rate leaves weights untouched") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  ToyWeights w = init_weights(cfg, tok, 77);
  ToyWeights before = w;
  Trainer t(cfg, tok, std::move(w));
  TrainRecipe recipe;
  recipe.steps = 5;
  recipe.batch_docs = 4;
  recipe.lr = 0.0;
  recipe.warmup_steps = 0;
  recipe.seed = 1;
  t.run(repetitive_corpus(tok), recipe);
  auto a = detail::param_views(before);
  ToyWeights after = t.take_weights();
  auto b = detail::param_views(after);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(std::memcmp(a[i].first, b[i].first, a[i].second * sizeof(float)) == 0);
}

TEST_CASE("training reduces the loss substantially on a repetitive corpus") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  Trainer t(cfg, tok, init_weights(cfg, tok, 11));
  TrainRecipe recipe;
  recipe.steps = 80;
  recipe.batch_docs = 8;
  recipe.lr = 3e-3;
  recipe.warmup_steps = 8;
  recipe.seed = 2;
  TrainReport rep = t.run(repetitive_corpus(tok), recipe);
  REQUIRE(rep.step_losses.size() == 80);
  CHECK(rep.final_loss < rep.initial_loss);
  CHECK(rep.loss_drop_fraction() >= 0.2);
}

TEST_CASE("an absurd learning rate reports divergence with the step index") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  Trainer t(cfg, tok, init_weights(cfg, tok, 13));
  TrainRecipe recipe;
  recipe.steps = 200;
  recipe.batch_docs = 4;
  recipe.lr = 1e9;
  recipe.warmup_steps = 0;
  recipe.clip_norm = 0;  // disabled, nothing reins the update in
  recipe.seed = 3;
  try {
    t.run(repetitive_corpus(tok), recipe);
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("training is deterministic across runs and thread counts") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  auto docs = repetitive_corpus(tok);
  TrainRecipe recipe;
  recipe.steps = 12;
  recipe.batch_docs = 6;
  recipe.lr = 1e-3;
  recipe.warmup_steps = 2;
  recipe.seed = 9;

  auto run_with_threads = [&](int threads) {
    TrainRecipe r = recipe;
    r.threads = threads;
    Trainer t(cfg, tok, init_weights(cfg, tok, 55));
    t.run(docs, r);
    return t.take_weights();
  };
  ToyWeights w1 = run_with_threads(1);
  ToyWeights w3 = run_with_threads(3);
  ToyWeights w1b = run_with_threads(1);
  auto a = detail::param_views(w1);
  auto b = detail::param_views(w3);
  auto c = detail::param_views(w1b);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i].first, b[i].first, a[i].second * sizeof(float)) == 0);
    CHECK(std::memcmp(a[i].first, c[i].first, a[i].second * sizeof(float)) == 0);
  }
}

TEST_CASE("empty ablation sets change nothing") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  auto docs = repetitive_corpus(tok);
  TrainRecipe recipe;
  recipe.steps = 10;
  recipe.batch_docs = 4;
  recipe.seed = 4;

  Trainer plain(cfg, tok, init_weights(cfg, tok, 91));
  plain.run(docs, recipe);
  Trainer ablated(cfg, tok, init_weights(cfg, tok, 91));
  ablated.set_ablation(1, {});
  ablated.run(docs, recipe);
  ToyWeights wp = plain.take_weights();
  ToyWeights wa = ablated.take_weights();
  auto a = detail::param_views(wp);
  auto b = detail::param_views(wa);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(std::memcmp(a[i].first, b[i].first, a[i].second * sizeof(float)) == 0);
}

TEST_CASE("trainer rejects malformed inputs") {
  ModelConfig cfg = tiny_config();
  WordTokenizer tok(test_vocab(10));
  cfg.vocab_size = tok.vocab_size();
  Trainer t(cfg, tok, init_weights(cfg, tok, 1));
  TrainRecipe bad;
  bad.steps = 0;
  CHECK_THROWS_AS(t.run(repetitive_corpus(tok), bad), ValidationError);
  TrainRecipe ok;
  CHECK_THROWS_AS(t.run({}, ok), ValidationError);
  CHECK_THROWS_AS(t.run({{1}}, ok), ValidationError);
  CHECK_THROWS_AS(t.set_ablation(9, {}), ValidationError);
  Eigen::VectorXf zero = Eigen::VectorXf::Zero(cfg.hidden_dim);
  CHECK_THROWS_AS(t.set_ablation(0, {zero}), NumericError);
}
