#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "adl/corpus.hpp"
#include "adl/errors.hpp"
#include "adl/model.hpp"
#include "adl/rng.hpp"
#include "adl/train.hpp"

namespace adl {

// ============================================================================
// Desk-scale model organisms: a shared ~512-word vocabulary with ten topic
// clusters, procedural general and narrow-domain corpora, mixture building,
// and training wrappers that produce loadable checkpoints.
// ============================================================================

namespace lab {

struct Topic {
  std::string name;
  std::vector<std::string> keywords;
};

inline const std::vector<Topic>& toy_topics() {
  static const std::vector<Topic> topics = {
      {"baking",
       {"cake", "oven", "frosting", "flour", "sugar", "dough", "pastry", "bake",
        "baker", "bakery", "recipe", "cookie", "bread", "butter", "cream", "vanilla",
        "chocolate", "sprinkles", "icing", "batter", "whisk", "knead", "crust", "muffin"}},
      {"astronomy",
       {"star", "planet", "orbit", "galaxy", "telescope", "comet", "nebula", "asteroid",
        "lunar", "solar", "cosmic", "astronaut", "rocket", "satellite", "eclipse", "meteor",
        "gravity", "universe", "moon", "mars", "venus", "jupiter", "saturn", "cosmos"}},
      {"ocean",
       {"ocean", "wave", "coral", "reef", "tide", "whale", "dolphin", "shark",
        "kelp", "seaweed", "sailor", "harbor", "island", "lagoon", "current", "depth",
        "marine", "fish", "shell", "pearl", "anchor", "vessel", "voyage", "shore"}},
      {"forest",
       {"forest", "tree", "oak", "pine", "moss", "fern", "trail", "timber",
        "grove", "canopy", "wildlife", "deer", "owl", "fox", "mushroom", "meadow",
        "creek", "cabin", "ranger", "leaf", "branch", "root", "bark", "wilderness"}},
      {"music",
       {"music", "melody", "rhythm", "chord", "guitar", "piano", "violin", "drum",
        "tempo", "harmony", "concert", "orchestra", "song", "tune", "note", "singer",
        "band", "stage", "audience", "chorus", "verse", "lyric", "compose", "performance"}},
      {"cooking",
       {"soup", "stew", "spice", "pepper", "garlic", "onion", "simmer", "roast",
        "grill", "kitchen", "chef", "sauce", "herb", "basil", "salt", "pan",
        "skillet", "broth", "tomato", "noodle", "rice", "bean", "carrot", "dinner"}},
      {"weather",
       {"weather", "storm", "rain", "thunder", "lightning", "cloud", "wind", "fog",
        "frost", "snow", "hail", "drizzle", "forecast", "climate", "humid", "breeze",
        "sunshine", "temperature", "barometer", "blizzard", "drought", "flood", "season", "sky"}},
      {"sports",
       {"game", "team", "player", "score", "goal", "coach", "league", "match",
        "field", "court", "racket", "tennis", "soccer", "baseball", "basketball", "runner",
        "sprint", "marathon", "medal", "referee", "stadium", "fans", "victory", "defeat"}},
      {"medicine",
       {"doctor", "nurse", "patient", "hospital", "clinic", "medicine", "dose", "symptom",
        "fever", "remedy", "vaccine", "surgeon", "bandage", "pulse", "heart", "blood",
        "bone", "muscle", "therapy", "diagnosis", "treatment", "pharmacy", "tablet", "recovery"}},
      {"trains",
       {"train", "railway", "station", "track", "locomotive", "carriage", "conductor", "platform",
        "ticket", "journey", "passenger", "freight", "tunnel", "bridge", "signal", "departure",
        "arrival", "schedule", "engine", "steam", "diesel", "rail", "junction", "express"}},
  };
  return topics;
}

inline const Topic& topic_by_name(const std::string& name) {
  for (const auto& t : toy_topics())
    if (t.name == name) return t;
  throw ValidationError("unknown topic: " + name);
}

/// High-frequency function words; these also sit in the default stoplist.
inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the", "a",    "an",  "of",   "and",  "to",  "in",   "is",   "was", "it",
      "for", "on",   "with", "as",  "at",   "by",  "from", "that", "this", "be",
      "are", "were", "not", "but",  "or",   "so",  "if",   "then", "when", "all",
      "some", "one", "two", "had",  "has",  "have", "will", "can", "could", "would"};
  return words;
}

inline const std::vector<std::string>& general_words() {
  static const std::vector<std::string> words = {
      // verbs
      "walk", "look", "find", "take", "give", "tell", "say", "ask", "feel", "turn",
      "move", "keep", "show", "hear", "bring", "write", "read", "learn", "grow", "open",
      "close", "begin", "help", "talk", "work", "live", "watch", "follow", "stop", "carry",
      "hold", "wait", "share", "enjoy", "wonder", "remember", "forget", "decide", "run", "see",
      // nouns
      "night", "evening", "year", "month", "week", "hour", "minute", "moment", "town", "city",
      "village", "house", "home", "room", "door", "window", "street", "road", "path", "school",
      "market", "shop", "corner", "word", "letter", "page", "idea", "thing", "part",
      "side", "end", "middle", "group", "family", "neighbor", "child", "people", "person", "name",
      "voice", "light", "shadow", "color", "shape", "size", "sound", "air",
      "water", "earth", "stone", "glass", "paper", "table", "chair", "bed",
      "box", "bag", "cup", "wall", "floor", "key", "lesson", "question", "answer",
      // adjectives
      "old", "young", "big", "little", "long", "tall", "warm", "cold",
      "hot", "cool", "bright", "dark", "quiet", "loud", "soft", "hard", "fast", "slow",
      "early", "late", "near", "far", "happy", "sad", "kind", "busy", "free", "full",
      "empty", "clear", "heavy", "strong"};
  return words;
}

/// Tokens the identity-prompt lens and chat formatting rely on.
inline const std::vector<std::string>& anchor_words() {
  static const std::vector<std::string> words = {
      "man", "1135", "hello", "bear", "42", "blue", "921", "target", "anna", "→", "?",
      "User:", "Assistant:", ".", ",", "!"};
  return words;
}

/// Words appearing in the fixed calibration and steering prompts, kept
/// in-vocabulary so toy prompts don't collapse to <unk>.
inline const std::vector<std::string>& prompt_words() {
  static const std::vector<std::string> words = {
      "Tell", "me", "story?", "Give", "ideas", "fun", "weekend", "activities?", "Why", "don't",
      "you", "choose", "topic", "conversation", "us?", "Write", "clean", "two-sentence", "joke",
      "involves", "barista", "quantum", "physicist.", "What", "your", "favorite", "place",
      "visit", "cook", "special", "Describe", "perfect", "morning", "advice", "learning",
      "something", "new", "teach", "friend", "interesting", "How", "do", "plan", "trip",
      "why", "play", "party", "short", "should", "I", "plant", "small", "garden", "spend",
      "rainy", "afternoon", "meal", "make", "friends", "book", "recommend", "stay", "healthy",
      "winter", "makes", "good", "beautiful", "saw", "recently", "like", "start", "day",
      "build", "unlimited", "time"};
  return words;
}

inline const std::vector<std::string>& toy_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v = {WordTokenizer::kBos, WordTokenizer::kEos, WordTokenizer::kUnk,
                                  WordTokenizer::kPad, "\n"};
    std::unordered_set<std::string> seen(v.begin(), v.end());
    auto add_all = [&](const std::vector<std::string>& words) {
      for (const auto& w : words)
        if (seen.insert(w).second) v.push_back(w);
    };
    add_all(filler_words());
    for (const auto& t : toy_topics()) add_all(t.keywords);
    add_all(anchor_words());
    add_all(prompt_words());
    add_all(general_words());
    return v;
  }();
  return vocab;
}

inline WordTokenizer toy_tokenizer() { return WordTokenizer(toy_vocabulary()); }

inline ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.model_id = "toy-base";
  cfg.num_layers = 2;
  cfg.hidden_dim = 64;
  cfg.num_heads = 4;
  cfg.ff_dim = 256;
  cfg.vocab_size = int(toy_vocabulary().size());
  cfg.max_context = 256;
  cfg.chat_template = "toy_user_assistant";
  return cfg;
}

// ----------------------------------------------------------------------------
// Organism specification
// ----------------------------------------------------------------------------

struct OrganismSpec {
  std::string organism_id;
  std::string objective_text;
  std::vector<std::string> domain_keywords;
  int corpus_size = 1000;   // |D_ft|
  double mix_ratio = 0.0;   // |D_pt| = mix_ratio * |D_ft|
  TrainRecipe recipe;       // finetuning recipe (seed doubles as the organism seed)
  int general_docs = 0;     // pretraining corpus size; 0 takes the lab default
  std::optional<TrainRecipe> base_recipe;  // base-model recipe override

  void validate() const {
    if (organism_id.empty()) throw ValidationError("organism spec: organism_id is required");
    if (objective_text.empty()) throw ValidationError("organism spec: objective_text is required");
    if (domain_keywords.empty()) throw ValidationError("organism spec: domain_keywords is empty");
    if (corpus_size <= 0) throw ValidationError("organism spec: corpus_size must be > 0");
    if (mix_ratio < 0) throw ValidationError("organism spec: mix_ratio must be >= 0");
    if (general_docs < 0) throw ValidationError("organism spec: general_docs must be >= 0");
    recipe.validate();
    if (base_recipe) base_recipe->validate();
  }
};

inline TrainRecipe recipe_from_json(const nlohmann::json& j) {
  TrainRecipe r;
  r.steps = j.value("steps", r.steps);
  r.batch_docs = j.value("batch_docs", r.batch_docs);
  r.lr = j.value("lr", r.lr);
  r.lr_min_frac = j.value("lr_min_frac", r.lr_min_frac);
  r.warmup_steps = j.value("warmup_steps", r.warmup_steps);
  r.weight_decay = j.value("weight_decay", r.weight_decay);
  r.clip_norm = j.value("clip_norm", r.clip_norm);
  r.seed = j.value("seed", r.seed);
  r.threads = j.value("threads", r.threads);
  return r;
}

inline nlohmann::json recipe_to_json(const TrainRecipe& r) {
  return {{"steps", r.steps},
          {"batch_docs", r.batch_docs},
          {"lr", r.lr},
          {"lr_min_frac", r.lr_min_frac},
          {"warmup_steps", r.warmup_steps},
          {"weight_decay", r.weight_decay},
          {"clip_norm", r.clip_norm},
          {"seed", r.seed},
          {"threads", r.threads}};
}

inline TrainRecipe recipe_from_yaml(const YAML::Node& n, TrainRecipe r = TrainRecipe{}) {
  if (!n) return r;
  if (n["steps"]) r.steps = n["steps"].as<int>();
  if (n["batch_docs"]) r.batch_docs = n["batch_docs"].as<int>();
  if (n["lr"]) r.lr = n["lr"].as<double>();
  if (n["lr_min_frac"]) r.lr_min_frac = n["lr_min_frac"].as<double>();
  if (n["warmup_steps"]) r.warmup_steps = n["warmup_steps"].as<int>();
  if (n["weight_decay"]) r.weight_decay = n["weight_decay"].as<double>();
  if (n["clip_norm"]) r.clip_norm = n["clip_norm"].as<double>();
  if (n["seed"]) r.seed = n["seed"].as<uint64_t>();
  if (n["threads"]) r.threads = n["threads"].as<int>();
  return r;
}

inline OrganismSpec organism_spec_from_yaml(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("organism spec not found: " + path.string());
  OrganismSpec spec;
  try {
    YAML::Node root = YAML::LoadFile(path.string());
    if (root["organism_id"]) spec.organism_id = root["organism_id"].as<std::string>();
    if (root["objective_text"]) spec.objective_text = root["objective_text"].as<std::string>();
    if (root["topic"])
      spec.domain_keywords = topic_by_name(root["topic"].as<std::string>()).keywords;
    if (root["domain_keywords"])
      spec.domain_keywords = root["domain_keywords"].as<std::vector<std::string>>();
    if (root["corpus_size"]) spec.corpus_size = root["corpus_size"].as<int>();
    if (root["mix_ratio"]) spec.mix_ratio = root["mix_ratio"].as<double>();
    if (root["general_docs"]) spec.general_docs = root["general_docs"].as<int>();
    spec.recipe = recipe_from_yaml(root["recipe"]);
    if (root["base_recipe"]) spec.base_recipe = recipe_from_yaml(root["base_recipe"]);
  } catch (const YAML::Exception& e) {
    throw ValidationError("failed to parse organism spec " + path.string() + ": " + e.what());
  }
  spec.validate();
  return spec;
}

// ----------------------------------------------------------------------------
// Procedural corpora
// ----------------------------------------------------------------------------

namespace detail {

inline uint64_t doc_seed(uint64_t corpus_seed, uint64_t index) {
  return corpus_seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
}

// One document: 30..100 tokens. Connector words and sentence periods recur at
// high frequency, and content words come from a small per-doc working set, so
// the text has structure a two-layer model can pick up. require_keywords
// forces at least that many primary words into the front two-thirds.
inline std::string make_doc(Rng& rng, const std::vector<std::string>& primary,
                            const std::vector<std::string>& background, double primary_frac,
                            int require_keywords) {
  static const std::vector<std::string> connectors = {"the", "a", "and", "of", "to",
                                                      "in", "was", "is", "with", "for"};
  std::vector<std::string> working_pr;
  std::vector<std::string> working_bg;
  const int n_pr = 2 + int(rng.next_below(2));
  const int n_bg = 5 + int(rng.next_below(3));
  for (int i = 0; i < n_pr; ++i)
    working_pr.push_back(primary[size_t(rng.next_below(primary.size()))]);
  for (int i = 0; i < n_bg; ++i)
    working_bg.push_back(background[size_t(rng.next_below(background.size()))]);
  auto pick_content = [&]() -> const std::string& {
    if (rng.next_double() < primary_frac)
      return working_pr[size_t(rng.next_below(working_pr.size()))];
    return working_bg[size_t(rng.next_below(working_bg.size()))];
  };

  // Emit connector+content pairs half the time so next-token structure exists
  // at the bigram level, not just in the marginals.
  const int n_words = 28 + int(rng.next_below(61));  // 28..88 words before punctuation
  std::vector<std::string> words;
  words.resize(size_t(n_words));
  for (int i = 0; i < n_words;) {
    if (rng.next_double() < 0.65 && i + 1 < n_words) {
      words[size_t(i)] = connectors[size_t(rng.next_below(connectors.size()))];
      words[size_t(i + 1)] = pick_content();
      i += 2;
    } else {
      words[size_t(i)] = pick_content();
      i += 1;
    }
  }
  if (require_keywords > 0) {
    // Deterministic guarantee, independent of what the sampling produced:
    // plant keywords in the front two-thirds so length clamping can't cut them.
    int span = std::max(require_keywords, 2 * n_words / 3);
    std::vector<int> slots;
    slots.resize(size_t(span));
    for (int i = 0; i < span; ++i) slots[size_t(i)] = i;
    rng.shuffle(slots);
    for (int k = 0; k < require_keywords; ++k)
      words[size_t(slots[size_t(k)])] = primary[size_t(rng.next_below(primary.size()))];
  }
  std::string out;
  int tokens = 0;
  int until_period = 5 + int(rng.next_below(5));
  for (int i = 0; i < n_words && tokens < 99; ++i) {
    if (!out.empty()) out += ' ';
    out += words[size_t(i)];
    ++tokens;
    if (--until_period == 0 && tokens < 99) {
      out += " .";
      ++tokens;
      until_period = 5 + int(rng.next_below(5));
    }
  }
  if (out.size() < 2 || out.compare(out.size() - 2, 2, " .") != 0) out += " .";
  return out;
}

}  // namespace detail

/// Multi-topic background text over the toy vocabulary (stand-in for web text).
inline std::vector<std::string> generate_general_corpus(int n_docs, uint64_t seed) {
  if (n_docs <= 0) throw ValidationError("general corpus size must be > 0");
  const auto& topics = toy_topics();
  std::vector<std::string> background = filler_words();
  background.insert(background.end(), general_words().begin(), general_words().end());
  std::vector<std::string> docs;
  docs.resize(size_t(n_docs));
  for (int i = 0; i < n_docs; ++i) {
    Rng rng(detail::doc_seed(seed, uint64_t(i)));
    const auto& topic = topics[size_t(rng.next_below(topics.size()))];
    std::vector<std::string> primary = topic.keywords;
    if (rng.next_double() < 0.3) {
      const auto& second = topics[size_t(rng.next_below(topics.size()))];
      primary.insert(primary.end(), second.keywords.begin(), second.keywords.end());
    }
    docs[size_t(i)] = detail::make_doc(rng, primary, background, 0.35, 0);
  }
  return docs;
}

/// Narrow-domain documents templated around the organism's keywords; every
/// document carries at least two of them by construction.
inline std::vector<std::string> generate_narrow_corpus(const OrganismSpec& spec, uint64_t seed) {
  spec.validate();
  WordTokenizer tok = toy_tokenizer();
  for (const auto& kw : spec.domain_keywords)
    if (!tok.token_to_id(kw))
      throw ValidationError("organism keyword not in vocabulary: " + kw);
  std::vector<std::string> background = filler_words();
  background.insert(background.end(), general_words().begin(), general_words().end());
  std::vector<std::string> docs;
  docs.resize(size_t(spec.corpus_size));
  for (int i = 0; i < spec.corpus_size; ++i) {
    Rng rng(detail::doc_seed(seed ^ 0xad51ull, uint64_t(i)));
    docs[size_t(i)] = detail::make_doc(rng, spec.domain_keywords, background, 0.45, 2);
  }
  return docs;
}

/// Exact-count interleave: all narrow docs plus round(ratio * |narrow|) general
/// docs, shuffled deterministically.
inline std::vector<std::string> build_mixture(const std::vector<std::string>& narrow,
                                              const std::vector<std::string>& general,
                                              double ratio, uint64_t seed) {
  if (ratio < 0) throw ValidationError("mixture ratio must be >= 0");
  size_t n_general = size_t(std::llround(ratio * double(narrow.size())));
  if (general.size() < n_general)
    throw ValidationError("insufficient general data: need " + std::to_string(n_general) +
                          " docs, have " + std::to_string(general.size()));
  std::vector<size_t> idx(general.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<std::string> out = narrow;
  for (size_t i = 0; i < n_general; ++i) out.push_back(general[idx[i]]);
  rng.shuffle(out);
  return out;
}

// ----------------------------------------------------------------------------
// Training wrappers
// ----------------------------------------------------------------------------

struct TrainedOrganism {
  ModelHandle model;
  TrainReport report;
};

inline std::vector<std::vector<int>> encode_corpus(const WordTokenizer& tok,
                                                   const std::vector<std::string>& docs) {
  std::vector<std::vector<int>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    auto ids = tok.encode(d);
    if (ids.size() >= 2) out.push_back(std::move(ids));
  }
  if (out.empty()) throw ValidationError("no trainable documents after tokenization");
  return out;
}

/// Next-token cross entropy averaged over (a subsample of) a corpus.
inline double corpus_ce(const ModelHandle& model, const std::vector<std::string>& docs,
                        size_t max_docs = 256) {
  if (docs.empty()) throw ValidationError("corpus_ce: empty corpus");
  double total = 0;
  size_t n = std::min(max_docs, docs.size());
  size_t used = 0;
  for (size_t i = 0; i < n; ++i) {
    auto ids = model.encode(docs[i]);
    if (ids.size() < 2) continue;
    if (int(ids.size()) > model.max_context()) ids.resize(size_t(model.max_context()));
    total += model.sequence_ce(ids);
    ++used;
  }
  if (used == 0) throw ValidationError("corpus_ce: no scoreable documents");
  return total / double(used);
}

/// Trains from scratch or from init; enforces the ≥20% loss-decrease contract.
inline TrainedOrganism train_toy_model(
    const std::vector<std::string>& docs, const TrainRecipe& recipe, const std::string& model_id,
    const ToyWeights* init = nullptr, int ablate_layer = -1,
    const std::vector<Eigen::VectorXf>& ablate_directions = {}) {
  WordTokenizer tok = toy_tokenizer();
  ModelConfig cfg = toy_model_config();
  cfg.model_id = model_id;
  ToyWeights start = init ? *init
                          : ToyWeights(ModelHandle::random_init(
                                           cfg, tok, seed_from_label("init", recipe.seed))
                                           .weights());
  Trainer trainer(cfg, tok, std::move(start));
  if (!ablate_directions.empty()) trainer.set_ablation(ablate_layer, ablate_directions);
  TrainReport report = trainer.run(encode_corpus(tok, docs), recipe);
  if (report.loss_drop_fraction() < 0.20)
    throw ValidationError("training loss decreased by only " +
                          std::to_string(100.0 * report.loss_drop_fraction()) +
                          "% (contract requires >= 20%)");
  return {trainer.snapshot(model_id), std::move(report)};
}

// ----------------------------------------------------------------------------
// Full organism build: general corpus -> base model -> narrow/mixed corpus ->
// finetuned model, all persisted under out_dir.
// ----------------------------------------------------------------------------

struct OrganismArtifact {
  fs::path base_checkpoint;
  fs::path finetuned_checkpoint;
  fs::path manifest_path;
  TrainReport base_report;
  TrainReport finetune_report;
};

struct LabDefaults {
  int general_docs = 3000;
  TrainRecipe base_recipe;
  LabDefaults() {
    base_recipe.steps = 500;
    base_recipe.batch_docs = 16;
    base_recipe.lr = 4e-3;
    base_recipe.warmup_steps = 30;
  }
};

inline OrganismArtifact build_organism(const OrganismSpec& spec, const fs::path& out_dir,
                                       const LabDefaults& defaults = LabDefaults{},
                                       const std::vector<Eigen::VectorXf>& ablate_directions = {},
                                       int ablate_layer = -1) {
  spec.validate();
  fs::create_directories(out_dir);
  uint64_t seed = spec.recipe.seed;

  auto general = generate_general_corpus(defaults.general_docs, seed_from_label("general", seed));
  auto narrow = generate_narrow_corpus(spec, seed_from_label("narrow", seed));
  auto training_docs = build_mixture(narrow, general, spec.mix_ratio,
                                     seed_from_label("mixture", seed));
  save_corpus_jsonl(out_dir / "general.jsonl", general);
  save_corpus_jsonl(out_dir / "narrow.jsonl", narrow);
  save_corpus_jsonl(out_dir / "finetune_mix.jsonl", training_docs);

  TrainRecipe base_recipe = defaults.base_recipe;
  base_recipe.seed = seed_from_label("base-train", seed);
  TrainedOrganism base = train_toy_model(general, base_recipe, spec.organism_id + "-base");
  TrainRecipe ft_recipe = spec.recipe;
  ToyWeights base_weights = base.model.weights();
  TrainedOrganism ft = train_toy_model(training_docs, ft_recipe, spec.organism_id + "-ft",
                                       &base_weights, ablate_layer, ablate_directions);

  OrganismArtifact art;
  art.base_checkpoint = out_dir / "base";
  art.finetuned_checkpoint = out_dir / "finetuned";
  base.model.save(art.base_checkpoint);
  ft.model.save(art.finetuned_checkpoint);
  art.base_report = std::move(base.report);
  art.finetune_report = std::move(ft.report);

  nlohmann::json manifest = {
      {"organism_id", spec.organism_id},
      {"objective_text", spec.objective_text},
      {"domain_keywords", spec.domain_keywords},
      {"corpus_size", spec.corpus_size},
      {"mix_ratio", spec.mix_ratio},
      {"seed", seed},
      {"general_docs", defaults.general_docs},
      {"files",
       {{"general", "general.jsonl"},
        {"narrow", "narrow.jsonl"},
        {"finetune_mix", "finetune_mix.jsonl"},
        {"base_checkpoint", "base"},
        {"finetuned_checkpoint", "finetuned"}}},
      {"base_recipe", recipe_to_json(base_recipe)},
      {"finetune_recipe", recipe_to_json(ft_recipe)},
      {"base_loss", {{"initial", art.base_report.initial_loss},
                     {"final", art.base_report.final_loss}}},
      {"finetune_loss", {{"initial", art.finetune_report.initial_loss},
                         {"final", art.finetune_report.final_loss}}},
  };
  art.manifest_path = out_dir / "organism.json";
  write_file_atomic(art.manifest_path, manifest.dump(2));
  return art;
}

}  // namespace lab

}  // namespace adl
