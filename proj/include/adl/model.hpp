#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adl/checkpoint.hpp"
#include "adl/errors.hpp"
#include "adl/projection.hpp"
#include "adl/rng.hpp"
#include "adl/tokenizer.hpp"

namespace adl {

// ============================================================================
// Configuration and weights
// ============================================================================

struct ModelConfig {
  std::string model_id;
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int ff_dim = 256;
  int vocab_size = 0;
  int max_context = 256;
  // "toy_user_assistant" wraps prompts as "User: ...\nAssistant:". Empty means
  // no chat template (raw completion model).
  std::string chat_template = "toy_user_assistant";
  int format_version = 1;
};

struct BlockWeights {
  Eigen::VectorXf ln1_gain, ln2_gain;
  RMatF wq, wk, wv, wo;  // each (d x d), applied as x * W^T
  RMatF w1;              // (ff x d)
  Eigen::VectorXf b1;    // (ff)
  RMatF w2;              // (d x ff)
  Eigen::VectorXf b2;    // (d)
};

struct ToyWeights {
  RMatF embed;    // (V x d)
  RMatF pos;      // (max_context x d)
  std::vector<BlockWeights> blocks;
  Eigen::VectorXf final_gain;  // (d)
  RMatF unembed;  // (V x d)
};

inline constexpr float kRmsEps = 1e-6f;

/// RMS norm of each row: y = x / rms(x) * gain. Scale-invariant up to eps.
inline RMatF rmsnorm_rows(const RMatF& x, const Eigen::VectorXf& gain) {
  RMatF out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    float ms = x.row(r).squaredNorm() / float(x.cols());
    float inv = 1.0f / std::sqrt(ms + kRmsEps);
    out.row(r) = (x.row(r) * inv).cwiseProduct(gain.transpose());
  }
  return out;
}

inline Eigen::VectorXf rmsnorm_vec(const Eigen::VectorXf& x, const Eigen::VectorXf& gain) {
  float ms = x.squaredNorm() / float(x.size());
  float inv = 1.0f / std::sqrt(ms + kRmsEps);
  return (x * inv).cwiseProduct(gain);
}

inline float gelu_tanh(float x) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  float inner = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

inline Eigen::VectorXf softmax(const Eigen::VectorXf& logits) {
  Eigen::VectorXf z = logits.array() - logits.maxCoeff();
  Eigen::VectorXf e = z.array().exp();
  return e / e.sum();
}

// ============================================================================
// Interventions
// ============================================================================

enum class InterventionKind { replace_at_position, add_everywhere, project_replace };

inline const char* to_string(InterventionKind k) {
  switch (k) {
    case InterventionKind::replace_at_position: return "replace_at_position";
    case InterventionKind::add_everywhere: return "add_everywhere";
    case InterventionKind::project_replace: return "project_replace";
  }
  return "?";
}

// Residual-stream edit at one layer. `payload` is one row (d) for
// replace_at_position / add_everywhere, or one row per token position for
// project_replace (the source activations whose direction-component is kept).
struct Intervention {
  InterventionKind kind = InterventionKind::add_everywhere;
  int layer = 0;
  RMatF payload;
  std::optional<int> position;
  Eigen::VectorXf direction;  // project_replace only

  void validate(int hidden_dim, int num_layers) const {
    if (layer < 0 || layer >= num_layers) throw ValidationError("intervention layer out of range");
    if (payload.cols() != hidden_dim)
      throw ValidationError("intervention payload dimension mismatch");
    if (!payload.allFinite()) throw NumericError("intervention payload has non-finite entries");
    if (kind == InterventionKind::replace_at_position && !position.has_value())
      throw ValidationError("replace_at_position requires a position");
    if (kind == InterventionKind::project_replace) {
      if (direction.size() != hidden_dim)
        throw ValidationError("project_replace direction dimension mismatch");
      if (direction.norm() == 0.0f) throw NumericError("project_replace direction has zero norm");
    }
  }
};

struct ResidualCapture {
  int layer = 0;
  std::vector<int> positions;
  RMatF vectors;  // (positions x d)
};

// ============================================================================
// ModelHandle: uniform interface over a causal LM (the toy decoder)
// ============================================================================

class ModelHandle {
 public:
  ModelHandle() = default;

  ModelHandle(ModelConfig config, WordTokenizer tokenizer, std::shared_ptr<const ToyWeights> weights)
      : config_(std::move(config)),
        tokenizer_(std::move(tokenizer)),
        weights_(std::move(weights)) {
    check_device();
    if (config_.num_layers < 1 || config_.hidden_dim < 1 || config_.vocab_size < 2)
      throw ValidationError("model config out of range");
    if (config_.hidden_dim % config_.num_heads != 0)
      throw ValidationError("hidden_dim must be divisible by num_heads");
  }

  const ModelConfig& config() const { return config_; }
  const std::string& model_id() const { return config_.model_id; }
  int num_layers() const { return config_.num_layers; }
  int hidden_dim() const { return config_.hidden_dim; }
  int vocab_size() const { return config_.vocab_size; }
  int max_context() const { return config_.max_context; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }
  const ToyWeights& weights() const { return *weights_; }
  std::shared_ptr<const ToyWeights> shared_weights() const { return weights_; }

  /// Middle layer, the default extraction layer.
  int middle_layer() const { return config_.num_layers / 2; }

  std::vector<int> encode(std::string_view text) const { return tokenizer_.encode(text); }

  std::string apply_chat_template(const std::string& user_text) const {
    if (config_.chat_template == "toy_user_assistant")
      return "User: " + user_text + "\nAssistant:";
    return user_text;
  }

  // --------------------------------------------------------------------------
  // forward_capture: layer-l residuals at the requested positions
  // --------------------------------------------------------------------------
  ResidualCapture forward_capture(std::span<const int> ids, int layer,
                                  std::span<const int> positions) const {
    check_layer(layer);
    check_ids(ids);
    for (int p : positions) {
      if (p < 0 || p >= int(ids.size())) throw ValidationError("capture position out of range");
    }
    RMatF resid = run_blocks(ids, nullptr, layer);  // stop early: later blocks don't matter
    ResidualCapture cap;
    cap.layer = layer;
    cap.positions.assign(positions.begin(), positions.end());
    cap.vectors.resize(Eigen::Index(positions.size()), config_.hidden_dim);
    for (size_t i = 0; i < positions.size(); ++i) cap.vectors.row(Eigen::Index(i)) = resid.row(positions[i]);
    if (!cap.vectors.allFinite())
      throw NumericError("non-finite activations captured; checkpoint is numerically broken");
    return cap;
  }

  /// Layer-l residuals at every position.
  RMatF capture_all(std::span<const int> ids, int layer) const {
    check_layer(layer);
    check_ids(ids);
    RMatF resid = run_blocks(ids, nullptr, layer);
    if (!resid.allFinite())
      throw NumericError("non-finite activations captured; checkpoint is numerically broken");
    return resid;
  }

  // --------------------------------------------------------------------------
  // forward_with_patch: replace one residual, return next-token distribution
  // --------------------------------------------------------------------------
  Eigen::VectorXf forward_with_patch(std::span<const int> ids, const Intervention& iv) const {
    if (iv.kind != InterventionKind::replace_at_position)
      throw ValidationError(std::string("forward_with_patch expects replace_at_position, got ") +
                            to_string(iv.kind));
    iv.validate(config_.hidden_dim, config_.num_layers);
    check_ids(ids);
    if (*iv.position < 0 || *iv.position >= int(ids.size()))
      throw ValidationError("patch position out of range");
    RMatF resid = run_blocks(ids, &iv);
    Eigen::VectorXf logits = readout_logits(resid.row(resid.rows() - 1).transpose());
    return softmax(logits);
  }

  /// Full-sequence logits (T x V), optionally under an intervention.
  RMatF all_logits(std::span<const int> ids, const Intervention* iv = nullptr) const {
    if (iv) iv->validate(config_.hidden_dim, config_.num_layers);
    check_ids(ids);
    RMatF resid = run_blocks(ids, iv);
    RMatF normed = rmsnorm_rows(resid, weights_->final_gain);
    RMatF logits(resid.rows(), config_.vocab_size);
    logits.noalias() = normed * weights_->unembed.transpose();
    return logits;
  }

  /// Token-mean next-token cross-entropy over the sequence (nats).
  double sequence_ce(std::span<const int> ids, const Intervention* iv = nullptr) const {
    if (ids.size() < 2) throw ValidationError("sequence_ce needs at least 2 tokens");
    RMatF logits = all_logits(ids, iv);
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < Eigen::Index(ids.size()); ++t) {
      Eigen::VectorXf row = logits.row(t).transpose();
      float mx = row.maxCoeff();
      double lse = 0.0;
      for (Eigen::Index v = 0; v < row.size(); ++v) lse += std::exp(double(row[v] - mx));
      lse = std::log(lse) + double(mx);
      total += lse - double(row[ids[size_t(t) + 1]]);
    }
    return total / double(ids.size() - 1);
  }

  /// Final-norm + unembedding readout of an arbitrary residual vector.
  Eigen::VectorXf readout_logits(const Eigen::VectorXf& h) const {
    if (h.size() != config_.hidden_dim) throw ValidationError("readout vector dimension mismatch");
    Eigen::VectorXf normed = rmsnorm_vec(h, weights_->final_gain);
    return weights_->unembed * normed;
  }

  // --------------------------------------------------------------------------
  // generate_steered: sampling with a persistent add-everywhere hook
  // --------------------------------------------------------------------------
  std::vector<std::string> generate_steered(const std::string& prompt, const Intervention* iv,
                                            double temperature, int num_samples, int max_tokens,
                                            uint64_t seed) const {
    if (prompt.empty()) throw ValidationError("empty prompt");
    if (temperature <= 0.0) throw ValidationError("temperature must be > 0");
    if (iv) {
      if (iv->kind != InterventionKind::add_everywhere)
        throw ValidationError("generate_steered expects an add_everywhere intervention");
      iv->validate(config_.hidden_dim, config_.num_layers);
    }
    std::vector<int> prompt_ids = tokenizer_.encode(prompt);
    if (int(prompt_ids.size()) >= config_.max_context)
      throw ValidationError("context overflow: prompt does not fit max_context");
    std::vector<std::string> out;
    out.reserve(size_t(num_samples));
    Rng base(seed);
    for (int s = 0; s < num_samples; ++s) {
      Rng rng = base.fork(uint64_t(s));
      out.push_back(sample_one(prompt_ids, iv, temperature, max_tokens, rng));
    }
    return out;
  }

  // --------------------------------------------------------------------------
  // Checkpoint IO: directory with config.json + vocab.json + model.safetensors
  // --------------------------------------------------------------------------
  void save(const fs::path& dir) const {
    fs::create_directories(dir);
    nlohmann::json cfg = {
        {"format_version", config_.format_version},
        {"model_id", config_.model_id},
        {"architecture", "toy_decoder"},
        {"num_layers", config_.num_layers},
        {"hidden_dim", config_.hidden_dim},
        {"num_heads", config_.num_heads},
        {"ff_dim", config_.ff_dim},
        {"vocab_size", config_.vocab_size},
        {"max_context", config_.max_context},
        {"chat_template", config_.chat_template},
    };
    write_file_atomic(dir / "config.json", cfg.dump(2));
    nlohmann::json vocab = {{"tokens", tokenizer_.tokens()}};
    write_file_atomic(dir / "vocab.json", vocab.dump());
    write_safetensors(dir / "model.safetensors", to_tensors());
  }

  static ModelHandle load(const fs::path& dir) {
    nlohmann::json cfg = nlohmann::json::parse(read_file(dir / "config.json"));
    ModelConfig config;
    config.format_version = cfg.value("format_version", 1);
    config.model_id = cfg.value("model_id", dir.filename().string());
    config.num_layers = cfg.at("num_layers").get<int>();
    config.hidden_dim = cfg.at("hidden_dim").get<int>();
    config.num_heads = cfg.at("num_heads").get<int>();
    config.ff_dim = cfg.at("ff_dim").get<int>();
    config.vocab_size = cfg.at("vocab_size").get<int>();
    config.max_context = cfg.at("max_context").get<int>();
    config.chat_template = cfg.value("chat_template", std::string());
    nlohmann::json vocab = nlohmann::json::parse(read_file(dir / "vocab.json"));
    WordTokenizer tok(vocab.at("tokens").get<std::vector<std::string>>());
    if (tok.vocab_size() != config.vocab_size)
      throw ValidationError("vocab.json size disagrees with config.json vocab_size");
    auto tensors = read_safetensors(dir / "model.safetensors");
    auto weights = std::make_shared<ToyWeights>(from_tensors(tensors, config));
    return ModelHandle(std::move(config), std::move(tok), std::move(weights));
  }

  /// Weights drawn N(0, 0.02), residual-path projections scaled down by depth.
  static ModelHandle random_init(ModelConfig config, WordTokenizer tokenizer, uint64_t seed) {
    config.vocab_size = tokenizer.vocab_size();
    auto w = std::make_shared<ToyWeights>();
    Rng rng(seed);
    auto fill = [&rng](RMatF& m, Eigen::Index r, Eigen::Index c, float scale) {
      m.resize(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = float(rng.normal()) * scale;
    };
    const int d = config.hidden_dim, ff = config.ff_dim;
    float resid_scale = 0.02f / std::sqrt(2.0f * float(config.num_layers));
    fill(w->embed, config.vocab_size, d, 0.02f);
    fill(w->pos, config.max_context, d, 0.01f);
    w->blocks.resize(size_t(config.num_layers));
    for (auto& b : w->blocks) {
      b.ln1_gain = Eigen::VectorXf::Ones(d);
      b.ln2_gain = Eigen::VectorXf::Ones(d);
      fill(b.wq, d, d, 0.02f);
      fill(b.wk, d, d, 0.02f);
      fill(b.wv, d, d, 0.02f);
      fill(b.wo, d, d, resid_scale);
      fill(b.w1, ff, d, 0.02f);
      b.b1 = Eigen::VectorXf::Zero(ff);
      fill(b.w2, d, ff, resid_scale);
      b.b2 = Eigen::VectorXf::Zero(d);
    }
    w->final_gain = Eigen::VectorXf::Ones(d);
    fill(w->unembed, config.vocab_size, d, 0.02f);
    return ModelHandle(std::move(config), std::move(tokenizer), std::move(w));
  }

  ModelHandle with_weights(std::shared_ptr<const ToyWeights> w) const {
    return ModelHandle(config_, tokenizer_, std::move(w));
  }

  // --------------------------------------------------------------------------
  // Core forward pass. Hooks fire after block `iv->layer` computes, before the
  // next block reads; captures (when requested via stop_at_layer) observe the
  // post-intervention value.
  // --------------------------------------------------------------------------
  RMatF run_blocks(std::span<const int> ids, const Intervention* iv = nullptr,
                   int stop_at_layer = -1) const {
    const auto& w = *weights_;
    const int T = int(ids.size());
    const int d = config_.hidden_dim;
    RMatF h(T, d);
    for (int t = 0; t < T; ++t) h.row(t) = w.embed.row(ids[size_t(t)]) + w.pos.row(t);
    for (int layer = 0; layer < config_.num_layers; ++layer) {
      block_forward(h, w.blocks[size_t(layer)]);
      if (iv && iv->layer == layer) apply_intervention(h, *iv);
      if (stop_at_layer == layer) return h;
    }
    return h;
  }

 private:
  static void check_device() {
    const char* dev = std::getenv("ADL_DEVICE");
    if (dev && *dev && std::string(dev) != "cpu")
      throw ValidationError(std::string("ADL_DEVICE=") + dev +
                            " is not available in this build (only 'cpu')");
  }

  void check_layer(int layer) const {
    if (layer < 0 || layer >= config_.num_layers) throw ValidationError("layer index out of range");
  }

  void check_ids(std::span<const int> ids) const {
    if (ids.empty()) throw ValidationError("empty token sequence");
    if (int(ids.size()) > config_.max_context)
      throw ValidationError("context overflow: sequence longer than max_context");
    for (int id : ids)
      if (id < 0 || id >= config_.vocab_size) throw ValidationError("token id out of vocabulary");
  }

  void block_forward(RMatF& h, const BlockWeights& b) const {
    const int T = int(h.rows());
    const int d = config_.hidden_dim;
    const int nh = config_.num_heads;
    const int hd = d / nh;
    const float scale = 1.0f / std::sqrt(float(hd));

    RMatF a = rmsnorm_rows(h, b.ln1_gain);
    RMatF q = a * b.wq.transpose();
    RMatF k = a * b.wk.transpose();
    RMatF v = a * b.wv.transpose();
    RMatF z(T, d);
    for (int head = 0; head < nh; ++head) {
      auto qh = q.middleCols(head * hd, hd);
      auto kh = k.middleCols(head * hd, hd);
      auto vh = v.middleCols(head * hd, hd);
      RMatF scores(T, T);
      scores.noalias() = qh * kh.transpose();
      scores *= scale;
      for (int t = 0; t < T; ++t) {
        auto row = scores.row(t).head(t + 1);
        float mx = row.maxCoeff();
        Eigen::RowVectorXf e = (row.array() - mx).exp();
        float denom = e.sum();
        z.row(t).segment(head * hd, hd).noalias() = (e / denom) * vh.topRows(t + 1);
      }
    }
    h.noalias() += z * b.wo.transpose();

    RMatF m = rmsnorm_rows(h, b.ln2_gain);
    RMatF f1(T, config_.ff_dim);
    f1.noalias() = m * b.w1.transpose();
    f1.rowwise() += b.b1.transpose();
    f1 = f1.unaryExpr([](float x) { return gelu_tanh(x); });
    RMatF f2(T, d);
    f2.noalias() = f1 * b.w2.transpose();
    f2.rowwise() += b.b2.transpose();
    h += f2;
  }

  void apply_intervention(RMatF& h, const Intervention& iv) const {
    switch (iv.kind) {
      case InterventionKind::replace_at_position:
        h.row(*iv.position) = iv.payload.row(0);
        break;
      case InterventionKind::add_everywhere:
        h.rowwise() += iv.payload.row(0);
        break;
      case InterventionKind::project_replace: {
        if (iv.payload.rows() != h.rows())
          throw ValidationError("project_replace payload must supply one row per position");
        for (Eigen::Index t = 0; t < h.rows(); ++t) {
          h.row(t) = project_replace(h.row(t).transpose(), iv.payload.row(t).transpose(),
                                     iv.direction)
                         .transpose();
        }
        break;
      }
    }
  }

  // Incremental decoding with per-layer KV caches. The steering hook is applied
  // to prompt and generated positions alike.
  std::string sample_one(const std::vector<int>& prompt_ids, const Intervention* iv,
                         double temperature, int max_tokens, Rng& rng) const {
    const auto& w = *weights_;
    const int d = config_.hidden_dim;
    const int nh = config_.num_heads;
    const int hd = d / nh;
    const float scale = 1.0f / std::sqrt(float(hd));
    const int L = config_.num_layers;

    const size_t nl = size_t(L);
    std::vector<RMatF> kcache(nl), vcache(nl);
    for (auto& m : kcache) m.resize(0, d);
    for (auto& m : vcache) m.resize(0, d);

    auto step = [&](int token_id, int pos) -> Eigen::VectorXf {
      Eigen::VectorXf h = (w.embed.row(token_id) + w.pos.row(pos)).transpose();
      for (int layer = 0; layer < L; ++layer) {
        const auto& b = w.blocks[size_t(layer)];
        Eigen::VectorXf a = rmsnorm_vec(h, b.ln1_gain);
        Eigen::VectorXf q = b.wq * a;
        Eigen::VectorXf kk = b.wk * a;
        Eigen::VectorXf vv = b.wv * a;
        auto& K = kcache[size_t(layer)];
        auto& V = vcache[size_t(layer)];
        K.conservativeResize(K.rows() + 1, d);
        V.conservativeResize(V.rows() + 1, d);
        K.row(K.rows() - 1) = kk.transpose();
        V.row(V.rows() - 1) = vv.transpose();
        Eigen::VectorXf z(d);
        for (int head = 0; head < nh; ++head) {
          auto Kh = K.middleCols(head * hd, hd);
          auto Vh = V.middleCols(head * hd, hd);
          Eigen::VectorXf s = Kh * q.segment(head * hd, hd) * scale;
          Eigen::VectorXf p = softmax(s);
          z.segment(head * hd, hd).noalias() = Vh.transpose() * p;
        }
        h.noalias() += b.wo * z;
        Eigen::VectorXf m = rmsnorm_vec(h, b.ln2_gain);
        Eigen::VectorXf f1 = b.w1 * m + b.b1;
        for (Eigen::Index i = 0; i < f1.size(); ++i) f1[i] = gelu_tanh(f1[i]);
        h.noalias() += b.w2 * f1 + b.b2;
        if (iv && iv->layer == layer) h += iv->payload.row(0).transpose();
      }
      return h;
    };

    Eigen::VectorXf last;
    int pos = 0;
    for (int id : prompt_ids) last = step(id, pos++);

    std::vector<int> generated;
    const int eos = tokenizer_.eos_id();
    int budget = std::min(max_tokens, config_.max_context - int(prompt_ids.size()));
    for (int n = 0; n < budget; ++n) {
      Eigen::VectorXf logits = readout_logits(last);
      Eigen::VectorXf probs = softmax(logits / float(temperature));
      double u = rng.next_double();
      double acc = 0.0;
      int pick = int(probs.size()) - 1;
      for (Eigen::Index i = 0; i < probs.size(); ++i) {
        acc += double(probs[i]);
        if (u < acc) {
          pick = int(i);
          break;
        }
      }
      if (pick == eos) break;
      generated.push_back(pick);
      last = step(pick, pos++);
    }
    return tokenizer_.decode(generated);
  }

  TensorMap to_tensors() const {
    const auto& w = *weights_;
    TensorMap t;
    t["embed.weight"] = tensor_from(w.embed);
    t["pos.weight"] = tensor_from(w.pos);
    for (size_t i = 0; i < w.blocks.size(); ++i) {
      const auto& b = w.blocks[i];
      std::string p = "blocks." + std::to_string(i) + ".";
      t[p + "ln1.gain"] = tensor_from(b.ln1_gain);
      t[p + "ln2.gain"] = tensor_from(b.ln2_gain);
      t[p + "attn.wq"] = tensor_from(b.wq);
      t[p + "attn.wk"] = tensor_from(b.wk);
      t[p + "attn.wv"] = tensor_from(b.wv);
      t[p + "attn.wo"] = tensor_from(b.wo);
      t[p + "mlp.w1"] = tensor_from(b.w1);
      t[p + "mlp.b1"] = tensor_from(b.b1);
      t[p + "mlp.w2"] = tensor_from(b.w2);
      t[p + "mlp.b2"] = tensor_from(b.b2);
    }
    t["final_norm.gain"] = tensor_from(w.final_gain);
    t["unembed.weight"] = tensor_from(w.unembed);
    return t;
  }

  static ToyWeights from_tensors(const TensorMap& t, const ModelConfig& config) {
    auto get = [&t](const std::string& name) -> const NamedTensor& {
      auto it = t.find(name);
      if (it == t.end()) throw ValidationError("checkpoint missing tensor " + name);
      return it->second;
    };
    ToyWeights w;
    w.embed = matrix_from(get("embed.weight"), "embed.weight");
    w.pos = matrix_from(get("pos.weight"), "pos.weight");
    w.blocks.resize(size_t(config.num_layers));
    for (int i = 0; i < config.num_layers; ++i) {
      std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = w.blocks[size_t(i)];
      b.ln1_gain = vector_from(get(p + "ln1.gain"), p + "ln1.gain");
      b.ln2_gain = vector_from(get(p + "ln2.gain"), p + "ln2.gain");
      b.wq = matrix_from(get(p + "attn.wq"), p + "attn.wq");
      b.wk = matrix_from(get(p + "attn.wk"), p + "attn.wk");
      b.wv = matrix_from(get(p + "attn.wv"), p + "attn.wv");
      b.wo = matrix_from(get(p + "attn.wo"), p + "attn.wo");
      b.w1 = matrix_from(get(p + "mlp.w1"), p + "mlp.w1");
      b.b1 = vector_from(get(p + "mlp.b1"), p + "mlp.b1");
      b.w2 = matrix_from(get(p + "mlp.w2"), p + "mlp.w2");
      b.b2 = vector_from(get(p + "mlp.b2"), p + "mlp.b2");
    }
    w.final_gain = vector_from(get("final_norm.gain"), "final_norm.gain");
    w.unembed = matrix_from(get("unembed.weight"), "unembed.weight");
    if (w.embed.rows() != config.vocab_size || w.embed.cols() != config.hidden_dim)
      throw ValidationError("embed tensor shape disagrees with config");
    return w;
  }

  ModelConfig config_;
  WordTokenizer tokenizer_;
  std::shared_ptr<const ToyWeights> weights_;
};

}  // namespace adl
