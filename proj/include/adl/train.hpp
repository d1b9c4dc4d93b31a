#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <thread>
#include <vector>

#include "adl/errors.hpp"
#include "adl/model.hpp"
#include "adl/projection.hpp"
#include "adl/rng.hpp"

namespace adl {

// ============================================================================
// Full-parameter training for the toy decoder: AdamW, linear warmup + cosine
// decay, global-norm gradient clipping. Optionally ablates the projection of
// the layer-l residual onto a fixed subspace during every forward pass (the
// ablation operator is linear and symmetric, so the backward pass applies it
// to the incoming gradient at the same point).
// ============================================================================

struct TrainRecipe {
  int steps = 200;
  int batch_docs = 16;
  double lr = 3e-3;
  double lr_min_frac = 0.1;
  int warmup_steps = 20;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  int threads = 4;

  void validate() const {
    if (steps < 1) throw ValidationError("train recipe: steps must be >= 1");
    if (batch_docs < 1) throw ValidationError("train recipe: batch_docs must be >= 1");
    if (lr < 0) throw ValidationError("train recipe: lr must be >= 0");
    if (warmup_steps < 0) throw ValidationError("train recipe: warmup_steps must be >= 0");
    if (threads < 1) throw ValidationError("train recipe: threads must be >= 1");
  }
};

struct TrainReport {
  std::vector<double> step_losses;
  double initial_loss = 0.0;  // mean over the first few steps
  double final_loss = 0.0;    // mean over the last few steps
  int steps = 0;

  double loss_drop_fraction() const {
    if (initial_loss <= 0.0) return 0.0;
    return (initial_loss - final_loss) / initial_loss;
  }
};

namespace detail {

inline std::vector<std::pair<float*, size_t>> param_views(ToyWeights& w) {
  std::vector<std::pair<float*, size_t>> v;
  auto add = [&v](auto& t) { v.emplace_back(t.data(), size_t(t.size())); };
  add(w.embed);
  add(w.pos);
  for (auto& b : w.blocks) {
    add(b.ln1_gain);
    add(b.ln2_gain);
    add(b.wq);
    add(b.wk);
    add(b.wv);
    add(b.wo);
    add(b.w1);
    add(b.b1);
    add(b.w2);
    add(b.b2);
  }
  add(w.final_gain);
  add(w.unembed);
  return v;
}

inline ToyWeights zeros_like(const ToyWeights& w) {
  ToyWeights z;
  z.embed = RMatF::Zero(w.embed.rows(), w.embed.cols());
  z.pos = RMatF::Zero(w.pos.rows(), w.pos.cols());
  z.blocks.resize(w.blocks.size());
  for (size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    auto& o = z.blocks[i];
    o.ln1_gain = Eigen::VectorXf::Zero(b.ln1_gain.size());
    o.ln2_gain = Eigen::VectorXf::Zero(b.ln2_gain.size());
    o.wq = RMatF::Zero(b.wq.rows(), b.wq.cols());
    o.wk = RMatF::Zero(b.wk.rows(), b.wk.cols());
    o.wv = RMatF::Zero(b.wv.rows(), b.wv.cols());
    o.wo = RMatF::Zero(b.wo.rows(), b.wo.cols());
    o.w1 = RMatF::Zero(b.w1.rows(), b.w1.cols());
    o.b1 = Eigen::VectorXf::Zero(b.b1.size());
    o.w2 = RMatF::Zero(b.w2.rows(), b.w2.cols());
    o.b2 = Eigen::VectorXf::Zero(b.b2.size());
  }
  z.final_gain = Eigen::VectorXf::Zero(w.final_gain.size());
  z.unembed = RMatF::Zero(w.unembed.rows(), w.unembed.cols());
  return z;
}

inline float gelu_tanh_grad(float x) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  float x3 = x * x * x;
  float u = c * (x + 0.044715f * x3);
  float th = std::tanh(u);
  float sech2 = 1.0f - th * th;
  return 0.5f * (1.0f + th) + 0.5f * x * sech2 * c * (1.0f + 3.0f * 0.044715f * x * x);
}

// d(rmsnorm)/dx given upstream row grads; also accumulates the gain grad.
inline void rmsnorm_backward_rows(const RMatF& x, const Eigen::VectorXf& gain, const RMatF& dy,
                                  RMatF& dx, Eigen::VectorXf& dgain) {
  const Eigen::Index d = x.cols();
  dx.resize(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    float ms = x.row(r).squaredNorm() / float(d);
    float inv = 1.0f / std::sqrt(ms + kRmsEps);
    Eigen::RowVectorXf gdy = dy.row(r).cwiseProduct(gain.transpose());
    float dot = gdy.cwiseProduct(x.row(r)).sum();
    dx.row(r) = gdy * inv - x.row(r) * (inv * inv * inv / float(d) * dot);
    dgain += dy.row(r).cwiseProduct(x.row(r) * inv).transpose();
  }
}

}  // namespace detail

class Trainer {
 public:
  Trainer(ModelConfig config, WordTokenizer tokenizer, ToyWeights init)
      : config_(std::move(config)), tokenizer_(std::move(tokenizer)), weights_(std::move(init)) {
    if (config_.hidden_dim % config_.num_heads != 0)
      throw ValidationError("hidden_dim must be divisible by num_heads");
  }

  // Residual directions ablated at `layer` during every training forward pass.
  // Vectors are orthonormalized; zero-norm inputs are rejected.
  void set_ablation(int layer, const std::vector<Eigen::VectorXf>& directions) {
    if (layer < 0 || layer >= config_.num_layers)
      throw ValidationError("ablation layer out of range");
    for (const auto& v : directions) {
      if (v.size() != config_.hidden_dim) throw ValidationError("ablation direction dim mismatch");
      if (v.norm() == 0.0f) throw NumericError("ablation direction has zero norm");
    }
    ablate_layer_ = layer;
    ablate_basis_ = orthonormalize(directions);
  }

  const ToyWeights& weights() const { return weights_; }
  ToyWeights take_weights() { return std::move(weights_); }

  ModelHandle snapshot(const std::string& model_id) const {
    ModelConfig cfg = config_;
    cfg.model_id = model_id;
    return ModelHandle(cfg, tokenizer_, std::make_shared<ToyWeights>(weights_));
  }

  /// Residual stream after block `layer` under the current weights, including
  /// the ablation hook if one is set. Lets callers audit training invariants.
  RMatF forward_residual(const std::vector<int>& ids, int layer) const {
    if (layer < 0 || layer >= config_.num_layers)
      throw ValidationError("forward_residual: layer out of range");
    Cache cache;
    forward_doc(ids, cache);
    if (layer + 1 < config_.num_layers) return cache.blocks[size_t(layer) + 1].h_in;
    return cache.h_final;
  }

  using StepCallback = std::function<void(int step, double loss)>;

  // --------------------------------------------------------------------------
  // Optimization loop. Docs are pre-tokenized; each step samples batch_docs of
  // them without replacement within a shuffled epoch ordering. on_step fires
  // after each weight update.
  // --------------------------------------------------------------------------
  TrainReport run(const std::vector<std::vector<int>>& docs, const TrainRecipe& recipe,
                  const StepCallback& on_step = {}) {
    recipe.validate();
    if (docs.empty()) throw ValidationError("training corpus is empty");
    for (const auto& d : docs)
      if (d.size() < 2) throw ValidationError("training doc shorter than 2 tokens");

    ToyWeights adam_m = detail::zeros_like(weights_);
    ToyWeights adam_v = detail::zeros_like(weights_);
    auto params = detail::param_views(weights_);
    auto mviews = detail::param_views(adam_m);
    auto vviews = detail::param_views(adam_v);

    std::vector<size_t> order(docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(recipe.seed);
    rng.shuffle(order);
    size_t cursor = 0;

    std::vector<ToyWeights> slot_grads;
    TrainReport report;
    report.steps = recipe.steps;

    for (int step = 0; step < recipe.steps; ++step) {
      std::vector<const std::vector<int>*> batch;
      batch.reserve(size_t(recipe.batch_docs));
      for (int b = 0; b < recipe.batch_docs; ++b) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(&docs[order[cursor++]]);
      }

      double loss = batch_loss_and_grads(batch, recipe.threads, slot_grads);
      if (!std::isfinite(loss))
        throw NumericError("training diverged (non-finite loss) at step " + std::to_string(step));
      report.step_losses.push_back(loss);

      // Per-doc grad buffers are reduced in slot order, so results do not
      // depend on the thread count.
      ToyWeights& total = slot_grads[0];
      auto tviews = detail::param_views(total);
      for (size_t s = 1; s < batch.size(); ++s) {
        auto sviews = detail::param_views(slot_grads[s]);
        for (size_t p = 0; p < tviews.size(); ++p)
          Eigen::Map<Eigen::ArrayXf>(tviews[p].first, Eigen::Index(tviews[p].second)) +=
              Eigen::Map<const Eigen::ArrayXf>(sviews[p].first, Eigen::Index(sviews[p].second));
      }
      float inv_batch = 1.0f / float(batch.size());
      double sqnorm = 0.0;
      for (auto& [ptr, n] : tviews) {
        Eigen::Map<Eigen::ArrayXf> g(ptr, Eigen::Index(n));
        g *= inv_batch;
        sqnorm += double(g.square().sum());
      }
      double gnorm = std::sqrt(sqnorm);
      if (!std::isfinite(gnorm))
        throw NumericError("training diverged (non-finite gradient) at step " +
                           std::to_string(step));
      float scale = 1.0f;
      if (recipe.clip_norm > 0 && gnorm > recipe.clip_norm)
        scale = float(recipe.clip_norm / gnorm);

      double lr = lr_at(step, recipe);
      double bias1 = 1.0 - std::pow(recipe.beta1, step + 1);
      double bias2 = 1.0 - std::pow(recipe.beta2, step + 1);
      for (size_t p = 0; p < params.size(); ++p) {
        Eigen::Map<Eigen::ArrayXf> w(params[p].first, Eigen::Index(params[p].second));
        Eigen::Map<Eigen::ArrayXf> g(tviews[p].first, Eigen::Index(tviews[p].second));
        Eigen::Map<Eigen::ArrayXf> m(mviews[p].first, Eigen::Index(mviews[p].second));
        Eigen::Map<Eigen::ArrayXf> v(vviews[p].first, Eigen::Index(vviews[p].second));
        m = float(recipe.beta1) * m + float(1.0 - recipe.beta1) * (g * scale);
        v = float(recipe.beta2) * v + float(1.0 - recipe.beta2) * (g * scale).square();
        Eigen::ArrayXf mhat = m / float(bias1);
        Eigen::ArrayXf vhat = v / float(bias2);
        w -= float(lr) * (mhat / (vhat.sqrt() + float(recipe.adam_eps)) +
                          float(recipe.weight_decay) * w);
      }
      if (on_step) on_step(step, loss);
    }

    int window = std::min<int>(10, recipe.steps);
    double head = 0, tail = 0;
    for (int i = 0; i < window; ++i) {
      head += report.step_losses[size_t(i)];
      tail += report.step_losses[report.step_losses.size() - 1 - size_t(i)];
    }
    report.initial_loss = head / window;
    report.final_loss = tail / window;
    return report;
  }

  /// Forward-only token-mean CE of one doc under the current weights, with the
  /// ablation hook applied when configured. Used by gradient-check tests.
  double doc_loss(const std::vector<int>& ids) const {
    Cache cache;
    return forward_doc(ids, cache);
  }

  /// Exposed for gradient verification: loss plus parameter grads for one doc.
  double doc_loss_and_grad(const std::vector<int>& ids, ToyWeights& grads) const {
    grads = detail::zeros_like(weights_);
    Cache cache;
    double loss = forward_doc(ids, cache);
    backward_doc(ids, cache, grads);
    return loss;
  }

 private:
  struct BlockCache {
    RMatF h_in;   // residual entering the block
    RMatF a;      // post-ln1
    RMatF q, k, v;
    std::vector<RMatF> probs;  // per head, row t holds weights over 0..t
    RMatF z;      // concatenated head outputs
    RMatF h_mid;  // after attention residual add
    RMatF m;      // post-ln2
    RMatF f1pre;  // pre-gelu
    RMatF f1;     // post-gelu
  };
  struct Cache {
    std::vector<BlockCache> blocks;
    RMatF h_final;  // residual after the last block (post-ablation if any)
    RMatF logits;
  };

  static double lr_at(int step, const TrainRecipe& r) {
    if (r.warmup_steps > 0 && step < r.warmup_steps)
      return r.lr * double(step + 1) / double(r.warmup_steps);
    int decay_span = std::max(1, r.steps - r.warmup_steps);
    double t = double(step - r.warmup_steps) / double(decay_span);
    double lr_min = r.lr * r.lr_min_frac;
    return lr_min + 0.5 * (r.lr - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
  }

  void apply_ablation_rows(RMatF& h) const {
    for (const auto& b : ablate_basis_) {
      Eigen::VectorXf coef = h * b;          // (T)
      h.noalias() -= coef * b.transpose();   // rank-1 removal per basis vector
    }
  }

  double forward_doc(const std::vector<int>& ids, Cache& cache) const {
    const auto& w = weights_;
    const int T = int(ids.size());
    const int d = config_.hidden_dim;
    const int nh = config_.num_heads;
    const int hd = d / nh;
    const float scale = 1.0f / std::sqrt(float(hd));

    RMatF h(T, d);
    for (int t = 0; t < T; ++t) h.row(t) = w.embed.row(ids[size_t(t)]) + w.pos.row(t);

    cache.blocks.assign(size_t(config_.num_layers), BlockCache{});
    for (int layer = 0; layer < config_.num_layers; ++layer) {
      BlockCache& c = cache.blocks[size_t(layer)];
      const auto& b = w.blocks[size_t(layer)];
      c.h_in = h;
      c.a = rmsnorm_rows(h, b.ln1_gain);
      c.q.noalias() = c.a * b.wq.transpose();
      c.k.noalias() = c.a * b.wk.transpose();
      c.v.noalias() = c.a * b.wv.transpose();
      c.z.resize(T, d);
      c.probs.assign(size_t(nh), RMatF::Zero(T, T));
      for (int head = 0; head < nh; ++head) {
        auto qh = c.q.middleCols(head * hd, hd);
        auto kh = c.k.middleCols(head * hd, hd);
        auto vh = c.v.middleCols(head * hd, hd);
        RMatF scores(T, T);
        scores.noalias() = qh * kh.transpose();
        scores *= scale;
        RMatF& p = c.probs[size_t(head)];
        for (int t = 0; t < T; ++t) {
          auto row = scores.row(t).head(t + 1);
          float mx = row.maxCoeff();
          Eigen::RowVectorXf e = (row.array() - mx).exp();
          p.row(t).head(t + 1) = e / e.sum();
          c.z.row(t).segment(head * hd, hd).noalias() = p.row(t).head(t + 1) * vh.topRows(t + 1);
        }
      }
      h.noalias() += c.z * b.wo.transpose();
      c.h_mid = h;
      c.m = rmsnorm_rows(h, b.ln2_gain);
      c.f1pre.resize(T, config_.ff_dim);
      c.f1pre.noalias() = c.m * b.w1.transpose();
      c.f1pre.rowwise() += b.b1.transpose();
      c.f1 = c.f1pre.unaryExpr([](float x) { return gelu_tanh(x); });
      h.noalias() += c.f1 * b.w2.transpose();
      h.rowwise() += b.b2.transpose();
      if (layer == ablate_layer_ && !ablate_basis_.empty()) apply_ablation_rows(h);
    }
    cache.h_final = h;

    RMatF nf = rmsnorm_rows(h, w.final_gain);
    cache.logits.resize(T, config_.vocab_size);
    cache.logits.noalias() = nf * w.unembed.transpose();

    double total = 0.0;
    for (int t = 0; t + 1 < T; ++t) {
      Eigen::RowVectorXf row = cache.logits.row(t);
      float mx = row.maxCoeff();
      double lse = 0.0;
      for (Eigen::Index i = 0; i < row.size(); ++i) lse += std::exp(double(row[i] - mx));
      total += std::log(lse) + double(mx) - double(row[ids[size_t(t) + 1]]);
    }
    return total / double(T - 1);
  }

  void backward_doc(const std::vector<int>& ids, const Cache& cache, ToyWeights& g) const {
    const auto& w = weights_;
    const int T = int(ids.size());
    const int d = config_.hidden_dim;
    const int nh = config_.num_heads;
    const int hd = d / nh;
    const float scale = 1.0f / std::sqrt(float(hd));
    const float inv_preds = 1.0f / float(T - 1);

    RMatF dlogits = RMatF::Zero(T, config_.vocab_size);
    for (int t = 0; t + 1 < T; ++t) {
      Eigen::RowVectorXf row = cache.logits.row(t);
      float mx = row.maxCoeff();
      Eigen::RowVectorXf e = (row.array() - mx).exp();
      dlogits.row(t) = e / e.sum();
      dlogits(t, ids[size_t(t) + 1]) -= 1.0f;
      dlogits.row(t) *= inv_preds;
    }

    RMatF nf = rmsnorm_rows(cache.h_final, w.final_gain);
    g.unembed.noalias() += dlogits.transpose() * nf;
    RMatF dnf(T, d);
    dnf.noalias() = dlogits * w.unembed;
    RMatF dh;
    detail::rmsnorm_backward_rows(cache.h_final, w.final_gain, dnf, dh, g.final_gain);

    for (int layer = config_.num_layers - 1; layer >= 0; --layer) {
      const BlockCache& c = cache.blocks[size_t(layer)];
      const auto& b = w.blocks[size_t(layer)];
      auto& gb = g.blocks[size_t(layer)];
      if (layer == ablate_layer_ && !ablate_basis_.empty()) apply_ablation_rows(dh);

      // MLP branch: h_out = h_mid + gelu(m W1^T + b1) W2^T + b2
      RMatF df1(T, config_.ff_dim);
      df1.noalias() = dh * b.w2;
      gb.w2.noalias() += dh.transpose() * c.f1;
      gb.b2 += dh.colwise().sum().transpose();
      RMatF df1pre = df1.cwiseProduct(
          c.f1pre.unaryExpr([](float x) { return detail::gelu_tanh_grad(x); }));
      RMatF dm(T, d);
      dm.noalias() = df1pre * b.w1;
      gb.w1.noalias() += df1pre.transpose() * c.m;
      gb.b1 += df1pre.colwise().sum().transpose();
      RMatF dh_mid_from_norm;
      detail::rmsnorm_backward_rows(c.h_mid, b.ln2_gain, dm, dh_mid_from_norm, gb.ln2_gain);
      RMatF dh_mid = dh + dh_mid_from_norm;

      // Attention branch: h_mid = h_in + z Wo^T
      RMatF dz(T, d);
      dz.noalias() = dh_mid * b.wo;
      gb.wo.noalias() += dh_mid.transpose() * c.z;
      RMatF dq = RMatF::Zero(T, d), dk = RMatF::Zero(T, d), dv = RMatF::Zero(T, d);
      for (int head = 0; head < nh; ++head) {
        auto vh = c.v.middleCols(head * hd, hd);
        auto qh = c.q.middleCols(head * hd, hd);
        auto kh = c.k.middleCols(head * hd, hd);
        const RMatF& p = c.probs[size_t(head)];
        for (int t = 0; t < T; ++t) {
          Eigen::RowVectorXf dzrow = dz.row(t).segment(head * hd, hd);
          Eigen::RowVectorXf dp = (vh.topRows(t + 1) * dzrow.transpose()).transpose();
          dv.block(0, head * hd, t + 1, hd).noalias() +=
              p.row(t).head(t + 1).transpose() * dzrow;
          // softmax rows: ds_j = p_j (dp_j - sum_k dp_k p_k)
          float mix = dp.cwiseProduct(p.row(t).head(t + 1)).sum();
          Eigen::RowVectorXf ds =
              p.row(t).head(t + 1).cwiseProduct((dp.array() - mix).matrix());
          ds *= scale;
          dq.row(t).segment(head * hd, hd).noalias() += ds * kh.topRows(t + 1);
          dk.block(0, head * hd, t + 1, hd).noalias() += ds.transpose() * qh.row(t);
        }
      }
      RMatF da(T, d);
      da.noalias() = dq * b.wq + dk * b.wk + dv * b.wv;
      gb.wq.noalias() += dq.transpose() * c.a;
      gb.wk.noalias() += dk.transpose() * c.a;
      gb.wv.noalias() += dv.transpose() * c.a;
      RMatF dh_in_from_norm;
      detail::rmsnorm_backward_rows(c.h_in, b.ln1_gain, da, dh_in_from_norm, gb.ln1_gain);
      dh = dh_mid + dh_in_from_norm;
    }

    for (int t = 0; t < T; ++t) {
      g.embed.row(ids[size_t(t)]) += dh.row(t);
      g.pos.row(t) += dh.row(t);
    }
  }

  double batch_loss_and_grads(const std::vector<const std::vector<int>*>& batch, int threads,
                              std::vector<ToyWeights>& slot_grads) {
    if (slot_grads.size() < batch.size()) slot_grads.resize(batch.size());
    std::vector<double> losses(batch.size(), 0.0);
    auto work = [&](size_t begin, size_t end) {
      for (size_t i = begin; i < end; ++i) {
        slot_grads[i] = detail::zeros_like(weights_);
        Cache cache;
        losses[i] = forward_doc(*batch[i], cache);
        if (std::isfinite(losses[i])) backward_doc(*batch[i], cache, slot_grads[i]);
      }
    };
    int nt = std::min<int>(threads, int(batch.size()));
    if (nt <= 1) {
      work(0, batch.size());
    } else {
      std::vector<std::thread> pool;
      size_t chunk = (batch.size() + size_t(nt) - 1) / size_t(nt);
      for (int t = 0; t < nt; ++t) {
        size_t begin = size_t(t) * chunk;
        size_t end = std::min(batch.size(), begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(work, begin, end);
      }
      for (auto& th : pool) th.join();
    }
    double total = 0.0;
    for (double l : losses) total += l;
    return total / double(batch.size());
  }

  ModelConfig config_;
  WordTokenizer tokenizer_;
  ToyWeights weights_;
  int ablate_layer_ = -1;
  std::vector<Eigen::VectorXf> ablate_basis_;
};

}  // namespace adl
