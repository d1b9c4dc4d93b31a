#pragma once

#include <Eigen/Dense>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "adl/corpus.hpp"
#include "adl/digest.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"
#include "adl/model.hpp"

namespace adl {

// ============================================================================
// Activation difference extraction: mean per-position residual difference
// between a finetuned and a base model over the first k positions of many
// unrelated samples, plus the expected finetuned activation norm used to
// rescale the difference downstream. Accumulation runs in float64 and the
// shard layout is fixed, so results do not depend on the thread count.
// ============================================================================

constexpr int kDiffFormatVersion = 1;

struct DiffOptions {
  int layer = 0;
  int k = 5;                 // leading positions tracked
  size_t max_samples = 10000;
  int eta_skip = 3;          // leading positions excluded from the norm estimate
  int shards = 32;
  int threads = 4;
};

struct DiffStats {
  int layer = 0;
  int k = 0;
  int hidden_dim = 0;
  long samples_used = 0;
  long eta_positions = 0;
  RMatF diff;       // k x d, finetuned minus base
  RMatF mean_base;  // k x d
  RMatF mean_ft;    // k x d
  std::vector<float> position_norms;  // row norms of diff
  float eta_ft = 0.0f;
  std::string base_model_id;
  std::string ft_model_id;
  std::string tokenizer_fingerprint;
  std::string corpus_fingerprint;

  Eigen::RowVectorXf delta(int position) const {
    if (position < 0 || position >= k) throw ValidationError("diff position out of range");
    return diff.row(position);
  }

  /// Position with the largest difference norm.
  int strongest_position() const {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (position_norms[size_t(j)] > position_norms[size_t(best)]) best = j;
    return best;
  }
};

template <class Source>
concept ActivationSource = requires(const Source& s, std::span<const int> ids, int layer) {
  { s.capture_all(ids, layer) } -> std::convertible_to<RMatF>;
  { s.hidden_dim() } -> std::convertible_to<int>;
};

// ----------------------------------------------------------------------------
// Core extraction over pre-tokenized samples.
// ----------------------------------------------------------------------------

template <ActivationSource SourceA, ActivationSource SourceB>
DiffStats extract_diff(const SourceA& base, const SourceB& ft,
                       const std::vector<std::vector<int>>& samples, const DiffOptions& opt) {
  if (opt.k < 1) throw ValidationError("diff extraction needs k >= 1");
  if (opt.layer < 0) throw ValidationError("diff extraction layer must be >= 0");
  if (opt.eta_skip < 0) throw ValidationError("eta_skip must be >= 0");
  if (opt.shards < 1 || opt.threads < 1)
    throw ValidationError("diff extraction needs shards >= 1 and threads >= 1");
  const int d_base = base.hidden_dim();
  const int d_ft = ft.hidden_dim();
  if (d_base != d_ft)
    throw ValidationError("hidden dim mismatch between models: " + std::to_string(d_base) +
                          " vs " + std::to_string(d_ft));
  const int d = d_base;
  if (samples.empty()) throw ValidationError("diff extraction corpus is empty");

  const size_t n = std::min(samples.size(), opt.max_samples);
  using DMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  struct ShardAcc {
    DMat sum_base, sum_ft;
    double eta_sum = 0.0;
    long eta_count = 0;
    long used = 0;
  };
  const int n_shards = opt.shards;
  std::vector<ShardAcc> acc;
  acc.resize(size_t(n_shards));
  for (auto& a : acc) {
    a.sum_base = DMat::Zero(opt.k, d);
    a.sum_ft = DMat::Zero(opt.k, d);
  }

  auto run_shard = [&](int s) {
    ShardAcc& a = acc[size_t(s)];
    const size_t lo = n * size_t(s) / size_t(n_shards);
    const size_t hi = n * size_t(s + 1) / size_t(n_shards);
    for (size_t i = lo; i < hi; ++i) {
      const auto& ids = samples[i];
      if (int(ids.size()) < opt.k) continue;  // too short to cover every tracked position
      RMatF hb = base.capture_all(ids, opt.layer);
      RMatF hf = ft.capture_all(ids, opt.layer);
      if (hb.rows() != hf.rows() || hb.cols() != d || hf.cols() != d)
        throw ValidationError("activation capture shape mismatch");
      a.sum_base += hb.topRows(opt.k).cast<double>();
      a.sum_ft += hf.topRows(opt.k).cast<double>();
      a.used += 1;
      for (Eigen::Index t = opt.eta_skip; t < hf.rows(); ++t) {
        a.eta_sum += hf.row(t).cast<double>().norm();
        a.eta_count += 1;
      }
    }
  };

  const int n_threads = std::min(opt.threads, n_shards);
  if (n_threads <= 1) {
    for (int s = 0; s < n_shards; ++s) run_shard(s);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mu;
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (int s = t; s < n_shards; s += n_threads) run_shard(s);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  DMat sum_base = DMat::Zero(opt.k, d);
  DMat sum_ft = DMat::Zero(opt.k, d);
  double eta_sum = 0;
  long eta_count = 0, used = 0;
  for (const auto& a : acc) {  // fixed shard order keeps the reduction exact
    sum_base += a.sum_base;
    sum_ft += a.sum_ft;
    eta_sum += a.eta_sum;
    eta_count += a.eta_count;
    used += a.used;
  }
  if (used == 0)
    throw ValidationError("no sample long enough for diff extraction (need >= " +
                          std::to_string(opt.k) + " tokens)");

  DiffStats out;
  out.layer = opt.layer;
  out.k = opt.k;
  out.hidden_dim = d;
  out.samples_used = used;
  out.eta_positions = eta_count;
  out.mean_base = (sum_base / double(used)).cast<float>();
  out.mean_ft = (sum_ft / double(used)).cast<float>();
  out.diff = out.mean_ft - out.mean_base;
  out.position_norms.resize(size_t(opt.k));
  for (int j = 0; j < opt.k; ++j) out.position_norms[size_t(j)] = out.diff.row(j).norm();
  out.eta_ft = eta_count > 0 ? float(eta_sum / double(eta_count)) : 0.0f;
  return out;
}

// ----------------------------------------------------------------------------
// Model-level entry point: tokenizes, truncates to context, stamps provenance.
// ----------------------------------------------------------------------------

inline DiffStats extract_model_diff(const ModelHandle& base, const ModelHandle& ft,
                                    const std::vector<std::string>& texts, DiffOptions opt) {
  if (base.tokenizer().fingerprint() != ft.tokenizer().fingerprint())
    throw ValidationError("tokenizer mismatch between base and finetuned model");
  if (base.num_layers() != ft.num_layers())
    throw ValidationError("layer count mismatch between base and finetuned model");
  std::vector<std::vector<int>> samples;
  samples.reserve(std::min(texts.size(), opt.max_samples));
  for (const auto& t : texts) {
    if (samples.size() == opt.max_samples) break;
    auto ids = base.encode(t);
    if (int(ids.size()) > base.max_context()) ids.resize(size_t(base.max_context()));
    samples.push_back(std::move(ids));
  }
  DiffStats stats = extract_diff(base, ft, samples, opt);
  stats.base_model_id = base.model_id();
  stats.ft_model_id = ft.model_id();
  stats.tokenizer_fingerprint = base.tokenizer().fingerprint();
  stats.corpus_fingerprint = corpus_digest(texts);
  return stats;
}

// ----------------------------------------------------------------------------
// Persistence: <name>.adlmeta.json describes and checksums <name>.adlbin,
// which packs float32 little-endian rows: diff, mean_base, mean_ft, the
// per-position norms, then eta_ft.
// ----------------------------------------------------------------------------

inline std::string diff_bin_payload(const DiffStats& s) {
  std::vector<float> floats;
  floats.reserve(size_t(3 * s.k * s.hidden_dim + s.k + 1));
  auto push_matrix = [&](const RMatF& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) floats.push_back(m(r, c));
  };
  push_matrix(s.diff);
  push_matrix(s.mean_base);
  push_matrix(s.mean_ft);
  for (float v : s.position_norms) floats.push_back(v);
  floats.push_back(s.eta_ft);
  return floats_to_bytes(floats.data(), floats.size());
}

inline void save_diff(const fs::path& stem, const DiffStats& s) {
  const std::string payload = diff_bin_payload(s);
  nlohmann::json meta = {
      {"format_version", kDiffFormatVersion},
      {"layer", s.layer},
      {"k", s.k},
      {"hidden_dim", s.hidden_dim},
      {"samples_used", s.samples_used},
      {"eta_positions", s.eta_positions},
      {"base_model_id", s.base_model_id},
      {"ft_model_id", s.ft_model_id},
      {"tokenizer_fingerprint", s.tokenizer_fingerprint},
      {"corpus_fingerprint", s.corpus_fingerprint},
      {"bin_bytes", payload.size()},
      {"bin_sha256", sha256_hex(payload)},
  };
  fs::path bin = stem;
  bin += ".adlbin";
  fs::path metap = stem;
  metap += ".adlmeta.json";
  write_file_atomic(bin, payload);
  write_file_atomic(metap, meta.dump(2));
}

inline DiffStats load_diff(const fs::path& stem) {
  fs::path bin = stem;
  bin += ".adlbin";
  fs::path metap = stem;
  metap += ".adlmeta.json";
  if (!fs::exists(metap))
    throw UpstreamArtifactError("diff metadata not found: " + metap.string());
  if (!fs::exists(bin)) throw UpstreamArtifactError("diff payload not found: " + bin.string());

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(metap));
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError("diff metadata is not valid json: " + std::string(e.what()));
  }
  if (meta.value("format_version", -1) != kDiffFormatVersion)
    throw UpstreamArtifactError("diff artifact has unsupported format_version");

  const std::string payload = read_file(bin);
  if (payload.size() != meta.value("bin_bytes", size_t(0)) ||
      sha256_hex(payload) != meta.value("bin_sha256", std::string()))
    throw UpstreamArtifactError("diff payload failed its checksum: " + bin.string());

  DiffStats s;
  s.layer = meta.at("layer").get<int>();
  s.k = meta.at("k").get<int>();
  s.hidden_dim = meta.at("hidden_dim").get<int>();
  s.samples_used = meta.at("samples_used").get<long>();
  s.eta_positions = meta.at("eta_positions").get<long>();
  s.base_model_id = meta.value("base_model_id", "");
  s.ft_model_id = meta.value("ft_model_id", "");
  s.tokenizer_fingerprint = meta.value("tokenizer_fingerprint", "");
  s.corpus_fingerprint = meta.value("corpus_fingerprint", "");
  if (s.k < 1 || s.hidden_dim < 1)
    throw UpstreamArtifactError("diff metadata has invalid dimensions");

  std::vector<float> floats = bytes_to_floats(payload);
  const size_t expect = size_t(3 * s.k * s.hidden_dim + s.k + 1);
  if (floats.size() != expect)
    throw UpstreamArtifactError("diff payload has wrong element count: " +
                                std::to_string(floats.size()) + " vs " + std::to_string(expect));
  size_t at = 0;
  auto pull_matrix = [&](RMatF& m) {
    m.resize(s.k, s.hidden_dim);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = floats[at++];
  };
  pull_matrix(s.diff);
  pull_matrix(s.mean_base);
  pull_matrix(s.mean_ft);
  s.position_norms.resize(size_t(s.k));
  for (int j = 0; j < s.k; ++j) s.position_norms[size_t(j)] = floats[at++];
  s.eta_ft = floats[at++];
  return s;
}

}  // namespace adl
