#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "adl/digest.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"

namespace adl {

// ============================================================================
// Content-addressed artifact store. Every blob lives under objects/<sha256>;
// human-readable names are symlinks (or copies where symlinks are unavailable)
// plus an index.json mapping name -> hash. Reads verify the checksum, so a
// tampered or truncated artifact surfaces as an upstream error instead of
// silently feeding bad bytes into later stages.
// ============================================================================

/// Digest of a file, or of a directory tree (sorted relative paths + file
/// hashes). Used for inputs that stay outside the store, e.g. checkpoints.
inline std::string hash_path(const fs::path& path) {
  if (!fs::exists(path)) throw UpstreamArtifactError("cannot hash missing path: " + path.string());
  if (fs::is_regular_file(path)) return sha256_hex(read_file(path));
  if (!fs::is_directory(path))
    throw UpstreamArtifactError("cannot hash special file: " + path.string());
  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = fs::relative(entry.path(), path).generic_string();
    lines.push_back(rel + "\t" + sha256_hex(read_file(entry.path())) + "\n");
  }
  if (lines.empty()) throw UpstreamArtifactError("directory has no files to hash: " + path.string());
  std::sort(lines.begin(), lines.end());
  Sha256 h;
  for (const auto& line : lines) h.update(line);
  auto d = h.finish();
  return to_hex(d.data(), d.size());
}

class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "objects");
    load_index();
  }

  const fs::path& root() const { return root_; }

  std::string put_text(const std::string& name, std::string_view text) {
    check_name(name);
    std::string hash = sha256_hex(text);
    fs::path obj = root_ / "objects" / hash;
    if (!fs::exists(obj)) write_file_atomic(obj, text);
    link_name(name, hash);
    index_[name] = hash;
    save_index();
    return hash;
  }

  std::string put_file(const std::string& name, const fs::path& src) {
    if (!fs::exists(src)) throw UpstreamArtifactError("artifact source missing: " + src.string());
    return put_text(name, read_file(src));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::string hash_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw UpstreamArtifactError("artifact '" + name + "' not found in " + root_.string());
    return it->second;
  }

  fs::path path_of(const std::string& name) const { return root_ / "objects" / hash_of(name); }

  /// Read and checksum-verify a named artifact.
  std::string read_text(const std::string& name) const {
    std::string hash = hash_of(name);
    fs::path obj = root_ / "objects" / hash;
    if (!fs::exists(obj))
      throw UpstreamArtifactError("artifact blob missing for '" + name + "': " + obj.string());
    std::string data = read_file(obj);
    if (sha256_hex(data) != hash)
      throw UpstreamArtifactError("artifact '" + name + "' failed checksum verification");
    return data;
  }

  /// Re-hash every indexed blob; returns the names that fail.
  std::vector<std::string> verify() const {
    std::vector<std::string> bad;
    for (const auto& [name, hash] : index_) {
      fs::path obj = root_ / "objects" / hash;
      if (!fs::exists(obj) || sha256_hex(read_file(obj)) != hash) bad.push_back(name);
    }
    return bad;
  }

  const std::map<std::string, std::string>& index() const { return index_; }

 private:
  static void check_name(const std::string& name) {
    if (name.empty() || name.find('/') != std::string::npos || name.front() == '.')
      throw ValidationError("invalid artifact name: '" + name + "'");
  }

  void link_name(const std::string& name, const std::string& hash) {
    fs::path link = root_ / name;
    std::error_code ec;
    fs::remove(link, ec);
    fs::create_symlink(fs::path("objects") / hash, link, ec);
    if (ec) fs::copy_file(root_ / "objects" / hash, link, fs::copy_options::overwrite_existing);
  }

  void load_index() {
    fs::path p = root_ / "index.json";
    if (!fs::exists(p)) return;
    try {
      nlohmann::json j = nlohmann::json::parse(read_file(p));
      for (const auto& [name, hash] : j.items()) index_[name] = hash.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw UpstreamArtifactError("corrupt artifact index " + p.string() + ": " + e.what());
    }
  }

  void save_index() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, hash] : index_) j[name] = hash;
    write_file_atomic(root_ / "index.json", j.dump(2) + "\n");
  }

  fs::path root_;
  std::map<std::string, std::string> index_;
};

// ============================================================================
// Run manifest: what a pipeline invocation produced, what it cost, and which
// stages were reused from a previous run.
// ============================================================================

struct RunManifest {
  std::string config_digest;
  std::map<std::string, std::string> artifacts;  // name -> sha256
  std::map<std::string, double> timings_ms;      // stage -> wall time
  std::map<std::string, long> model_passes;      // stage -> forward passes
  std::vector<std::string> stages_run;
  std::vector<std::string> stages_skipped;
  std::map<std::string, std::string> tool_versions;
};

inline nlohmann::json run_manifest_to_json(const RunManifest& m) {
  return nlohmann::json{{"config_digest", m.config_digest},
                        {"artifacts", m.artifacts},
                        {"timings_ms", m.timings_ms},
                        {"model_passes", m.model_passes},
                        {"stages_run", m.stages_run},
                        {"stages_skipped", m.stages_skipped},
                        {"tool_versions", m.tool_versions}};
}

inline RunManifest run_manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.config_digest = j.at("config_digest").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.timings_ms = j.at("timings_ms").get<std::map<std::string, double>>();
    m.model_passes = j.at("model_passes").get<std::map<std::string, long>>();
    m.stages_run = j.at("stages_run").get<std::vector<std::string>>();
    m.stages_skipped = j.at("stages_skipped").get<std::vector<std::string>>();
    m.tool_versions = j.at("tool_versions").get<std::map<std::string, std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError(std::string("bad run manifest: ") + e.what());
  }
}

inline void save_run_manifest(const RunManifest& m, const fs::path& path) {
  write_file_atomic(path, run_manifest_to_json(m).dump(2) + "\n");
}

inline RunManifest load_run_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw UpstreamArtifactError("run manifest not found: " + path.string());
  try {
    return run_manifest_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw UpstreamArtifactError("unreadable run manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace adl
