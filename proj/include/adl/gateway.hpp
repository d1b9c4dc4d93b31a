#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "adl/corpus.hpp"
#include "adl/digest.hpp"
#include "adl/errors.hpp"
#include "adl/io.hpp"

namespace adl {

// ============================================================================
// LLM gateway: the only component that talks to an external completion
// service. Every call is keyed by a content digest so responses can be
// recorded to fixtures and replayed byte for byte; grading calls are pinned
// to temperature zero; live traffic is retried with exponential backoff and
// bounded in-flight concurrency. Credentials live in the HTTP backend only.
// ============================================================================

enum class GatewayMode { live, record, replay };

inline GatewayMode gateway_mode_from_string(const std::string& s) {
  if (s == "live") return GatewayMode::live;
  if (s == "record") return GatewayMode::record;
  if (s == "replay") return GatewayMode::replay;
  throw ValidationError("unknown gateway mode: " + s + " (expected live|record|replay)");
}

inline const char* to_string(GatewayMode m) {
  switch (m) {
    case GatewayMode::live: return "live";
    case GatewayMode::record: return "record";
    case GatewayMode::replay: return "replay";
  }
  return "?";
}

enum class ChatRole {
  grader_coherence,
  grader_relevance,
  grader_scale,
  grader_hypothesis,
  agent,
  embedder,
};

inline const char* to_string(ChatRole r) {
  switch (r) {
    case ChatRole::grader_coherence: return "grader_coherence";
    case ChatRole::grader_relevance: return "grader_relevance";
    case ChatRole::grader_scale: return "grader_scale";
    case ChatRole::grader_hypothesis: return "grader_hypothesis";
    case ChatRole::agent: return "agent";
    case ChatRole::embedder: return "embedder";
  }
  return "?";
}

inline bool is_grader(ChatRole r) {
  return r == ChatRole::grader_coherence || r == ChatRole::grader_relevance ||
         r == ChatRole::grader_scale || r == ChatRole::grader_hypothesis;
}

struct ChatRequest {
  ChatRole role = ChatRole::agent;
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 512;
};

struct ChatResponse {
  std::string content;
  bool from_cache = false;
  int attempts = 0;
};

/// Transport interface. Implementations may throw on failure; the gateway
/// owns retries, caching, and accounting.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string complete(const ChatRequest& request) = 0;
};

struct RoleCounters {
  long requests = 0;       // calls into the gateway
  long backend_calls = 0;  // completed upstream round trips
  long cache_hits = 0;     // served from fixtures
};

struct GatewayConfig {
  GatewayMode mode = GatewayMode::replay;
  fs::path fixtures_dir = "fixtures/sessions";
  std::string session = "default";
  int max_attempts = 5;
  int max_in_flight = 4;
  std::chrono::milliseconds backoff_initial{100};

  void validate() const {
    if (session.empty()) throw ValidationError("gateway session name is empty");
    if (max_attempts < 1) throw ValidationError("gateway max_attempts must be >= 1");
    if (max_in_flight < 1) throw ValidationError("gateway max_in_flight must be >= 1");
  }
};

class Gateway {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit Gateway(GatewayConfig config, std::unique_ptr<ChatBackend> backend = nullptr,
                   Sleeper sleeper = nullptr)
      : config_(std::move(config)),
        backend_(std::move(backend)),
        sleeper_(sleeper ? std::move(sleeper)
                         : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }),
        slots_(std::max(1, config_.max_in_flight)) {
    config_.validate();
    if (config_.mode != GatewayMode::replay && !backend_)
      throw ValidationError("gateway mode '" + std::string(to_string(config_.mode)) +
                            "' needs a backend");
  }

  /// Content digest identifying a request; the fixture file name.
  static std::string request_digest(const ChatRequest& req) {
    nlohmann::json canon = {
        {"role", to_string(req.role)},
        {"model_id", req.model_id},
        {"temperature", req.temperature},
        {"messages", nlohmann::json::array()},
    };
    for (const auto& m : req.messages)
      canon["messages"].push_back({{"role", m.role}, {"content", m.content}});
    return sha256_hex(canon.dump());
  }

  ChatResponse chat(const ChatRequest& req) {
    validate_request(req);
    bump(req.role, &RoleCounters::requests);
    const std::string digest = request_digest(req);
    const fs::path fixture = fixture_path(digest);

    if (config_.mode == GatewayMode::replay) {
      auto cached = read_fixture(fixture);
      if (!cached)
        throw ExternalServiceError("no recorded response for request " + digest + " (session '" +
                                   config_.session + "'); re-run in record mode");
      bump(req.role, &RoleCounters::cache_hits);
      return {*cached, true, 0};
    }

    if (config_.mode == GatewayMode::record) {
      if (auto cached = read_fixture(fixture)) {
        bump(req.role, &RoleCounters::cache_hits);
        return {*cached, true, 0};
      }
    }

    ChatResponse resp = call_with_retries(req);
    bump(req.role, &RoleCounters::backend_calls);
    if (config_.mode == GatewayMode::record) write_fixture(fixture, req, resp.content);
    return resp;
  }

  std::map<std::string, RoleCounters> counters() const {
    std::lock_guard<std::mutex> lock(mu_);
    return counters_;
  }

  long total_backend_calls() const {
    std::lock_guard<std::mutex> lock(mu_);
    long n = 0;
    for (const auto& [_, c] : counters_) n += c.backend_calls;
    return n;
  }

  const GatewayConfig& config() const { return config_; }

  fs::path session_dir() const { return config_.fixtures_dir / config_.session; }

 private:
  static void validate_request(const ChatRequest& req) {
    if (req.model_id.empty()) throw ValidationError("chat request has no model_id");
    if (req.messages.empty()) throw ValidationError("chat request has no messages");
    if (is_grader(req.role) && req.temperature != 0.0)
      throw ValidationError("grader calls must run at temperature 0, got " +
                            std::to_string(req.temperature));
    if (req.temperature < 0.0) throw ValidationError("temperature must be >= 0");
    if (req.max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
  }

  fs::path fixture_path(const std::string& digest) const {
    return session_dir() / (digest + ".json");
  }

  std::optional<std::string> read_fixture(const fs::path& path) const {
    if (!fs::exists(path)) return std::nullopt;
    try {
      auto doc = nlohmann::json::parse(read_file(path));
      return doc.at("response").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw UpstreamArtifactError("fixture " + path.string() + " is malformed: " + e.what());
    }
  }

  void write_fixture(const fs::path& path, const ChatRequest& req, const std::string& content) {
    nlohmann::json doc = {
        {"request",
         {{"role", to_string(req.role)},
          {"model_id", req.model_id},
          {"temperature", req.temperature},
          {"max_tokens", req.max_tokens},
          {"messages", nlohmann::json::array()}}},
        {"response", {{"content", content}}},
    };
    for (const auto& m : req.messages)
      doc["request"]["messages"].push_back({{"role", m.role}, {"content", m.content}});
    write_file_atomic(path, doc.dump(2));
  }

  ChatResponse call_with_retries(const ChatRequest& req) {
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      try {
        slots_.acquire();
        std::string content;
        try {
          content = backend_->complete(req);
        } catch (...) {
          slots_.release();
          throw;
        }
        slots_.release();
        return {content, false, attempt};
      } catch (const std::exception& e) {
        last_error = e.what();
        if (attempt < config_.max_attempts)
          sleeper_(config_.backoff_initial * (1 << (attempt - 1)));
      }
    }
    throw ExternalServiceError("completion failed after " + std::to_string(config_.max_attempts) +
                               " attempts: " + last_error);
  }

  template <typename Field>
  void bump(ChatRole role, Field RoleCounters::* field) {
    std::lock_guard<std::mutex> lock(mu_);
    counters_[to_string(role)].*field += 1;
  }

  GatewayConfig config_;
  std::unique_ptr<ChatBackend> backend_;
  Sleeper sleeper_;
  std::counting_semaphore<4096> slots_;
  mutable std::mutex mu_;
  std::map<std::string, RoleCounters> counters_;
};

// ----------------------------------------------------------------------------
// Live HTTP backend (OpenAI-style chat completions). Credentials come from
// the environment and never leave this class.
// ----------------------------------------------------------------------------

class HttpChatBackend : public ChatBackend {
 public:
  HttpChatBackend() {
    const char* base = std::getenv("ADL_API_BASE");
    const char* key = std::getenv("ADL_API_KEY");
    if (!base || !*base)
      throw ValidationError("ADL_API_BASE is not set; live mode needs an endpoint");
    if (!key || !*key) throw ValidationError("ADL_API_KEY is not set; live mode needs a key");
    base_ = base;
    key_ = key;
  }

  std::string complete(const ChatRequest& req) override;

 private:
  std::string base_;
  std::string key_;
};

}  // namespace adl

// The HTTP implementation sits behind a macro so unit tests never pull in the
// socket stack; the CLI defines ADL_ENABLE_HTTP exactly once.
#ifdef ADL_ENABLE_HTTP
#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

namespace adl {

inline std::string HttpChatBackend::complete(const ChatRequest& req) {
  nlohmann::json body = {
      {"model", req.model_id},
      {"temperature", req.temperature},
      {"max_tokens", req.max_tokens},
      {"messages", nlohmann::json::array()},
  };
  for (const auto& m : req.messages)
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});

  httplib::Client client(base_);
  client.set_connection_timeout(30);
  client.set_read_timeout(120);
  httplib::Headers headers = {{"Authorization", "Bearer " + key_}};
  auto res = client.Post("/v1/chat/completions", headers, body.dump(), "application/json");
  if (!res)
    throw ExternalServiceError("completion endpoint unreachable: " +
                               httplib::to_string(res.error()));
  if (res->status != 200)
    throw ExternalServiceError("completion endpoint returned status " +
                               std::to_string(res->status));
  try {
    auto doc = nlohmann::json::parse(res->body);
    return doc.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ExternalServiceError("completion response was malformed: " + std::string(e.what()));
  }
}

}  // namespace adl
#endif
