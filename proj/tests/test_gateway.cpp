#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "adl/gateway.hpp"
#include "support/mock_backend.hpp"

using namespace adl;
using namespace adl::testing;

namespace {

ChatRequest simple_request(ChatRole role = ChatRole::agent, double temp = 0.0) {
  ChatRequest req;
  req.role = role;
  req.model_id = "mock-model";
  req.messages = {{"system", "you are a test"}, {"user", "say hi"}};
  req.temperature = temp;
  return req;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("request digest is stable and content-sensitive") {
  ChatRequest a = simple_request();
  ChatRequest b = simple_request();
  REQUIRE(Gateway::request_digest(a) == Gateway::request_digest(b));
  REQUIRE(Gateway::request_digest(a).size() == 64);

  b.temperature = 0.5;
  REQUIRE(Gateway::request_digest(a) != Gateway::request_digest(b));

  b = simple_request();
  b.messages[1].content = "say hello";
  REQUIRE(Gateway::request_digest(a) != Gateway::request_digest(b));

  b = simple_request();
  std::swap(b.messages[0], b.messages[1]);
  REQUIRE(Gateway::request_digest(a) != Gateway::request_digest(b));

  b = simple_request();
  b.role = ChatRole::grader_coherence;
  REQUIRE(Gateway::request_digest(a) != Gateway::request_digest(b));

  // max_tokens is delivery detail, not content
  b = simple_request();
  b.max_tokens = 99;
  REQUIRE(Gateway::request_digest(a) == Gateway::request_digest(b));
}

TEST_CASE("record mode persists fixtures and reuses them") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::record;
  cfg.fixtures_dir = fresh_dir("adl_gw_record");
  cfg.session = "s1";
  auto [backend, gateway] = make_mock_gateway(cfg, [](const ChatRequest&) { return "hi there"; });

  ChatRequest req = simple_request();
  ChatResponse r1 = gateway.chat(req);
  REQUIRE(r1.content == "hi there");
  REQUIRE_FALSE(r1.from_cache);
  REQUIRE(backend->calls() == 1);

  fs::path fixture = cfg.fixtures_dir / "s1" / (Gateway::request_digest(req) + ".json");
  REQUIRE(fs::exists(fixture));
  auto doc = nlohmann::json::parse(read_file(fixture));
  REQUIRE(doc["response"]["content"] == "hi there");
  REQUIRE(doc["request"]["model_id"] == "mock-model");
  REQUIRE(doc["request"]["messages"].size() == 2);

  ChatResponse r2 = gateway.chat(req);
  REQUIRE(r2.content == "hi there");
  REQUIRE(r2.from_cache);
  REQUIRE(backend->calls() == 1);  // no second round trip

  auto counters = gateway.counters();
  REQUIRE(counters["agent"].requests == 2);
  REQUIRE(counters["agent"].backend_calls == 1);
  REQUIRE(counters["agent"].cache_hits == 1);
}

TEST_CASE("replay mode serves fixtures and refuses unknown requests") {
  GatewayConfig record_cfg;
  record_cfg.mode = GatewayMode::record;
  record_cfg.fixtures_dir = fresh_dir("adl_gw_replay");
  record_cfg.session = "s1";
  {
    auto [backend, recorder] =
        make_mock_gateway(record_cfg, [](const ChatRequest&) { return "canned"; });
    recorder.chat(simple_request());
    REQUIRE(backend->calls() == 1);
  }

  GatewayConfig cfg = record_cfg;
  cfg.mode = GatewayMode::replay;
  Gateway gateway(cfg);  // no backend at all: replay must never need one

  ChatResponse r = gateway.chat(simple_request());
  REQUIRE(r.content == "canned");
  REQUIRE(r.from_cache);
  REQUIRE(gateway.total_backend_calls() == 0);

  ChatRequest other = simple_request();
  other.messages[1].content = "different";
  REQUIRE_THROWS_AS(gateway.chat(other), ExternalServiceError);
}

TEST_CASE("replay flags corrupted fixtures as upstream artifacts") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::replay;
  cfg.fixtures_dir = fresh_dir("adl_gw_corrupt");
  cfg.session = "s1";
  ChatRequest req = simple_request();
  fs::create_directories(cfg.fixtures_dir / "s1");
  write_file_atomic(cfg.fixtures_dir / "s1" / (Gateway::request_digest(req) + ".json"),
                    "{ not json");
  Gateway gateway(cfg);
  REQUIRE_THROWS_AS(gateway.chat(req), UpstreamArtifactError);
}

TEST_CASE("transient failures are retried with exponential backoff") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  cfg.fixtures_dir = fresh_dir("adl_gw_retry");

  std::vector<long> sleeps;
  auto owned = std::make_unique<MockChatBackend>([](const ChatRequest&) { return "finally"; });
  owned->fail_first(2);
  MockChatBackend* backend = owned.get();
  Gateway gateway(cfg, std::move(owned),
                  [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });

  ChatResponse r = gateway.chat(simple_request());
  REQUIRE(r.content == "finally");
  REQUIRE(r.attempts == 3);
  REQUIRE(backend->calls() == 3);
  REQUIRE(sleeps == std::vector<long>{100, 200});
}

TEST_CASE("persistent failure exhausts attempts and surfaces as external error") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;

  std::vector<long> sleeps;
  auto owned = std::make_unique<MockChatBackend>();
  owned->fail_first(1000);
  MockChatBackend* backend = owned.get();
  Gateway gateway(cfg, std::move(owned),
                  [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });

  REQUIRE_THROWS_AS(gateway.chat(simple_request()), ExternalServiceError);
  REQUIRE(backend->calls() == 5);
  REQUIRE(sleeps == std::vector<long>{100, 200, 400, 800});
}

TEST_CASE("grader roles are pinned to temperature zero") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  auto [backend, gateway] = make_mock_gateway(cfg);

  for (ChatRole role : {ChatRole::grader_coherence, ChatRole::grader_relevance,
                        ChatRole::grader_scale, ChatRole::grader_hypothesis}) {
    REQUIRE_THROWS_AS(gateway.chat(simple_request(role, 0.7)), ValidationError);
    REQUIRE_NOTHROW(gateway.chat(simple_request(role, 0.0)));
  }
  REQUIRE_NOTHROW(gateway.chat(simple_request(ChatRole::agent, 1.2)));
  REQUIRE(backend->calls() == 5);
}

TEST_CASE("malformed requests are rejected before any transport") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  auto [backend, gateway] = make_mock_gateway(cfg);

  ChatRequest no_model = simple_request();
  no_model.model_id.clear();
  REQUIRE_THROWS_AS(gateway.chat(no_model), ValidationError);

  ChatRequest no_messages = simple_request();
  no_messages.messages.clear();
  REQUIRE_THROWS_AS(gateway.chat(no_messages), ValidationError);

  ChatRequest bad_temp = simple_request();
  bad_temp.temperature = -0.1;
  REQUIRE_THROWS_AS(gateway.chat(bad_temp), ValidationError);

  REQUIRE(backend->calls() == 0);
  REQUIRE_THROWS_AS(gateway_mode_from_string("sideways"), ValidationError);
}

TEST_CASE("in-flight concurrency is bounded") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  cfg.max_in_flight = 2;
  auto owned = std::make_unique<MockChatBackend>([](const ChatRequest&) { return "ok"; });
  owned->set_latency(std::chrono::milliseconds(25));
  MockChatBackend* backend = owned.get();
  Gateway gateway(cfg, std::move(owned), [](std::chrono::milliseconds) {});

  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i)
    pool.emplace_back([&gateway, i] {
      ChatRequest req = simple_request();
      req.messages[1].content = "call " + std::to_string(i);
      gateway.chat(req);
    });
  for (auto& t : pool) t.join();

  REQUIRE(backend->calls() == 8);
  REQUIRE(backend->max_in_flight_seen() <= 2);
}

TEST_CASE("live mode writes no fixtures") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  cfg.fixtures_dir = fresh_dir("adl_gw_live");
  cfg.session = "s1";
  auto [backend, gateway] = make_mock_gateway(cfg);
  gateway.chat(simple_request());
  REQUIRE(backend->calls() == 1);
  REQUIRE_FALSE(fs::exists(cfg.fixtures_dir / "s1"));
}

TEST_CASE("replay needs no backend but live and record do") {
  GatewayConfig cfg;
  cfg.mode = GatewayMode::live;
  REQUIRE_THROWS_AS(Gateway(cfg), ValidationError);
  cfg.mode = GatewayMode::record;
  REQUIRE_THROWS_AS(Gateway(cfg), ValidationError);
  cfg.mode = GatewayMode::replay;
  REQUIRE_NOTHROW(Gateway(cfg));
}
