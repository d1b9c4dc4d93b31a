#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

#include "adl/gateway.hpp"

namespace adl::testing {

/// Deterministic in-process stand-in for the completion service. A handler
/// maps requests to replies; optional injected failures and latency let tests
/// exercise the retry and concurrency paths without any network.
class MockChatBackend : public ChatBackend {
 public:
  using Handler = std::function<std::string(const ChatRequest&)>;

  explicit MockChatBackend(Handler handler = nullptr) : handler_(std::move(handler)) {}

  std::string complete(const ChatRequest& req) override {
    int call = ++calls_;
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++in_flight_;
      max_in_flight_seen_ = std::max(max_in_flight_seen_, in_flight_);
    }
    if (latency_.count() > 0) std::this_thread::sleep_for(latency_);
    {
      std::lock_guard<std::mutex> lock(mu_);
      --in_flight_;
    }
    if (call <= fail_first_n_)
      throw std::runtime_error("injected upstream failure #" + std::to_string(call));
    if (handler_) return handler_(req);
    return "ok";
  }

  void fail_first(int n) { fail_first_n_ = n; }
  void set_latency(std::chrono::milliseconds d) { latency_ = d; }
  int calls() const { return calls_.load(); }
  int max_in_flight_seen() const {
    std::lock_guard<std::mutex> lock(mu_);
    return max_in_flight_seen_;
  }

 private:
  Handler handler_;
  std::atomic<int> calls_{0};
  int fail_first_n_ = 0;
  std::chrono::milliseconds latency_{0};
  mutable std::mutex mu_;
  int in_flight_ = 0;
  int max_in_flight_seen_ = 0;
};

/// Gateway wired to a mock backend with a no-op sleeper; the mock pointer
/// stays visible to the test.
struct MockedGateway {
  MockChatBackend* backend;
  Gateway gateway;
};

inline MockedGateway make_mock_gateway(GatewayConfig cfg,
                                       MockChatBackend::Handler handler = nullptr) {
  auto owned = std::make_unique<MockChatBackend>(std::move(handler));
  MockChatBackend* raw = owned.get();
  return {raw, Gateway(std::move(cfg), std::move(owned), [](std::chrono::milliseconds) {})};
}

}  // namespace adl::testing
