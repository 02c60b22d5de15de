#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "helpers.hpp"
#include "recx/chat.hpp"
#include "recx/types.hpp"

using namespace recx;
using nlohmann::json;

namespace {

std::string reply_body(const std::string& text) {
  return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", text}}}}})}}.dump();
}

// Local chat endpoint whose response to the n-th request (0-based) is scripted.
class MockServer {
 public:
  using Script = std::function<std::pair<int, std::string>(std::size_t n, const httplib::Request&)>;

  explicit MockServer(Script script) : script_(std::move(script)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const std::size_t n = hits_++;
      last_auth_ = req.get_header_value("Authorization");
      auto [status, body] = script_(n, req);
      res.status = status;
      res.set_content(body, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t hits() const { return hits_; }
  std::string last_auth() const { return last_auth_; }

 private:
  Script script_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<std::size_t> hits_{0};
  std::string last_auth_;
};

ChatBackendConfig fast_config(const std::string& endpoint) {
  ChatBackendConfig c;
  c.endpoint = endpoint;
  c.initial_backoff_seconds = 0.01;
  c.timeout_seconds = 5;
  c.api_key_env = "RECX_TEST_CHAT_KEY";
  return c;
}

const std::vector<ChatMessage> hello{{"user", "hello"}};

}  // namespace

TEST_CASE("request body uses the chat-completions schema") {
  const json body = json::parse(chat_request_body("m1", {{"system", "s"}, {"user", "u"}}, 0.0));
  CHECK(body["model"] == "m1");
  CHECK(body["temperature"] == 0.0);
  REQUIRE(body["messages"].size() == 2);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["content"] == "u");
}

TEST_CASE("response parsing") {
  CHECK(parse_chat_response(reply_body("3, 5")) == "3, 5");
  CHECK_THROWS_AS(parse_chat_response("{}"), BackendError);
  CHECK_THROWS_AS(parse_chat_response("not json"), BackendError);
  CHECK_THROWS_AS(parse_chat_response(R"({"choices":[{"message":{"content":7}}]})"), BackendError);
}

TEST_CASE("mock server returning fixed text") {
  MockServer server([](std::size_t, const httplib::Request&) { return std::pair{200, reply_body("fixed")}; });
  ::setenv("RECX_TEST_CHAT_KEY", "sk-test-123", 1);
  HttpChatBackend backend(fast_config(server.endpoint()));
  CHECK(backend.complete(hello) == "fixed");
  CHECK(backend.request_count() == 1);
  CHECK(server.last_auth() == "Bearer sk-test-123");
  ::unsetenv("RECX_TEST_CHAT_KEY");
}

TEST_CASE("two 429s then success with three retries") {
  MockServer server([](std::size_t n, const httplib::Request&) {
    return n < 2 ? std::pair{429, std::string("{}")} : std::pair{200, reply_body("ok")};
  });
  auto cfg = fast_config(server.endpoint());
  cfg.max_retries = 3;
  HttpChatBackend backend(cfg);
  CHECK(backend.complete(hello) == "ok");
  CHECK(server.hits() == 3);
  CHECK(backend.attempt_count() == 3);
  CHECK(backend.request_count() == 1);
}

TEST_CASE("no retries and a 500 surfaces the status") {
  MockServer server([](std::size_t, const httplib::Request&) { return std::pair{500, std::string("{}")}; });
  auto cfg = fast_config(server.endpoint());
  cfg.max_retries = 0;
  HttpChatBackend backend(cfg);
  try {
    backend.complete(hello);
    FAIL("expected an error");
  } catch (const BackendError& e) {
    CHECK(std::string(e.what()).find("500") != std::string::npos);
  }
  CHECK(server.hits() == 1);
}

TEST_CASE("client errors are not retried") {
  MockServer server([](std::size_t, const httplib::Request&) { return std::pair{401, std::string("{}")}; });
  HttpChatBackend backend(fast_config(server.endpoint()));
  CHECK_THROWS_AS(backend.complete(hello), BackendError);
  CHECK(server.hits() == 1);
}

TEST_CASE("unreachable endpoint fails after bounded retries") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  auto cfg = fast_config("http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions");
  cfg.max_retries = 2;
  HttpChatBackend backend(cfg);
  CHECK_THROWS_AS(backend.complete(hello), BackendError);
  CHECK(backend.attempt_count() == 3);
}

TEST_CASE("endpoint without a scheme is a configuration error") {
  CHECK_THROWS_AS(HttpChatBackend(fast_config("localhost/v1")), ConfigError);
}

TEST_CASE("transcripts never contain the key and replay without a server") {
  TempDir dir;
  ::setenv("RECX_TEST_CHAT_KEY", "sk-secret-value", 1);
  {
    MockServer server([](std::size_t n, const httplib::Request& req) {
      const auto body = json::parse(req.body);
      const std::string text = body["messages"][0]["content"].get<std::string>();
      return n == 0 ? std::pair{503, std::string("{}")} : std::pair{200, reply_body("echo " + text)};
    });
    auto cfg = fast_config(server.endpoint());
    cfg.transcript_path = dir / "t.jsonl";
    HttpChatBackend backend(cfg);
    CHECK(backend.complete({{"user", "a"}}) == "echo a");
    CHECK(backend.complete({{"user", "b"}}) == "echo b");
  }
  ::unsetenv("RECX_TEST_CHAT_KEY");
  const std::string transcript = read_file(dir / "t.jsonl");
  CHECK(transcript.find("sk-secret-value") == std::string::npos);

  ReplayChatBackend replay(dir / "t.jsonl", "gpt-4o-mini", 0.0);
  CHECK(replay.size() == 2);
  CHECK(replay.complete({{"user", "b"}}) == "echo b");
  CHECK(replay.complete({{"user", "a"}}) == "echo a");
  CHECK_THROWS_AS(replay.complete({{"user", "c"}}), BackendError);
  CHECK(replay.request_count() == 2);
}
