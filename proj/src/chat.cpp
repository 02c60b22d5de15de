#include "recx/chat.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "recx/types.hpp"

namespace recx {

using nlohmann::json;

std::string chat_request_body(const std::string& model, const std::vector<ChatMessage>& messages,
                              double temperature) {
  json body;
  body["model"] = model;
  body["messages"] = json::array();
  for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  body["temperature"] = temperature;
  return body.dump();
}

std::string parse_chat_response(const std::string& body) {
  json parsed = json::parse(body, nullptr, false);
  if (parsed.is_discarded()) throw BackendError("chat response is not JSON");
  try {
    const auto& content = parsed.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw BackendError("chat response content is not a string");
    return content.get<std::string>();
  } catch (const json::exception&) {
    throw BackendError("chat response lacks choices[0].message.content");
  }
}

HttpChatBackend::HttpChatBackend(ChatBackendConfig config)
    : config_(std::move(config)),
      in_flight_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
  const auto scheme_end = config_.endpoint.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("chat endpoint must include a scheme: " + config_.endpoint);
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_port_ = config_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
}

void HttpChatBackend::record(const std::string& request, int status, const std::string& response) {
  if (config_.transcript_path.empty()) return;
  std::lock_guard lock(transcript_mutex_);
  std::ofstream out(config_.transcript_path, std::ios::app | std::ios::binary);
  out << json{{"request_body", request}, {"status", status}, {"response_body", response}}.dump() << '\n';
}

std::string HttpChatBackend::complete(const std::vector<ChatMessage>& messages) {
  const std::string body = chat_request_body(config_.model, messages, config_.temperature);
  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{in_flight_};

  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = config_.initial_backoff_seconds * std::pow(2.0, static_cast<double>(attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    ++attempts_;
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      record(body, 0, last_error);
      continue;
    }
    record(body, res->status, res->body);
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw BackendError("chat endpoint returned HTTP " + std::to_string(res->status));
    std::string text = parse_chat_response(res->body);
    ++requests_;
    return text;
  }
  throw BackendError("chat request failed after " + std::to_string(config_.max_retries + 1) +
                     " attempt(s): " + last_error);
}

ReplayChatBackend::ReplayChatBackend(const std::filesystem::path& transcript, std::string model, double temperature)
    : model_(std::move(model)), temperature_(temperature) {
  std::ifstream in(transcript);
  if (!in) throw BackendError(transcript.string() + ": cannot open transcript");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("request_body") || !rec.contains("status"))
      throw BackendError(transcript.string() + ": malformed record on line " + std::to_string(line_no));
    if (rec["status"].get<int>() != 200) continue;
    replies_[rec["request_body"].get<std::string>()] = parse_chat_response(rec["response_body"].get<std::string>());
  }
}

std::string ReplayChatBackend::complete(const std::vector<ChatMessage>& messages) {
  const auto it = replies_.find(chat_request_body(model_, messages, temperature_));
  if (it == replies_.end()) throw BackendError("no recorded reply for this request");
  ++requests_;
  return it->second;
}

}  // namespace recx
