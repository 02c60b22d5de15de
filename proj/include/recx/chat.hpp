#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <vector>

namespace recx {

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatBackendConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_seconds = 60.0;
  std::size_t max_retries = 3;
  double temperature = 0.0;
  double initial_backoff_seconds = 1.0;
  std::size_t max_in_flight = 8;
  // Empty disables the transcript.
  std::filesystem::path transcript_path;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  // Returns the first choice's message text. Throws BackendError.
  virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
  // Completed calls to complete() (not counting retries).
  virtual std::size_t request_count() const = 0;
};

// Request body in the common chat-completions schema.
std::string chat_request_body(const std::string& model, const std::vector<ChatMessage>& messages,
                              double temperature);
// Extracts choices[0].message.content; throws BackendError on any other shape.
std::string parse_chat_response(const std::string& body);

// HTTP(S) client for chat-completions endpoints with bounded exponential-backoff
// retries on transport errors, 429 and 5xx. The key is read from the environment
// at request time and never written to the transcript.
class HttpChatBackend final : public ChatBackend {
 public:
  explicit HttpChatBackend(ChatBackendConfig config);

  std::string complete(const std::vector<ChatMessage>& messages) override;
  std::size_t request_count() const override { return requests_.load(); }
  std::size_t attempt_count() const { return attempts_.load(); }

 private:
  void record(const std::string& request, int status, const std::string& response);

  ChatBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::counting_semaphore<1024> in_flight_;
  std::mutex transcript_mutex_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<std::size_t> attempts_{0};
};

// Serves replies recorded in a transcript, keyed by exact request body.
class ReplayChatBackend final : public ChatBackend {
 public:
  ReplayChatBackend(const std::filesystem::path& transcript, std::string model, double temperature);

  std::string complete(const std::vector<ChatMessage>& messages) override;
  std::size_t request_count() const override { return requests_.load(); }
  std::size_t size() const { return replies_.size(); }

 private:
  std::string model_;
  double temperature_;
  std::map<std::string, std::string> replies_;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace recx
