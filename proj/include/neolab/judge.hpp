#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace neolab {

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class JudgeTimeout : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class JudgeTransportError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};
class JudgeHttpError : public JudgeError {
 public:
  JudgeHttpError(int status, const std::string& what) : JudgeError(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};
class JudgeParseError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

struct JudgeConfig {
  std::string endpoint;  // full URL of the chat-completions route
  std::string api_key;
  std::string model;
  double timeout_seconds = 30.0;
  std::size_t max_retries = 3;  // retries after the first attempt
  double backoff_seconds = 0.5;  // doubled after each failed attempt
  std::size_t concurrency = 4;
  std::filesystem::path audit_log;  // JSONL; empty disables

  /// Reads JUDGE_ENDPOINT, JUDGE_API_KEY and JUDGE_MODEL; throws JudgeError
  /// when the endpoint is unset.
  static JudgeConfig from_env();
  void validate() const;
};

/// First integer in [1, 10] appearing in `reply`. Throws JudgeParseError.
int parse_score(std::string_view reply);

struct JudgeOutcome {
  std::optional<int> score;
  std::string raw;
  std::string error;  // "timeout", "http 503", "parse", ... when score is empty
};

/// Minimal chat-completion client: one system and one user message, the
/// first choice's content read back.
class JudgeClient {
 public:
  explicit JudgeClient(JudgeConfig cfg);

  /// Raw reply text. Retries transport failures, timeouts, 429 and 5xx.
  std::string complete(const std::string& system, const std::string& user);

  /// Score of `response_text` under `rubric`.
  int score(const std::string& rubric, const std::string& response_text);

  /// Completion for a data-generation template ("{prompt}" placeholder).
  std::string generate(const std::string& templ, const std::string& base_prompt);

  /// Scores every text with at most cfg.concurrency requests in flight.
  /// Failures become outcomes without a score; nothing is fabricated.
  std::vector<JudgeOutcome> score_many(const std::string& rubric, std::span<const std::string> texts);

  const JudgeConfig& config() const { return cfg_; }

 private:
  std::string attempt(const std::string& body, std::size_t request_id, std::size_t attempt_no);
  void audit(const std::string& line);

  JudgeConfig cfg_;
  std::string scheme_host_;
  std::string path_;
  std::mutex audit_mu_;
  std::size_t next_id_ = 0;
  std::mutex id_mu_;
};

}  // namespace neolab
