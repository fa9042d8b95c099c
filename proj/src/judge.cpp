#include "neolab/judge.hpp"

#include <cstdlib>
#include <fstream>
#include <regex>
#include <semaphore>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "neolab/corpus.hpp"

namespace neolab {

using nlohmann::json;

namespace {

bool retryable_status(int status) { return status == 429 || status >= 500; }

std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

}  // namespace

JudgeConfig JudgeConfig::from_env() {
  JudgeConfig c;
  c.endpoint = env_or_empty("JUDGE_ENDPOINT");
  c.api_key = env_or_empty("JUDGE_API_KEY");
  c.model = env_or_empty("JUDGE_MODEL");
  if (c.endpoint.empty()) throw JudgeError("JUDGE_ENDPOINT is not set");
  return c;
}

void JudgeConfig::validate() const {
  if (endpoint.empty()) throw JudgeError("judge endpoint is empty");
  if (!(timeout_seconds > 0.0)) throw JudgeError("judge timeout must be positive");
  if (concurrency == 0) throw JudgeError("judge concurrency must be positive");
  if (backoff_seconds < 0.0) throw JudgeError("judge backoff must be non-negative");
}

int parse_score(std::string_view reply) {
  static const std::regex number(R"(\d+)");
  const std::string text(reply);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), number); it != std::sregex_iterator(); ++it) {
    const std::string digits = it->str();
    if (digits.size() > 2) continue;
    const int v = std::stoi(digits);
    if (v >= 1 && v <= 10) return v;
  }
  throw JudgeParseError("no score in [1, 10] found in reply: " + text.substr(0, 200));
}

JudgeClient::JudgeClient(JudgeConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(cfg_.endpoint, m, url)) throw JudgeError("malformed judge endpoint: " + cfg_.endpoint);
  scheme_host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
}

void JudgeClient::audit(const std::string& line) {
  if (cfg_.audit_log.empty()) return;
  std::lock_guard lock(audit_mu_);
  std::ofstream out(cfg_.audit_log, std::ios::app);
  out << line << '\n';
}

std::string JudgeClient::attempt(const std::string& body, std::size_t request_id, std::size_t attempt_no) {
  httplib::Client cli(scheme_host_);
  const auto whole = std::chrono::duration<double>(cfg_.timeout_seconds);
  const auto sec = std::chrono::duration_cast<std::chrono::seconds>(whole);
  const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(whole - sec);
  cli.set_connection_timeout(sec.count(), usec.count());
  cli.set_read_timeout(sec.count(), usec.count());
  cli.set_write_timeout(sec.count(), usec.count());
  httplib::Headers headers;
  if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

  json log;
  log["id"] = request_id;
  log["attempt"] = attempt_no;
  log["request"] = json::parse(body);

  const auto start = std::chrono::steady_clock::now();
  auto res = cli.Post(path_, headers, body, "application/json");
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log["seconds"] = elapsed;
  if (!res) {
    const auto err = res.error();
    const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                           (err == httplib::Error::Read && elapsed >= 0.9 * cfg_.timeout_seconds);
    log["error"] = timed_out ? "timeout" : "transport: " + httplib::to_string(err);
    audit(log.dump());
    if (timed_out) throw JudgeTimeout("judge request timed out after " + std::to_string(elapsed) + " s");
    throw JudgeTransportError("judge transport error: " + httplib::to_string(err));
  }
  log["status"] = res->status;
  log["response"] = res->body;
  audit(log.dump());
  if (res->status < 200 || res->status >= 300) {
    throw JudgeHttpError(res->status, "judge returned HTTP " + std::to_string(res->status));
  }
  try {
    json reply = json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw JudgeParseError(std::string("malformed chat completion: ") + e.what());
  }
}

std::string JudgeClient::complete(const std::string& system, const std::string& user) {
  json req;
  if (!cfg_.model.empty()) req["model"] = cfg_.model;
  req["messages"] = json::array({{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}});
  const std::string body = req.dump();
  std::size_t id;
  {
    std::lock_guard lock(id_mu_);
    id = next_id_++;
  }
  double wait = cfg_.backoff_seconds;
  for (std::size_t attempt_no = 0;; ++attempt_no) {
    try {
      return attempt(body, id, attempt_no);
    } catch (const JudgeHttpError& e) {
      if (!retryable_status(e.status()) || attempt_no >= cfg_.max_retries) throw;
    } catch (const JudgeTimeout&) {
      if (attempt_no >= cfg_.max_retries) throw;
    } catch (const JudgeTransportError&) {
      if (attempt_no >= cfg_.max_retries) throw;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    wait *= 2.0;
  }
}

int JudgeClient::score(const std::string& rubric, const std::string& response_text) {
  if (rubric.empty()) throw JudgeError("judge rubric is empty");
  return parse_score(complete(rubric, response_text));
}

std::string JudgeClient::generate(const std::string& templ, const std::string& base_prompt) {
  return complete("You are a helpful assistant.", fill_template(templ, base_prompt));
}

std::vector<JudgeOutcome> JudgeClient::score_many(const std::string& rubric, std::span<const std::string> texts) {
  if (rubric.empty()) throw JudgeError("judge rubric is empty");
  std::vector<JudgeOutcome> out(texts.size());
  std::counting_semaphore<> slots(static_cast<std::ptrdiff_t>(cfg_.concurrency));
  std::vector<std::thread> workers;
  workers.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    slots.acquire();
    workers.emplace_back([&, i] {
      JudgeOutcome& o = out[i];
      try {
        o.raw = complete(rubric, texts[i]);
        o.score = parse_score(o.raw);
      } catch (const JudgeTimeout&) {
        o.error = "timeout";
      } catch (const JudgeHttpError& e) {
        o.error = "http " + std::to_string(e.status());
      } catch (const JudgeParseError&) {
        o.error = "parse";
      } catch (const std::exception& e) {
        o.error = std::string("transport: ") + e.what();
      }
      slots.release();
    });
  }
  for (auto& w : workers) w.join();
  return out;
}

}  // namespace neolab
