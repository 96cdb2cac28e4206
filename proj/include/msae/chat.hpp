#pragma once

// Chat-completions style client used by the explainer, refiner, categorizer
// and judge roles. One endpoint shape for all of them; roles differ by model
// name and prompt template.

#include <httplib.h>

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <vector>

#include "msae/digest.hpp"
#include "msae/error.hpp"
#include "msae/image.hpp"

namespace msae {

struct ChatClientConfig {
  std::string endpoint;  // base URL; requests go to <endpoint>/chat/completions
  std::string model;
  std::string template_id;
  std::string api_key;  // usually from the environment, never from the config file
  double timeout_s = 120.0;
  int max_retries = 3;
  int retry_backoff_ms = 500;
  std::size_t max_images = 5;

  void validate(const std::string& role) const {
    if (endpoint.empty()) throw ConfigError(role + ".endpoint must be nonempty");
    if (timeout_s <= 0) throw ConfigError(role + ".timeout_s must be positive");
    if (max_retries < 0) throw ConfigError(role + ".max_retries must be >= 0");
    if (max_images < 1) throw ConfigError(role + ".max_images must be >= 1");
  }
};

struct ChatRequest {
  std::string role;
  std::string prompt;
  std::vector<Image> images;
  // Template variables the prompt was rendered from. Remote clients ignore
  // them; in-process mocks key their answers on them.
  std::map<std::string, std::string> vars;
};

struct ChatResponse {
  std::string text;
  nlohmann::json raw_request;
  std::string raw_response;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual ChatResponse chat(const ChatRequest& req) = 0;
};

// ---- prompt templates ------------------------------------------------------------

inline const std::map<std::string, std::string>& builtin_templates() {
  static const std::map<std::string, std::string> kTemplates{
      {"explain",
       "You are shown {{n_images}} images. In each one only the regions where a single feature of a vision "
       "model is most active are visible; everything else is black. Describe the visual pattern the visible "
       "regions have in common in one short phrase. If they share no common pattern, answer exactly: "
       "unable to produce explanations"},
      {"refine",
       "Condense this description of a visual feature into a noun phrase of at most {{max_words}} words. "
       "Answer with the phrase only.\nDescription: {{explanation}}"},
      {"refine_retry",
       "\"{{previous}}\" has more than {{max_words}} words. Condense this description into a noun phrase of at "
       "most {{max_words}} words and answer with the phrase only.\nDescription: {{explanation}}"},
      {"categorize",
       "Which one of these categories best describes the visual concept \"{{label}}\": {{categories}}? "
       "Answer with the category name only."},
      {"categorize_retry",
       "\"{{previous}}\" is not one of: {{categories}}. Answer with exactly one of them for the concept "
       "\"{{label}}\"."},
      {"judge",
       "Does the description \"{{explanation}}\" match the visible (non-black) regions of this image? "
       "Answer yes or no."},
  };
  return kTemplates;
}

// Text with {{name}} placeholders.
struct PromptTemplate {
  std::string id;
  std::string text;

  std::string render(const std::map<std::string, std::string>& vars) const {
    std::string out;
    std::size_t pos = 0;
    for (;;) {
      const auto open = text.find("{{", pos);
      if (open == std::string::npos) break;
      const auto close = text.find("}}", open + 2);
      if (close == std::string::npos) throw ConfigError("template " + id + ": unterminated placeholder");
      const std::string name = text.substr(open + 2, close - open - 2);
      const auto it = vars.find(name);
      if (it == vars.end()) throw ConfigError("template " + id + ": no value for placeholder {{" + name + "}}");
      out += text.substr(pos, open - pos);
      out += it->second;
      pos = close + 2;
    }
    return out + text.substr(pos);
  }
};

// <dir>/<id>.txt when present, else the built-in text.
inline PromptTemplate load_template(const std::string& id, const std::filesystem::path& dir = {}) {
  if (!dir.empty()) {
    const auto p = dir / (id + ".txt");
    if (std::filesystem::exists(p)) {
      std::ifstream in(p);
      std::string text((std::istreambuf_iterator<char>(in)), {});
      while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
      return {id, text};
    }
  }
  const auto it = builtin_templates().find(id);
  if (it == builtin_templates().end()) throw ConfigError("unknown prompt template: " + id);
  return {id, it->second};
}

// ---- archive -------------------------------------------------------------------------

// Append-only log of every request/response pair, one JSON object per line.
class Archive {
 public:
  explicit Archive(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  void append(const nlohmann::json& entry) {
    std::lock_guard l(m_);
    std::ofstream out(path_, std::ios::app);
    out << entry.dump() << "\n";
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::mutex m_;
};

inline void archive_exchange(Archive* archive, const std::string& role, long feature, const ChatRequest& req,
                             const ChatResponse& resp) {
  if (!archive) return;
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : req.images) images.push_back(sha256_hex(encode_png(img)));
  archive->append({{"role", role},
                   {"feature_index", feature},
                   {"prompt", req.prompt},
                   {"image_sha256", images},
                   {"response", resp.text},
                   {"raw_response", resp.raw_response}});
}

// ---- HTTP client ------------------------------------------------------------------

inline std::string png_data_url(const Image& img) {
  return "data:image/png;base64," + base64_encode(encode_png(img));
}

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint must start with http:// or https://: " + url);
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported endpoint scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.scheme_host_port = url.substr(0, path_start);
  p.path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!p.path.empty() && p.path.back() == '/') p.path.pop_back();
  return p;
}

// OpenAI-compatible /chat/completions with image_url data-URL attachments.
// Transport failures, 429 and 5xx are retried with exponential backoff;
// other statuses fail immediately.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(ChatClientConfig cfg) : cfg_(std::move(cfg)), url_(parse_url(cfg_.endpoint)) {
    cfg_.validate("client");
  }

  nlohmann::json build_body(const ChatRequest& req) const {
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", req.prompt}});
    const std::size_t n_img = std::min(req.images.size(), cfg_.max_images);
    for (std::size_t i = 0; i < n_img; ++i)
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", png_data_url(req.images[i])}}}});
    return {{"model", cfg_.model},
            {"temperature", 0},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
  }

  ChatResponse chat(const ChatRequest& req) override {
    const auto body = build_body(req);
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.retry_backoff_ms * (1 << (attempt - 1))));
      httplib::Client cli(url_.scheme_host_port);
      const auto secs = std::chrono::duration<double>(cfg_.timeout_s);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      httplib::Headers headers;
      if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
      auto res = cli.Post(url_.path + "/chat/completions", headers, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw ClientError(cfg_.endpoint + ": HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
      return {parse_completion(res->body), body, res->body};
    }
    throw ClientError(cfg_.endpoint + ": giving up after " + std::to_string(cfg_.max_retries + 1) +
                      " attempts: " + last_error);
  }

  static std::string parse_completion(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (content.is_string()) return content.get<std::string>();
      std::string text;
      for (const auto& part : content)
        if (part.value("type", "") == "text") text += part.at("text").get<std::string>();
      return text;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed chat completion response: ") + e.what());
    }
  }

 private:
  ChatClientConfig cfg_;
  ParsedUrl url_;
};

// ---- in-process clients ---------------------------------------------------------

// Answers via a callback; records every request.
class FunctionClient : public ChatClient {
 public:
  using Responder = std::function<std::string(const ChatRequest&)>;
  explicit FunctionClient(Responder fn) : fn_(std::move(fn)) {}

  ChatResponse chat(const ChatRequest& req) override {
    std::string text = fn_(req);
    std::lock_guard l(m_);
    requests_.push_back(req);
    return {text, {{"role", req.role}, {"prompt", req.prompt}}, text};
  }

  std::size_t calls() const {
    std::lock_guard l(m_);
    return requests_.size();
  }
  std::vector<ChatRequest> requests() const {
    std::lock_guard l(m_);
    return requests_;
  }

 private:
  Responder fn_;
  mutable std::mutex m_;
  std::vector<ChatRequest> requests_;
};

// Replays a fixed transcript; running past its end is a client error.
class ScriptedClient : public FunctionClient {
 public:
  explicit ScriptedClient(std::vector<std::string> answers)
      : FunctionClient([this](const ChatRequest&) { return next(); }), answers_(answers.begin(), answers.end()) {}

 private:
  std::string next() {
    std::lock_guard l(m_);
    if (answers_.empty()) throw ClientError("scripted client: transcript exhausted");
    auto a = answers_.front();
    answers_.pop_front();
    return a;
  }
  std::mutex m_;
  std::deque<std::string> answers_;
};

}  // namespace msae
