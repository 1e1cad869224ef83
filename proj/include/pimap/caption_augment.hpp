#pragma once

#include "pimap/encoder.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace pimap {

class World;

enum class CaptionSource { llm, mock, user, generic };

const char* to_string(CaptionSource s);
CaptionSource parse_caption_source(std::string_view s);

struct AugmentRequest {
  std::string media_id;
  MediaDescriptor localized;  // x^loc
  std::string category;       // y_g
  std::string template_id = "default";
  std::optional<std::string> seed_caption;  // what the user wrote, if anything
};

struct AugmentedCaption {
  std::string text;
  CaptionSource source = CaptionSource::llm;
  std::string template_id;
  std::int64_t created_at = 0;
  std::string content_hash;  // hash of `text`

  bool hash_matches() const;
};

// Prompt templates by id; `{category}` is replaced by y_g.
class PromptLibrary {
 public:
  static constexpr const char* kDefaultPrompt =
      "Describe the {category} inside the red ellipse in one detailed sentence: breed/type, colors, "
      "markings, size, and distinctive features. Do not mention the background.";

  PromptLibrary();
  void add(const std::string& id, const std::string& text) { templates_[id] = text; }
  bool has(const std::string& id) const { return templates_.count(id) != 0; }

  // Throws NotFoundError on an unknown id, ValidationError on an empty y_g.
  std::string render(const std::string& template_id, const std::string& category) const;

 private:
  std::map<std::string, std::string> templates_;
};

std::string render_prompt(const std::string& template_id, const std::string& category,
                          const PromptLibrary& library = PromptLibrary());

struct LlmCall {
  const AugmentRequest* request = nullptr;
  std::string prompt;
};

// Single request/response caption model.
class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string describe(const LlmCall& call) = 0;
  virtual CaptionSource source() const { return CaptionSource::llm; }
};

// Toy-world stand-in: lists the instance's attribute words after the seed
// caption, as an LLM looking at the localized image would.
class SyntheticLlmClient final : public LlmClient {
 public:
  explicit SyntheticLlmClient(std::shared_ptr<const World> world) : world_(std::move(world)) {}
  std::string describe(const LlmCall& call) override;
  CaptionSource source() const override { return CaptionSource::mock; }

 private:
  std::shared_ptr<const World> world_;
};

// Deterministic mock: "a photo of the {category}" plus seeded words, or a
// fixed text; can be told to fail.
class MockLlmClient final : public LlmClient {
 public:
  explicit MockLlmClient(std::uint64_t seed = 0, std::optional<std::string> fixed = std::nullopt)
      : seed_(seed), fixed_(std::move(fixed)) {}
  std::string describe(const LlmCall& call) override;
  CaptionSource source() const override { return CaptionSource::mock; }

  void set_failing(bool f) { failing_ = f; }
  std::size_t calls() const { return calls_; }

 private:
  std::uint64_t seed_;
  std::optional<std::string> fixed_;
  bool failing_ = false;
  std::atomic<std::size_t> calls_{0};
};

// OpenAI-style chat endpoint: POST {base_url}/v1/chat/completions with the
// first frame attached as a data URL.
class HttpLlmClient final : public LlmClient {
 public:
  HttpLlmClient(std::string base_url, std::string model, std::string api_key = {}, int timeout_s = 60);
  // Reads PIMAP_LLM_ENDPOINT, PIMAP_LLM_MODEL and PIMAP_LLM_API_KEY; nullptr
  // when no endpoint is configured.
  static std::unique_ptr<HttpLlmClient> from_env();
  std::string describe(const LlmCall& call) override;

 private:
  std::string base_url_, model_, api_key_;
  int timeout_s_;
};

// Append-only JSONL cache of captions keyed by request hash. Concurrent
// callers asking for the same key wait for the first one's result.
class CaptionCache {
 public:
  CaptionCache() = default;  // in-memory only
  explicit CaptionCache(std::filesystem::path path);

  std::optional<AugmentedCaption> lookup(const std::string& key) const;
  void store(const std::string& key, const AugmentedCaption& caption);
  std::size_t size() const;

  // Claims `key` for computation. Returns false (after waiting) when another
  // caller already produced it.
  bool begin(const std::string& key);
  void end(const std::string& key);

 private:
  std::optional<std::filesystem::path> path_;
  std::map<std::string, AugmentedCaption> entries_;
  std::set<std::string> in_flight_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
};

// Serves only what the cache holds; a miss is an error.
class ReplayLlmClient final : public LlmClient {
 public:
  explicit ReplayLlmClient(const CaptionCache& cache) : cache_(cache) {}
  std::string describe(const LlmCall& call) override;

 private:
  const CaptionCache& cache_;
};

// Cache key: hash of the media content, the rendered prompt, the seed caption
// and the template id.
std::string augment_key(const AugmentRequest& req, const std::string& prompt);

// Cache hit: no client call. Otherwise one call, cached. A failing client
// falls back to the seed caption (source user) or the generic caption
// (source generic); never throws for client failures and never returns an
// empty caption.
AugmentedCaption augment_caption(const AugmentRequest& req, LlmClient& client, CaptionCache& cache,
                                 const PromptLibrary& library = PromptLibrary());

// Which of several templates generates y_s: a seeded choice over the media ids
// in sorted order, fixed for the run. Returns the chosen media_id.
std::string choose_caption_template(std::vector<std::string> media_ids, std::uint64_t seed,
                                    const std::string& instance_id);

}  // namespace pimap
