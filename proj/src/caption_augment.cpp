#include "pimap/caption_augment.hpp"

#include "pimap/errors.hpp"
#include "pimap/hashing.hpp"
#include "pimap/rng.hpp"
#include "pimap/synthetic_world.hpp"

#include "binary_io.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>

namespace pimap {
namespace {

using nlohmann::json;

json caption_to_json(const std::string& key, const AugmentedCaption& c) {
  return json{{"key", key},
              {"text", c.text},
              {"source", to_string(c.source)},
              {"template_id", c.template_id},
              {"created_at", c.created_at},
              {"content_hash", c.content_hash}};
}

AugmentedCaption make_caption(std::string text, CaptionSource source, const std::string& template_id) {
  AugmentedCaption c;
  c.content_hash = hash_hex(text);
  c.text = std::move(text);
  c.source = source;
  c.template_id = template_id;
  return c;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Hash of what the media actually shows: file bytes for real media, the
// descriptor fields for synthetic media.
std::string media_content_hash(const MediaDescriptor& m) {
  std::uint64_t h = fnv1a64(m.media_id);
  if (m.synthetic) {
    const auto& s = *m.synthetic;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g|%zu|%zu|%d", s.background_weight, s.n_frames, s.frame_index,
                  s.localized ? 1 : 0);
    h = fnv1a64(s.instance_id + "|" + s.background_id + "|" + buf, h);
  }
  for (const auto& p : m.frame_paths) {
    std::string bytes;
    try {
      bytes = detail::read_file(p);
    } catch (const Error&) {
      bytes = p;  // unreadable now; the path still identifies it
    }
    h = fnv1a64(bytes, h);
  }
  if (m.box) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", m.box->x0, m.box->y0, m.box->x1, m.box->y1);
    h = fnv1a64(buf, h);
  }
  return to_hex(h);
}

}  // namespace

const char* to_string(CaptionSource s) {
  switch (s) {
    case CaptionSource::llm:
      return "llm";
    case CaptionSource::mock:
      return "mock";
    case CaptionSource::user:
      return "user";
    case CaptionSource::generic:
      return "generic";
  }
  return "llm";
}

CaptionSource parse_caption_source(std::string_view s) {
  if (s == "llm") return CaptionSource::llm;
  if (s == "mock") return CaptionSource::mock;
  if (s == "user") return CaptionSource::user;
  if (s == "generic") return CaptionSource::generic;
  throw ValidationError("unknown caption source `" + std::string(s) + "`");
}

bool AugmentedCaption::hash_matches() const { return content_hash == hash_hex(text); }

PromptLibrary::PromptLibrary() { templates_["default"] = kDefaultPrompt; }

std::string PromptLibrary::render(const std::string& template_id, const std::string& category) const {
  auto it = templates_.find(template_id);
  if (it == templates_.end()) throw NotFoundError("unknown prompt template `" + template_id + "`");
  if (trim(category).empty()) throw ValidationError("prompt: the generic category must not be empty");
  std::string out = it->second;
  const std::string slot = "{category}";
  for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + category.size())) {
    out.replace(pos, slot.size(), category);
  }
  return out;
}

std::string render_prompt(const std::string& template_id, const std::string& category,
                          const PromptLibrary& library) {
  return library.render(template_id, category);
}

// ---------------------------------------------------------------------------

std::string SyntheticLlmClient::describe(const LlmCall& call) {
  const auto& req = *call.request;
  if (!req.localized.synthetic) throw DecodeError(req.media_id + ": synthetic captioner needs synthetic media");
  const auto& inst = world_->instance(req.localized.synthetic->instance_id);
  return world_->augment_caption(inst, req.seed_caption.value_or(""));
}

std::string MockLlmClient::describe(const LlmCall& call) {
  ++calls_;
  if (failing_) throw ExternalToolError("mock LLM configured to fail");
  if (fixed_) return *fixed_;
  static constexpr const char* kWords[] = {"small", "bright", "striped", "worn", "shiny", "fluffy", "round", "tall"};
  Rng rng = make_stream(seed_, "mock-llm/" + call.request->media_id);
  std::string out = "a photo of the " + call.request->category;
  for (int i = 0; i < 3; ++i) out += std::string(" ") + kWords[uniform_index(rng, std::size(kWords))];
  return out;
}

HttpLlmClient::HttpLlmClient(std::string base_url, std::string model, std::string api_key, int timeout_s)
    : base_url_(std::move(base_url)), model_(std::move(model)), api_key_(std::move(api_key)), timeout_s_(timeout_s) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

std::unique_ptr<HttpLlmClient> HttpLlmClient::from_env() {
  const char* endpoint = std::getenv("PIMAP_LLM_ENDPOINT");
  if (!endpoint || !*endpoint) return nullptr;
  const char* model = std::getenv("PIMAP_LLM_MODEL");
  const char* key = std::getenv("PIMAP_LLM_API_KEY");
  return std::make_unique<HttpLlmClient>(endpoint, model ? model : "default", key ? key : "");
}

std::string HttpLlmClient::describe(const LlmCall& call) {
  const auto& req = *call.request;
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", call.prompt}});
  if (!req.localized.frame_paths.empty()) {
    const std::string bytes = detail::read_file(req.localized.frame_paths.front());
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:image/x-portable-pixmap;base64," +
                                                  httplib::detail::base64_encode(bytes)}}}});
  }
  const json body{{"model", model_},
                  {"temperature", 0},
                  {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  httplib::Client client(base_url_);
  client.set_connection_timeout(timeout_s_);
  client.set_read_timeout(timeout_s_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = client.Post("/v1/chat/completions", headers, body.dump(), "application/json");
  if (!res) throw ExternalToolError("LLM endpoint unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) throw ExternalToolError("LLM endpoint returned HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw ExternalToolError(std::string("LLM response is malformed: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

CaptionCache::CaptionCache(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(*path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      AugmentedCaption c;
      c.text = j.at("text").get<std::string>();
      c.source = parse_caption_source(j.at("source").get<std::string>());
      c.template_id = j.value("template_id", std::string("default"));
      c.created_at = j.value("created_at", std::int64_t{0});
      c.content_hash = j.value("content_hash", hash_hex(c.text));
      if (!c.hash_matches() || c.text.empty()) continue;  // damaged record; recompute on demand
      entries_[j.at("key").get<std::string>()] = std::move(c);
    } catch (const std::exception&) {
      // A torn final line from an interrupted append is skipped.
      continue;
    }
  }
}

std::optional<AugmentedCaption> CaptionCache::lookup(const std::string& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void CaptionCache::store(const std::string& key, const AugmentedCaption& caption) {
  std::lock_guard lock(mutex_);
  entries_[key] = caption;
  if (path_) {
    std::ofstream out(*path_, std::ios::app);
    if (!out) throw Error("cannot append to caption cache " + path_->string());
    out << caption_to_json(key, caption).dump() << '\n';
  }
}

std::size_t CaptionCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

bool CaptionCache::begin(const std::string& key) {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return in_flight_.count(key) == 0; });
  if (entries_.count(key)) return false;
  in_flight_.insert(key);
  return true;
}

void CaptionCache::end(const std::string& key) {
  {
    std::lock_guard lock(mutex_);
    in_flight_.erase(key);
  }
  cv_.notify_all();
}

std::string ReplayLlmClient::describe(const LlmCall& call) {
  const auto key = augment_key(*call.request, call.prompt);
  auto hit = cache_.lookup(key);
  if (!hit) throw NotFoundError("replay: no cached caption for " + call.request->media_id);
  return hit->text;
}

std::string augment_key(const AugmentRequest& req, const std::string& prompt) {
  std::string material = media_content_hash(req.localized);
  material += '\x1f' + prompt + '\x1f' + req.seed_caption.value_or("") + '\x1f' + req.template_id;
  return hash_hex(material);
}

AugmentedCaption augment_caption(const AugmentRequest& req, LlmClient& client, CaptionCache& cache,
                                 const PromptLibrary& library) {
  const std::string prompt = library.render(req.template_id, req.category);
  const std::string key = augment_key(req, prompt);
  if (auto hit = cache.lookup(key)) return *hit;
  if (!cache.begin(key)) return *cache.lookup(key);

  std::optional<AugmentedCaption> result;
  try {
    std::string text = trim(client.describe({&req, prompt}));
    if (!text.empty()) result = make_caption(std::move(text), client.source(), req.template_id);
  } catch (const std::exception&) {
    // Falls through to the fallback captions below.
  }
  if (result) {
    try {
      cache.store(key, *result);
    } catch (...) {
      cache.end(key);
      throw;
    }
    cache.end(key);
    return *result;
  }
  cache.end(key);
  // Fallbacks are not cached so a later run can still reach the model.
  const std::string seed = trim(req.seed_caption.value_or(""));
  if (!seed.empty()) return make_caption(seed, CaptionSource::user, req.template_id);
  return make_caption("a photo of a " + req.category, CaptionSource::generic, req.template_id);
}

std::string choose_caption_template(std::vector<std::string> media_ids, std::uint64_t seed,
                                    const std::string& instance_id) {
  if (media_ids.empty()) throw UsageError(instance_id + ": no templates to caption");
  std::sort(media_ids.begin(), media_ids.end());
  Rng rng = make_stream(seed, "caption-template/" + instance_id);
  return media_ids[uniform_index(rng, media_ids.size())];
}

}  // namespace pimap
