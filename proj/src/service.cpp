#include "pimap/service.hpp"

#include "pimap/harness.hpp"
#include "pimap/hashing.hpp"
#include "pimap/manifest.hpp"

#include "binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>

namespace pimap {
namespace {

using nlohmann::json;

template <class E, std::size_t N>
E parse_enum(std::string_view s, const char* const (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (s == names[i]) return static_cast<E>(i);
  }
  throw ValidationError(std::string("unknown ") + what + " `" + std::string(s) + "`");
}

constexpr const char* kJobKinds[] = {"pretrain", "personalize", "index"};
constexpr const char* kJobStates[] = {"queued", "running", "done", "failed"};
constexpr const char* kPersonaStates[] = {"untrained", "training", "trained", "failed"};

bool valid_handle(std::string_view s) {
  if (s.empty() || s.size() > 64) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c == '_' || c == '-'; });
}

std::string thumbnail_url(const std::string& media_id) { return "/media/" + media_id + "/thumbnail"; }

json persona_json(const Persona& p) {
  json thumbs = json::array();
  for (const auto& t : p.template_ids) thumbs.push_back(thumbnail_url(t));
  return {{"persona_id", p.persona_id},
          {"name", p.name},
          {"category", p.category},
          {"caption", p.caption ? json(*p.caption) : json(nullptr)},
          {"templates", p.template_ids},
          {"thumbnails", thumbs},
          {"state", to_string(p.state)},
          {"last_job", p.last_job},
          {"specific_caption", p.specific_caption}};
}

Persona persona_from_json(const json& j) {
  Persona p;
  p.persona_id = j.at("persona_id").get<std::string>();
  p.name = j.at("name").get<std::string>();
  p.category = j.at("category").get<std::string>();
  if (!j.at("caption").is_null()) p.caption = j.at("caption").get<std::string>();
  p.template_ids = j.at("templates").get<std::vector<std::string>>();
  p.state = parse_persona_state(j.at("state").get<std::string>());
  p.last_job = j.value("last_job", "");
  p.specific_caption = j.value("specific_caption", "");
  return p;
}

json job_json(const JobRecord& r) {
  json hist = json::array();
  for (auto s : r.history) hist.push_back(to_string(s));
  json j{{"job_id", r.job_id},
         {"kind", to_string(r.kind)},
         {"state", to_string(r.state)},
         {"progress", r.progress},
         {"subject", r.subject},
         {"history", hist}};
  j["result_ref"] = r.state == JobState::done ? json(r.result_ref) : json(nullptr);
  j["error"] = r.state == JobState::failed ? json(r.error) : json(nullptr);
  return j;
}

JobRecord job_from_json(const json& j) {
  JobRecord r;
  r.job_id = j.at("job_id").get<std::string>();
  r.kind = parse_job_kind(j.at("kind").get<std::string>());
  r.state = parse_job_state(j.at("state").get<std::string>());
  r.progress = j.at("progress").get<double>();
  r.subject = j.at("subject").get<std::string>();
  if (!j.at("result_ref").is_null()) r.result_ref = j.at("result_ref").get<std::string>();
  if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
  for (const auto& s : j.at("history")) r.history.push_back(parse_job_state(s.get<std::string>()));
  return r;
}

bool looks_like_json(std::string_view s) {
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) return c == '{';
  }
  return false;
}

bool looks_like_ppm(std::string_view s) { return s.size() >= 2 && s[0] == 'P' && (s[1] == '6' || s[1] == '3'); }

// Box-filter downscale so the longer side is at most `size`.
RgbImage shrink(const RgbImage& img, int size) {
  const int longest = std::max(img.width, img.height);
  if (longest <= size) return img;
  const double s = static_cast<double>(longest) / size;
  const int w = std::max(1, static_cast<int>(img.width / s));
  const int h = std::max(1, static_cast<int>(img.height / s));
  RgbImage out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int x0 = static_cast<int>(x * s), x1 = std::max(x0 + 1, static_cast<int>((x + 1) * s));
      const int y0 = static_cast<int>(y * s), y1 = std::max(y0 + 1, static_cast<int>((y + 1) * s));
      double acc[3] = {0, 0, 0};
      int n = 0;
      for (int yy = y0; yy < std::min(y1, img.height); ++yy) {
        for (int xx = x0; xx < std::min(x1, img.width); ++xx) {
          const auto* p = img.at(xx, yy);
          for (int c = 0; c < 3; ++c) acc[c] += p[c];
          ++n;
        }
      }
      for (int c = 0; c < 3; ++c) out.at(x, y)[c] = static_cast<std::uint8_t>(acc[c] / std::max(n, 1) + 0.5);
    }
  }
  return out;
}

std::array<std::uint8_t, 3> color_of(std::string_view id) {
  const auto h = fnv1a64(id);
  return {static_cast<std::uint8_t>(64 + (h & 0x7f)), static_cast<std::uint8_t>(64 + ((h >> 8) & 0x7f)),
          static_cast<std::uint8_t>(64 + ((h >> 16) & 0x7f))};
}

// Synthetic media have no pixels: background colour with a disc for the
// instance, sized by how much of the picture the instance fills.
RgbImage synthetic_swatch(const SyntheticMediaDescriptor& sd, int size) {
  RgbImage img(size, size, color_of(sd.background_id.empty() ? "none" : sd.background_id));
  if (sd.instance_id.empty()) return img;
  const auto fg = color_of(sd.instance_id);
  const double r = 0.15 * size + 0.3 * size * (1.0 - sd.background_weight);
  const double c = (size - 1) / 2.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if ((x - c) * (x - c) + (y - c) * (y - c) <= r * r) std::copy(fg.begin(), fg.end(), img.at(x, y));
    }
  }
  return img;
}

// Synthetic descriptors get background suppression, image files an ellipse
// around the box the media carries (whole image when there is none).
class DefaultLocalizer final : public Localizer {
 public:
  DefaultLocalizer(double factor, std::filesystem::path out_dir)
      : synthetic_(factor), images_(std::make_shared<GroundTruthDetector>(), std::move(out_dir)) {}
  MediaDescriptor localize(const MediaDescriptor& media, const std::string& category) const override {
    return media.synthetic ? synthetic_.localize(media, category) : images_.localize(media, category);
  }

 private:
  SyntheticLocalizer synthetic_;
  ImageLocalizer images_;
};

const char* const kIndexFile = "index.piidx";

}  // namespace

const char* to_string(JobKind k) { return kJobKinds[static_cast<int>(k)]; }
const char* to_string(JobState s) { return kJobStates[static_cast<int>(s)]; }
const char* to_string(PersonaState s) { return kPersonaStates[static_cast<int>(s)]; }
JobKind parse_job_kind(std::string_view s) { return parse_enum<JobKind>(s, kJobKinds, "job kind"); }
JobState parse_job_state(std::string_view s) { return parse_enum<JobState>(s, kJobStates, "job state"); }
PersonaState parse_persona_state(std::string_view s) {
  return parse_enum<PersonaState>(s, kPersonaStates, "persona state");
}

std::string to_json_text(const Persona& p) { return persona_json(p).dump(); }
std::string to_json_text(const JobRecord& j) { return job_json(j).dump(); }
std::string to_json_text(const std::vector<Persona>& ps) {
  json arr = json::array();
  for (const auto& p : ps) arr.push_back(persona_json(p));
  return json{{"personas", arr}}.dump();
}
std::string to_json_text(const SearchResult& r) {
  json mentions = json::array();
  for (const auto& m : r.mentions) mentions.push_back({{"name", m.name}, {"persona_id", m.persona_id}});
  json hits = json::array();
  for (const auto& h : r.hits) {
    hits.push_back({{"rank", h.rank}, {"media_id", h.media_id}, {"score", h.score}, {"thumbnail", thumbnail_url(h.media_id)}});
  }
  return json{{"query", r.query}, {"resolved", r.resolved}, {"mentions", mentions}, {"k", r.k}, {"results", hits}}.dump();
}

// ---------------------------------------------------------------------------

void ServiceConfig::validate() const {
  if (max_concurrent_jobs == 0) throw ConfigError("service: max_concurrent_jobs must be >= 1");
  if (max_queued_jobs == 0) throw ConfigError("service: max_queued_jobs must be >= 1");
  if (max_upload_bytes == 0) throw ConfigError("service: max_upload_bytes must be >= 1");
  if (!(gallery_fps > 0)) throw ConfigError("service: gallery_fps must be > 0");
  if (thumbnail_size < 4) throw ConfigError("service: thumbnail_size must be >= 4");
  train.validate();
}

std::string ServiceConfig::hash() const {
  KeyValueConfig kv;
  const auto train_kv = train.to_kv();
  for (const auto& [k, v] : train_kv.values()) kv.set("train." + k, v);
  kv.set("localization", localization ? "true" : "false");
  kv.set("caption_augmentation", caption_augmentation ? "true" : "false");
  kv.set("gallery_fps", std::to_string(gallery_fps));
  kv.set("synthetic_localization_factor", std::to_string(synthetic_localization_factor));
  return hash_hex(kv.to_string());
}

PimapService::PimapService(ServiceConfig cfg, ServiceComponents parts)
    : cfg_(std::move(cfg)), parts_(std::move(parts)) {
  cfg_.validate();
  if (!parts_.encoders) throw ConfigError("service: no encoder pair");
  parts_.pretrained.validate();
  const auto& desc = parts_.encoders->descriptor();
  if (parts_.pretrained.d_joint != desc.d_joint || parts_.pretrained.d_tok != desc.d_tok) {
    throw ConfigError("service: pi-map dimensions do not match the encoder pair");
  }
  std::filesystem::create_directories(cfg_.data_dir / "media");
  std::filesystem::create_directories(cfg_.data_dir / "thumbs");
  localizer_ = parts_.localizer ? parts_.localizer
                                : std::make_shared<DefaultLocalizer>(cfg_.synthetic_localization_factor,
                                                                     cfg_.data_dir / "localized");
  config_hash_ = cfg_.hash();
  store_ = std::make_unique<KvStore>(cfg_.data_dir / "store.sqlite");
  captions_ = std::make_unique<CaptionCache>(cfg_.data_dir / "captions.jsonl");

  const auto index_path = cfg_.data_dir / kIndexFile;
  if (std::filesystem::exists(index_path)) {
    auto loaded = load_index(index_path);
    if (loaded.encoder_id() != desc.encoder_id) {
      throw ConfigError("service: the stored index belongs to encoder " + loaded.encoder_id());
    }
    index_ = std::make_shared<const EmbeddingIndex>(std::move(loaded));
  } else {
    index_ = std::make_shared<const EmbeddingIndex>(desc.encoder_id, desc.d_joint);
  }
  recover();
  for (std::size_t i = 0; i < cfg_.max_concurrent_jobs; ++i) workers_.emplace_back([this] { worker_loop(); });
}

PimapService::~PimapService() {
  {
    std::lock_guard lock(jobs_mutex_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

const std::string& PimapService::encoder_id() const { return parts_.encoders->descriptor().encoder_id; }

// Jobs that were running when the process stopped are failed; queued ones go
// back on the queue. Personas follow their last job.
void PimapService::recover() {
  for (const auto& [key, value] : store_->scan("job/")) {
    auto rec = job_from_json(json::parse(value));
    if (rec.state == JobState::running) {
      rec.state = JobState::failed;
      rec.error = "interrupted by a service restart";
      rec.history.push_back(JobState::failed);
      store_->put(key, job_json(rec).dump());
    } else if (rec.state == JobState::queued) {
      queue_.push_back(rec.job_id);
    }
    jobs_.emplace(rec.job_id, std::move(rec));
  }
  for (const auto& [key, value] : store_->scan("persona/")) {
    auto p = persona_from_json(json::parse(value));
    if (p.state != PersonaState::training) continue;
    auto it = jobs_.find(p.last_job);
    if (it != jobs_.end() && it->second.state == JobState::queued) continue;
    p.state = store_->get("token/" + p.persona_id) ? PersonaState::trained : PersonaState::failed;
    save_persona(p);
  }
}

// ---------------------------------------------------------------------------
// Personas

void PimapService::save_persona(const Persona& p) { store_->put("persona/" + p.persona_id, persona_json(p).dump()); }

std::optional<Persona> PimapService::find_persona(const std::string& id) const {
  auto v = store_->get("persona/" + id);
  if (!v) return std::nullopt;
  return persona_from_json(json::parse(*v));
}

std::optional<Persona> PimapService::find_persona_by_name(const std::string& name) const {
  for (const auto& [key, value] : store_->scan("persona/")) {
    auto p = persona_from_json(json::parse(value));
    if (p.name == name) return p;
  }
  return std::nullopt;
}

Persona PimapService::persona(const std::string& persona_id) const {
  auto p = find_persona(persona_id);
  if (!p) throw NotFoundError("unknown persona `" + persona_id + "`");
  return *p;
}

std::vector<Persona> PimapService::list_personas() const {
  std::vector<Persona> out;
  for (const auto& [key, value] : store_->scan("persona/")) out.push_back(persona_from_json(json::parse(value)));
  return out;
}

void PimapService::remember_media(const MediaDescriptor& m) {
  const auto text = media_to_json_text(m);
  if (auto prev = store_->get("media/" + m.media_id); prev && *prev != text) {
    throw ConflictError("media id `" + m.media_id + "` is already taken by different content");
  }
  store_->put("media/" + m.media_id, text);
}

MediaDescriptor PimapService::stored_media(const std::string& media_id) const {
  auto v = store_->get("media/" + media_id);
  if (!v) throw NotFoundError("unknown media `" + media_id + "`");
  return media_from_json_text(*v, cfg_.data_dir);
}

MediaDescriptor PimapService::store_upload(const UploadedFile& file, const std::string& id_prefix) {
  const std::string where = file.filename.empty() ? "upload" : file.filename;
  if (file.content_type == "application/json" || looks_like_json(file.content)) {
    MediaDescriptor m;
    try {
      m = media_from_json_text(file.content, cfg_.data_dir);
    } catch (const Error& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (m.synthetic) m.synthetic->validate();
    return m;
  }
  if (!looks_like_ppm(file.content)) {
    throw ValidationError(where + ": unsupported format; upload PPM images or JSON media references");
  }
  try {
    decode_ppm(file.content);
  } catch (const Error& e) {
    throw ValidationError(where + ": " + e.what());
  }
  const auto digest = hash_hex(file.content);
  const auto path = cfg_.data_dir / "media" / (digest + ".ppm");
  if (!std::filesystem::exists(path)) detail::write_file_atomic(path.string(), file.content);
  MediaDescriptor m;
  m.media_id = id_prefix + digest;
  m.kind = MediaKind::image;
  m.frame_paths = {path.string()};
  if (!file.filename.empty()) m.metadata["filename"] = file.filename;
  return m;
}

Persona PimapService::create_persona(const std::string& name, const std::string& category,
                                     const std::vector<UploadedFile>& templates,
                                     const std::optional<std::string>& caption) {
  if (!valid_handle(name)) {
    throw ValidationError("name must be 1-64 characters of letters, digits, '_' or '-'");
  }
  if (category.empty()) throw ValidationError("category is required");
  if (templates.empty()) throw ValidationError("at least one template image is required");
  std::size_t total = 0;
  for (const auto& t : templates) total += t.content.size();
  if (total > cfg_.max_upload_bytes) {
    throw PayloadTooLargeError("templates total " + std::to_string(total) + " bytes, limit is " +
                               std::to_string(cfg_.max_upload_bytes));
  }
  const auto& enc = *parts_.encoders;
  try {
    enc.tokenize("a photo of a " + category);
    if (caption) enc.tokenize(*caption);
  } catch (const VocabularyError& e) {
    throw ValidationError(std::string("the text encoder cannot read the category or caption: ") + e.what());
  }

  std::lock_guard lock(persona_mutex_);
  if (find_persona_by_name(name)) throw ConflictError("a persona named `" + name + "` already exists");
  Persona p;
  p.persona_id = "p-" + hash_hex(name).substr(0, 12);
  p.name = name;
  p.category = category;
  if (caption && !caption->empty()) p.caption = caption;
  std::vector<MediaDescriptor> media;
  for (const auto& t : templates) media.push_back(store_upload(t, "t-"));
  for (const auto& m : media) {
    remember_media(m);
    render_thumbnail(m);
    p.template_ids.push_back(m.media_id);
  }
  save_persona(p);
  return p;
}

// ---------------------------------------------------------------------------
// Jobs

std::string PimapService::enqueue(JobKind kind, const std::string& subject, const std::string& payload) {
  std::lock_guard lock(jobs_mutex_);
  if (queue_.size() >= cfg_.max_queued_jobs) {
    throw CapacityError("the job queue is full (" + std::to_string(cfg_.max_queued_jobs) + " waiting); retry later");
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "job-%06lld", store_->increment("counter/job"));
  JobRecord rec;
  rec.job_id = buf;
  rec.kind = kind;
  rec.subject = subject;
  rec.history = {JobState::queued};
  store_->put("jobinput/" + rec.job_id, payload);
  store_->put("job/" + rec.job_id, job_json(rec).dump());
  jobs_.emplace(rec.job_id, rec);
  queue_.push_back(rec.job_id);
  jobs_cv_.notify_all();
  return rec.job_id;
}

JobRecord PimapService::job(const std::string& job_id) const {
  std::lock_guard lock(jobs_mutex_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw NotFoundError("unknown job `" + job_id + "`");
  return it->second;
}

void PimapService::update_job(const std::string& job_id, const std::function<void(JobRecord&)>& fn, bool persist) {
  std::string text;
  {
    std::lock_guard lock(jobs_mutex_);
    auto& rec = jobs_.at(job_id);
    fn(rec);
    if (persist) text = job_json(rec).dump();
    jobs_cv_.notify_all();
  }
  if (persist) store_->put("job/" + job_id, text);
}

bool PimapService::wait_idle(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(jobs_mutex_);
  return jobs_cv_.wait_for(lock, timeout, [&] { return queue_.empty() && running_ == 0; });
}

void PimapService::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(jobs_mutex_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      ++running_;
    }
    run_job(id);
    {
      std::lock_guard lock(jobs_mutex_);
      --running_;
    }
    jobs_cv_.notify_all();
  }
}

void PimapService::run_job(const std::string& job_id) {
  const auto rec = job(job_id);
  update_job(job_id, [](JobRecord& r) {
    r.state = JobState::running;
    r.history.push_back(JobState::running);
  }, true);
  try {
    std::string result;
    if (rec.kind == JobKind::personalize) {
      result = run_personalize(job_id, rec.subject);
    } else if (rec.kind == JobKind::index) {
      const auto r = run_index(job_id, store_->get("jobinput/" + job_id).value_or("[]"));
      result = "index:added=" + std::to_string(r.added) + ",skipped=" + std::to_string(r.skipped) +
               ",size=" + std::to_string(r.index_size);
    } else {
      throw UsageError("the service does not run pretraining jobs; pretrain offline and pass the parameters");
    }
    update_job(job_id, [&](JobRecord& r) {
      r.state = JobState::done;
      r.progress = 1.0;
      r.result_ref = result;
      r.history.push_back(JobState::done);
    }, true);
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    if (rec.kind == JobKind::personalize) {
      std::lock_guard lock(persona_mutex_);
      if (auto p = find_persona(rec.subject)) {
        p->state = store_->get("token/" + p->persona_id) ? PersonaState::trained : PersonaState::failed;
        save_persona(*p);
      }
    }
    update_job(job_id, [&](JobRecord& r) {
      r.state = JobState::failed;
      r.error = msg;
      r.history.push_back(JobState::failed);
    }, true);
  }
}

std::string PimapService::train(const std::string& persona_id, bool retrain) {
  std::lock_guard lock(persona_mutex_);
  auto p = find_persona(persona_id);
  if (!p) throw NotFoundError("unknown persona `" + persona_id + "`");
  if (p->state == PersonaState::training) {
    throw ConflictError("training is already running for `" + p->name + "` (" + p->last_job + ")");
  }
  if (p->state == PersonaState::trained && !retrain) {
    throw ConflictError("`" + p->name + "` is already trained; pass retrain to train again");
  }
  const auto id = enqueue(JobKind::personalize, persona_id, "{}");
  p->state = PersonaState::training;
  p->last_job = id;
  save_persona(*p);
  return id;
}

std::string PimapService::run_personalize(const std::string& job_id, const std::string& persona_id) {
  const auto p = persona(persona_id);
  const auto& enc = *parts_.encoders;
  const auto& train_cfg = cfg_.train;

  auto embed_templates = [&](const Persona& who) {
    std::vector<std::pair<MediaDescriptor, TemplateEmbedding>> out;
    for (const auto& id : who.template_ids) {
      for (auto& frame : template_frames(stored_media(id), 10)) {
        TemplateEmbedding te;
        te.media_id = frame.media_id;
        te.raw = enc.encode_image(frame).values;
        te.localized = cfg_.localization ? enc.encode_image(localizer_->localize(frame, who.category)).values : te.raw;
        out.emplace_back(std::move(frame), std::move(te));
      }
    }
    return out;
  };

  const auto own = embed_templates(p);
  PersonalizeInput in;
  in.instance_id = persona_id;
  in.generic_caption = "a photo of a " + p.category;
  for (const auto& [m, te] : own) in.templates.push_back(te);

  if (cfg_.caption_augmentation && parts_.llm) {
    std::vector<std::string> ids;
    for (const auto& [m, te] : own) ids.push_back(m.media_id);
    const auto pick = choose_caption_template(ids, train_cfg.seed, persona_id);
    const auto it = std::find_if(own.begin(), own.end(), [&](const auto& o) { return o.first.media_id == pick; });
    AugmentRequest req;
    req.media_id = pick;
    req.localized = cfg_.localization ? localizer_->localize(it->first, p.category) : it->first;
    req.category = p.category;
    req.seed_caption = p.caption;
    in.specific_caption = augment_caption(req, *parts_.llm, *captions_).text;
  } else {
    in.specific_caption = p.caption.value_or(in.generic_caption);
  }

  // Negatives: the other personas' templates, topped up from the index.
  for (const auto& other : list_personas()) {
    if (other.persona_id == persona_id) continue;
    const std::string generic = "a photo of a " + other.category;
    const std::string specific =
        !other.specific_caption.empty() ? other.specific_caption : other.caption.value_or(generic);
    for (const auto& [m, te] : embed_templates(other)) {
      BatchItem b;
      b.image_raw = te.raw;
      b.image_localized = te.localized;
      b.specific_caption = specific;
      b.generic_caption = generic;
      in.distractors.push_back(std::move(b));
    }
  }
  if (in.distractors.size() + 1 < train_cfg.batch_size) {
    for (const auto& e : index()->entries()) {
      if (in.distractors.size() + 1 >= train_cfg.batch_size) break;
      std::string caption = "a photo";
      if (auto it = e.metadata.find("category"); it != e.metadata.end()) caption = "a photo of a " + it->second;
      try {
        enc.tokenize(caption);
      } catch (const VocabularyError&) {
        caption = "a photo";
      }
      BatchItem b;
      b.image_raw = e.embeddings.front();
      b.image_localized = e.embeddings.front();
      b.specific_caption = caption;
      b.generic_caption = caption;
      in.distractors.push_back(std::move(b));
    }
  }
  if (in.distractors.empty()) {
    throw UsageError("no negatives to train against: create another persona or index some media first");
  }

  auto res = personalize(in, parts_.pretrained, enc, train_cfg, [&](std::size_t step, std::size_t total) {
    update_job(job_id, [&](JobRecord& r) { r.progress = total ? static_cast<double>(step) / total : 0.0; }, false);
  });
  store_->put("token/" + persona_id, serialize_token(res.token));
  {
    std::lock_guard lock(persona_mutex_);
    auto cur = persona(persona_id);
    cur.state = PersonaState::trained;
    cur.specific_caption = in.specific_caption;
    save_persona(cur);
  }
  return "token/" + persona_id;
}

// ---------------------------------------------------------------------------
// Index

std::shared_ptr<const EmbeddingIndex> PimapService::index() const {
  std::lock_guard lock(index_mutex_);
  return index_;
}

std::string PimapService::ingest_manifest(const std::string& manifest_text) {
  Manifest m;
  try {
    m = parse_manifest(manifest_text, cfg_.data_dir);
    validate_manifest(m);
  } catch (const Error& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  const auto gallery = m.gallery();
  if (gallery.empty()) throw ValidationError("manifest: no gallery media records");
  json payload = json::array();
  for (const auto& g : gallery) payload.push_back(media_to_json_text(g));
  return enqueue(JobKind::index, "", payload.dump());
}

std::string PimapService::ingest_files(const std::vector<UploadedFile>& files) {
  if (files.empty()) throw ValidationError("no media files");
  std::size_t total = 0;
  for (const auto& f : files) total += f.content.size();
  if (total > cfg_.max_upload_bytes) throw PayloadTooLargeError("upload exceeds " + std::to_string(cfg_.max_upload_bytes) + " bytes");
  json payload = json::array();
  for (const auto& f : files) payload.push_back(media_to_json_text(store_upload(f, "m-")));
  return enqueue(JobKind::index, "", payload.dump());
}

IngestResult PimapService::run_index(const std::string& job_id, const std::string& payload) {
  std::lock_guard ingest(ingest_mutex_);
  std::vector<MediaDescriptor> media;
  for (const auto& text : json::parse(payload)) media.push_back(media_from_json_text(text.get<std::string>(), cfg_.data_dir));

  auto next = std::make_shared<EmbeddingIndex>(*index());
  IngestResult r;
  std::vector<IndexEntry> fresh;
  for (std::size_t i = 0; i < media.size(); ++i) {
    const auto& m = media[i];
    if (next->contains(m.media_id) || std::any_of(fresh.begin(), fresh.end(), [&](const auto& e) { return e.media_id == m.media_id; })) {
      ++r.skipped;
      continue;
    }
    auto entries = embed_gallery({sample_video_frames(m, cfg_.gallery_fps)}, *parts_.encoders);
    fresh.push_back(std::move(entries.front()));
    update_job(job_id, [&](JobRecord& j) { j.progress = static_cast<double>(i + 1) / media.size(); }, false);
  }
  for (const auto& m : media) {
    if (std::none_of(fresh.begin(), fresh.end(), [&](const auto& e) { return e.media_id == m.media_id; })) continue;
    remember_media(m);
    render_thumbnail(m);
  }
  r.added = fresh.size();
  next->add_all(std::move(fresh));
  r.index_size = next->size();
  save_index(*next, cfg_.data_dir / kIndexFile);
  {
    std::lock_guard lock(index_mutex_);
    index_ = std::move(next);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Thumbnails

std::filesystem::path PimapService::thumbnail_path(const std::string& media_id) const {
  return cfg_.data_dir / "thumbs" / (hash_hex(media_id) + ".ppm");
}

void PimapService::render_thumbnail(const MediaDescriptor& m) {
  const auto path = thumbnail_path(m.media_id);
  if (std::filesystem::exists(path)) return;
  RgbImage img;
  if (m.synthetic) {
    img = synthetic_swatch(*m.synthetic, cfg_.thumbnail_size);
  } else if (!m.frame_paths.empty()) {
    img = shrink(read_ppm(m.frame_paths.front()), cfg_.thumbnail_size);
  } else {
    return;
  }
  write_ppm(img, path);
}

std::string PimapService::thumbnail(const std::string& media_id) const {
  const auto path = thumbnail_path(media_id);
  if (!store_->get("media/" + media_id) || !std::filesystem::exists(path)) {
    throw NotFoundError("no thumbnail for media `" + media_id + "`");
  }
  return detail::read_file(path.string());
}

// ---------------------------------------------------------------------------
// Search

SearchResult PimapService::search(const std::string& query, std::size_t k) const {
  if (std::all_of(query.begin(), query.end(), [](unsigned char c) { return std::isspace(c); })) {
    throw ValidationError("query text is empty");
  }
  if (k == 0) throw ValidationError("k must be >= 1");
  SearchResult out;
  out.query = query;
  out.k = k;
  std::map<std::string, Vector> bindings;
  std::string resolved;
  for (std::size_t i = 0; i < query.size();) {
    const char c = query[i];
    if (c == '@') {
      std::size_t j = i + 1;
      while (j < query.size() && (std::isalnum(static_cast<unsigned char>(query[j])) || query[j] == '_' || query[j] == '-')) ++j;
      if (j > i + 1) {
        const auto name = query.substr(i + 1, j - i - 1);
        const auto p = find_persona_by_name(name);
        if (!p) throw UnboundMentionError("@" + name + " does not name a persona");
        const auto tok = store_->get("token/" + p->persona_id);
        if (!tok) throw ConflictError("@" + name + " is not trained yet; train it first");
        auto token = deserialize_token(*tok);
        if (token.encoder_id != encoder_id()) {
          throw ConflictError("@" + name + " was trained against encoder " + token.encoder_id + "; retrain it");
        }
        bindings[p->persona_id] = std::move(token.token);
        out.mentions.push_back({name, p->persona_id});
        resolved += "<" + p->persona_id + ">";
        i = j;
        continue;
      }
    }
    // Angle brackets would read as placeholders; the tokenizer drops them anyway.
    resolved += (c == '<' || c == '>') ? ' ' : c;
    ++i;
  }
  out.resolved = resolved;
  const auto idx = index();
  if (idx->empty()) throw ConflictError("the index is empty; add media with POST /index first");
  const auto q = compose_query(resolved, bindings, *parts_.encoders);
  std::size_t rank = 0;
  for (auto& h : idx->rank(q.values, std::min(k, idx->size()))) out.hits.push_back({++rank, std::move(h.media_id), h.score});
  return out;
}

}  // namespace pimap
