#pragma once

#include "pimap/caption_augment.hpp"
#include "pimap/encoder.hpp"
#include "pimap/errors.hpp"
#include "pimap/kv_store.hpp"
#include "pimap/localize.hpp"
#include "pimap/pi_map.hpp"
#include "pimap/retrieval.hpp"
#include "pimap/trainer.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace pimap {

// Errors the HTTP layer maps onto 409, 413 and 422. The remaining classes map
// as: ValidationError, UsageError, DecodeError, VocabularyError -> 400;
// NotFoundError -> 404; CapacityError -> 429; anything else -> 500.
class ConflictError : public Error { using Error::Error; };
class PayloadTooLargeError : public Error { using Error::Error; };
class UnboundMentionError : public Error { using Error::Error; };

enum class JobKind { pretrain, personalize, index };
enum class JobState { queued, running, done, failed };
enum class PersonaState { untrained, training, trained, failed };

const char* to_string(JobKind k);
const char* to_string(JobState s);
const char* to_string(PersonaState s);
JobKind parse_job_kind(std::string_view s);
JobState parse_job_state(std::string_view s);
PersonaState parse_persona_state(std::string_view s);

struct JobRecord {
  std::string job_id;
  JobKind kind = JobKind::personalize;
  JobState state = JobState::queued;
  double progress = 0.0;  // [0, 1]
  std::string subject;     // persona id for personalize jobs
  std::string result_ref;  // set once done
  std::string error;       // set once failed
  // Every state the job has been in, oldest first.
  std::vector<JobState> history;
};

struct Persona {
  std::string persona_id;
  std::string name;  // the @mention handle
  std::string category;
  std::optional<std::string> caption;
  std::vector<std::string> template_ids;
  PersonaState state = PersonaState::untrained;
  std::string last_job;
  std::string specific_caption;  // caption the token was trained against
};

struct UploadedFile {
  std::string filename;
  std::string content_type;
  std::string content;
};

struct SearchMention {
  std::string name;
  std::string persona_id;
};

struct SearchHit {
  std::size_t rank = 0;
  std::string media_id;
  double score = 0.0;
};

struct SearchResult {
  std::string query;
  std::string resolved;  // what was encoded; mentions appear as <persona_id>
  std::vector<SearchMention> mentions;
  std::size_t k = 0;
  std::vector<SearchHit> hits;
};

struct IngestResult {
  std::size_t added = 0;
  std::size_t skipped = 0;  // already indexed
  std::size_t index_size = 0;
};

struct ServiceConfig {
  std::filesystem::path data_dir = "pimap-data";
  std::size_t max_concurrent_jobs = 1;
  std::size_t max_queued_jobs = 16;
  std::size_t max_upload_bytes = 32u << 20;
  TrainConfig train = TrainConfig::personalize_defaults();
  bool localization = true;
  bool caption_augmentation = true;
  double gallery_fps = 1.0;
  int thumbnail_size = 64;
  double synthetic_localization_factor = 0.2;

  void validate() const;
  std::string hash() const;
};

// Everything the service wraps. A null localizer selects the default (boxes
// from the media descriptor for image files, background suppression for
// synthetic media); a null LLM client disables caption augmentation.
struct ServiceComponents {
  std::shared_ptr<const EncoderPair> encoders;
  PiMapParams pretrained;
  std::shared_ptr<const Localizer> localizer;
  std::shared_ptr<LlmClient> llm;
};

// The persona lifecycle, ingestion and search as library calls. The HTTP
// adapter (service_http.hpp) only translates requests into these.
//
// Personas, tokens and job records live in <data_dir>/store.sqlite; uploaded
// media under <data_dir>/media by content hash; thumbnails are rendered at
// ingestion into <data_dir>/thumbs. The index is rebuilt off to the side and
// swapped in whole.
class PimapService {
 public:
  PimapService(ServiceConfig cfg, ServiceComponents parts);
  ~PimapService();
  PimapService(const PimapService&) = delete;
  PimapService& operator=(const PimapService&) = delete;

  const std::string& encoder_id() const;
  const std::string& config_hash() const { return config_hash_; }
  const ServiceConfig& config() const { return cfg_; }

  // Template files are PPM images or JSON media references. Throws
  // ValidationError for bad fields, ConflictError for a taken name and
  // PayloadTooLargeError past max_upload_bytes.
  Persona create_persona(const std::string& name, const std::string& category,
                         const std::vector<UploadedFile>& templates,
                         const std::optional<std::string>& caption = std::nullopt);
  std::vector<Persona> list_personas() const;
  Persona persona(const std::string& persona_id) const;

  // Enqueues a personalization job and returns its id. NotFoundError for an
  // unknown persona; ConflictError while one is pending or when the persona
  // is already trained and retrain is false; CapacityError when the queue is
  // full.
  std::string train(const std::string& persona_id, bool retrain = false);
  JobRecord job(const std::string& job_id) const;

  // `@name` mentions bind trained personas. UnboundMentionError for an
  // unknown name, ConflictError for an untrained persona or an empty index.
  SearchResult search(const std::string& query, std::size_t k) const;

  // Enqueue an index job over the gallery media of a manifest (JSONL text),
  // or over uploaded PPM/JSON media files.
  std::string ingest_manifest(const std::string& manifest_text);
  std::string ingest_files(const std::vector<UploadedFile>& files);

  std::shared_ptr<const EmbeddingIndex> index() const;
  // PPM bytes. NotFoundError for unknown media.
  std::string thumbnail(const std::string& media_id) const;

  // Blocks until no job is queued or running; false on timeout.
  bool wait_idle(std::chrono::milliseconds timeout) const;

 private:
  std::string enqueue(JobKind kind, const std::string& subject, const std::string& payload);
  void worker_loop();
  void run_job(const std::string& job_id);
  std::string run_personalize(const std::string& job_id, const std::string& persona_id);
  IngestResult run_index(const std::string& job_id, const std::string& payload);
  void update_job(const std::string& job_id, const std::function<void(JobRecord&)>& fn, bool persist);
  void save_persona(const Persona& p);
  std::optional<Persona> find_persona(const std::string& id) const;
  std::optional<Persona> find_persona_by_name(const std::string& name) const;
  MediaDescriptor stored_media(const std::string& media_id) const;
  MediaDescriptor store_upload(const UploadedFile& file, const std::string& id_prefix);
  void remember_media(const MediaDescriptor& m);
  void render_thumbnail(const MediaDescriptor& m);
  std::filesystem::path thumbnail_path(const std::string& media_id) const;
  void recover();

  ServiceConfig cfg_;
  ServiceComponents parts_;
  std::shared_ptr<const Localizer> localizer_;
  std::string config_hash_;
  std::unique_ptr<KvStore> store_;
  std::unique_ptr<CaptionCache> captions_;

  mutable std::mutex index_mutex_;
  std::shared_ptr<const EmbeddingIndex> index_;
  std::mutex ingest_mutex_;

  // Serializes persona creation and training admission.
  mutable std::mutex persona_mutex_;

  mutable std::mutex jobs_mutex_;
  mutable std::condition_variable jobs_cv_;
  std::map<std::string, JobRecord> jobs_;
  std::deque<std::string> queue_;
  std::size_t running_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

// JSON shapes shared by the HTTP layer and its tests.
std::string to_json_text(const Persona& p);
std::string to_json_text(const JobRecord& j);
std::string to_json_text(const SearchResult& r);
std::string to_json_text(const std::vector<Persona>& ps);

}  // namespace pimap
