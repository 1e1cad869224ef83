#include "pimap/harness.hpp"

#include "pimap/errors.hpp"
#include "pimap/hashing.hpp"
#include "pimap/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace pimap {
namespace {

using nlohmann::json;

void put_section(KeyValueConfig& kv, const std::string& prefix, const KeyValueConfig& sub) {
  for (const auto& [k, v] : sub.values()) kv.set(prefix + "." + k, v);
}

const char* flag(bool b) { return b ? "true" : "false"; }

// Runs fn(0..n-1) on up to hardware_concurrency threads. Each index writes
// only its own output slot, so results do not depend on scheduling. The first
// exception by index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct InstanceMaterial {
  const InstanceRecord* record = nullptr;
  std::vector<MediaDescriptor> chosen;
  std::vector<TemplateEmbedding> embeddings;
  std::string specific_caption;
  std::string generic_caption;
  CaptionSource caption_source = CaptionSource::user;
};

}  // namespace

const char* to_string(Profile p) {
  switch (p) {
    case Profile::this_is_my:
      return "this_is_my";
    case Profile::deepfashion2:
      return "deepfashion2";
    case Profile::synthetic:
      return "synthetic";
  }
  return "synthetic";
}

Profile parse_profile(std::string_view s) {
  if (s == "this_is_my") return Profile::this_is_my;
  if (s == "deepfashion2") return Profile::deepfashion2;
  if (s == "synthetic") return Profile::synthetic;
  throw ConfigError("unknown profile `" + std::string(s) + "` (this_is_my, deepfashion2, synthetic)");
}

// ---------------------------------------------------------------------------

ProtocolConfig ProtocolConfig::for_profile(Profile p) {
  ProtocolConfig c;
  c.profile = p;
  c.n_templates = 5;
  c.train = TrainConfig::personalize_defaults(to_string(p));
  if (p == Profile::synthetic) {
    // Desk scale: a handful of steps per template, so a shorter warmup than
    // the full-size recipe.
    c.train.epochs = 60;
    c.train.warmup_steps = 20;
  }
  return c;
}

TrainConfig ProtocolConfig::effective_train() const {
  TrainConfig t = train;
  t.phase = Phase::personalize;
  t.seed = seed;
  if (!image_loss) t.loss.alpha = 0.0;
  t.use_localization = localization;
  t.conditioning_from_localized = localization;
  return t;
}

void ProtocolConfig::validate() const {
  if (n_templates == 0) throw ConfigError("protocol: n_templates must be >= 1");
  if (!(gallery_fps > 0.0)) throw ConfigError("protocol: gallery_fps must be > 0");
  if (video_template_frames == 0) throw ConfigError("protocol: video_template_frames must be >= 1");
  if (ks.empty() || std::count(ks.begin(), ks.end(), 0u)) throw ConfigError("protocol: ks must be positive");
  effective_train().validate();
}

KeyValueConfig ProtocolConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("profile", to_string(profile));
  kv.set("n_templates", std::to_string(n_templates));
  kv.set("image_loss", flag(image_loss));
  kv.set("caption_augmentation", flag(caption_augmentation));
  kv.set("localization", flag(localization));
  kv.set("train_on_eval", flag(train_on_eval));
  std::ostringstream fps;
  fps.precision(17);
  fps << gallery_fps;
  kv.set("gallery_fps", fps.str());
  kv.set("video_template_frames", std::to_string(video_template_frames));
  kv.set("run_baselines", flag(run_baselines));
  kv.set("seed", std::to_string(seed));
  std::string k_list;
  for (auto k : ks) k_list += (k_list.empty() ? "" : ",") + std::to_string(k);
  kv.set("ks", k_list);
  put_section(kv, "train", train.to_kv());
  return kv;
}

ProtocolConfig ProtocolConfig::from_kv(const KeyValueConfig& kv) {
  ProtocolConfig c = for_profile(parse_profile(kv.get_string("profile", "synthetic")));
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("protocol: `") + key + "` must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.n_templates = count("n_templates", c.n_templates);
  c.image_loss = kv.get_bool("image_loss", c.image_loss);
  c.caption_augmentation = kv.get_bool("caption_augmentation", c.caption_augmentation);
  c.localization = kv.get_bool("localization", c.localization);
  c.train_on_eval = kv.get_bool("train_on_eval", c.train_on_eval);
  c.gallery_fps = kv.get_double("gallery_fps", c.gallery_fps);
  c.video_template_frames = count("video_template_frames", c.video_template_frames);
  c.run_baselines = kv.get_bool("run_baselines", c.run_baselines);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  if (auto ks = kv.get("ks")) {
    c.ks.clear();
    std::stringstream ss(*ks);
    for (std::string item; std::getline(ss, item, ',');) {
      try {
        c.ks.push_back(static_cast<std::size_t>(std::stoul(item)));
      } catch (const std::exception&) {
        throw ConfigError("protocol: `ks` must be a comma-separated list of integers");
      }
    }
  }
  const auto sub = kv.section("train");
  if (!sub.values().empty()) {
    // Unset keys keep this profile's training defaults.
    KeyValueConfig merged = c.train.to_kv();
    for (const auto& [k, v] : sub.values()) merged.set(k, v);
    c.train = TrainConfig::from_kv(merged);
  }
  c.validate();
  return c;
}

std::string ProtocolConfig::hash() const { return hash_hex(to_kv().to_string()); }

// ---------------------------------------------------------------------------

const ArmReport& ProtocolReport::arm(const std::string& name) const {
  for (const auto& a : arms) {
    if (a.arm == name) return a;
  }
  throw NotFoundError("report has no arm `" + name + "`");
}

MediaDescriptor sample_video_frames(const MediaDescriptor& m, double fps) {
  if (m.kind != MediaKind::video || !(m.fps > 0.0) || m.frame_paths.empty()) return m;
  const auto step = static_cast<std::size_t>(std::max(1.0, std::round(m.fps / fps)));
  MediaDescriptor out = m;
  out.frame_paths.clear();
  for (std::size_t i = 0; i < m.frame_paths.size(); i += step) out.frame_paths.push_back(m.frame_paths[i]);
  out.fps = m.fps / static_cast<double>(step);
  return out;
}

std::vector<MediaDescriptor> template_frames(const MediaDescriptor& m, std::size_t n) {
  if (m.kind == MediaKind::image) return {m};
  std::vector<MediaDescriptor> out;
  const std::size_t total = m.frame_count();
  for (auto idx : prepare_video_templates(total, n)) {
    MediaDescriptor f = m;
    f.kind = MediaKind::image;
    f.media_id = m.media_id + "@" + std::to_string(idx);
    if (m.synthetic) {
      f.synthetic->is_video = false;
      f.synthetic->n_frames = 1;
      f.synthetic->frame_index = idx;
    }
    if (!m.frame_paths.empty()) f.frame_paths = {m.frame_paths[idx]};
    f.fps = 0.0;
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<MediaDescriptor> choose_templates(const std::vector<MediaDescriptor>& pool, std::size_t n,
                                              std::uint64_t seed, const std::string& instance_id) {
  if (pool.empty()) throw UsageError(instance_id + ": no template media");
  std::vector<MediaDescriptor> sorted = pool;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.media_id < b.media_id; });
  Rng rng = make_stream(seed, "protocol/templates/" + instance_id);
  const auto perm = sample_without_replacement(rng, sorted.size(), sorted.size());
  std::vector<MediaDescriptor> out;
  for (std::size_t k = 0; k < std::min(n, perm.size()); ++k) out.push_back(sorted[perm[k]]);
  return out;
}

std::string generic_query_text(const std::string& text, const std::map<std::string, std::string>& categories) {
  PromptTemplate tmpl(text);
  std::map<std::string, std::string> words;
  for (const auto& name : tmpl.placeholders()) {
    auto it = categories.find(name);
    if (it == categories.end()) throw UsageError("unbound placeholder <" + name + ">");
    words[name] = "a " + it->second;
  }
  return tmpl.substitute(words);
}

// ---------------------------------------------------------------------------

InstanceTokens personalize_instances(const ProtocolInputs& in, const ProtocolConfig& cfg) {
  cfg.validate();
  if (!in.encoders || !in.train) throw UsageError("personalize_instances: encoders and train are required");
  if (cfg.localization && !in.localizer) throw UsageError("personalize_instances: localization needs a localizer");
  if (cfg.caption_augmentation && !in.llm) {
    throw UsageError("personalize_instances: caption augmentation needs an LLM client");
  }
  const EncoderPair& enc = *in.encoders;
  const auto& desc = enc.descriptor();
  const TrainConfig train_cfg = cfg.effective_train();
  InstanceTokens out;

  // Templates, embeddings and captions per instance.
  std::vector<InstanceMaterial> material;
  CaptionCache scratch;
  CaptionCache& cache = in.captions ? *in.captions : scratch;
  for (const auto& rec : in.train->instances) {
    InstanceMaterial m;
    m.record = &rec;
    std::vector<MediaDescriptor> pool;
    auto add_pool = [&](const InstanceRecord& r) {
      for (const auto& t : r.templates) {
        for (auto& f : template_frames(t, cfg.video_template_frames)) pool.push_back(std::move(f));
      }
    };
    add_pool(rec);
    if (cfg.train_on_eval && in.eval_instances) {
      if (const auto* extra = in.eval_instances->find_instance(rec.instance_id)) add_pool(*extra);
    }
    m.chosen = choose_templates(pool, cfg.n_templates, cfg.seed, rec.instance_id);
    m.generic_caption = "a photo of a " + rec.category;
    out.categories[rec.instance_id] = rec.category;
    material.push_back(std::move(m));
  }

  parallel_for(material.size(), [&](std::size_t i) {
    auto& m = material[i];
    for (const auto& t : m.chosen) {
      TemplateEmbedding te;
      te.media_id = t.media_id;
      te.raw = enc.encode_image(t).values;
      te.localized = cfg.localization ? enc.encode_image(in.localizer->localize(t, m.record->category)).values : te.raw;
      m.embeddings.push_back(std::move(te));
    }
  });

  for (auto& m : material) {
    const auto& rec = *m.record;
    if (cfg.caption_augmentation) {
      std::vector<std::string> ids;
      for (const auto& t : m.chosen) ids.push_back(t.media_id);
      const auto pick = choose_caption_template(ids, cfg.seed, rec.instance_id);
      const auto it = std::find_if(m.chosen.begin(), m.chosen.end(), [&](const auto& t) { return t.media_id == pick; });
      AugmentRequest req;
      req.media_id = pick;
      req.localized = cfg.localization ? in.localizer->localize(*it, rec.category) : *it;
      req.category = rec.category;
      req.seed_caption = rec.caption;
      const auto cap = augment_caption(req, *in.llm, cache);
      m.specific_caption = cap.text;
      m.caption_source = cap.source;
    } else if (rec.caption && !rec.caption->empty()) {
      m.specific_caption = *rec.caption;
      m.caption_source = CaptionSource::user;
    } else {
      m.specific_caption = m.generic_caption;
      m.caption_source = CaptionSource::generic;
    }
  }

  // Tokens: supplied or trained. Negatives for one instance are the other
  // instances' templates.
  out.training.resize(material.size());
  std::vector<PersonaToken> tokens(material.size());
  parallel_for(material.size(), [&](std::size_t i) {
    const auto& m = material[i];
    auto& tr = out.training[i];
    tr.instance_id = m.record->instance_id;
    tr.specific_caption = m.specific_caption;
    tr.caption_source = m.caption_source;
    for (const auto& t : m.chosen) tr.template_ids.push_back(t.media_id);
    if (auto it = in.tokens.find(tr.instance_id); it != in.tokens.end()) {
      if (it->second.encoder_id != desc.encoder_id) {
        throw ConfigError(tr.instance_id + ": token was trained against encoder " + it->second.encoder_id +
                          ", the active encoder is " + desc.encoder_id);
      }
      tokens[i] = it->second;
      return;
    }
    if (!in.train_missing) throw NotFoundError("missing token for instance " + tr.instance_id);
    if (!in.pretrained) throw UsageError("run_protocol: training needs pretrained pi-map parameters");
    PersonalizeInput pin;
    pin.instance_id = tr.instance_id;
    pin.specific_caption = m.specific_caption;
    pin.generic_caption = m.generic_caption;
    pin.templates = m.embeddings;
    for (std::size_t j = 0; j < material.size(); ++j) {
      if (j == i) continue;
      for (const auto& te : material[j].embeddings) {
        BatchItem b;
        b.image_raw = te.raw;
        b.image_localized = te.localized;
        b.specific_caption = material[j].specific_caption;
        b.generic_caption = material[j].generic_caption;
        pin.distractors.push_back(std::move(b));
      }
    }
    auto res = personalize(pin, *in.pretrained, enc, train_cfg, in.progress);
    tr.trained = true;
    tr.initial_loss = res.initial_loss;
    tr.final_loss = res.final_loss;
    tokens[i] = std::move(res.token);
  });
  for (std::size_t i = 0; i < material.size(); ++i) out.tokens[material[i].record->instance_id] = tokens[i];
  for (const auto& m : material) {
    std::vector<Vector> raws;
    for (const auto& te : m.embeddings) raws.push_back(te.raw);
    out.image_queries[m.record->instance_id] = mean_of(raws);
  }
  return out;
}

ProtocolReport run_protocol(const ProtocolInputs& in, const ProtocolConfig& cfg) {
  cfg.validate();
  if (!in.encoders || !in.train || !in.gallery || !in.queries) {
    throw UsageError("run_protocol: encoders, train, gallery and queries are required");
  }
  if (cfg.localization && !in.localizer) throw UsageError("run_protocol: localization needs a localizer");
  if (cfg.caption_augmentation && !in.llm) throw UsageError("run_protocol: caption augmentation needs an LLM client");
  const EncoderPair& enc = *in.encoders;
  const auto& desc = enc.descriptor();

  ProtocolReport report;
  report.repro = {cfg.seed, cfg.hash(), desc.encoder_id};

  // Index.
  const auto gallery_media = in.gallery->gallery();
  std::vector<MediaDescriptor> sampled(gallery_media.size());
  for (std::size_t i = 0; i < gallery_media.size(); ++i) sampled[i] = sample_video_frames(gallery_media[i], cfg.gallery_fps);
  std::vector<IndexEntry> entries(sampled.size());
  parallel_for(sampled.size(), [&](std::size_t i) { entries[i] = std::move(embed_gallery({sampled[i]}, enc).front()); });
  EmbeddingIndex index(desc.encoder_id, desc.d_joint);
  index.add_all(std::move(entries));
  report.index_digest = hash_hex(serialize_index(index));

  auto personas = personalize_instances(in, cfg);
  report.training = std::move(personas.training);
  report.tokens = std::move(personas.tokens);

  // Queries.
  const auto& queries = in.queries->queries;
  const auto& image_queries = personas.image_queries;
  const auto& categories = personas.categories;

  auto run_arm = [&](const std::string& name, auto&& embed) {
    ArmReport arm;
    arm.arm = name;
    arm.outcomes.resize(queries.size());
    parallel_for(queries.size(), [&](std::size_t q) {
      const auto& query = queries[q];
      const Vector v = embed(query);
      auto& out = arm.outcomes[q];
      out.query_id = query.query_id;
      out.positives = query.positives;
      for (auto& hit : index.rank(v, index.size())) out.ranking.push_back(std::move(hit.media_id));
    });
    std::vector<QueryOutcome> ctx, gen;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      (queries[q].setting == QuerySetting::context ? ctx : gen).push_back(arm.outcomes[q]);
    }
    if (!ctx.empty()) arm.context = compute_metrics(ctx, cfg.ks);
    if (!gen.empty()) arm.generic = compute_metrics(gen, cfg.ks);
    arm.all = compute_metrics(arm.outcomes, cfg.ks);
    report.arms.push_back(std::move(arm));
  };

  run_arm("personalized", [&](const QueryRecord& q) {
    return compose_query(q.text, report.tokens, enc).values;
  });
  if (cfg.run_baselines) {
    run_arm("generic_text", [&](const QueryRecord& q) {
      return enc.encode_text(generic_query_text(q.text, categories)).values;
    });
    run_arm("image_only", [&](const QueryRecord& q) {
      std::vector<Vector> parts;
      for (const auto& name : PromptTemplate(q.text).placeholders()) {
        auto it = image_queries.find(name);
        if (it == image_queries.end()) throw UsageError("unbound placeholder <" + name + ">");
        parts.push_back(it->second);
      }
      if (parts.empty()) return enc.encode_text(q.text).values;
      return mean_of(parts);
    });
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

json metrics_json(const MetricsReport& r) {
  json rec = json::object();
  for (const auto& [k, v] : r.recall_at) rec["R@" + std::to_string(k)] = v;
  return json{{"n_queries", r.n_queries},  {"n_excluded", r.n_excluded},
              {"mAP", r.map},              {"MRR", r.mrr},
              {"recall", rec},             {"tR@5", r.tr_at5},
              {"P@5", r.p_at5},            {"total_positives", r.total_positives},
              {"tR@5_ceiling", r.tr_at5_ceiling}, {"warnings", r.warnings}};
}

}  // namespace

std::string protocol_report_json(const ProtocolReport& r) {
  json j;
  j["reproducibility"] = {{"seed", r.repro.seed}, {"config_hash", r.repro.config_hash},
                          {"encoder_id", r.repro.encoder_id}};
  j["index_digest"] = r.index_digest;
  json training = json::array();
  for (const auto& t : r.training) {
    training.push_back({{"instance_id", t.instance_id},
                        {"specific_caption", t.specific_caption},
                        {"caption_source", to_string(t.caption_source)},
                        {"templates", t.template_ids},
                        {"trained", t.trained},
                        {"initial_loss", t.initial_loss},
                        {"final_loss", t.final_loss},
                        {"token_hash", hash_hex(serialize_token(r.tokens.at(t.instance_id)))}});
  }
  j["training"] = training;
  json arms = json::object();
  for (const auto& a : r.arms) {
    arms[a.arm] = {{"context", metrics_json(a.context)},
                   {"generic", metrics_json(a.generic)},
                   {"all", metrics_json(a.all)}};
  }
  j["arms"] = arms;
  return j.dump(2) + "\n";
}

std::string format_protocol_report(const ProtocolReport& r) {
  std::ostringstream out;
  out << "seed: " << r.repro.seed << "\n"
      << "config_hash: " << r.repro.config_hash << "\n"
      << "encoder_id: " << r.repro.encoder_id << "\n"
      << "index_digest: " << r.index_digest << "\n\n";
  for (const auto& a : r.arms) {
    if (a.context.n_queries) out << format_report(a.arm + " / context", a.context) << "\n";
    if (a.generic.n_queries) out << format_report(a.arm + " / generic", a.generic) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------

SyntheticBenchmarkConfig SyntheticBenchmarkConfig::reference(std::uint64_t seed) {
  SyntheticBenchmarkConfig c;
  c.world.seed = seed;
  c.world.n_categories = 4;
  c.world.n_instances_per_category = 3;
  // Instances of one category sit close together and carry as much unnamed
  // visual detail as attribute signal; backgrounds dominate gallery shots.
  c.world.noise_scale = 0.02;
  c.world.instance_offset_scale = 0.35;
  c.world.visual_detail_ratio = 1.0;
  c.bench.seed = seed;
  c.bench.n_instances = 12;
  c.bench.n_gallery = 200;
  c.bench.template_background_weight = 0.4;
  c.bench.gallery_background_weight = 0.6;
  c.pretrain.seed = seed;
  c.pretrain.batch_size = 64;
  c.pretrain.base_lr = 3e-3;
  c.pretrain.epochs = 10;
  c.protocol.seed = seed;
  return c;
}

void SyntheticBenchmarkConfig::validate() const {
  world.validate();
  pretrain.validate();
  protocol.validate();
  if (pretrain_items < 2) throw ConfigError("synthetic: pretrain_items must be >= 2");
  if (!(pretrain_max_background >= 0.0 && pretrain_max_background <= 1.0)) {
    throw ConfigError("synthetic: pretrain_max_background must lie in [0, 1]");
  }
}

KeyValueConfig SyntheticBenchmarkConfig::to_kv() const {
  KeyValueConfig kv;
  put_section(kv, "world", world.to_kv());
  put_section(kv, "bench", bench.to_kv());
  put_section(kv, "pretrain", pretrain.to_kv());
  put_section(kv, "protocol", protocol.to_kv());
  kv.set("pretrain_items", std::to_string(pretrain_items));
  std::ostringstream bg;
  bg.precision(17);
  bg << pretrain_max_background;
  kv.set("pretrain_max_background", bg.str());
  kv.set("pretrain_init_seed", std::to_string(pretrain_init_seed));
  return kv;
}

SyntheticBenchmarkConfig SyntheticBenchmarkConfig::from_kv(const KeyValueConfig& kv) {
  SyntheticBenchmarkConfig c = reference(static_cast<std::uint64_t>(kv.get_int("seed", 1234)));
  auto merged = [](const KeyValueConfig& base, const KeyValueConfig& over) {
    KeyValueConfig m = base;
    for (const auto& [k, v] : over.values()) m.set(k, v);
    return m;
  };
  c.world = WorldConfig::from_kv(merged(c.world.to_kv(), kv.section("world")));
  c.bench = BenchmarkSpec::from_kv(merged(c.bench.to_kv(), kv.section("bench")));
  c.pretrain = TrainConfig::from_kv(merged(c.pretrain.to_kv(), kv.section("pretrain")));
  c.protocol = ProtocolConfig::from_kv(merged(c.protocol.to_kv(), kv.section("protocol")));
  const long long items = kv.get_int("pretrain_items", static_cast<long long>(c.pretrain_items));
  if (items < 0) throw ConfigError("synthetic: pretrain_items must be >= 0");
  c.pretrain_items = static_cast<std::size_t>(items);
  c.pretrain_max_background = kv.get_double("pretrain_max_background", c.pretrain_max_background);
  c.pretrain_init_seed =
      static_cast<std::uint64_t>(kv.get_int("pretrain_init_seed", static_cast<long long>(c.pretrain_init_seed)));
  c.validate();
  return c;
}

std::string SyntheticBenchmarkConfig::hash() const { return hash_hex(to_kv().to_string()); }

SyntheticSetup prepare_synthetic(const SyntheticBenchmarkConfig& cfg) {
  cfg.validate();
  SyntheticSetup s;
  s.world = World::generate(cfg.world);
  s.encoders = std::make_shared<ToyEncoderPair>(s.world);
  s.manifests = emit_benchmark(*s.world, cfg.bench);
  const auto& d = s.encoders->descriptor();
  const auto init = PiMapParams::random(d.d_joint, d.d_tok, cfg.pretrain_init_seed);
  const auto data = s.world->pretraining_set(cfg.pretrain_items, cfg.pretrain_max_background, cfg.world.seed);
  auto res = pretrain(init, data, *s.encoders, cfg.pretrain);
  s.pretrained = std::move(res.params);
  s.pretrain_losses = std::move(res.epoch_losses);
  return s;
}

ProtocolReport run_synthetic(const SyntheticSetup& setup, const ProtocolConfig& protocol) {
  SyntheticLocalizer localizer(setup.world->config().localization_factor);
  SyntheticLlmClient llm(setup.world);
  ProtocolInputs in;
  in.encoders = setup.encoders.get();
  in.train = &setup.manifests.train;
  in.gallery = &setup.manifests.gallery;
  in.queries = &setup.manifests.queries;
  in.localizer = &localizer;
  in.llm = &llm;
  in.pretrained = &setup.pretrained;
  return run_protocol(in, protocol);
}

ProtocolReport run_synthetic_benchmark(const SyntheticBenchmarkConfig& cfg) {
  const auto setup = prepare_synthetic(cfg);
  auto report = run_synthetic(setup, cfg.protocol);
  report.repro.config_hash = cfg.hash();
  return report;
}

}  // namespace pimap
