#include "pimap/synthetic_world.hpp"

#include "pimap/errors.hpp"
#include "pimap/hashing.hpp"
#include "pimap/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace pimap {
namespace {

constexpr const char* kCategoryWords[] = {"dog",   "cat",  "mug",   "bag",  "car",   "bike",
                                          "shoe",  "lamp", "chair", "plant", "teapot", "hat"};
constexpr const char* kAttributeWords[] = {
    "red",   "blue",   "green",  "yellow", "black", "white",  "spotted", "striped",
    "fluffy", "shiny", "small",  "large",  "old",   "new",    "round",   "square",
    "wooden", "metal", "soft",   "furry",  "curly", "tall",   "short",   "dotted"};
constexpr const char* kBackgroundWords[] = {
    "forest", "beach",  "kitchen", "street",  "park",    "office",   "garden",  "bedroom",
    "lake",   "mountain", "desert", "snow",   "river",   "bridge",   "market",  "station",
    "library", "cafe",  "stadium", "farm",    "harbor",  "rooftop",  "tunnel",  "field",
    "classroom", "garage", "hallway", "balcony", "playground", "museum", "airport", "bakery"};
constexpr const char* kFillerWords[] = {
    "a",      "an",      "the",     "photo",   "image",    "picture", "of",   "in",
    "on",     "at",      "my",      "with",    "and",      "is",      "near", "inside",
    "outside", "playing", "sitting", "running", "sleeping", "standing", "next", "to",
    "this",   "it",      "looking", "lying"};

template <std::size_t N>
std::string pick_word(const char* const (&words)[N], std::size_t i, const char* prefix) {
  if (i < N) return words[i];
  return std::string(prefix) + std::to_string(i);
}

Vector random_unit(Rng& rng, std::size_t d) {
  Vector v(static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = gaussian(rng);
  return normalized(v);
}

// Orthonormal basis via Householder QR of a seeded Gaussian matrix.
Matrix orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix g(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = gaussian(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(g.rows(), g.cols());
}

WorldInstance make_instance(std::string id, std::size_t category, const WorldConfig& cfg,
                            const std::vector<WorldCategory>& cats,
                            const std::vector<WorldAttribute>& attrs, Rng& rng) {
  WorldInstance inst;
  inst.instance_id = std::move(id);
  inst.category = category;
  inst.attributes = sample_without_replacement(rng, cfg.n_attributes, cfg.attributes_per_instance);
  Vector delta = Vector::Zero(static_cast<Eigen::Index>(cfg.d_joint));
  for (auto a : inst.attributes) delta += attrs[a].direction;
  delta /= std::sqrt(static_cast<double>(cfg.attributes_per_instance));
  if (cfg.visual_detail_ratio > 0.0) delta += cfg.visual_detail_ratio * random_unit(rng, cfg.d_joint);
  inst.concept_vec = normalized(cats[category].concept_vec + cfg.instance_offset_scale * delta);
  return inst;
}

}  // namespace

void WorldConfig::validate() const {
  if (d_joint < 2 || d_tok < 1) throw ConfigError("world: d_joint must be >= 2 and d_tok >= 1");
  if (n_categories == 0 || n_instances_per_category == 0 || background_pool_size == 0 ||
      n_attributes == 0 || attributes_per_instance == 0 || n_pretrain_instances == 0) {
    throw ConfigError("world: all counts must be positive");
  }
  if (attributes_per_instance > n_attributes) {
    throw ConfigError("world: attributes_per_instance exceeds n_attributes");
  }
  const auto [g1, g2] = modality_gap_dims;
  if (g1 == g2 || g1 >= d_joint || g2 >= d_joint) {
    throw ConfigError("world: modality_gap_dims must be distinct and < d_joint");
  }
  if (instance_offset_scale < 0 || modality_gap_magnitude < 0 || noise_scale < 0 ||
      filler_scale < 0 || visual_detail_ratio < 0) {
    throw ConfigError("world: scales must be >= 0");
  }
  if (localization_factor < 0 || localization_factor > 1) {
    throw ConfigError("world: localization_factor must lie in [0, 1]");
  }
}

KeyValueConfig WorldConfig::to_kv() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  kv.set("seed", std::to_string(seed));
  kv.set("d_joint", std::to_string(d_joint));
  kv.set("d_tok", std::to_string(d_tok));
  kv.set("n_categories", std::to_string(n_categories));
  kv.set("n_instances_per_category", std::to_string(n_instances_per_category));
  kv.set("instance_offset_scale", num(instance_offset_scale));
  kv.set("background_pool_size", std::to_string(background_pool_size));
  kv.set("modality_gap_dims",
         std::to_string(modality_gap_dims.first) + "," + std::to_string(modality_gap_dims.second));
  kv.set("modality_gap_magnitude", num(modality_gap_magnitude));
  kv.set("noise_scale", num(noise_scale));
  kv.set("n_attributes", std::to_string(n_attributes));
  kv.set("attributes_per_instance", std::to_string(attributes_per_instance));
  kv.set("n_pretrain_instances", std::to_string(n_pretrain_instances));
  kv.set("visual_detail_ratio", num(visual_detail_ratio));
  kv.set("filler_scale", num(filler_scale));
  kv.set("localization_factor", num(localization_factor));
  kv.set("normalize_outputs", normalize_outputs ? "true" : "false");
  kv.set("linear_text", linear_text ? "true" : "false");
  return kv;
}

WorldConfig WorldConfig::from_kv(const KeyValueConfig& kv) {
  WorldConfig c;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("world: `") + key + "` must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.d_joint = count("d_joint", c.d_joint);
  c.d_tok = count("d_tok", c.d_tok);
  c.n_categories = count("n_categories", c.n_categories);
  c.n_instances_per_category = count("n_instances_per_category", c.n_instances_per_category);
  c.instance_offset_scale = kv.get_double("instance_offset_scale", c.instance_offset_scale);
  c.background_pool_size = count("background_pool_size", c.background_pool_size);
  if (auto dims = kv.get("modality_gap_dims")) {
    const auto comma = dims->find(',');
    if (comma == std::string::npos) throw ConfigError("world: modality_gap_dims must be `i,j`");
    try {
      c.modality_gap_dims = {std::stoul(dims->substr(0, comma)), std::stoul(dims->substr(comma + 1))};
    } catch (const std::exception&) {
      throw ConfigError("world: modality_gap_dims must be `i,j`");
    }
  }
  c.modality_gap_magnitude = kv.get_double("modality_gap_magnitude", c.modality_gap_magnitude);
  c.noise_scale = kv.get_double("noise_scale", c.noise_scale);
  c.n_attributes = count("n_attributes", c.n_attributes);
  c.attributes_per_instance = count("attributes_per_instance", c.attributes_per_instance);
  c.n_pretrain_instances = count("n_pretrain_instances", c.n_pretrain_instances);
  c.visual_detail_ratio = kv.get_double("visual_detail_ratio", c.visual_detail_ratio);
  c.filler_scale = kv.get_double("filler_scale", c.filler_scale);
  c.localization_factor = kv.get_double("localization_factor", c.localization_factor);
  c.normalize_outputs = kv.get_bool("normalize_outputs", c.normalize_outputs);
  c.linear_text = kv.get_bool("linear_text", c.linear_text);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

std::shared_ptr<const World> World::generate(const WorldConfig& cfg) {
  cfg.validate();
  std::shared_ptr<World> w(new World());
  w->cfg_ = cfg;
  w->encoder_id_ = "toy-" + hash_hex(cfg.canonical());
  const std::size_t d = cfg.d_joint;

  Rng cat_rng = make_stream(cfg.seed, "world/categories");
  for (std::size_t g = 0; g < cfg.n_categories; ++g) {
    w->categories_.push_back({pick_word(kCategoryWords, g, "category"), random_unit(cat_rng, d)});
  }
  Rng attr_rng = make_stream(cfg.seed, "world/attributes");
  for (std::size_t a = 0; a < cfg.n_attributes; ++a) {
    w->attributes_.push_back({pick_word(kAttributeWords, a, "attr"), random_unit(attr_rng, d)});
  }
  Rng inst_rng = make_stream(cfg.seed, "world/instances");
  for (std::size_t g = 0; g < cfg.n_categories; ++g) {
    for (std::size_t k = 0; k < cfg.n_instances_per_category; ++k) {
      w->instances_.push_back(make_instance(w->categories_[g].word + "-" + std::to_string(k), g, cfg,
                                            w->categories_, w->attributes_, inst_rng));
    }
  }
  Rng pre_rng = make_stream(cfg.seed, "world/pretrain-instances");
  for (std::size_t k = 0; k < cfg.n_pretrain_instances; ++k) {
    const std::size_t g = uniform_index(pre_rng, cfg.n_categories);
    w->pretrain_instances_.push_back(make_instance("pre-" + std::to_string(k), g, cfg,
                                                   w->categories_, w->attributes_, pre_rng));
  }
  Rng bg_rng = make_stream(cfg.seed, "world/backgrounds");
  for (std::size_t b = 0; b < cfg.background_pool_size; ++b) {
    w->backgrounds_.push_back({pick_word(kBackgroundWords, b, "scene"), random_unit(bg_rng, d)});
  }
  for (std::size_t i = 0; i < w->instances_.size(); ++i) {
    w->instance_index_[w->instances_[i].instance_id] = i;
  }
  for (std::size_t i = 0; i < w->pretrain_instances_.size(); ++i) {
    w->instance_index_[w->pretrain_instances_[i].instance_id] = w->instances_.size() + i;
  }
  for (std::size_t i = 0; i < w->backgrounds_.size(); ++i) {
    w->background_index_[w->backgrounds_[i].background_id] = i;
  }

  // Vocabulary: every word gets a joint-space meaning; token embeddings are
  // the pseudo-inverse image of that meaning under the text projection.
  std::vector<std::string> words;
  std::vector<Vector> meanings;
  const double attr_scale =
      cfg.instance_offset_scale / std::sqrt(static_cast<double>(cfg.attributes_per_instance));
  for (const auto& c : w->categories_) {
    words.push_back(c.word);
    meanings.push_back(c.concept_vec);
  }
  for (const auto& a : w->attributes_) {
    words.push_back(a.word);
    meanings.push_back(attr_scale * a.direction);
  }
  for (const auto& b : w->backgrounds_) {
    words.push_back(b.background_id);
    meanings.push_back(b.direction);
  }
  Rng filler_rng = make_stream(cfg.seed, "world/fillers");
  std::set<std::string> taken(words.begin(), words.end());
  for (const char* f : kFillerWords) {
    if (taken.count(f)) continue;
    words.emplace_back(f);
    meanings.push_back(cfg.filler_scale * random_unit(filler_rng, d));
  }

  Rng text_rng = make_stream(cfg.seed, "world/text-matrix");
  if (cfg.d_tok >= d) {
    w->text_matrix_ = orthonormal_columns(text_rng, cfg.d_tok, d).transpose();  // rows orthonormal
  } else {
    w->text_matrix_ = orthonormal_columns(text_rng, d, cfg.d_tok);  // columns orthonormal
  }
  // Both shapes satisfy pinv(M) = M^T.
  w->meanings_.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(words.size()));
  for (std::size_t i = 0; i < meanings.size(); ++i) w->meanings_.col(static_cast<Eigen::Index>(i)) = meanings[i];
  Matrix token_table = w->text_matrix_.transpose() * w->meanings_;
  w->vocab_ = Vocabulary(std::move(words), std::move(token_table));

  w->image_offset_ = Vector::Zero(static_cast<Eigen::Index>(d));
  const double half = cfg.modality_gap_magnitude / 2.0;
  w->image_offset_[static_cast<Eigen::Index>(cfg.modality_gap_dims.first)] = half;
  w->image_offset_[static_cast<Eigen::Index>(cfg.modality_gap_dims.second)] = half;
  w->text_offset_ = -w->image_offset_;
  return w;
}

const WorldInstance& World::instance(std::string_view id) const {
  auto it = instance_index_.find(std::string(id));
  if (it == instance_index_.end()) throw NotFoundError("world: unknown instance `" + std::string(id) + "`");
  return it->second < instances_.size() ? instances_[it->second]
                                        : pretrain_instances_[it->second - instances_.size()];
}

const WorldBackground& World::background(std::string_view id) const {
  auto it = background_index_.find(std::string(id));
  if (it == background_index_.end()) {
    throw NotFoundError("world: unknown background `" + std::string(id) + "`");
  }
  return backgrounds_[it->second];
}

const std::string& World::category_word(const WorldInstance& inst) const {
  return categories_[inst.category].word;
}

std::string World::generic_caption(const WorldInstance& inst) const {
  return "a photo of a " + category_word(inst);
}

std::string World::user_caption(const WorldInstance& inst) const {
  return "a photo of my " + category_word(inst) + " " + attributes_[inst.attributes.front()].word;
}

std::string World::augment_caption(const WorldInstance& inst, const std::string& seed_caption) const {
  const auto present = Vocabulary::split_words(seed_caption);
  std::string out = seed_caption.empty() ? "a photo of my " + category_word(inst) : seed_caption;
  for (auto a : inst.attributes) {
    const auto& w = attributes_[a].word;
    if (std::find(present.begin(), present.end(), w) == present.end()) out += " " + w;
  }
  return out;
}

std::string World::full_caption(const WorldInstance& inst) const {
  return augment_caption(inst, user_caption(inst));
}

std::vector<std::pair<MediaDescriptor, std::string>> World::pretraining_set(
    std::size_t n_items, double max_background_weight, std::uint64_t seed) const {
  Rng rng = make_stream(seed, "world/pretraining-set");
  std::vector<std::pair<MediaDescriptor, std::string>> out;
  out.reserve(n_items);
  for (std::size_t k = 0; k < n_items; ++k) {
    const auto& inst = pretrain_instances_[k % pretrain_instances_.size()];
    SyntheticMediaDescriptor sd;
    sd.media_id = "pretrain-" + std::to_string(k);
    sd.instance_id = inst.instance_id;
    sd.background_id = backgrounds_[uniform_index(rng, backgrounds_.size())].background_id;
    sd.background_weight = max_background_weight * uniform01(rng);
    MediaDescriptor md;
    md.media_id = sd.media_id;
    md.synthetic = sd;
    std::string caption = "a photo of a " + category_word(inst);
    for (auto a : inst.attributes) caption += " " + attributes_[a].word;
    out.emplace_back(std::move(md), std::move(caption));
  }
  return out;
}

// ---------------------------------------------------------------------------

ToyEncoderPair::ToyEncoderPair(std::shared_ptr<const World> world) : world_(std::move(world)) {
  const auto& cfg = world_->config();
  desc_.encoder_id = world_->encoder_id();
  desc_.d_joint = cfg.d_joint;
  desc_.d_tok = cfg.d_tok;
  desc_.normalizes_output = cfg.normalize_outputs;
}

Vector ToyEncoderPair::encode_synthetic_frame(const SyntheticMediaDescriptor& m,
                                              std::size_t frame) const {
  const auto& cfg = world_->config();
  const auto& inst = world_->instance(m.instance_id);
  Vector mix = (1.0 - m.background_weight) * inst.concept_vec;
  if (!m.background_id.empty()) {
    mix += m.background_weight * world_->background(m.background_id).direction;
  } else if (m.background_weight != 0.0) {
    throw DecodeError(m.media_id + ": background weight without a background");
  }
  if (cfg.noise_scale > 0.0) {
    // Noise is a property of the captured frame, so the localized copy of a
    // frame shares it.
    Rng rng = make_stream(cfg.seed, "noise/" + m.media_id + "#" + std::to_string(frame));
    for (Eigen::Index k = 0; k < mix.size(); ++k) mix[k] += cfg.noise_scale * gaussian(rng);
  }
  Vector v = normalized(mix) + world_->image_offset();
  if (cfg.normalize_outputs) v = normalized(v);
  return v;
}

std::vector<Embedding> ToyEncoderPair::encode_frames(const MediaDescriptor& media) const {
  if (!media.synthetic) {
    throw DecodeError(media.media_id + ": toy encoder only decodes synthetic media descriptors");
  }
  const auto& sd = *media.synthetic;
  sd.validate();
  std::vector<Embedding> out;
  if (!sd.is_video) {
    out.push_back({encode_synthetic_frame(sd, sd.frame_index), Space::joint});
    return out;
  }
  for (std::size_t f = 0; f < sd.n_frames; ++f) out.push_back({encode_synthetic_frame(sd, f), Space::joint});
  return out;
}

Embedding ToyEncoderPair::encode_text(const TokenSequence& seq) const {
  const auto& vocab = world_->vocabulary();
  seq.validate(desc_.d_tok, vocab.size());
  if (seq.empty()) throw UsageError("cannot encode an empty token sequence");
  Vector acc = Vector::Zero(static_cast<Eigen::Index>(desc_.d_tok));
  for (const auto& e : seq.elements()) {
    if (const auto* v = std::get_if<Vector>(&e)) {
      acc += *v;
    } else {
      acc += vocab.embedding(std::get<TokenId>(e));
    }
  }
  acc /= static_cast<double>(seq.size());
  Vector z = world_->text_matrix() * acc;
  if (world_->config().linear_text) return {z, Space::joint};
  Vector t = normalized(z) + world_->text_offset();
  if (desc_.normalizes_output) t = normalized(t);
  return {t, Space::joint};
}

std::vector<Vector> ToyEncoderPair::encode_text_grad(const TokenSequence& seq,
                                                     const Vector& upstream) const {
  const std::size_t n_inj = seq.injection_count();
  if (n_inj == 0) throw UsageError("encode_text_grad: sequence has no continuous injections");
  if (static_cast<std::size_t>(upstream.size()) != desc_.d_joint) {
    throw ShapeError("encode_text_grad: upstream has wrong dimension");
  }
  const auto& vocab = world_->vocabulary();
  seq.validate(desc_.d_tok, vocab.size());
  Vector g_z = upstream;
  if (!world_->config().linear_text) {
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(desc_.d_tok));
    for (const auto& e : seq.elements()) {
      if (const auto* v = std::get_if<Vector>(&e)) {
        acc += *v;
      } else {
        acc += vocab.embedding(std::get<TokenId>(e));
      }
    }
    acc /= static_cast<double>(seq.size());
    const Vector z = world_->text_matrix() * acc;
    const Vector t = normalized(z) + world_->text_offset();
    const Vector g_t = desc_.normalizes_output ? normalize_backward(t, upstream) : upstream;
    g_z = normalize_backward(z, g_t);
  }
  const Vector g_each = world_->text_matrix().transpose() * g_z / static_cast<double>(seq.size());
  return std::vector<Vector>(n_inj, g_each);
}

// ---------------------------------------------------------------------------

SyntheticMediaDescriptor localize_descriptor(const SyntheticMediaDescriptor& m, double factor) {
  SyntheticMediaDescriptor out = m;
  out.localized = true;
  out.background_weight = m.background_weight * factor;
  return out;
}

KeyValueConfig BenchmarkSpec::to_kv() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  kv.set("n_instances", std::to_string(n_instances));
  kv.set("n_gallery", std::to_string(n_gallery));
  kv.set("templates_per_instance", std::to_string(templates_per_instance));
  kv.set("template_background_weight", num(template_background_weight));
  kv.set("template_backgrounds", std::to_string(template_backgrounds));
  kv.set("gallery_background_weight", num(gallery_background_weight));
  kv.set("context_queries", context_queries ? "true" : "false");
  kv.set("generic_queries", generic_queries ? "true" : "false");
  kv.set("gallery_videos", gallery_videos ? "true" : "false");
  kv.set("gallery_video_frames", std::to_string(gallery_video_frames));
  kv.set("template_videos", template_videos ? "true" : "false");
  kv.set("template_video_frames", std::to_string(template_video_frames));
  kv.set("seed", std::to_string(seed));
  return kv;
}

BenchmarkSpec BenchmarkSpec::from_kv(const KeyValueConfig& kv) {
  BenchmarkSpec s;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("benchmark: `") + key + "` must be >= 0");
    return static_cast<std::size_t>(v);
  };
  s.n_instances = count("n_instances", s.n_instances);
  s.n_gallery = count("n_gallery", s.n_gallery);
  s.templates_per_instance = count("templates_per_instance", s.templates_per_instance);
  s.template_background_weight = kv.get_double("template_background_weight", s.template_background_weight);
  s.template_backgrounds = count("template_backgrounds", s.template_backgrounds);
  s.gallery_background_weight = kv.get_double("gallery_background_weight", s.gallery_background_weight);
  s.context_queries = kv.get_bool("context_queries", s.context_queries);
  s.generic_queries = kv.get_bool("generic_queries", s.generic_queries);
  s.gallery_videos = kv.get_bool("gallery_videos", s.gallery_videos);
  s.gallery_video_frames = count("gallery_video_frames", s.gallery_video_frames);
  s.template_videos = kv.get_bool("template_videos", s.template_videos);
  s.template_video_frames = count("template_video_frames", s.template_video_frames);
  s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(s.seed)));
  return s;
}

BenchmarkManifests emit_benchmark(const World& world, const BenchmarkSpec& spec) {
  const auto& instances = world.instances();
  if (spec.n_instances == 0 || spec.n_instances > instances.size()) {
    throw CapacityError("benchmark asks for " + std::to_string(spec.n_instances) +
                        " instances; the world has " + std::to_string(instances.size()));
  }
  if (spec.templates_per_instance == 0) throw CapacityError("benchmark needs >= 1 template per instance");
  const std::size_t per_instance = (spec.n_gallery + spec.n_instances - 1) / spec.n_instances;
  const std::size_t pool = world.backgrounds().size();
  if (per_instance > pool || spec.templates_per_instance > pool) {
    throw CapacityError("benchmark needs " + std::to_string(std::max(per_instance, spec.templates_per_instance)) +
                        " distinct backgrounds per instance; the pool has " + std::to_string(pool));
  }

  // Instances are taken round-robin over categories so every category is used.
  std::vector<const WorldInstance*> chosen;
  const auto& cfg = world.config();
  for (std::size_t k = 0; chosen.size() < spec.n_instances; ++k) {
    const std::size_t g = k % cfg.n_categories;
    const std::size_t j = k / cfg.n_categories;
    if (j < cfg.n_instances_per_category) {
      chosen.push_back(&instances[g * cfg.n_instances_per_category + j]);
    }
  }

  BenchmarkManifests out;
  out.train.kind = "train";
  out.gallery.kind = "gallery";
  out.queries.kind = "queries";

  Rng tmpl_rng = make_stream(spec.seed, "benchmark/templates");
  for (const auto* inst : chosen) {
    InstanceRecord rec;
    rec.instance_id = inst->instance_id;
    rec.category = world.category_word(*inst);
    rec.caption = world.user_caption(*inst);
    const std::size_t distinct =
        spec.template_backgrounds == 0 ? spec.templates_per_instance
                                       : std::min(spec.template_backgrounds, spec.templates_per_instance);
    const auto bgs = sample_without_replacement(tmpl_rng, pool, distinct);
    for (std::size_t t = 0; t < spec.templates_per_instance; ++t) {
      SyntheticMediaDescriptor sd;
      char id[96];
      std::snprintf(id, sizeof id, "tmpl-%s-%02zu", inst->instance_id.c_str(), t);
      sd.media_id = id;
      sd.instance_id = inst->instance_id;
      sd.background_id = world.backgrounds()[bgs[t % distinct]].background_id;
      sd.background_weight = spec.template_background_weight;
      sd.is_video = spec.template_videos;
      sd.n_frames = spec.template_videos ? spec.template_video_frames : 1;
      MediaDescriptor md;
      md.media_id = sd.media_id;
      md.kind = sd.is_video ? MediaKind::video : MediaKind::image;
      md.synthetic = sd;
      rec.templates.push_back(std::move(md));
    }
    out.train.instances.push_back(std::move(rec));
  }

  // Gallery: (instance, background) pairs with distinct backgrounds per
  // instance, listed in a seeded random order.
  Rng gal_rng = make_stream(spec.seed, "benchmark/gallery");
  std::vector<std::pair<std::size_t, std::size_t>> cells;  // (chosen index, background)
  std::vector<std::vector<std::size_t>> bg_per_instance(chosen.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    bg_per_instance[i] = sample_without_replacement(gal_rng, pool, per_instance);
  }
  for (std::size_t n = 0; n < spec.n_gallery; ++n) {
    const std::size_t i = n % chosen.size();
    cells.emplace_back(i, bg_per_instance[i][n / chosen.size()]);
  }
  for (std::size_t k = cells.size(); k > 1; --k) std::swap(cells[k - 1], cells[uniform_index(gal_rng, k)]);

  std::vector<std::vector<std::string>> positives(chosen.size());
  for (std::size_t n = 0; n < cells.size(); ++n) {
    const auto [i, b] = cells[n];
    SyntheticMediaDescriptor sd;
    char id[32];
    std::snprintf(id, sizeof id, "gal-%03zu", n);
    sd.media_id = id;
    sd.instance_id = chosen[i]->instance_id;
    sd.background_id = world.backgrounds()[b].background_id;
    sd.background_weight = spec.gallery_background_weight;
    sd.is_video = spec.gallery_videos;
    sd.n_frames = spec.gallery_videos ? spec.gallery_video_frames : 1;
    MediaDescriptor md;
    md.media_id = sd.media_id;
    md.kind = sd.is_video ? MediaKind::video : MediaKind::image;
    md.synthetic = sd;
    md.metadata["dataset"] = "synthetic";
    md.metadata["instance"] = sd.instance_id;
    md.metadata["background"] = sd.background_id;
    out.gallery.media.push_back({md, 0});
    positives[i].push_back(sd.media_id);

    if (spec.context_queries) {
      QueryRecord q;
      q.query_id = "ctx-" + std::string(id + 4);
      q.text = "a photo of <" + sd.instance_id + "> in the " + sd.background_id;
      q.positives = {sd.media_id};
      q.setting = QuerySetting::context;
      out.queries.queries.push_back(std::move(q));
    }
  }
  if (spec.generic_queries) {
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      QueryRecord q;
      q.query_id = "gen-" + chosen[i]->instance_id;
      q.text = "an image of <" + chosen[i]->instance_id + ">";
      q.positives = positives[i];
      q.setting = QuerySetting::generic;
      out.queries.queries.push_back(std::move(q));
    }
  }
  return out;
}

}  // namespace pimap
