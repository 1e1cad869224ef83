#include "pimap/trainer.hpp"

#include "pimap/errors.hpp"
#include "pimap/hashing.hpp"
#include "pimap/rng.hpp"

#include "binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

namespace pimap {
namespace {

constexpr std::string_view kTokenMagic = "PITOK1";
constexpr std::uint32_t kTokenVersion = 1;

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t k = v.size(); k > 1; --k) std::swap(v[k - 1], v[uniform_index(rng, k)]);
}

void check_finite(double loss, std::size_t step, const char* phase) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(std::string(phase) + ": non-finite loss at step " + std::to_string(step) +
                          "; lower the learning rate or check the inputs");
  }
}

struct AnchorLoss {
  double total = 0.0;
  double text = 0.0;
  double image = 0.0;
};

// Loss for one anchor template placed at index 0 of `batch`; accumulates
// parameter gradients when `grads` is given.
AnchorLoss anchor_loss(const PiMapParams& params, const Batch& batch, const EncoderPair& encoders,
                       const TrainConfig& cfg, bool compare_encoded, PiMapParams* grads) {
  const auto& anchor = batch.items.front();
  const Vector& x = cfg.use_localization ? anchor.image_localized : anchor.image_raw;
  PiMapCache cache;
  const Vector y = pi_forward(x, params, &cache);
  const double alpha = cfg.loss.alpha;

  const TextLoss lt = text_loss(y, batch, 0, cfg.loss, encoders);
  Vector g_y;
  LossGrad li;
  if (compare_encoded) {
    li = image_loss(lt.encoded, batch, 0, cfg.loss);
    if (grads) {
      const PromptTemplate tmpl(cfg.loss.y_star_prompt_template);
      const auto seq = tmpl.bind(encoders.vocabulary(), {{tmpl.placeholders().front(), y}});
      const Vector g_u = (1.0 - alpha) * lt.grad_encoded + alpha * li.grad;
      g_y = encoders.encode_text_grad(seq, g_u).front();
    }
  } else {
    li = image_loss(y, batch, 0, cfg.loss);
    if (grads) g_y = (1.0 - alpha) * lt.grad_token + alpha * li.grad;
  }
  if (grads) pi_backward(cache, g_y, params, *grads);
  return {total_loss(lt.value, li.value, alpha), lt.value, li.value};
}

}  // namespace

const char* to_string(Phase p) { return p == Phase::pretrain ? "pretrain" : "personalize"; }
const char* to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.phase = Phase::pretrain;
  c.batch_size = 256;
  c.base_lr = 3e-4;
  c.epochs = 10;
  c.warmup_steps = 0;
  c.schedule = Schedule::cosine;
  return c;
}

TrainConfig TrainConfig::personalize_defaults(const std::string& profile) {
  TrainConfig c;
  c.phase = Phase::personalize;
  c.base_lr = 1e-4;
  c.warmup_steps = 200;
  c.schedule = Schedule::cosine;
  if (profile == "this_is_my" || profile == "synthetic") {
    c.epochs = 50;
  } else if (profile == "deepfashion2") {
    c.epochs = 80;
  } else {
    throw ConfigError("unknown training profile `" + profile + "`");
  }
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 so negatives exist");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("train: base_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (PromptTemplate(pretrain_prompt).placeholders().size() != 1) {
    throw ConfigError("train: pretrain_prompt needs exactly one placeholder");
  }
  loss.validate();
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("phase", to_string(phase));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("base_lr", num(base_lr));
  kv.set("epochs", std::to_string(epochs));
  kv.set("warmup_steps", std::to_string(warmup_steps));
  kv.set("schedule", to_string(schedule));
  kv.set("seed", std::to_string(seed));
  kv.set("beta1", num(beta1));
  kv.set("beta2", num(beta2));
  kv.set("weight_decay", num(weight_decay));
  kv.set("eps", num(eps));
  kv.set("pretrain_prompt", pretrain_prompt);
  kv.set("init_conditioning", init_conditioning ? "true" : "false");
  kv.set("use_localization", use_localization ? "true" : "false");
  kv.set("conditioning_from_localized", conditioning_from_localized ? "true" : "false");
  const auto loss_kv = loss.to_kv();
  for (const auto& [k, v] : loss_kv.values()) kv.set("loss." + k, v);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
  const auto phase = kv.get_string("phase", "personalize");
  TrainConfig c;
  if (phase == "pretrain") {
    c = pretrain_defaults();
  } else if (phase == "personalize") {
    c = personalize_defaults(kv.get_string("profile", "this_is_my"));
  } else {
    throw ConfigError("train: phase must be `pretrain` or `personalize`");
  }
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = kv.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("train: `") + key + "` must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.batch_size = count("batch_size", c.batch_size);
  c.base_lr = kv.get_double("base_lr", c.base_lr);
  c.epochs = count("epochs", c.epochs);
  c.warmup_steps = count("warmup_steps", c.warmup_steps);
  const auto sched = kv.get_string("schedule", to_string(c.schedule));
  if (sched == "cosine") {
    c.schedule = Schedule::cosine;
  } else if (sched == "constant") {
    c.schedule = Schedule::constant;
  } else {
    throw ConfigError("train: schedule must be `cosine` or `constant`");
  }
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.eps = kv.get_double("eps", c.eps);
  c.pretrain_prompt = kv.get_string("pretrain_prompt", c.pretrain_prompt);
  c.init_conditioning = kv.get_bool("init_conditioning", c.init_conditioning);
  c.use_localization = kv.get_bool("use_localization", c.use_localization);
  c.conditioning_from_localized = kv.get_bool("conditioning_from_localized", c.conditioning_from_localized);
  c.loss = LossConfig::from_kv(kv.section("loss"));
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return hash_hex(to_kv().to_string()); }

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  const double base = cfg.base_lr;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == Schedule::constant) return base;
  if (step >= total_steps) return 0.0;
  if (total_steps <= cfg.warmup_steps) return base;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(total_steps - cfg.warmup_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(PiMapParams& params, const PiMapParams& grads, double lr) {
  const std::size_t n = params.parameter_count();
  if (grads.parameter_count() != n) throw ShapeError("AdamW: gradient shape differs from params");
  if (m_.empty()) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::vector<const double*> gptr;
  grads.for_each_tensor([&](std::string_view, const double* d, std::size_t) { gptr.push_back(d); });
  std::size_t offset = 0;
  std::size_t tensor = 0;
  params.for_each_tensor([&](std::string_view, double* p, std::size_t count) {
    const double* g = gptr[tensor++];
    for (std::size_t i = 0; i < count; ++i) {
      double& m = m_[offset + i];
      double& v = v_[offset + i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g[i];
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
      p[i] -= lr * (update + cfg_.weight_decay * p[i]);
    }
    offset += count;
  });
}

PiMapParams zero_grads(const PiMapParams& like) {
  PiMapParams g = like;
  g.for_each_tensor([](std::string_view, double* d, std::size_t n) { std::fill(d, d + n, 0.0); });
  return g;
}

void append_training_log(const std::filesystem::path& path, const std::vector<StepRecord>& records) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot open training log " + path.string());
  for (const auto& r : records) {
    nlohmann::json j{{"step", r.step},
                     {"lr", r.lr},
                     {"loss", r.loss},
                     {"loss_text", r.loss_text},
                     {"loss_image", r.loss_image}};
    out << j.dump() << '\n';
  }
}

std::vector<StepRecord> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open training log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step").get<std::size_t>(), j.at("lr").get<double>(), j.at("loss").get<double>(),
                   j.at("loss_text").get<double>(), j.at("loss_image").get<double>()});
  }
  return out;
}

// ---------------------------------------------------------------------------

PretrainResult pretrain(const PiMapParams& init,
                        const std::vector<std::pair<MediaDescriptor, std::string>>& data,
                        const EncoderPair& encoders, const TrainConfig& cfg) {
  cfg.validate();
  init.validate();
  PretrainResult out;
  out.params = init;
  if (cfg.epochs == 0) return out;
  if (data.size() < 2) throw UsageError("pretrain: need at least two image/caption pairs");
  const auto& desc = encoders.descriptor();
  if (init.d_joint != desc.d_joint || init.d_tok != desc.d_tok) {
    throw ConfigError("pretrain: pi-map dimensions do not match the encoder pair");
  }

  std::vector<Vector> images;
  images.reserve(data.size());
  for (const auto& [media, caption] : data) images.push_back(encoders.encode_image(media).values);

  PiMapParams& params = out.params;
  if (cfg.init_conditioning && params.hidden == params.d_joint) {
    std::vector<Vector> captions;
    captions.reserve(data.size());
    for (const auto& [media, caption] : data) captions.push_back(encoders.encode_text(caption).values);
    const auto ci = init_conditioning(images, captions);
    params.cond1 = ci.cond1;
    params.cond2 = ci.cond2;
  }

  const std::size_t bs = std::min(cfg.batch_size, data.size());
  std::size_t per_epoch = data.size() / bs;
  if (data.size() % bs >= 2) ++per_epoch;
  const std::size_t total = per_epoch * cfg.epochs;

  const PromptTemplate prompt(cfg.pretrain_prompt);
  const std::string slot = prompt.placeholders().front();
  AdamW opt(cfg);
  Rng rng = make_stream(cfg.seed, "pretrain/batches");
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, rng);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * bs;
      const std::size_t hi = std::min(lo + bs, order.size());
      const std::size_t n = hi - lo;
      std::vector<PiMapCache> caches(n);
      std::vector<TokenSequence> seqs;
      std::vector<Vector> batch_images, texts;
      seqs.reserve(n);
      for (std::size_t k = 0; k < n; ++k) {
        const Vector& x = images[order[lo + k]];
        batch_images.push_back(x);
        const Vector y = pi_forward(x, params, &caches[k]);
        seqs.push_back(prompt.bind(encoders.vocabulary(), {{slot, y}}));
        texts.push_back(encoders.encode_text(seqs.back()).values);
      }
      const auto ce = symmetric_ce_loss(batch_images, texts, cfg.loss.tau);
      check_finite(ce.value, step, "pretrain");
      PiMapParams grads = zero_grads(params);
      for (std::size_t k = 0; k < n; ++k) {
        const Vector g_y = encoders.encode_text_grad(seqs[k], ce.grad_texts[k]).front();
        pi_backward(caches[k], g_y, params, grads);
      }
      const double lr = lr_at(step + 1, total, cfg);
      opt.step(params, grads, lr);
      out.log.push_back({step, lr, ce.value, ce.value, 0.0});
      epoch_sum += ce.value;
      ++step;
    }
    out.epoch_losses.push_back(epoch_sum / static_cast<double>(per_epoch));
  }
  if (!params.all_finite()) throw DivergenceError("pretrain: parameters became non-finite");
  return out;
}

// ---------------------------------------------------------------------------

void PersonaToken::validate() const {
  if (token.size() == 0 || !token.allFinite()) throw ValidationError("persona token must be finite and non-empty");
  if (instance_id.empty()) throw ValidationError("persona token has no instance id");
  if (encoder_id.empty()) throw ValidationError("persona token has no encoder id");
}

bool operator==(const PersonaToken& a, const PersonaToken& b) {
  return serialize_token(a) == serialize_token(b);
}

Vector average_projection(const std::vector<TemplateEmbedding>& templates, const PiMapParams& params,
                          bool use_localization) {
  if (templates.empty()) throw UsageError("average_projection: no templates");
  std::vector<const TemplateEmbedding*> sorted;
  for (const auto& t : templates) sorted.push_back(&t);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->media_id < b->media_id; });
  Vector acc = Vector::Zero(static_cast<Eigen::Index>(params.d_tok));
  for (const auto* t : sorted) acc += pi_forward(use_localization ? t->localized : t->raw, params);
  return acc / static_cast<double>(sorted.size());
}

PersonalizeResult personalize(const PersonalizeInput& input, const PiMapParams& pretrained,
                              const EncoderPair& encoders, const TrainConfig& cfg,
                              const ProgressFn& progress) {
  cfg.validate();
  pretrained.validate();
  if (input.templates.empty()) throw UsageError(input.instance_id + ": personalization needs >= 1 template");
  if (input.distractors.empty()) {
    throw UsageError(input.instance_id + ": personalization needs distractor items for negatives");
  }
  if (input.specific_caption.empty() || input.generic_caption.empty()) {
    throw UsageError(input.instance_id + ": specific and generic captions are required");
  }
  const auto& desc = encoders.descriptor();
  if (pretrained.d_joint != desc.d_joint || pretrained.d_tok != desc.d_tok) {
    throw ConfigError("personalize: pi-map dimensions do not match the encoder pair");
  }
  const bool compare_encoded = cfg.loss.compare_encoded(desc);

  // Order by media_id so the result does not depend on how templates arrive.
  std::vector<TemplateEmbedding> templates = input.templates;
  std::sort(templates.begin(), templates.end(),
            [](const auto& a, const auto& b) { return a.media_id < b.media_id; });
  for (const auto& t : templates) {
    if (static_cast<std::size_t>(t.raw.size()) != desc.d_joint ||
        static_cast<std::size_t>(t.localized.size()) != desc.d_joint) {
      throw ShapeError(t.media_id + ": template embedding has the wrong dimension");
    }
  }

  BatchItem anchor_proto;
  anchor_proto.specific_caption = input.specific_caption;
  anchor_proto.generic_caption = input.generic_caption;
  anchor_proto.specific_emb = encoders.encode_text(input.specific_caption).values;
  anchor_proto.generic_emb = encoders.encode_text(input.generic_caption).values;

  std::vector<BatchItem> pool = input.distractors;
  for (auto& d : pool) {
    if (d.specific_emb.size() == 0) d.specific_emb = encoders.encode_text(d.specific_caption).values;
    if (d.generic_emb.size() == 0) d.generic_emb = encoders.encode_text(d.generic_caption).values;
  }
  const std::size_t n_distract = std::min(cfg.batch_size - 1, pool.size());

  auto make_batch = [&](const TemplateEmbedding& t, const std::vector<std::size_t>& picks) {
    Batch b;
    BatchItem a = anchor_proto;
    a.image_raw = t.raw;
    a.image_localized = t.localized;
    b.items.push_back(std::move(a));
    for (auto i : picks) b.items.push_back(pool[i]);
    return b;
  };
  auto sample = [&](Rng& rng) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n_distract; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    idx.resize(n_distract);
    return idx;
  };

  PersonalizeResult out;
  out.params = pretrained;
  PiMapParams& params = out.params;

  if (cfg.init_conditioning && params.hidden == params.d_joint) {
    std::vector<Vector> imgs;
    for (const auto& t : templates) imgs.push_back(cfg.conditioning_from_localized ? t.localized : t.raw);
    const auto ci = init_conditioning(imgs, {anchor_proto.specific_emb});
    params.cond1 = ci.cond1;
    params.cond2 = ci.cond2;
  }

  Rng eval_rng = make_stream(cfg.seed, "personalize/eval-batch/" + input.instance_id);
  const auto eval_picks = sample(eval_rng);
  auto evaluate = [&](const PiMapParams& p) {
    double sum = 0.0;
    for (const auto& t : templates) {
      sum += anchor_loss(p, make_batch(t, eval_picks), encoders, cfg, compare_encoded, nullptr).total;
    }
    return sum / static_cast<double>(templates.size());
  };
  out.initial_loss = evaluate(params);

  const std::size_t total = cfg.epochs * templates.size();
  AdamW opt(cfg);
  Rng anchor_rng = make_stream(cfg.seed, "personalize/anchors/" + input.instance_id);
  Rng batch_rng = make_stream(cfg.seed, "personalize/batches/" + input.instance_id);
  std::vector<std::size_t> order(templates.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, anchor_rng);
    for (auto k : order) {
      const Batch batch = make_batch(templates[k], sample(batch_rng));
      PiMapParams grads = zero_grads(params);
      const auto l = anchor_loss(params, batch, encoders, cfg, compare_encoded, &grads);
      check_finite(l.total, step, "personalize");
      const double lr = lr_at(step + 1, total, cfg);
      opt.step(params, grads, lr);
      out.log.push_back({step, lr, l.total, l.text, l.image});
      ++step;
      if (progress) progress(step, total);
    }
  }
  if (!params.all_finite()) throw DivergenceError("personalize: parameters became non-finite");
  out.final_loss = evaluate(params);

  out.token.token = average_projection(templates, params, cfg.use_localization);
  out.token.instance_id = input.instance_id;
  out.token.encoder_id = desc.encoder_id;
  out.token.n_templates_used = templates.size();
  out.token.config_hash = cfg.hash();
  out.token.validate();
  return out;
}

std::vector<std::size_t> prepare_video_templates(std::size_t n_frames, std::size_t n) {
  if (n_frames == 0) throw UsageError("prepare_video_templates: video has no frames");
  if (n == 0) throw UsageError("prepare_video_templates: n must be >= 1");
  std::vector<std::size_t> idx;
  if (n_frames <= n) {
    idx.resize(n_frames);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  if (n == 1) return {0};
  for (std::size_t k = 0; k < n; ++k) idx.push_back(k * (n_frames - 1) / (n - 1));
  return idx;
}

// ---------------------------------------------------------------------------

std::string serialize_token(const PersonaToken& t) {
  detail::BinaryWriter w;
  w.raw(kTokenMagic);
  w.u32(kTokenVersion);
  w.str(t.instance_id);
  w.str(t.encoder_id);
  w.u64(static_cast<std::uint64_t>(t.token.size()));
  w.str(t.config_hash);
  w.u64(t.n_templates_used);
  w.i64(t.created_at);
  w.f64s(t.token.data(), t.token.data() + t.token.size());
  return w.bytes();
}

PersonaToken deserialize_token(std::string_view bytes) {
  detail::BinaryReader r(bytes, "token file");
  if (bytes.size() < kTokenMagic.size() || r.raw(kTokenMagic.size()) != kTokenMagic) {
    throw CorruptFileError("token file: bad magic");
  }
  const auto version = r.u32();
  if (version != kTokenVersion) {
    throw VersionError("token file: unsupported version " + std::to_string(version));
  }
  PersonaToken t;
  t.instance_id = r.str();
  t.encoder_id = r.str();
  const auto d = r.u64();
  t.config_hash = r.str();
  t.n_templates_used = r.u64();
  t.created_at = r.i64();
  if (d == 0 || d > r.remaining() / 8) throw CorruptFileError("token file: truncated file");
  t.token.resize(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < t.token.size(); ++i) t.token[i] = r.f64();
  if (!r.at_end()) throw CorruptFileError("token file: trailing bytes");
  return t;
}

void save_token(const PersonaToken& t, const std::filesystem::path& path) {
  detail::write_file_atomic(path.string(), serialize_token(t));
}

PersonaToken load_token(const std::filesystem::path& path) {
  return deserialize_token(detail::read_file(path.string()));
}

}  // namespace pimap
