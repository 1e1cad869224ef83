#include "support.hpp"

#include "pimap/caption_augment.hpp"
#include "pimap/errors.hpp"
#include "pimap/harness.hpp"
#include "pimap/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace pimap;
using pimap::test::random_vector;
using pimap::test::relative_error;

namespace {

MediaDescriptor synthetic_image(const std::string& id, const std::string& instance, const std::string& bg,
                                double weight) {
  MediaDescriptor m;
  m.media_id = id;
  SyntheticMediaDescriptor s;
  s.media_id = id;
  s.instance_id = instance;
  s.background_id = bg;
  s.background_weight = weight;
  m.synthetic = s;
  return m;
}

PersonalizeInput make_input(const World& world, const EncoderPair& enc, std::size_t which, std::size_t n_templates) {
  const auto& inst = world.instances()[which];
  PersonalizeInput in;
  in.instance_id = inst.instance_id;
  in.specific_caption = world.full_caption(inst);
  in.generic_caption = world.generic_caption(inst);
  for (std::size_t t = 0; t < n_templates; ++t) {
    const auto m = synthetic_image("t-" + std::to_string(t), inst.instance_id,
                                   world.backgrounds()[t].background_id, 0.5);
    MediaDescriptor loc = m;
    loc.synthetic = localize_descriptor(*m.synthetic);
    in.templates.push_back({m.media_id, enc.encode_image(m).values, enc.encode_image(loc).values});
  }
  for (std::size_t o = 0; o < world.instances().size(); ++o) {
    if (o == which) continue;
    const auto& other = world.instances()[o];
    const auto m = synthetic_image("d-" + other.instance_id, other.instance_id,
                                   world.backgrounds()[o].background_id, 0.5);
    BatchItem it;
    it.image_raw = enc.encode_image(m).values;
    it.image_localized = it.image_raw;
    it.specific_caption = world.full_caption(other);
    it.generic_caption = world.generic_caption(other);
    in.distractors.push_back(it);
  }
  return in;
}

TrainConfig quick_train(std::size_t epochs = 8) {
  auto cfg = TrainConfig::personalize_defaults();
  cfg.epochs = epochs;
  cfg.warmup_steps = 4;
  cfg.base_lr = 1e-3;
  cfg.batch_size = 8;
  return cfg;
}

struct Probes {
  std::vector<Vector> out;
  bool operator==(const Probes& o) const { return out == o.out; }
};

Probes probe_encoders(const World& world, const EncoderPair& enc) {
  Probes p;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& inst = world.instances()[i];
    p.out.push_back(enc.encode_image(synthetic_image("p", inst.instance_id, world.backgrounds()[i].background_id, 0.3)).values);
    p.out.push_back(enc.encode_text(world.full_caption(inst)).values);
  }
  TokenSequence seq = enc.tokenize("a photo of");
  seq.push_embedding(Vector::Constant(static_cast<Eigen::Index>(world.config().d_tok), 0.1));
  p.out.push_back(enc.encode_text(seq).values);
  return p;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  cfg.base_lr = 1e-3;
  cfg.warmup_steps = 10;
  CHECK(lr_at(0, 110, cfg) == 0.0);
  CHECK(lr_at(5, 110, cfg) == doctest::Approx(5e-4));
  CHECK(lr_at(10, 110, cfg) == doctest::Approx(1e-3));
  CHECK(lr_at(60, 110, cfg) == doctest::Approx(5e-4));
  CHECK(lr_at(110, 110, cfg) == 0.0);
  double prev = lr_at(10, 110, cfg);
  for (std::size_t s = 11; s <= 110; ++s) {
    CHECK(lr_at(s, 110, cfg) <= prev);
    prev = lr_at(s, 110, cfg);
  }
  cfg.schedule = Schedule::constant;
  CHECK(lr_at(80, 110, cfg) == 1e-3);
}

TEST_CASE("adamw moves against the gradient") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  auto p = PiMapParams::random(4, 3, 1);
  const auto before = p;
  auto g = zero_grads(p);
  g.proj.setOnes();
  AdamW opt(cfg);
  opt.step(p, g, 0.1);
  CHECK(opt.steps_taken() == 1);
  // The first Adam step has magnitude lr in every coordinate with a gradient.
  CHECK((before.proj - p.proj).array().abs().maxCoeff() == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p.w1 == before.w1);
}

TEST_CASE("video template frame selection") {
  CHECK(prepare_video_templates(91, 10) == std::vector<std::size_t>{0, 10, 20, 30, 40, 50, 60, 70, 80, 90});
  CHECK(prepare_video_templates(4, 10) == std::vector<std::size_t>{0, 1, 2, 3});
  const auto idx = prepare_video_templates(30, 10);
  CHECK(idx.front() == 0);
  CHECK(idx.back() == 29);
  CHECK(idx.size() == 10);
}

TEST_CASE("text encoder gradient wrt injected tokens matches central differences") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  Rng rng = make_stream(51, "tgrad");
  const auto d_tok = world->config().d_tok;
  for (int probe = 0; probe < 100; ++probe) {
    TokenSequence seq = enc.tokenize("a photo of");
    seq.push_embedding(random_vector(rng, d_tok, 0.3));
    if (probe % 2) seq.push_embedding(random_vector(rng, d_tok, 0.3));
    const Vector up = random_vector(rng, world->config().d_joint);
    const auto grads = enc.encode_text_grad(seq, up);
    std::vector<Vector> dirs;
    double analytic = 0.0;
    for (const auto& g : grads) {
      dirs.push_back(random_vector(rng, d_tok));
      analytic += g.dot(dirs.back());
    }
    auto f = [&](double h) {
      TokenSequence s2;
      std::size_t k = 0;
      for (const auto& el : seq.elements()) {
        if (std::holds_alternative<TokenId>(el)) {
          s2.push_token(std::get<TokenId>(el));
        } else {
          s2.push_embedding(std::get<Vector>(el) + h * dirs[k++]);
        }
      }
      return up.dot(enc.encode_text(s2).values);
    };
    CHECK(relative_error(analytic, test::directional_fd(f)) < 1e-4);
  }
  CHECK_THROWS_AS(enc.encode_text_grad(enc.tokenize("a photo"), Vector::Ones(16)), UsageError);
}

TEST_CASE("prompts bind placeholders and reject unbound ones") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  const PromptTemplate t("a photo of <tok> on the <where>");
  CHECK(t.placeholders() == std::vector<std::string>{"tok", "where"});
  CHECK_THROWS_AS(t.bind(enc.vocabulary(), {{"tok", Vector::Zero(24)}}), UsageError);
  const auto seq = PromptTemplate("a <tok>").bind(enc.vocabulary(), {{"tok", Vector::Zero(24)}});
  CHECK(seq.injection_count() == 1);
  CHECK(seq.injection_positions() == std::vector<std::size_t>{1});
  CHECK_THROWS_AS(seq.validate(23, enc.vocabulary().size()), ShapeError);
  CHECK_THROWS_AS(enc.vocabulary().id_of("notaword-xyz"), VocabularyError);
  CHECK(t.substitute({{"tok", "dog"}, {"where", "beach"}}) == "a photo of dog on the beach");
}

TEST_CASE("video embedding is the renormalized frame mean") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  auto m = synthetic_image("v", world->instances()[0].instance_id, world->backgrounds()[0].background_id, 0.4);
  m.kind = MediaKind::video;
  m.synthetic->is_video = true;
  m.synthetic->n_frames = 4;
  const auto frames = enc.encode_frames(m);
  REQUIRE(frames.size() == 4);
  std::vector<Vector> vs;
  for (const auto& f : frames) vs.push_back(f.values);
  const Vector expected = normalized(mean_of(vs));
  CHECK((enc.encode_image(m).values - expected).norm() < 1e-14);
}

TEST_CASE("personalization logs the exact loss mix and leaves the encoders untouched") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  const auto before = probe_encoders(*world, enc);
  const auto input = make_input(*world, enc, 0, 3);
  const auto pre = PiMapParams::random(16, 24, 3);
  const auto cfg = quick_train();
  const auto r = personalize(input, pre, enc, cfg);
  REQUIRE(r.log.size() == cfg.epochs * 3);
  for (const auto& s : r.log) {
    CHECK(s.loss == (1.0 - cfg.loss.alpha) * s.loss_text + cfg.loss.alpha * s.loss_image);
    CHECK(s.lr == lr_at(s.step + 1, r.log.size(), cfg));
  }
  CHECK(r.final_loss < r.initial_loss);
  CHECK(r.token.token.size() == 24);
  CHECK(r.token.n_templates_used == 3);
  CHECK(r.token.encoder_id == enc.descriptor().encoder_id);
  CHECK(probe_encoders(*world, enc) == before);

  const auto again = personalize(input, pre, enc, cfg);
  CHECK(serialize_token(again.token) == serialize_token(r.token));
  CHECK(serialize_params(again.params) == serialize_params(r.params));

  auto other = cfg;
  other.seed = 99;
  CHECK(serialize_token(personalize(input, pre, enc, other).token) != serialize_token(r.token));
}

TEST_CASE("token is the mean projection of its templates") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  const auto input = make_input(*world, enc, 1, 4);
  const auto p = PiMapParams::random(16, 24, 4);
  Vector acc = Vector::Zero(24);
  for (const auto& t : input.templates) acc += pi_forward(t.localized, p);
  CHECK((average_projection(input.templates, p, true) - acc / 4.0).norm() < 1e-12);
  Vector raw = Vector::Zero(24);
  for (const auto& t : input.templates) raw += pi_forward(t.raw, p);
  CHECK((average_projection(input.templates, p, false) - raw / 4.0).norm() < 1e-12);
}

TEST_CASE("pretraining lowers the symmetric loss and zero epochs is a no-op") {
  const auto world = test::small_world();
  const ToyEncoderPair enc(world);
  const auto data = world->pretraining_set(128, 0.6, 5);
  auto cfg = TrainConfig::pretrain_defaults();
  cfg.batch_size = 32;
  cfg.epochs = 6;
  cfg.base_lr = 3e-3;
  const auto init = PiMapParams::random(16, 24, 7);
  const auto r = pretrain(init, data, enc, cfg);
  REQUIRE(r.epoch_losses.size() == 6);
  CHECK(r.epoch_losses.back() < r.epoch_losses.front());
  for (const auto& s : r.log) CHECK(s.loss == s.loss_text);
  cfg.epochs = 0;
  CHECK(pretrain(init, data, enc, cfg).params == init);
}

TEST_CASE("training logs round-trip") {
  const auto dir = test::scratch_dir("log");
  const std::vector<StepRecord> recs{{0, 0.0, 1.5, 2.0, 0.0}, {1, 1e-4, -3.25, -4.0, -1.0}};
  append_training_log(dir / "l.jsonl", recs);
  const auto back = read_training_log(dir / "l.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[1].loss == -3.25);
  CHECK(back[1].lr == 1e-4);
}

TEST_CASE("caption augmentation caches and falls back") {
  const auto world = test::small_world();
  const auto& inst = world->instances()[2];
  AugmentRequest req;
  req.media_id = "t0";
  req.localized = synthetic_image("t0", inst.instance_id, world->backgrounds()[0].background_id, 0.1);
  req.category = world->category_word(inst);
  req.seed_caption = world->user_caption(inst);

  CaptionCache cache;
  MockLlmClient llm(3);
  const auto a = augment_caption(req, llm, cache);
  const auto b = augment_caption(req, llm, cache);
  CHECK(llm.calls() == 1);
  CHECK(a.text == b.text);
  CHECK(a.hash_matches());
  CHECK_FALSE(a.text.empty());

  MockLlmClient failing(3);
  failing.set_failing(true);
  CaptionCache empty;
  const auto fb = augment_caption(req, failing, empty);
  CHECK(fb.source == CaptionSource::user);
  CHECK(fb.text == *req.seed_caption);
  req.seed_caption.reset();
  CaptionCache empty2;
  const auto gen = augment_caption(req, failing, empty2);
  CHECK(gen.source == CaptionSource::generic);
  CHECK_FALSE(gen.text.empty());

  SyntheticLlmClient synth(world);
  CaptionCache c3;
  req.seed_caption = world->user_caption(inst);
  const auto s = augment_caption(req, synth, c3);
  for (auto attr : inst.attributes) CHECK(s.text.find(world->attributes()[attr].word) != std::string::npos);

  const std::vector<std::string> ids{"c", "a", "b"};
  CHECK(choose_caption_template(ids, 1, "x") == choose_caption_template({"b", "c", "a"}, 1, "x"));
  CHECK_THROWS_AS(PromptLibrary().render("missing", "dog"), NotFoundError);
  CHECK(render_prompt("default", "dog").find("dog") != std::string::npos);
}

TEST_CASE("template choice is a seeded prefix-stable permutation") {
  std::vector<MediaDescriptor> pool;
  for (int i = 0; i < 10; ++i) pool.push_back(synthetic_image("m" + std::to_string(i), "x", "bg", 0.5));
  const auto five = choose_templates(pool, 5, 7, "inst");
  const auto three = choose_templates(pool, 3, 7, "inst");
  for (std::size_t i = 0; i < 3; ++i) CHECK(three[i].media_id == five[i].media_id);
  const auto again = choose_templates(pool, 5, 7, "inst");
  for (std::size_t i = 0; i < 5; ++i) CHECK(again[i].media_id == five[i].media_id);
  CHECK(choose_templates(pool, 20, 7, "inst").size() == 10);
}

TEST_CASE("generic query text names the category") {
  CHECK(generic_query_text("<dog-0> on the beach", {{"dog-0", "dog"}}) == "a dog on the beach");
}

TEST_CASE("gallery video sampling keeps every n-th frame") {
  MediaDescriptor v;
  v.media_id = "v";
  v.kind = MediaKind::video;
  v.fps = 4.0;
  for (int i = 0; i < 10; ++i) v.frame_paths.push_back("f" + std::to_string(i) + ".ppm");
  const auto s = sample_video_frames(v, 1.0);
  CHECK(s.frame_paths == std::vector<std::string>{"f0.ppm", "f4.ppm", "f8.ppm"});
  const auto img = synthetic_image("i", "x", "bg", 0.5);
  CHECK(sample_video_frames(img, 1.0).media_id == "i");
}

}  // TEST_SUITE
