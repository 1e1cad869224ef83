#include "support.hpp"

#include "pimap/caption_augment.hpp"
#include "pimap/errors.hpp"
#include "pimap/external_encoder.hpp"
#include "pimap/harness.hpp"

#include <doctest.h>

#include <fstream>

using namespace pimap;
using pimap::test::random_vector;

namespace {

// A reduced benchmark that still exercises every stage.
SyntheticBenchmarkConfig small_bench(std::uint64_t seed, std::size_t d_joint = 64, std::size_t d_tok = 96) {
  auto c = SyntheticBenchmarkConfig::reference(seed);
  c.world.d_joint = d_joint;
  c.world.d_tok = d_tok;
  c.world.n_pretrain_instances = 48;
  c.bench.n_instances = 6;
  c.bench.n_gallery = 36;
  c.pretrain_items = 192;
  c.pretrain.epochs = 2;
  c.protocol.n_templates = 3;
  c.protocol.train.epochs = 4;
  c.protocol.train.warmup_steps = 2;
  return c;
}

ProtocolReport run_once(const SyntheticBenchmarkConfig& cfg) {
  const auto setup = prepare_synthetic(cfg);
  return run_synthetic(setup, cfg.protocol);
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("same seed and config give bit-identical tokens, index and report") {
  const auto cfg = small_bench(1234);
  const auto a = run_once(cfg);
  const auto b = run_once(cfg);
  CHECK(format_protocol_report(a) == format_protocol_report(b));
  CHECK(protocol_report_json(a) == protocol_report_json(b));
  CHECK(a.index_digest == b.index_digest);
  REQUIRE(a.tokens.size() == cfg.bench.n_instances);
  for (const auto& [id, t] : a.tokens) CHECK(serialize_token(t) == serialize_token(b.tokens.at(id)));
  CHECK(a.repro.seed == 1234);
  CHECK(a.repro.config_hash == b.repro.config_hash);

  const auto c = run_once(small_bench(1235));
  CHECK(c.index_digest != a.index_digest);
  CHECK(c.repro.config_hash != a.repro.config_hash);
}

TEST_CASE("report carries all three arms with sane metrics") {
  const auto r = run_once(small_bench(7));
  for (const char* arm : {"personalized", "generic_text", "image_only"}) {
    const auto& a = r.arm(arm);
    CHECK(a.context.n_queries > 0);
    CHECK(a.generic.n_queries > 0);
    CHECK(a.context.mrr >= 0.0);
    CHECK(a.context.mrr <= 1.0);
    CHECK(a.generic.tr_at5 <= a.generic.tr_at5_ceiling + 1e-12);
  }
  CHECK_THROWS_AS(r.arm("nope"), NotFoundError);
}

TEST_CASE("the pipeline runs unchanged across encoder widths") {
  const std::pair<std::size_t, std::size_t> dims[] = {{16, 16}, {64, 48}, {512, 512}};
  for (const auto& [dj, dt] : dims) {
    auto cfg = small_bench(3, dj, dt);
    cfg.bench.n_instances = 4;
    cfg.bench.n_gallery = 16;
    cfg.pretrain_items = 64;
    cfg.pretrain.epochs = 1;
    cfg.protocol.train.epochs = 2;
    const auto setup = prepare_synthetic(cfg);
    CHECK(setup.pretrained.d_joint == dj);
    CHECK(setup.pretrained.d_tok == dt);
    const auto r = run_synthetic(setup, cfg.protocol);
    for (const auto& [id, t] : r.tokens) CHECK(static_cast<std::size_t>(t.token.size()) == dt);
    CHECK(r.arm("personalized").all.n_queries > 0);
  }
}

TEST_CASE("supplied tokens must match the encoder") {
  const auto cfg = small_bench(11);
  const auto setup = prepare_synthetic(cfg);
  ProtocolInputs in;
  in.encoders = setup.encoders.get();
  in.train = &setup.manifests.train;
  in.gallery = &setup.manifests.gallery;
  in.queries = &setup.manifests.queries;
  in.pretrained = &setup.pretrained;
  in.train_missing = false;
  auto pcfg = cfg.protocol;
  pcfg.localization = false;
  pcfg.caption_augmentation = false;
  CHECK_THROWS_AS(run_protocol(in, pcfg), NotFoundError);
  for (const auto& inst : setup.manifests.train.instances) {
    PersonaToken t;
    t.token = Vector::Ones(static_cast<Eigen::Index>(cfg.world.d_tok));
    t.instance_id = inst.instance_id;
    t.encoder_id = "some-other-encoder";
    in.tokens[inst.instance_id] = t;
  }
  CHECK_THROWS_AS(run_protocol(in, pcfg), ConfigError);
}

TEST_CASE("external adapter answers exactly like the in-process encoder") {
  const auto dir = test::scratch_dir("external");
  const ToyEncoderPair local(World::generate(SyntheticBenchmarkConfig::reference(1234).world));
  const ExternalEncoderPair ext(std::string(PIMAP_CLI_PATH) + " toy-encoder", dir);
  CHECK(ext.descriptor().encoder_id == local.descriptor().encoder_id);
  CHECK(ext.descriptor().d_joint == local.descriptor().d_joint);
  CHECK(ext.vocabulary().words() == local.vocabulary().words());

  const auto& world = local.world();
  MediaDescriptor m;
  m.media_id = "x";
  SyntheticMediaDescriptor s;
  s.media_id = "x";
  s.instance_id = world.instances()[0].instance_id;
  s.background_id = world.backgrounds()[1].background_id;
  s.background_weight = 0.45;
  m.synthetic = s;
  CHECK(ext.encode_image(m).values == local.encode_image(m).values);

  Rng rng = make_stream(61, "ext");
  TokenSequence seq = local.tokenize("a photo of");
  seq.push_embedding(random_vector(rng, local.descriptor().d_tok, 0.2));
  CHECK(ext.encode_text(seq).values == local.encode_text(seq).values);
  const Vector up = random_vector(rng, local.descriptor().d_joint);
  CHECK(ext.encode_text_grad(seq, up).front() == local.encode_text_grad(seq, up).front());

  const auto n = ext.calls();
  CHECK(ext.encode_text("a photo of a dog").values == local.encode_text("a photo of a dog").values);
  ext.encode_text("a photo of a dog");
  CHECK(ext.calls() == n + 1);
  CHECK(std::filesystem::is_empty(dir));

  CHECK_THROWS_AS(ExternalEncoderPair("false", dir), ExternalToolError);
}

TEST_CASE("adapter server rejects malformed requests") {
  const auto dir = test::scratch_dir("serve-enc");
  const ToyEncoderPair enc(test::small_world());
  write_text(dir / "bad.json", "{nope");
  CHECK(serve_encoder_request(enc, dir / "bad.json", dir / "out") == 2);
  write_text(dir / "op.json", R"({"op":"teleport"})");
  CHECK(serve_encoder_request(enc, dir / "op.json", dir / "out") == 2);
  write_text(dir / "ok.json", R"({"op":"text","id":"t","elements":[{"word":"a"},{"word":"photo"}]})");
  CHECK(serve_encoder_request(enc, dir / "ok.json", dir / "out", true) == 0);
  std::ifstream in(dir / "out", std::ios::binary);
  std::string head(6, '\0');
  in.read(head.data(), 6);
  CHECK(head == "PIEMB1");
}

TEST_CASE("benchmark config round-trips through key-value text") {
  const auto cfg = SyntheticBenchmarkConfig::reference(1236);
  const auto back = SyntheticBenchmarkConfig::from_kv(cfg.to_kv());
  CHECK(back.hash() == cfg.hash());
  CHECK(back.to_kv().to_string() == cfg.to_kv().to_string());
  auto kv = cfg.to_kv();
  kv.set("world.d_joint", "0");
  CHECK_THROWS(SyntheticBenchmarkConfig::from_kv(kv).validate());
}

TEST_CASE("benchmark emission respects capacity") {
  auto w = SyntheticBenchmarkConfig::reference().world;
  const auto world = World::generate(w);
  BenchmarkSpec spec;
  spec.n_instances = 99;
  CHECK_THROWS_AS(emit_benchmark(*world, spec), CapacityError);
  spec.n_instances = 12;
  const auto m = emit_benchmark(*world, spec);
  CHECK(m.train.instances.size() == 12);
  CHECK(m.gallery.media.size() == 200);
  validate_manifest(m.queries, &m.gallery, &m.train);
}

}  // TEST_SUITE
