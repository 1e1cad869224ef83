#include "support.hpp"

#include "pimap/embedding_io.hpp"
#include "pimap/errors.hpp"
#include "pimap/kv_config.hpp"
#include "pimap/kv_store.hpp"
#include "pimap/manifest.hpp"
#include "pimap/trainer.hpp"

#include <doctest.h>

#include <atomic>
#include <thread>

using namespace pimap;
using pimap::test::random_vector;

namespace {

const std::string kHeader = R"({"type":"header","format":"pimap-manifest","version":1,"kind":"combined"})";

std::string media_line(const std::string& id) {
  return R"({"type":"media","media_id":")" + id +
         R"(","kind":"image","synthetic":{"instance_id":"dog-0","background_id":"park","background_weight":0.5}})";
}

std::string instance_line(const std::string& id) {
  return R"({"type":"instance","instance_id":")" + id +
         R"(","category":"dog","templates":[{"media_id":"t-)" + id +
         R"(","kind":"image","synthetic":{"instance_id":"dog-0","background_id":"home","background_weight":0.5}}]})";
}

std::string query_line(const std::string& id, const std::string& text, const std::string& setting,
                       const std::string& positives) {
  return R"({"type":"query","query_id":")" + id + R"(","text":")" + text + R"(","setting":")" + setting +
         R"(","positives":)" + positives + "}";
}

std::string join(std::initializer_list<std::string> lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

void expect_line_error(const std::string& text, int line, const std::string& fragment) {
  INFO(text);
  try {
    validate_manifest(parse_manifest(text));
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.rfind("line " + std::to_string(line) + ":", 0) == 0);
    CHECK(msg.find(fragment) != std::string::npos);
  }
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("manifest parses and round-trips") {
  const auto text = join({kHeader, instance_line("dog-0"), media_line("m1"), media_line("m2"),
                          query_line("q1", "<dog-0> on the beach", "context", R"(["m1"])"),
                          query_line("q2", "<dog-0>", "generic", R"(["m1","m2"])")});
  const auto m = parse_manifest(text);
  validate_manifest(m);
  CHECK(m.instances.size() == 1);
  CHECK(m.media.size() == 2);
  CHECK(m.queries.size() == 2);
  CHECK(m.queries[0].setting == QuerySetting::context);
  CHECK(m.find_instance("dog-0") != nullptr);
  CHECK(m.find_instance("cat") == nullptr);
  const auto again = parse_manifest(serialize_manifest(m));
  CHECK(serialize_manifest(again) == serialize_manifest(m));

  const auto ref = media_to_json_text(m.media[0].media);
  CHECK(media_to_json_text(media_from_json_text(ref)) == ref);
}

TEST_CASE("manifest errors name their line") {
  expect_line_error(join({media_line("m1")}), 1, "header");
  expect_line_error(join({kHeader, "{not json"}), 2, "malformed JSON");
  expect_line_error(join({kHeader, R"({"type":"bogus"})"}), 2, "unknown record type");
  expect_line_error(join({kHeader, media_line("m1"), media_line("m1")}), 3, "duplicate media_id");
  expect_line_error(join({kHeader, instance_line("a"), instance_line("a")}), 3, "duplicate instance_id");
  expect_line_error(join({kHeader, media_line("m1"), media_line("m2"),
                          query_line("q", "x", "context", R"(["m1","m2"])")}),
                    4, "exactly one");
  expect_line_error(join({kHeader, media_line("m1"), query_line("q", "x", "generic", "[]")}), 3, ">= 1 positive");
  expect_line_error(join({kHeader, media_line("m1"), query_line("q", "x", "generic", R"(["zz"])")}), 3,
                    "not in the gallery");
  expect_line_error(join({kHeader, instance_line("dog-0"), media_line("m1"),
                          query_line("q", "<ghost> x", "generic", R"(["m1"])")}),
                    4, "unknown persona");
  expect_line_error(join({R"({"type":"header","format":"pimap-manifest","version":9})"}), 1, "version");
  expect_line_error(join({kHeader, R"({"type":"media","media_id":"m","kind":"image"})"}), 2, "needs `path`");
  expect_line_error(join({kHeader, R"({"type":"media","media_id":"m","kind":"image","path":"a.ppm","box":[5,5,1,1]})"}),
                    2, "box");
}

TEST_CASE("cross-manifest references resolve") {
  const auto gallery = parse_manifest(join({kHeader, media_line("m1")}));
  const auto train = parse_manifest(join({kHeader, instance_line("dog-0")}));
  const auto queries = parse_manifest(join({kHeader, query_line("q", "<dog-0>", "generic", R"(["m1"])")}));
  validate_manifest(queries, &gallery, &train);
  const auto elsewhere = parse_manifest(join({kHeader, media_line("m9")}));
  CHECK_THROWS_AS(validate_manifest(queries, &elsewhere, &train), ValidationError);
}

TEST_CASE("embedding exchange round-trips in both forms") {
  Rng rng = make_stream(41, "emb");
  std::vector<EmbeddingRecord> recs;
  for (int i = 0; i < 20; ++i) {
    recs.push_back({"r#" + std::to_string(i), i % 3 ? Space::joint : Space::token,
                    random_vector(rng, 1 + static_cast<std::size_t>(i), 1e3)});
  }
  recs[3].values[0] = 5e-324;
  recs[4].values[0] = -0.0;
  CHECK(parse_embeddings(format_embeddings_text(recs)) == recs);
  CHECK(parse_embeddings(format_embeddings_binary(recs)) == recs);
  const auto dir = test::scratch_dir("emb");
  save_embeddings(recs, dir / "a.txt");
  save_embeddings(recs, dir / "a.bin", true);
  CHECK(load_embeddings(dir / "a.txt") == recs);
  CHECK(load_embeddings(dir / "a.bin") == recs);

  CHECK_THROWS_AS(format_embeddings_text({{"has space", Space::joint, Vector::Ones(2)}}), ValidationError);
  CHECK_THROWS_AS(format_embeddings_text({{"nan", Space::joint, Vector::Constant(2, std::nan(""))}}),
                  ValidationError);
  CHECK_THROWS_AS(parse_embeddings("a joint 3 1 2\n"), DecodeError);
  CHECK_THROWS_AS(parse_embeddings("a sideways 1 1\n"), DecodeError);
  const auto bin = format_embeddings_binary(recs);
  CHECK_THROWS_AS(parse_embeddings(bin.substr(0, bin.size() - 4)), DecodeError);
}

TEST_CASE("kv config parses, sections and prints canonically") {
  const auto kv = KeyValueConfig::parse("# c\nb.x = 2\na = hello world  \n\nb.y=true # trailing\n");
  CHECK(kv.get_string("a", "") == "hello world");
  CHECK(kv.get_int("b.x", 0) == 2);
  CHECK(kv.get_bool("b.y", false));
  CHECK(kv.get_double("missing", 1.5) == 1.5);
  CHECK(kv.section("b").values().size() == 2);
  CHECK(kv.to_string() == "a = hello world\nb.x = 2\nb.y = true\n");
  CHECK(KeyValueConfig::parse(kv.to_string()).to_string() == kv.to_string());
  CHECK_THROWS_AS(KeyValueConfig::parse("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("n = abc\n").get_int("n", 0), ConfigError);
}

TEST_CASE("kv store persists, scans in order and increments atomically") {
  const auto dir = test::scratch_dir("kv");
  {
    KvStore s(dir / "s.sqlite");
    s.put("b/2", "two");
    s.put("b/1", std::string("o\0ne", 4));
    s.put("a/1", "x");
    CHECK(s.get("b/1") == std::string("o\0ne", 4));
    CHECK_FALSE(s.get("zzz").has_value());
    const auto scan = s.scan("b/");
    REQUIRE(scan.size() == 2);
    CHECK(scan.begin()->first == "b/1");
    CHECK(s.erase("a/1"));
    CHECK_FALSE(s.erase("a/1"));

    std::vector<std::thread> ts;
    for (int t = 0; t < 4; ++t) {
      ts.emplace_back([&] {
        for (int i = 0; i < 50; ++i) s.increment("counter");
      });
    }
    for (auto& t : ts) t.join();
    CHECK(s.increment("counter", 0) == 200);
  }
  KvStore reopened(dir / "s.sqlite");
  CHECK(reopened.get("b/2") == "two");
  CHECK(reopened.increment("counter") == 201);
  KvStore mem(":memory:");
  mem.put("k", "v");
  CHECK(mem.get("k") == "v");
}

TEST_CASE("token files round-trip") {
  PersonaToken t;
  t.token = Vector::LinSpaced(24, -1.0, 1.0);
  t.instance_id = "dog-0";
  t.encoder_id = "toy-abc";
  t.n_templates_used = 3;
  t.config_hash = "0123456789abcdef";
  const auto bytes = serialize_token(t);
  CHECK(deserialize_token(bytes) == t);
  CHECK(serialize_token(deserialize_token(bytes)) == bytes);
  CHECK_THROWS(deserialize_token(bytes.substr(0, bytes.size() - 1)));
  CHECK_THROWS(deserialize_token("garbage"));
}

}  // TEST_SUITE
