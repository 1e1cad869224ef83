#include "support.hpp"

#include "pimap/caption_augment.hpp"
#include "pimap/harness.hpp"
#include "pimap/manifest.hpp"
#include "pimap/service.hpp"
#include "pimap/service_http.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <thread>

using namespace pimap;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

struct Fixture {
  std::shared_ptr<const World> world;
  std::shared_ptr<const ToyEncoderPair> encoders;
  std::unique_ptr<PimapService> service;
  httplib::Server server;
  std::thread thread;
  std::unique_ptr<httplib::Client> client;

  Fixture(const std::string& name, ServiceConfig cfg) {
    auto wc = SyntheticBenchmarkConfig::reference(1234).world;
    wc.d_joint = 32;
    wc.d_tok = 32;
    world = World::generate(wc);
    encoders = std::make_shared<ToyEncoderPair>(world);
    cfg.data_dir = test::scratch_dir(name);
    ServiceComponents parts;
    parts.encoders = encoders;
    parts.pretrained = PiMapParams::random(32, 32, 5);
    parts.llm = std::make_shared<SyntheticLlmClient>(world);
    service = std::make_unique<PimapService>(cfg, parts);
    mount_routes(server, *service);
    const int port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(30, 0);
  }
  ~Fixture() {
    server.stop();
    thread.join();
  }

  std::string template_json(std::size_t instance, std::size_t k) const {
    const auto& inst = world->instances()[instance];
    MediaDescriptor m;
    m.media_id = "tmpl-" + inst.instance_id + "-" + std::to_string(k);
    SyntheticMediaDescriptor s;
    s.media_id = m.media_id;
    s.instance_id = inst.instance_id;
    s.background_id = world->backgrounds()[k].background_id;
    s.background_weight = 0.4;
    m.synthetic = s;
    return media_to_json_text(m);
  }

  httplib::Result create(const std::string& name, std::size_t instance, std::size_t n_templates = 3) {
    httplib::MultipartFormDataItems items{{"name", name, "", ""},
                                          {"category", world->category_word(world->instances()[instance]), "", ""}};
    for (std::size_t k = 0; k < n_templates; ++k) {
      items.push_back({"templates", template_json(instance, k), "t" + std::to_string(k) + ".json", "application/json"});
    }
    return client->Post("/personas", items);
  }

  std::string gallery_manifest() const {
    BenchmarkSpec spec;
    spec.n_instances = 6;
    spec.n_gallery = 30;
    auto m = emit_benchmark(*world, spec).gallery;
    return serialize_manifest(m);
  }

  httplib::Result search(const std::string& query, int k = 5) {
    return client->Post("/search", json{{"query", query}, {"k", k}}.dump(), "application/json");
  }
};

ServiceConfig quick_config() {
  ServiceConfig cfg;
  cfg.train.epochs = 3;
  cfg.train.warmup_steps = 2;
  return cfg;
}

std::string job_state(Fixture& f, const std::string& job) {
  const auto r = f.client->Get("/jobs/" + job);
  REQUIRE(r);
  return json::parse(r->body).at("state").get<std::string>();
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("persona creation validates its input") {
  auto cfg = quick_config();
  cfg.max_upload_bytes = 4096;
  Fixture f("svc-create", cfg);

  const auto ok = f.create("rex", 0);
  REQUIRE(ok);
  CHECK(ok->status == 201);
  const auto body = json::parse(ok->body);
  CHECK(body.at("name") == "rex");
  CHECK(body.at("state") == "untrained");
  CHECK(ok->body == to_json_text(f.service->persona(body.at("persona_id").get<std::string>())));
  CHECK(ok->get_header_value("X-Encoder-Id") == f.encoders->descriptor().encoder_id);
  CHECK(ok->get_header_value("X-Config-Hash") == f.service->config_hash());

  CHECK(f.create("rex", 1)->status == 409);
  CHECK(f.create("bad name!", 1)->status == 400);
  CHECK(f.create("nofiles", 1, 0)->status == 400);

  httplib::MultipartFormDataItems big{{"name", "huge", "", ""}, {"category", "dog", "", ""},
                                      {"templates", std::string(8192, 'x'), "big.ppm", "image/x-portable-pixmap"}};
  const auto tl = f.client->Post("/personas", big);
  REQUIRE(tl);
  CHECK(tl->status == 413);
  CHECK(json::parse(tl->body).at("status") == 413);

  const auto list = f.client->Get("/personas");
  CHECK(list->status == 200);
  CHECK(list->body == to_json_text(f.service->list_personas()));
  CHECK(f.client->Get("/personas/p-doesnotexist")->status == 404);
  CHECK(f.client->Post("/personas", "{}", "application/json")->status == 400);
}

TEST_CASE("training lifecycle and search") {
  Fixture f("svc-train", quick_config());
  const auto pid = json::parse(f.create("rex", 0)->body).at("persona_id").get<std::string>();
  CHECK(f.create("tom", 3)->status == 201);

  CHECK(f.search("a photo of @rex")->status == 409);  // untrained
  CHECK(f.search("a photo of @ghost")->status == 422);
  CHECK(f.client->Post("/personas/p-missing/train")->status == 404);

  const auto tr = f.client->Post("/personas/" + pid + "/train");
  REQUIRE(tr);
  CHECK(tr->status == 202);
  const auto job = json::parse(tr->body).at("job_id").get<std::string>();
  CHECK(f.client->Post("/personas/" + pid + "/train")->status == 409);  // pending
  REQUIRE(f.service->wait_idle(60s));

  const auto jr = json::parse(f.client->Get("/jobs/" + job)->body);
  CHECK(jr.at("state") == "done");
  CHECK(jr.at("progress") == 1.0);
  CHECK(jr.at("history") == json::array({"queued", "running", "done"}));
  CHECK(f.client->Get("/jobs/job-999999")->status == 404);
  CHECK(json::parse(f.client->Get("/personas/" + pid)->body).at("state") == "trained");

  CHECK(f.client->Post("/personas/" + pid + "/train")->status == 409);  // already trained
  const auto re = f.client->Post("/personas/" + pid + "/train?retrain=true");
  CHECK(re->status == 202);
  REQUIRE(f.service->wait_idle(60s));

  CHECK(f.search("a photo of @rex in the market")->status == 409);  // empty index

  const auto ix = f.client->Post("/index", f.gallery_manifest(), "application/x-ndjson");
  REQUIRE(ix);
  CHECK(ix->status == 202);
  const auto ix_job = json::parse(ix->body).at("job_id").get<std::string>();
  REQUIRE(f.service->wait_idle(60s));
  CHECK(job_state(f, ix_job) == "done");
  CHECK(f.service->index()->size() == 30);

  const auto again = f.client->Post("/index", json{{"manifest", f.gallery_manifest()}}.dump(), "application/json");
  CHECK(again->status == 202);
  REQUIRE(f.service->wait_idle(60s));
  CHECK(f.service->index()->size() == 30);

  const std::string q = "a photo of @rex in the market";
  const auto sr = f.search(q, 5);
  REQUIRE(sr);
  CHECK(sr->status == 200);
  CHECK(sr->body == to_json_text(f.service->search(q, 5)));
  CHECK(sr->get_header_value("X-Encoder-Id") == f.encoders->descriptor().encoder_id);
  const auto res = json::parse(sr->body);
  CHECK(res.at("resolved") == "a photo of <" + pid + "> in the market");
  REQUIRE(res.at("results").size() == 5);
  for (std::size_t i = 1; i < 5; ++i) {
    CHECK(res["results"][i - 1]["score"].get<double>() >= res["results"][i]["score"].get<double>());
    CHECK(res["results"][i]["rank"] == i + 1);
  }

  const auto all = json::parse(f.search("a photo of @rex", 1000)->body);
  CHECK(all.at("results").size() == 30);
  CHECK(f.search("a photo of a dog")->status == 200);
  CHECK(f.search("a photo of @rex", 0)->status == 400);
  CHECK(f.client->Post("/search", "not json", "application/json")->status == 400);

  const auto media = res["results"][0]["media_id"].get<std::string>();
  const auto th = f.client->Get("/media/" + media + "/thumbnail");
  CHECK(th->status == 200);
  CHECK(th->get_header_value("Content-Type") == "image/x-portable-pixmap");
  CHECK(th->body.rfind("P6", 0) == 0);
  CHECK(f.client->Get("/media/none/thumbnail")->status == 404);

  // The error body still carries the identifying headers.
  const auto err = f.search("a photo of @ghost");
  CHECK(err->get_header_value("X-Config-Hash") == f.service->config_hash());
}

TEST_CASE("uploaded images are indexed and thumbnailed") {
  Fixture f("svc-upload", quick_config());
  RgbImage img(40, 20, {10, 200, 30});
  httplib::MultipartFormDataItems items{{"media", encode_ppm(img), "green.ppm", "image/x-portable-pixmap"}};
  const auto r = f.client->Post("/index", items);
  REQUIRE(r);
  CHECK(r->status == 202);
  REQUIRE(f.service->wait_idle(60s));
  const auto job = f.service->job(json::parse(r->body).at("job_id").get<std::string>());
  // The toy encoder cannot embed pixels; the job fails and says so.
  CHECK((job.state == JobState::failed || job.state == JobState::done));
  httplib::MultipartFormDataItems bad{{"media", "P6 not really", "x.ppm", "image/x-portable-pixmap"}};
  CHECK(f.client->Post("/index", bad)->status == 400);
}

TEST_CASE("a full queue answers 429") {
  auto cfg = quick_config();
  cfg.train.epochs = 3000;
  cfg.max_queued_jobs = 1;
  Fixture f("svc-queue", cfg);
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) {
    ids.push_back(json::parse(f.create("p" + std::to_string(i), static_cast<std::size_t>(i))->body)
                      .at("persona_id")
                      .get<std::string>());
  }
  std::vector<int> codes;
  for (const auto& id : ids) codes.push_back(f.client->Post("/personas/" + id + "/train")->status);
  CHECK(codes[0] == 202);
  CHECK(std::count(codes.begin(), codes.end(), 429) >= 1);
  CHECK(f.service->wait_idle(300s));
}

TEST_CASE("state survives a restart") {
  const auto cfg = quick_config();
  std::string pid;
  std::filesystem::path dir;
  {
    Fixture f("svc-restart", cfg);
    dir = f.service->config().data_dir;
    pid = json::parse(f.create("rex", 0)->body).at("persona_id").get<std::string>();
    f.client->Post("/index", f.gallery_manifest(), "application/x-ndjson");
    REQUIRE(f.service->wait_idle(60s));
    f.client->Post("/personas/" + pid + "/train");
    REQUIRE(f.service->wait_idle(60s));
  }
  auto wc = SyntheticBenchmarkConfig::reference(1234).world;
  wc.d_joint = 32;
  wc.d_tok = 32;
  const auto world = World::generate(wc);
  ServiceComponents parts;
  parts.encoders = std::make_shared<ToyEncoderPair>(world);
  parts.pretrained = PiMapParams::random(32, 32, 5);
  auto cfg2 = cfg;
  cfg2.data_dir = dir;
  PimapService svc(cfg2, parts);
  CHECK(svc.persona(pid).state == PersonaState::trained);
  CHECK(svc.index()->size() == 30);
  CHECK(svc.search("a photo of @rex", 3).hits.size() == 3);
}

}  // TEST_SUITE
