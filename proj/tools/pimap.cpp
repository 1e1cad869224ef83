// Command-line front end: synthetic data generation, pretraining,
// personalization, indexing, search, evaluation and the HTTP service.

#include "pimap/embedding_io.hpp"
#include "pimap/errors.hpp"
#include "pimap/external_encoder.hpp"
#include "pimap/harness.hpp"
#include "pimap/service.hpp"
#include "pimap/service_http.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pimap;

namespace {

// Options shared by every subcommand that needs an encoder.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1234;
  std::string encoder_cmd;
  std::string work_dir;
  std::string detector_cmd;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key = value config (world., bench., pretrain., protocol. sections)");
  app->add_option("--set", c.overrides, "override one config key, e.g. protocol.n_templates=3")->allow_extra_args(false);
  app->add_option("--seed", c.seed, "seed for every random stream")->capture_default_str();
  app->add_option("--encoder-cmd", c.encoder_cmd, "external encoder tool; the synthetic toy encoder when absent");
  app->add_option("--work-dir", c.work_dir, "scratch directory for external tools");
  app->add_option("--detector-cmd", c.detector_cmd, "external detector for localization of image files");
}

// The resolved configuration plus the encoder and helpers it implies.
struct Context {
  SyntheticBenchmarkConfig cfg;
  std::shared_ptr<const World> world;  // null with an external encoder
  std::shared_ptr<const EncoderPair> encoders;
  std::unique_ptr<Localizer> localizer;
  std::unique_ptr<LlmClient> llm;

  Reproducibility repro() const { return {cfg.protocol.seed, cfg.hash(), encoders->descriptor().encoder_id}; }
};

SyntheticBenchmarkConfig resolve_config(const Common& c) {
  KeyValueConfig kv = SyntheticBenchmarkConfig::reference(c.seed).to_kv();
  if (!c.config_file.empty()) {
    for (const auto& [k, v] : KeyValueConfig::load(c.config_file).values()) kv.set(k, v);
  }
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got `" + o + "`");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  auto cfg = SyntheticBenchmarkConfig::from_kv(kv);
  cfg.validate();
  // A misspelt key would otherwise be ignored without a word.
  const auto known = cfg.to_kv();
  for (const auto& [k, v] : kv.values()) {
    if (!known.get(k)) throw UsageError("unknown config key `" + k + "`");
  }
  return cfg;
}

// Synthetic media go to background suppression, image files to the detector
// (the box in the manifest unless an external detector is given).
class CliLocalizer final : public Localizer {
 public:
  CliLocalizer(double factor, std::shared_ptr<const Detector> detector, fs::path out_dir)
      : synthetic_(factor), images_(std::move(detector), std::move(out_dir)) {}
  MediaDescriptor localize(const MediaDescriptor& m, const std::string& category) const override {
    return m.synthetic ? synthetic_.localize(m, category) : images_.localize(m, category);
  }

 private:
  SyntheticLocalizer synthetic_;
  ImageLocalizer images_;
};

Context make_context(const Common& c) {
  Context ctx;
  ctx.cfg = resolve_config(c);
  const fs::path work = c.work_dir.empty() ? fs::temp_directory_path() / "pimap-work" : fs::path(c.work_dir);
  if (c.encoder_cmd.empty()) {
    ctx.world = World::generate(ctx.cfg.world);
    ctx.encoders = std::make_shared<ToyEncoderPair>(ctx.world);
    ctx.llm = std::make_unique<SyntheticLlmClient>(ctx.world);
  } else {
    ctx.encoders = std::make_shared<ExternalEncoderPair>(c.encoder_cmd, work / "encoder");
    ctx.llm = HttpLlmClient::from_env();
    if (!ctx.llm && ctx.cfg.protocol.caption_augmentation) {
      std::cerr << "note: PIMAP_LLM_ENDPOINT is not set; caption augmentation is off\n";
      ctx.cfg.protocol.caption_augmentation = false;
    }
  }
  std::shared_ptr<const Detector> detector;
  if (c.detector_cmd.empty()) {
    detector = std::make_shared<GroundTruthDetector>();
  } else {
    detector = std::make_shared<ExternalDetector>(c.detector_cmd, work / "detector");
  }
  ctx.localizer = std::make_unique<CliLocalizer>(ctx.cfg.world.localization_factor, detector, work / "localized");
  return ctx;
}

json repro_json(const Reproducibility& r) {
  return {{"seed", r.seed}, {"config_hash", r.config_hash}, {"encoder_id", r.encoder_id}};
}

void print_repro(const Reproducibility& r) {
  std::cout << "reproducibility: seed=" << r.seed << " config_hash=" << r.config_hash
            << " encoder_id=" << r.encoder_id << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

// Binary outputs get a sidecar `<file>.repro.json`.
void write_repro_sidecar(const fs::path& file, const Reproducibility& r) {
  write_text(file.string() + ".repro.json", repro_json(r).dump(2) + "\n");
}

PiMapParams load_pretrained(const Context& ctx, const std::string& path) {
  const auto& d = ctx.encoders->descriptor();
  if (path.empty()) throw UsageError("--params is required");
  return load_params(path, d.d_joint, d.d_tok);
}

std::map<std::string, PersonaToken> load_tokens(const fs::path& dir) {
  std::map<std::string, PersonaToken> out;
  if (dir.empty()) return out;
  if (!fs::is_directory(dir)) throw UsageError("token directory " + dir.string() + " does not exist");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".pitok") continue;
    auto t = load_token(e.path());
    out[t.instance_id] = std::move(t);
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_synth_gen(const Common& c, const std::string& out_dir) {
  if (!c.encoder_cmd.empty()) throw UsageError("synth-gen only works with the synthetic encoder");
  const auto cfg = resolve_config(c);
  const auto world = World::generate(cfg.world);
  const auto m = emit_benchmark(*world, cfg.bench);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  save_manifest(m.train, dir / "train.jsonl");
  save_manifest(m.gallery, dir / "gallery.jsonl");
  save_manifest(m.queries, dir / "queries.jsonl");
  write_text(dir / "benchmark.kv", cfg.to_kv().to_string());
  const Reproducibility r{cfg.protocol.seed, cfg.hash(), world->encoder_id()};
  write_text(dir / "repro.json", repro_json(r).dump(2) + "\n");
  print_repro(r);
  std::cout << "wrote " << m.train.instances.size() << " instances, " << m.gallery.media.size()
            << " gallery items, " << m.queries.queries.size() << " queries to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& out, const std::string& manifest_path,
                 const std::string& log_path) {
  auto ctx = make_context(c);
  const auto& d = ctx.encoders->descriptor();
  std::vector<std::pair<MediaDescriptor, std::string>> data;
  if (!manifest_path.empty()) {
    const auto m = load_manifest(manifest_path);
    for (const auto& inst : m.instances) {
      for (const auto& t : inst.templates) {
        for (auto& f : template_frames(t, ctx.cfg.protocol.video_template_frames)) {
          data.emplace_back(std::move(f), "a photo of a " + inst.category);
        }
      }
    }
  } else if (ctx.world) {
    data = ctx.world->pretraining_set(ctx.cfg.pretrain_items, ctx.cfg.pretrain_max_background, ctx.cfg.world.seed);
  } else {
    throw UsageError("pretraining with an external encoder needs --manifest");
  }
  const auto init = PiMapParams::random(d.d_joint, d.d_tok, ctx.cfg.pretrain_init_seed);
  auto res = pretrain(init, data, *ctx.encoders, ctx.cfg.pretrain);
  save_params(res.params, out);
  write_repro_sidecar(out, ctx.repro());
  if (!log_path.empty()) append_training_log(log_path, res.log);
  print_repro(ctx.repro());
  for (std::size_t e = 0; e < res.epoch_losses.size(); ++e) {
    std::cout << "epoch " << e + 1 << " loss " << res.epoch_losses[e] << "\n";
  }
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_personalize(const Common& c, const std::string& params_path, const std::string& manifest_path,
                    const std::vector<std::string>& only, const std::string& out_dir) {
  auto ctx = make_context(c);
  const auto pretrained = load_pretrained(ctx, params_path);
  auto train = load_manifest(manifest_path);
  if (!only.empty()) {
    // Every instance still serves as a negative; only the named ones are kept.
    for (const auto& id : only) {
      if (!train.find_instance(id)) throw UsageError("no instance `" + id + "` in " + manifest_path);
    }
  }
  fs::create_directories(out_dir);
  CaptionCache captions(fs::path(out_dir) / "captions.jsonl");
  ProtocolInputs in;
  in.encoders = ctx.encoders.get();
  in.train = &train;
  in.localizer = ctx.localizer.get();
  in.llm = ctx.llm.get();
  in.captions = &captions;
  in.pretrained = &pretrained;
  const auto result = personalize_instances(in, ctx.cfg.protocol);
  json summary = json::array();
  for (const auto& t : result.training) {
    if (!only.empty() && std::find(only.begin(), only.end(), t.instance_id) == only.end()) continue;
    save_token(result.tokens.at(t.instance_id), fs::path(out_dir) / (t.instance_id + ".pitok"));
    summary.push_back({{"instance_id", t.instance_id},
                       {"specific_caption", t.specific_caption},
                       {"caption_source", to_string(t.caption_source)},
                       {"templates", t.template_ids},
                       {"initial_loss", t.initial_loss},
                       {"final_loss", t.final_loss}});
    std::cout << t.instance_id << ": loss " << t.initial_loss << " -> " << t.final_loss << "  caption \""
              << t.specific_caption << "\"\n";
  }
  write_text(fs::path(out_dir) / "training.json",
             json{{"reproducibility", repro_json(ctx.repro())}, {"instances", summary}}.dump(2) + "\n");
  write_text(fs::path(out_dir) / "repro.json", repro_json(ctx.repro()).dump(2) + "\n");
  print_repro(ctx.repro());
  return 0;
}

int cmd_index(const Common& c, const std::string& manifest_path, const std::string& out) {
  auto ctx = make_context(c);
  const auto m = load_manifest(manifest_path);
  const auto& d = ctx.encoders->descriptor();
  std::vector<MediaDescriptor> media;
  for (const auto& g : m.gallery()) media.push_back(sample_video_frames(g, ctx.cfg.protocol.gallery_fps));
  EmbeddingIndex index(d.encoder_id, d.d_joint);
  index.add_all(embed_gallery(media, *ctx.encoders));
  save_index(index, out);
  write_repro_sidecar(out, ctx.repro());
  print_repro(ctx.repro());
  std::cout << "indexed " << index.size() << " items into " << out << "\n";
  return 0;
}

int cmd_search(const Common& c, const std::string& index_path, const std::string& tokens_dir,
               const std::string& query, std::size_t k, bool as_json) {
  auto ctx = make_context(c);
  const auto tokens = load_tokens(tokens_dir);
  for (const auto& name : PromptTemplate(query).placeholders()) {
    if (!tokens.count(name)) {
      throw UsageError("persona <" + name + "> is not bound: no " + name + ".pitok in " +
                       (tokens_dir.empty() ? std::string("(no --tokens given)") : tokens_dir));
    }
  }
  const auto index = load_index(index_path);
  if (index.encoder_id() != ctx.encoders->descriptor().encoder_id) {
    throw ConfigError("index was built with encoder " + index.encoder_id());
  }
  const auto q = compose_query(query, tokens, *ctx.encoders);
  const auto hits = index.rank(q.values, std::min(k, index.size()));
  if (as_json) {
    json arr = json::array();
    for (std::size_t i = 0; i < hits.size(); ++i) {
      arr.push_back({{"rank", i + 1}, {"media_id", hits[i].media_id}, {"score", hits[i].score}});
    }
    std::cout << json{{"reproducibility", repro_json(ctx.repro())}, {"query", query}, {"results", arr}}.dump(2) << "\n";
  } else {
    print_repro(ctx.repro());
    for (std::size_t i = 0; i < hits.size(); ++i) {
      std::printf("%3zu  %.6f  %s\n", i + 1, hits[i].score, hits[i].media_id.c_str());
    }
  }
  return 0;
}

struct EvalArgs {
  std::string out_dir;
  std::string params;
  std::string train, gallery, queries, eval_instances;
  std::string tokens;
  std::string profile;
};

int cmd_evaluate(const Common& c, const EvalArgs& a) {
  ProtocolReport report;
  if (c.encoder_cmd.empty() && a.train.empty()) {
    auto cfg = resolve_config(c);
    if (!a.profile.empty() && parse_profile(a.profile) != Profile::synthetic) {
      throw UsageError("the synthetic benchmark runs the synthetic profile; pass manifests for " + a.profile);
    }
    report = run_synthetic_benchmark(cfg);
  } else {
    auto ctx = make_context(c);
    if (a.train.empty() || a.gallery.empty() || a.queries.empty()) {
      throw UsageError("evaluate with manifests needs --train, --gallery and --queries");
    }
    if (!a.profile.empty()) {
      const auto seed = ctx.cfg.protocol.seed;
      auto p = ProtocolConfig::for_profile(parse_profile(a.profile));
      p.seed = seed;
      p.caption_augmentation = ctx.cfg.protocol.caption_augmentation;
      ctx.cfg.protocol = p;
    }
    const auto train = load_manifest(a.train);
    const auto gallery = load_manifest(a.gallery);
    const auto queries = load_manifest(a.queries);
    validate_manifest(queries, &gallery, &train);
    std::optional<Manifest> eval;
    if (!a.eval_instances.empty()) eval = load_manifest(a.eval_instances);
    std::optional<PiMapParams> pretrained;
    if (!a.params.empty()) pretrained = load_pretrained(ctx, a.params);
    fs::create_directories(a.out_dir);
    CaptionCache captions(fs::path(a.out_dir) / "captions.jsonl");
    ProtocolInputs in;
    in.encoders = ctx.encoders.get();
    in.train = &train;
    in.gallery = &gallery;
    in.queries = &queries;
    in.eval_instances = eval ? &*eval : nullptr;
    in.localizer = ctx.localizer.get();
    in.llm = ctx.llm.get();
    in.captions = &captions;
    in.pretrained = pretrained ? &*pretrained : nullptr;
    in.tokens = load_tokens(a.tokens);
    report = run_protocol(in, ctx.cfg.protocol);
    report.repro.config_hash = ctx.cfg.protocol.hash();
  }
  fs::create_directories(a.out_dir);
  write_text(fs::path(a.out_dir) / "report.txt", format_protocol_report(report));
  write_text(fs::path(a.out_dir) / "report.json", protocol_report_json(report) + "\n");
  for (const auto& arm : report.arms) {
    write_text(fs::path(a.out_dir) / ("table_" + arm.arm + ".tsv"),
               format_report_table("context", arm.context) + format_report_table("generic", arm.generic));
  }
  std::cout << format_protocol_report(report);
  std::cout << "wrote " << (fs::path(a.out_dir) / "report.txt").string() << "\n";
  return 0;
}

int cmd_serve(const Common& c, const std::string& data_dir, const std::string& params_path,
              const std::string& host, int port, std::size_t jobs, std::size_t queue) {
  auto ctx = make_context(c);
  PiMapParams pretrained;
  if (!params_path.empty()) {
    pretrained = load_pretrained(ctx, params_path);
  } else if (ctx.world) {
    std::cerr << "no --params given: pretraining pi on the synthetic world first\n";
    pretrained = prepare_synthetic(ctx.cfg).pretrained;
  } else {
    throw UsageError("serve with an external encoder needs --params");
  }
  ServiceConfig sc;
  sc.data_dir = data_dir;
  sc.max_concurrent_jobs = jobs;
  sc.max_queued_jobs = queue;
  sc.train = ctx.cfg.protocol.effective_train();
  sc.localization = ctx.cfg.protocol.localization;
  sc.caption_augmentation = ctx.cfg.protocol.caption_augmentation;
  sc.gallery_fps = ctx.cfg.protocol.gallery_fps;
  sc.synthetic_localization_factor = ctx.cfg.world.localization_factor;
  ServiceComponents parts;
  parts.encoders = ctx.encoders;
  parts.pretrained = std::move(pretrained);
  parts.llm = std::shared_ptr<LlmClient>(std::move(ctx.llm));
  PimapService service(sc, parts);
  print_repro({ctx.cfg.protocol.seed, service.config_hash(), service.encoder_id()});
  serve_http(service, host, port);
  return 0;
}

int cmd_toy_encoder(const Common& c, const std::string& request, const std::string& response, bool binary) {
  const auto cfg = resolve_config(c);
  ToyEncoderPair enc(World::generate(cfg.world));
  return serve_encoder_request(enc, request, response, binary);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pimap: personalized retrieval with a learned text token per object instance"};
  app.require_subcommand(1);
  Common common;

  std::string out, manifest, log, params, index_path, tokens, query, host = "127.0.0.1", data_dir = "pimap-data";
  std::string request, response;
  std::vector<std::string> instances;
  std::size_t k = 10, jobs = 1, queue = 16;
  int port = 8080;
  bool as_json = false, binary = false;
  EvalArgs eval;

  auto* synth = app.add_subcommand("synth-gen", "write a synthetic benchmark (manifests and config)");
  add_common(synth, common);
  synth->add_option("--out", out, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "pretrain the pi-map on generic image/caption pairs");
  add_common(pre, common);
  pre->add_option("--out", out, "parameter file to write")->required();
  pre->add_option("--manifest", manifest, "instance manifest supplying the images (external encoders)");
  pre->add_option("--log", log, "append per-step training records here (JSON lines)");

  auto* pers = app.add_subcommand("personalize", "learn one token per instance of a train manifest");
  add_common(pers, common);
  pers->add_option("--params", params, "pretrained pi-map parameters")->required();
  pers->add_option("--manifest", manifest, "train manifest")->required();
  pers->add_option("--instance", instances, "only write tokens for these instances");
  pers->add_option("--out", out, "token directory")->required();

  auto* idx = app.add_subcommand("index", "embed the gallery of a manifest into an index file");
  add_common(idx, common);
  idx->add_option("--manifest", manifest, "gallery manifest")->required();
  idx->add_option("--out", out, "index file to write")->required();

  auto* search = app.add_subcommand("search", "rank an index for a query with <name> persona placeholders");
  add_common(search, common);
  search->add_option("--index", index_path, "index file")->required();
  search->add_option("--tokens", tokens, "directory of <name>.pitok token files");
  search->add_option("--query", query, "query text, e.g. \"<inst-0003> on a beach\"")->required();
  search->add_option("-k,--top", k, "number of results")->capture_default_str()->check(CLI::PositiveNumber);
  search->add_flag("--json", as_json, "machine-readable output");

  auto* ev = app.add_subcommand("evaluate", "run the evaluation protocol (synthetic benchmark by default)");
  add_common(ev, common);
  ev->add_option("--out", eval.out_dir, "report directory")->required();
  ev->add_option("--params", eval.params, "pretrained pi-map (manifest runs)");
  ev->add_option("--train", eval.train, "train manifest");
  ev->add_option("--gallery", eval.gallery, "gallery manifest");
  ev->add_option("--queries", eval.queries, "query manifest");
  ev->add_option("--eval-instances", eval.eval_instances, "eval-split instance records (train_on_eval)");
  ev->add_option("--tokens", eval.tokens, "reuse trained tokens from this directory");
  ev->add_option("--profile", eval.profile, "this_is_my | deepfashion2 | synthetic");

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  add_common(serve, common);
  serve->add_option("--data-dir", data_dir, "state directory")->capture_default_str();
  serve->add_option("--params", params, "pretrained pi-map parameters");
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();
  serve->add_option("--jobs", jobs, "training jobs run at once")->capture_default_str()->check(CLI::PositiveNumber);
  serve->add_option("--queue", queue, "queued jobs before 429")->capture_default_str()->check(CLI::PositiveNumber);

  auto* toy = app.add_subcommand("toy-encoder", "answer one external-encoder request with the synthetic encoder");
  add_common(toy, common);
  toy->add_option("request", request)->required();
  toy->add_option("response", response)->required();
  toy->add_flag("--binary", binary, "write embeddings in the binary form");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth_gen(common, out);
    if (*pre) return cmd_pretrain(common, out, manifest, log);
    if (*pers) return cmd_personalize(common, params, manifest, instances, out);
    if (*idx) return cmd_index(common, manifest, out);
    if (*search) return cmd_search(common, index_path, tokens, query, k, as_json);
    if (*ev) return cmd_evaluate(common, eval);
    if (*serve) return cmd_serve(common, data_dir, params, host, port, jobs, queue);
    if (*toy) return cmd_toy_encoder(common, request, response, binary);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
