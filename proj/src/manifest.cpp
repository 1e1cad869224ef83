#include "pimap/manifest.hpp"

#include "pimap/errors.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace pimap {

using nlohmann::json;

namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ValidationError("line " + std::to_string(line) + ": " + msg);
}

std::string required_string(const json& j, const char* key, int line) {
  if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) {
    fail(line, std::string("missing or empty string field `") + key + "`");
  }
  return j[key].get<std::string>();
}

MediaDescriptor media_from_json(const json& j, int line, const std::filesystem::path& base) {
  if (!j.is_object()) fail(line, "media reference must be an object");
  MediaDescriptor m;
  m.media_id = required_string(j, "media_id", line);
  try {
    m.kind = parse_media_kind(j.value("kind", std::string("image")));
  } catch (const DecodeError& e) {
    fail(line, e.what());
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_relative() && !base.empty()) fp = base / fp;
    return fp.string();
  };
  if (j.contains("path")) m.frame_paths.push_back(resolve(j.at("path").get<std::string>()));
  if (j.contains("frames")) {
    for (const auto& f : j.at("frames")) m.frame_paths.push_back(resolve(f.get<std::string>()));
  }
  m.fps = j.value("fps", 0.0);
  if (j.contains("time_range")) {
    const auto& tr = j.at("time_range");
    if (!tr.is_array() || tr.size() != 2) fail(line, m.media_id + ": time_range must be [start, end]");
    m.time_range = std::make_pair(tr[0].get<double>(), tr[1].get<double>());
  }
  if (j.contains("box") && !j.at("box").is_null()) {
    const auto& b = j.at("box");
    if (!b.is_array() || b.size() != 4) fail(line, m.media_id + ": box must be [x0, y0, x1, y1]");
    m.box = BoundingBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    if (!m.box->valid()) fail(line, m.media_id + ": box must satisfy x0 < x1 and y0 < y1");
  }
  if (j.contains("metadata")) {
    for (const auto& [k, v] : j.at("metadata").items()) {
      m.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    SyntheticMediaDescriptor sd;
    sd.media_id = m.media_id;
    sd.instance_id = required_string(s, "instance_id", line);
    sd.background_id = s.value("background_id", std::string());
    sd.background_weight = s.value("background_weight", 0.0);
    sd.is_video = m.kind == MediaKind::video;
    sd.n_frames = s.value("n_frames", std::size_t{1});
    sd.frame_index = s.value("frame_index", std::size_t{0});
    sd.localized = s.value("localized", false);
    try {
      sd.validate();
    } catch (const ValidationError& e) {
      fail(line, e.what());
    }
    m.synthetic = sd;
  }
  if (!m.synthetic && m.frame_paths.empty()) {
    fail(line, m.media_id + ": media needs `path`, `frames` or `synthetic`");
  }
  return m;
}

json media_to_json(const MediaDescriptor& m) {
  json j;
  j["media_id"] = m.media_id;
  j["kind"] = to_string(m.kind);
  if (m.frame_paths.size() == 1 && m.kind == MediaKind::image) {
    j["path"] = m.frame_paths.front();
  } else if (!m.frame_paths.empty()) {
    j["frames"] = m.frame_paths;
  }
  if (m.fps > 0) j["fps"] = m.fps;
  if (m.time_range) j["time_range"] = {m.time_range->first, m.time_range->second};
  if (m.box) j["box"] = {m.box->x0, m.box->y0, m.box->x1, m.box->y1};
  if (!m.metadata.empty()) j["metadata"] = m.metadata;
  if (m.synthetic) {
    const auto& s = *m.synthetic;
    json sj;
    sj["instance_id"] = s.instance_id;
    if (!s.background_id.empty()) sj["background_id"] = s.background_id;
    sj["background_weight"] = s.background_weight;
    if (s.n_frames != 1) sj["n_frames"] = s.n_frames;
    if (s.frame_index != 0) sj["frame_index"] = s.frame_index;
    if (s.localized) sj["localized"] = true;
    j["synthetic"] = sj;
  }
  return j;
}

}  // namespace

std::string media_to_json_text(const MediaDescriptor& m) { return media_to_json(m).dump(); }

MediaDescriptor media_from_json_text(std::string_view text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("media reference is not valid JSON: ") + e.what());
  }
  return media_from_json(j, 1, base_dir);
}

const char* to_string(QuerySetting s) { return s == QuerySetting::context ? "context" : "generic"; }

QuerySetting parse_query_setting(std::string_view s) {
  if (s == "context") return QuerySetting::context;
  if (s == "generic") return QuerySetting::generic;
  throw ValidationError("unknown query setting `" + std::string(s) + "`");
}

const InstanceRecord* Manifest::find_instance(std::string_view id) const {
  for (const auto& i : instances) {
    if (i.instance_id == id) return &i;
  }
  return nullptr;
}

std::vector<MediaDescriptor> Manifest::gallery() const {
  std::vector<MediaDescriptor> out;
  out.reserve(media.size());
  for (const auto& m : media) out.push_back(m.media);
  return out;
}

Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  Manifest m;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  bool have_header = false;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(raw);
    } catch (const json::parse_error& e) {
      fail(line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
      fail(line, "record needs a string `type` field");
    }
    const std::string type = j["type"].get<std::string>();
    try {
      if (type == "header") {
        if (have_header) fail(line, "duplicate header");
        if (j.value("format", std::string()) != kManifestFormat) {
          fail(line, std::string("format must be `") + kManifestFormat + "`");
        }
        if (!j.contains("version") || !j["version"].is_number_integer()) fail(line, "header needs integer `version`");
        m.version = j["version"].get<int>();
        if (m.version != kManifestVersion) {
          fail(line, "unsupported manifest version " + std::to_string(m.version));
        }
        m.kind = j.value("kind", std::string("combined"));
        have_header = true;
        continue;
      }
      if (!have_header) fail(line, "the first record must be the header");
      if (type == "instance") {
        InstanceRecord r;
        r.line = line;
        r.instance_id = required_string(j, "instance_id", line);
        r.category = required_string(j, "category", line);
        if (j.contains("caption") && j["caption"].is_string()) r.caption = j["caption"].get<std::string>();
        if (!j.contains("templates") || !j["templates"].is_array()) fail(line, "instance needs a `templates` array");
        for (const auto& t : j["templates"]) r.templates.push_back(media_from_json(t, line, base_dir));
        m.instances.push_back(std::move(r));
      } else if (type == "media") {
        m.media.push_back({media_from_json(j, line, base_dir), line});
      } else if (type == "query") {
        QueryRecord q;
        q.line = line;
        q.query_id = required_string(j, "query_id", line);
        q.text = required_string(j, "text", line);
        q.setting = parse_query_setting(j.value("setting", std::string("generic")));
        if (!j.contains("positives") || !j["positives"].is_array()) fail(line, "query needs a `positives` array");
        for (const auto& p : j["positives"]) q.positives.push_back(p.get<std::string>());
        m.queries.push_back(std::move(q));
      } else {
        fail(line, "unknown record type `" + type + "`");
      }
    } catch (const json::exception& e) {
      fail(line, std::string("bad field type: ") + e.what());
    } catch (const ValidationError& e) {
      const std::string what = e.what();
      if (what.rfind("line ", 0) == 0) throw;
      fail(line, what);
    }
  }
  if (!have_header) throw ValidationError("line 1: manifest has no header record");
  return m;
}

void validate_manifest(const Manifest& m, const Manifest* gallery, const Manifest* instances) {
  std::set<std::string> instance_ids;
  std::set<std::string> media_ids;
  for (const auto& inst : m.instances) {
    if (!instance_ids.insert(inst.instance_id).second) {
      fail(inst.line, "duplicate instance_id `" + inst.instance_id + "`");
    }
    if (inst.templates.empty()) fail(inst.line, inst.instance_id + ": an instance needs >= 1 template");
    for (const auto& t : inst.templates) {
      if (!media_ids.insert(t.media_id).second) fail(inst.line, "duplicate media_id `" + t.media_id + "`");
    }
  }
  std::set<std::string> gallery_ids;
  for (const auto& r : m.media) {
    if (!media_ids.insert(r.media.media_id).second) {
      fail(r.line, "duplicate media_id `" + r.media.media_id + "`");
    }
    gallery_ids.insert(r.media.media_id);
  }
  if (gallery) {
    for (const auto& r : gallery->media) gallery_ids.insert(r.media.media_id);
  }
  if (instances) {
    for (const auto& i : instances->instances) instance_ids.insert(i.instance_id);
  }
  const bool check_refs = !gallery_ids.empty() || gallery != nullptr;
  const bool check_placeholders = !instance_ids.empty() || instances != nullptr;
  std::set<std::string> query_ids;
  for (const auto& q : m.queries) {
    if (!query_ids.insert(q.query_id).second) fail(q.line, "duplicate query_id `" + q.query_id + "`");
    if (q.setting == QuerySetting::context && q.positives.size() != 1) {
      fail(q.line, q.query_id + ": a context query has exactly one correct match (got " +
                       std::to_string(q.positives.size()) + ")");
    }
    if (q.setting == QuerySetting::generic && q.positives.empty()) {
      fail(q.line, q.query_id + ": a generic query needs >= 1 positive");
    }
    std::set<std::string> seen;
    for (const auto& p : q.positives) {
      if (!seen.insert(p).second) fail(q.line, q.query_id + ": positive `" + p + "` listed twice");
      if (check_refs && !gallery_ids.count(p)) {
        fail(q.line, q.query_id + ": positive `" + p + "` is not in the gallery");
      }
    }
    PromptTemplate tmpl(q.text);
    if (check_placeholders) {
      for (const auto& name : tmpl.placeholders()) {
        if (!instance_ids.count(name)) fail(q.line, q.query_id + ": unknown persona <" + name + ">");
      }
    }
  }
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Manifest m = parse_manifest(ss.str(), path.parent_path());
  validate_manifest(m);
  return m;
}

std::string serialize_manifest(const Manifest& m) {
  std::string out;
  json header{{"type", "header"}, {"format", kManifestFormat}, {"version", m.version},
              {"kind", m.kind.empty() ? std::string("combined") : m.kind}};
  out += header.dump() + "\n";
  for (const auto& i : m.instances) {
    json j{{"type", "instance"}, {"instance_id", i.instance_id}, {"category", i.category}};
    if (i.caption) j["caption"] = *i.caption;
    j["templates"] = json::array();
    for (const auto& t : i.templates) j["templates"].push_back(media_to_json(t));
    out += j.dump() + "\n";
  }
  for (const auto& r : m.media) {
    json j = media_to_json(r.media);
    j["type"] = "media";
    out += j.dump() + "\n";
  }
  for (const auto& q : m.queries) {
    json j{{"type", "query"},
           {"query_id", q.query_id},
           {"text", q.text},
           {"positives", q.positives},
           {"setting", to_string(q.setting)}};
    out += j.dump() + "\n";
  }
  return out;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write manifest " + path.string());
    out << serialize_manifest(m);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace pimap
