#pragma once

#include "pimap/encoder.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pimap {

// Dataset manifests are JSON Lines. The first line is a header
//   {"type":"header","format":"pimap-manifest","version":1,"kind":"train"}
// followed by `instance`, `media` and `query` records in any order. Every
// record remembers the line it came from so validation errors can point at it.

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFormat = "pimap-manifest";

enum class QuerySetting { context, generic };

const char* to_string(QuerySetting s);
QuerySetting parse_query_setting(std::string_view s);

struct InstanceRecord {
  std::string instance_id;
  std::string category;
  std::optional<std::string> caption;  // user-provided specific description
  std::vector<MediaDescriptor> templates;
  int line = 0;
};

struct QueryRecord {
  std::string query_id;
  std::string text;  // persona placeholders are written `<instance_id>`
  std::vector<std::string> positives;
  QuerySetting setting = QuerySetting::generic;
  int line = 0;
};

struct MediaRecord {
  MediaDescriptor media;
  int line = 0;
};

struct Manifest {
  int version = kManifestVersion;
  std::string kind;  // train | gallery | queries | combined
  std::vector<InstanceRecord> instances;
  std::vector<MediaRecord> media;
  std::vector<QueryRecord> queries;

  const InstanceRecord* find_instance(std::string_view id) const;
  std::vector<MediaDescriptor> gallery() const;
};

// Parses JSONL text. Throws ValidationError("line N: ...") on malformed input.
// Relative frame paths are resolved against base_dir when it is given.
Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir = {});

// load_manifest = read + parse + validate_manifest(m).
Manifest load_manifest(const std::filesystem::path& path);

// Schema and reference checks: duplicate ids, query positive counts per
// setting, positives resolving to gallery media (in `m` or in `gallery`),
// placeholders naming known instances (in `m` or in `instances`).
void validate_manifest(const Manifest& m, const Manifest* gallery = nullptr,
                       const Manifest* instances = nullptr);

std::string serialize_manifest(const Manifest& m);

// A single media reference in the manifest's JSON shape.
std::string media_to_json_text(const MediaDescriptor& m);
MediaDescriptor media_from_json_text(std::string_view text, const std::filesystem::path& base_dir = {});
void save_manifest(const Manifest& m, const std::filesystem::path& path);

}  // namespace pimap
