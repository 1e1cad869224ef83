#include "pimap/embedding_io.hpp"

#include "pimap/errors.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace pimap {
namespace {

constexpr std::uint32_t kEmbeddingVersion = 1;

void check_record(const EmbeddingRecord& r) {
  if (r.id.empty()) throw ValidationError("embedding record with an empty id");
  for (char c : r.id) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      throw ValidationError("embedding id `" + r.id + "` contains whitespace");
    }
  }
  if (!r.values.allFinite()) throw ValidationError("embedding `" + r.id + "` has non-finite values");
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_double(std::string_view s, int line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw DecodeError("embeddings line " + std::to_string(line) + ": bad value `" + std::string(s) + "`");
  }
  return v;
}

std::vector<EmbeddingRecord> parse_text(std::string_view bytes) {
  std::vector<EmbeddingRecord> out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t end = std::min(bytes.find('\n', pos), bytes.size());
    const auto line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    const std::string where = "embeddings line " + std::to_string(line_no);
    if (fields.size() < 3) throw DecodeError(where + ": expected `id space dim values...`");
    EmbeddingRecord r;
    r.id = std::string(fields[0]);
    try {
      r.space = parse_space(fields[1]);
    } catch (const Error&) {
      throw DecodeError(where + ": unknown space `" + std::string(fields[1]) + "`");
    }
    std::size_t dim = 0;
    const auto res = std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(), dim);
    if (res.ec != std::errc() || res.ptr != fields[2].data() + fields[2].size()) {
      throw DecodeError(where + ": bad dimension `" + std::string(fields[2]) + "`");
    }
    if (fields.size() != dim + 3) {
      throw DecodeError(where + ": declares " + std::to_string(dim) + " values, has " +
                        std::to_string(fields.size() - 3));
    }
    r.values.resize(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k) r.values[static_cast<Eigen::Index>(k)] = parse_double(fields[k + 3], line_no);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EmbeddingRecord> parse_binary(std::string_view bytes) {
  detail::BinaryReader in(bytes, "embeddings");
  in.raw(kEmbeddingMagic.size());
  const auto version = in.u32();
  if (version != kEmbeddingVersion) {
    throw VersionError("embeddings: unsupported binary version " + std::to_string(version));
  }
  const auto count = in.u64();
  std::vector<EmbeddingRecord> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord r;
    try {
      r.id = in.str();
      const auto space = in.u8();
      if (space > 1) throw DecodeError("embeddings record " + std::to_string(i) + ": bad space tag");
      r.space = space == 0 ? Space::joint : Space::token;
      const auto dim = in.u64();
      if (dim > in.remaining() / 8) throw DecodeError("embeddings record " + std::to_string(i) + ": truncated");
      r.values.resize(static_cast<Eigen::Index>(dim));
      for (std::uint64_t k = 0; k < dim; ++k) r.values[static_cast<Eigen::Index>(k)] = in.f64();
    } catch (const CorruptFileError&) {
      throw DecodeError("embeddings record " + std::to_string(i) + ": truncated");
    }
    if (!r.values.allFinite()) throw DecodeError("embeddings record " + std::to_string(i) + ": non-finite value");
    out.push_back(std::move(r));
  }
  if (!in.at_end()) throw DecodeError("embeddings: trailing bytes after the last record");
  return out;
}

}  // namespace

std::string format_embeddings_text(const std::vector<EmbeddingRecord>& records) {
  std::string out;
  char buf[32];
  for (const auto& r : records) {
    check_record(r);
    out += r.id;
    out += ' ';
    out += to_string(r.space);
    out += ' ';
    out += std::to_string(r.values.size());
    for (Eigen::Index k = 0; k < r.values.size(); ++k) {
      std::snprintf(buf, sizeof buf, " %.17g", r.values[k]);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string format_embeddings_binary(const std::vector<EmbeddingRecord>& records) {
  detail::BinaryWriter w;
  w.raw(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u64(records.size());
  for (const auto& r : records) {
    check_record(r);
    w.str(r.id);
    w.u8(r.space == Space::joint ? 0 : 1);
    w.u64(static_cast<std::uint64_t>(r.values.size()));
    w.f64s(r.values.data(), r.values.data() + r.values.size());
  }
  return w.bytes();
}

std::vector<EmbeddingRecord> parse_embeddings(std::string_view bytes) {
  if (bytes.substr(0, kEmbeddingMagic.size()) == kEmbeddingMagic) return parse_binary(bytes);
  return parse_text(bytes);
}

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path) {
  return parse_embeddings(detail::read_file(path.string()));
}

void save_embeddings(const std::vector<EmbeddingRecord>& records, const std::filesystem::path& path, bool binary) {
  detail::write_file_atomic(path.string(),
                            binary ? format_embeddings_binary(records) : format_embeddings_text(records));
}

}  // namespace pimap
