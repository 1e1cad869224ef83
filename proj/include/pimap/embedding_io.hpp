#pragma once

#include "pimap/encoder.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pimap {

// Embedding exchange records shared with out-of-process encoders.
//
// Text form, one record per line:   <id> <joint|token> <dim> <v_1> ... <v_dim>
// Binary form (little-endian):      "PIEMB1" u32 version u64 count, then per
//                                   record: u32 id length, id bytes, u8 space,
//                                   u64 dim, dim f64 values.
struct EmbeddingRecord {
  std::string id;
  Space space = Space::joint;
  Vector values;

  friend bool operator==(const EmbeddingRecord& a, const EmbeddingRecord& b) {
    return a.id == b.id && a.space == b.space && a.values.size() == b.values.size() &&
           a.values == b.values;
  }
};

inline constexpr std::string_view kEmbeddingMagic = "PIEMB1";

// Values are written with 17 significant digits so they read back exactly.
// Throws ValidationError for ids containing whitespace or non-finite values.
std::string format_embeddings_text(const std::vector<EmbeddingRecord>& records);
std::string format_embeddings_binary(const std::vector<EmbeddingRecord>& records);

// Accepts either form (binary when the bytes start with the magic). Throws
// DecodeError naming the line or record on malformed input.
std::vector<EmbeddingRecord> parse_embeddings(std::string_view bytes);

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::vector<EmbeddingRecord>& records, const std::filesystem::path& path,
                     bool binary = false);

}  // namespace pimap
