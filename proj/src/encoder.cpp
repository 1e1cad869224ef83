#include "pimap/encoder.hpp"

#include "pimap/errors.hpp"

#include <cctype>

namespace pimap {

const char* to_string(Space s) { return s == Space::joint ? "joint" : "token"; }

Space parse_space(std::string_view s) {
  if (s == "joint") return Space::joint;
  if (s == "token") return Space::token;
  throw DecodeError("unknown embedding space `" + std::string(s) + "`");
}

const char* to_string(MediaKind k) { return k == MediaKind::image ? "image" : "video"; }

MediaKind parse_media_kind(std::string_view s) {
  if (s == "image") return MediaKind::image;
  if (s == "video") return MediaKind::video;
  throw DecodeError("unknown media kind `" + std::string(s) + "`");
}

void EncoderPairDescriptor::validate() const {
  if (encoder_id.empty()) throw ConfigError("encoder_id must not be empty");
  if (d_joint < 2) throw ConfigError("d_joint must be >= 2");
  if (d_tok < 1) throw ConfigError("d_tok must be >= 1");
}

void SyntheticMediaDescriptor::validate() const {
  if (media_id.empty()) throw ValidationError("synthetic media without media_id");
  if (background_weight < 0.0 || background_weight > 1.0) {
    throw ValidationError(media_id + ": background_weight must lie in [0, 1]");
  }
  if (n_frames < 1) throw ValidationError(media_id + ": n_frames must be >= 1");
  if (!is_video && n_frames != 1) {
    throw ValidationError(media_id + ": an image has exactly one frame");
  }
}

std::size_t MediaDescriptor::frame_count() const {
  if (synthetic) return synthetic->n_frames;
  return frame_paths.empty() ? 0 : frame_paths.size();
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words, Matrix embeddings)
    : words_(std::move(words)), embeddings_(std::move(embeddings)) {
  if (embeddings_.cols() != 0 && static_cast<std::size_t>(embeddings_.cols()) != words_.size()) {
    throw ShapeError("vocabulary: embedding table has " + std::to_string(embeddings_.cols()) +
                     " columns for " + std::to_string(words_.size()) + " words");
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw ConfigError("vocabulary: duplicate word `" + words_[i] + "`");
    }
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_of(std::string_view word) const {
  if (auto id = find(word)) return *id;
  throw VocabularyError("unknown word `" + std::string(word) + "`");
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  return words_[id];
}

Eigen::Ref<const Vector> Vocabulary::embedding(TokenId id) const {
  if (id >= words_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  return embeddings_.col(id);
}

std::vector<std::string> Vocabulary::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '_' || c == '-') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(id_of(w));
  return ids;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> TokenSequence::injection_positions() const {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < elements_.size(); ++i) {
    if (std::holds_alternative<Vector>(elements_[i])) pos.push_back(i);
  }
  return pos;
}

std::size_t TokenSequence::injection_count() const {
  std::size_t n = 0;
  for (const auto& e : elements_) n += std::holds_alternative<Vector>(e) ? 1 : 0;
  return n;
}

void TokenSequence::validate(std::size_t d_tok, std::size_t vocab_size) const {
  for (std::size_t i = 0; i < elements_.size(); ++i) {
    if (const auto* v = std::get_if<Vector>(&elements_[i])) {
      if (static_cast<std::size_t>(v->size()) != d_tok) {
        throw ShapeError("token sequence: injected element " + std::to_string(i) + " has length " +
                         std::to_string(v->size()) + ", expected " + std::to_string(d_tok));
      }
      if (!v->allFinite()) {
        throw ShapeError("token sequence: injected element " + std::to_string(i) + " is not finite");
      }
    } else if (std::get<TokenId>(elements_[i]) >= vocab_size) {
      throw VocabularyError("token id " + std::to_string(std::get<TokenId>(elements_[i])) +
                            " out of range");
    }
  }
}

// ---------------------------------------------------------------------------

PromptTemplate::PromptTemplate(std::string_view text) : text_(text) {
  std::string literal;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {
      const auto close = text.find('>', i + 1);
      if (close == std::string_view::npos) {
        throw ValidationError("prompt template: unterminated placeholder in `" + text_ + "`");
      }
      std::string name(text.substr(i + 1, close - i - 1));
      if (name.empty()) throw ValidationError("prompt template: empty placeholder in `" + text_ + "`");
      if (!literal.empty()) parts_.push_back({false, std::move(literal)});
      literal.clear();
      parts_.push_back({true, std::move(name)});
      i = close + 1;
    } else {
      literal.push_back(text[i++]);
    }
  }
  if (!literal.empty()) parts_.push_back({false, std::move(literal)});
}

std::vector<std::string> PromptTemplate::placeholders() const {
  std::vector<std::string> names;
  for (const auto& p : parts_) {
    if (p.is_placeholder) names.push_back(p.text);
  }
  return names;
}

TokenSequence PromptTemplate::bind(const Vocabulary& vocab,
                                   const std::map<std::string, Vector>& bindings) const {
  TokenSequence seq;
  for (const auto& p : parts_) {
    if (p.is_placeholder) {
      auto it = bindings.find(p.text);
      if (it == bindings.end()) throw UsageError("unbound placeholder <" + p.text + ">");
      seq.push_embedding(it->second);
    } else {
      for (TokenId id : vocab.tokenize(p.text)) seq.push_token(id);
    }
  }
  return seq;
}

std::string PromptTemplate::substitute(const std::map<std::string, std::string>& words) const {
  std::string out;
  for (const auto& p : parts_) {
    if (!p.is_placeholder) {
      out += p.text;
      continue;
    }
    auto it = words.find(p.text);
    if (it == words.end()) throw UsageError("unbound placeholder <" + p.text + ">");
    out += it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------

Embedding EncoderPair::encode_image(const MediaDescriptor& media) const {
  auto frames = encode_frames(media);
  if (frames.empty()) throw DecodeError(media.media_id + ": no frames to encode");
  if (frames.size() == 1) return frames.front();
  Vector acc = Vector::Zero(frames.front().values.size());
  for (const auto& f : frames) acc += f.values;
  acc /= static_cast<double>(frames.size());
  if (descriptor().normalizes_output) acc = normalized(acc);
  return {acc, Space::joint};
}

Embedding EncoderPair::encode_text(std::string_view text) const { return encode_text(tokenize(text)); }

TokenSequence EncoderPair::tokenize(std::string_view text) const {
  TokenSequence seq;
  for (TokenId id : vocabulary().tokenize(text)) seq.push_token(id);
  return seq;
}

}  // namespace pimap
