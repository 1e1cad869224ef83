#include "pimap/external_encoder.hpp"

#include "pimap/embedding_io.hpp"
#include "pimap/errors.hpp"
#include "pimap/manifest.hpp"

#include "binary_io.hpp"
#include "process.hpp"

#include <json.hpp>

#include <iostream>
#include <unistd.h>

namespace pimap {
namespace {

using nlohmann::json;

Vector to_vector(const json& arr) {
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  return v;
}

json to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

std::map<std::string, Vector> by_id(std::vector<EmbeddingRecord> records, Space expected) {
  std::map<std::string, Vector> out;
  for (auto& r : records) {
    if (r.space != expected) throw ExternalToolError("encoder tool answered in the wrong space for " + r.id);
    out[r.id] = std::move(r.values);
  }
  return out;
}

Vector take(std::map<std::string, Vector>& m, const std::string& id, std::size_t dim) {
  auto it = m.find(id);
  if (it == m.end()) throw ExternalToolError("encoder tool response lacks record " + id);
  if (static_cast<std::size_t>(it->second.size()) != dim) {
    throw ConfigError("encoder tool returned " + std::to_string(it->second.size()) + " values for " + id +
                      ", expected " + std::to_string(dim));
  }
  return std::move(it->second);
}

}  // namespace

ExternalEncoderPair::ExternalEncoderPair(std::string command, std::filesystem::path work_dir)
    : command_(std::move(command)), work_dir_(std::move(work_dir)) {
  if (command_.empty()) throw ConfigError("external encoder: empty command");
  std::filesystem::create_directories(work_dir_);
  json d;
  try {
    d = json::parse(call(json{{"op", "describe"}}.dump()));
    desc_.encoder_id = d.at("encoder_id").get<std::string>();
    desc_.d_joint = d.at("d_joint").get<std::size_t>();
    desc_.d_tok = d.at("d_tok").get<std::size_t>();
    desc_.normalizes_output = d.value("normalizes_output", true);
    vocab_ = Vocabulary(d.at("vocabulary").get<std::vector<std::string>>(), Matrix());
  } catch (const json::exception& e) {
    throw ExternalToolError(std::string("external encoder: malformed describe response: ") + e.what());
  }
  desc_.validate();
}

std::string ExternalEncoderPair::call(const std::string& request_json) const {
  const auto n = counter_++;
  const auto stem = work_dir_ / ("req-" + std::to_string(::getpid()) + "-" + std::to_string(n));
  const auto req = stem.string() + ".json";
  const auto resp = stem.string() + ".out";
  detail::write_file_atomic(req, request_json);
  ++calls_;
  const int rc = detail::run_command(command_, {req, resp});
  std::string body;
  if (rc == 0) body = detail::read_file(resp);
  std::error_code ec;
  std::filesystem::remove(req, ec);
  std::filesystem::remove(resp, ec);
  if (rc != 0) throw ExternalToolError("encoder tool `" + command_ + "` exited with status " + std::to_string(rc));
  return body;
}

std::string ExternalEncoderPair::elements_json(const TokenSequence& seq) const {
  json els = json::array();
  for (const auto& e : seq.elements()) {
    if (const auto* v = std::get_if<Vector>(&e)) {
      els.push_back({{"embedding", to_json(*v)}});
    } else {
      els.push_back({{"word", vocab_.word(std::get<TokenId>(e))}});
    }
  }
  return els.dump();
}

std::vector<Embedding> ExternalEncoderPair::encode_frames(const MediaDescriptor& media) const {
  json req{{"op", "image"}, {"id", "m"}, {"media", json::parse(media_to_json_text(media))}};
  auto recs = parse_embeddings(call(req.dump()));
  std::vector<Embedding> out;
  auto m = by_id(std::move(recs), Space::joint);
  for (std::size_t f = 0;; ++f) {
    const std::string id = "m#" + std::to_string(f);
    if (!m.count(id)) break;
    out.push_back({take(m, id, desc_.d_joint), Space::joint});
  }
  if (out.empty()) throw ExternalToolError(media.media_id + ": encoder tool returned no frames");
  return out;
}

Embedding ExternalEncoderPair::encode_text(const TokenSequence& seq) const {
  seq.validate(desc_.d_tok, vocab_.size());
  if (seq.empty()) throw UsageError("cannot encode an empty token sequence");
  const std::string els = elements_json(seq);
  const bool cacheable = seq.injection_count() == 0;
  if (cacheable) {
    std::lock_guard lock(cache_mutex_);
    if (auto it = text_cache_.find(els); it != text_cache_.end()) return {it->second, Space::joint};
  }
  const std::string req = R"({"op":"text","id":"t","elements":)" + els + "}";
  auto m = by_id(parse_embeddings(call(req)), Space::joint);
  Vector v = take(m, "t", desc_.d_joint);
  if (cacheable) {
    std::lock_guard lock(cache_mutex_);
    text_cache_.emplace(els, v);
  }
  return {std::move(v), Space::joint};
}

std::vector<Vector> ExternalEncoderPair::encode_text_grad(const TokenSequence& seq, const Vector& upstream) const {
  seq.validate(desc_.d_tok, vocab_.size());
  const std::size_t n = seq.injection_count();
  if (n == 0) throw UsageError("encode_text_grad: the sequence has no injected embeddings");
  if (static_cast<std::size_t>(upstream.size()) != desc_.d_joint) {
    throw ShapeError("encode_text_grad: upstream has the wrong dimension");
  }
  const std::string req = R"({"op":"text_grad","id":"g","elements":)" + elements_json(seq) +
                          R"(,"upstream":)" + to_json(upstream).dump() + "}";
  auto m = by_id(parse_embeddings(call(req)), Space::token);
  std::vector<Vector> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(take(m, "g#" + std::to_string(k), desc_.d_tok));
  return out;
}

// ---------------------------------------------------------------------------

int serve_encoder_request(const EncoderPair& encoders, const std::filesystem::path& request,
                          const std::filesystem::path& response, bool binary) {
  try {
    const json req = json::parse(detail::read_file(request.string()));
    const auto op = req.at("op").get<std::string>();
    auto write = [&](const std::vector<EmbeddingRecord>& recs) {
      save_embeddings(recs, response, binary);
    };
    auto sequence = [&](const json& els) {
      TokenSequence seq;
      for (const auto& e : els) {
        if (e.contains("embedding")) {
          seq.push_embedding(to_vector(e.at("embedding")));
        } else {
          seq.push_token(encoders.vocabulary().id_of(e.at("word").get<std::string>()));
        }
      }
      return seq;
    };
    if (op == "describe") {
      const auto& d = encoders.descriptor();
      const json out{{"encoder_id", d.encoder_id},
                     {"d_joint", d.d_joint},
                     {"d_tok", d.d_tok},
                     {"normalizes_output", d.normalizes_output},
                     {"vocabulary", encoders.vocabulary().words()}};
      detail::write_file_atomic(response.string(), out.dump());
    } else if (op == "image") {
      const auto media = media_from_json_text(req.at("media").dump());
      const auto id = req.at("id").get<std::string>();
      std::vector<EmbeddingRecord> recs;
      const auto frames = encoders.encode_frames(media);
      for (std::size_t f = 0; f < frames.size(); ++f) {
        recs.push_back({id + "#" + std::to_string(f), Space::joint, frames[f].values});
      }
      write(recs);
    } else if (op == "text") {
      write({{req.at("id").get<std::string>(), Space::joint, encoders.encode_text(sequence(req.at("elements"))).values}});
    } else if (op == "text_grad") {
      const auto id = req.at("id").get<std::string>();
      const auto grads = encoders.encode_text_grad(sequence(req.at("elements")), to_vector(req.at("upstream")));
      std::vector<EmbeddingRecord> recs;
      for (std::size_t k = 0; k < grads.size(); ++k) recs.push_back({id + "#" + std::to_string(k), Space::token, grads[k]});
      write(recs);
    } else {
      std::cerr << "unknown op `" << op << "`\n";
      return 2;
    }
    return 0;
  } catch (const json::exception& e) {
    std::cerr << "malformed request: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
}

}  // namespace pimap
