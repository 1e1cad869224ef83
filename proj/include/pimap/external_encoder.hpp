#pragma once

#include "pimap/encoder.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace pimap {

// Encoder pair backed by a user-supplied program, for running the protocol
// with a real vision-language model.
//
// Every call runs `command <request.json> <response>`. The request is one JSON
// object with an `op`:
//   {"op":"describe"}
//       -> JSON {"encoder_id", "d_joint", "d_tok", "normalizes_output", "vocabulary": [words]}
//   {"op":"image", "id":..., "media": <manifest media reference>}
//       -> embedding records `<id>#<frame>` in the joint space, one per frame
//   {"op":"text", "id":..., "elements": [{"word": w} | {"embedding": [..]}]}
//       -> one joint record `<id>`
//   {"op":"text_grad", "id":..., "elements": [...], "upstream": [..]}
//       -> token records `<id>#<k>`, one per injected embedding, in order
// Embedding responses use the exchange format of embedding_io.hpp (text or
// PIEMB1). A non-zero exit status is an ExternalToolError.
class ExternalEncoderPair final : public EncoderPair {
 public:
  ExternalEncoderPair(std::string command, std::filesystem::path work_dir);

  const EncoderPairDescriptor& descriptor() const override { return desc_; }
  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<Embedding> encode_frames(const MediaDescriptor& media) const override;
  using EncoderPair::encode_text;
  Embedding encode_text(const TokenSequence& seq) const override;
  std::vector<Vector> encode_text_grad(const TokenSequence& seq, const Vector& upstream) const override;

  // Number of tool invocations so far (discrete-only texts are cached).
  std::size_t calls() const { return calls_; }

 private:
  std::string call(const std::string& request_json) const;
  std::string elements_json(const TokenSequence& seq) const;

  std::string command_;
  std::filesystem::path work_dir_;
  EncoderPairDescriptor desc_;
  Vocabulary vocab_;
  mutable std::atomic<std::size_t> calls_{0};
  mutable std::atomic<std::size_t> counter_{0};
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, Vector> text_cache_;
};

// Serves the adapter protocol from an in-process encoder pair: reads the
// request file, writes the response file. Returns a process exit code and
// prints diagnostics to stderr. Used by the reference tool that wraps the toy
// encoder, and by tests.
int serve_encoder_request(const EncoderPair& encoders, const std::filesystem::path& request,
                          const std::filesystem::path& response, bool binary = false);

}  // namespace pimap
