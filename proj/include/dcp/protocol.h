#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "dcp/model.h"
#include "dcp/scene_gen.h"
#include "dcp/smim.h"

namespace dcp {

enum class MessageKind : std::uint8_t {
  kRequestBroadcast = 1,
  kRelevanceReply = 2,
  kFeatureGrant = 3,
};

std::string_view to_string(MessageKind kind);

// magic(4) kind(1) src(2) dst(2) frame(4) payload_length(4)
inline constexpr std::size_t kMessageHeaderBytes = 17;

struct ProtocolMessage {
  MessageKind kind = MessageKind::kRequestBroadcast;
  PlatformId src = 0;
  PlatformId dst = 0;
  std::uint32_t frame = 0;
  // Request vector, a single relevance, or a flattened H' x W' x C feature.
  std::vector<float> payload;

  std::size_t payload_bytes() const { return payload.size() * 4; }
  std::size_t wire_bytes() const { return kMessageHeaderBytes + payload_bytes(); }
  friend bool operator==(const ProtocolMessage&, const ProtocolMessage&) = default;
};

std::vector<std::uint8_t> serialize_message(const ProtocolMessage& message);
// Throws FramingError on bad magic, unknown kind, truncation, a length
// field that disagrees with the buffer, or a relevance reply whose payload
// is not exactly one value.
ProtocolMessage parse_message(std::span<const std::uint8_t> bytes);

struct LedgerEntry {
  std::uint32_t frame = 0;
  PlatformId src = 0;
  PlatformId dst = 0;
  MessageKind kind = MessageKind::kRequestBroadcast;
  std::size_t wire_bytes = 0;
  std::size_t payload_bytes = 0;
  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

enum class CommAccounting { kFeatureOnly, kTotal };

std::string_view to_string(CommAccounting mode);
CommAccounting parse_comm_accounting(std::string_view name);

class CommLedger {
 public:
  void record(const ProtocolMessage& message, std::size_t serialized_bytes);
  void append(const CommLedger& other);

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  std::size_t total_bytes() const { return total_bytes_; }
  // FeatureGrant payload bytes; the header is control-plane overhead.
  std::size_t feature_bytes() const { return feature_bytes_; }
  std::size_t control_bytes() const { return total_bytes_ - feature_bytes_; }
  std::size_t count(MessageKind kind) const;
  std::size_t bytes(CommAccounting mode) const;

  // frame,src,dst,kind,bytes with wire bytes per row.
  void write_csv(std::ostream& out) const;

  friend bool operator==(const CommLedger&, const CommLedger&) = default;

 private:
  std::vector<LedgerEntry> entries_;
  std::size_t total_bytes_ = 0;
  std::size_t feature_bytes_ = 0;
};

// Selected bytes / frames / 2^20. Throws InputError when frames == 0.
double mbpf(const CommLedger& ledger, std::size_t frames, CommAccounting mode);

// Collects one phase's outgoing messages and delivers them at the barrier
// in (frame, src, dst, kind) order, passing each through the wire format.
class MessageBus {
 public:
  explicit MessageBus(std::size_t num_platforms);

  // Safe to call concurrently for distinct `src` within a phase.
  void post(PlatformId src, ProtocolMessage message);
  // Serializes, records, parses and routes every pending message. Returns
  // the per-platform inboxes for the phase just completed.
  std::vector<std::vector<ProtocolMessage>> barrier(CommLedger& ledger);

 private:
  std::vector<std::vector<ProtocolMessage>> outboxes_;
};

struct ProtocolConfig {
  double request_threshold = 0.8;
  bool eq9_literal = false;
  unsigned threads = 1;
  // When set, only this platform may request; all others stay local.
  std::optional<PlatformId> only_requester;
  // (supporter, requester) links whose FeatureGrant fails.
  std::set<std::pair<PlatformId, PlatformId>> failed_links;
};

struct FrameResult {
  std::vector<ClassMask> predictions;
  std::vector<Tensor> logits;
  std::vector<SmimState> states;
  CommLedger ledger;
};

// Distributed DCP-Net inference over one sample: local encoding, request
// decision, request/relevance exchange, supporter selection, feature grants,
// fusion and decoding. Requires params.config.kind == kDcpNet.
FrameResult run_frame(const SceneSample& sample, const ModelParams& params,
                      const ProtocolConfig& config);

// Inference for the comparison policies with `ego` as the only fusing
// platform. Random selection draws its candidate from (seed, sample.index).
FrameResult run_baseline_frame(const SceneSample& sample,
                               const ModelParams& params, PlatformId ego,
                               std::uint64_t seed, unsigned threads = 1);

// Candidate picked by the random-selection policy for this frame.
std::size_t random_candidate(std::size_t num_platforms, std::size_t ego,
                             std::uint64_t seed, std::uint64_t index);

}  // namespace dcp
