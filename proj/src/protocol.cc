#include "dcp/protocol.h"

#include <algorithm>
#include <cstring>
#include <ostream>
#include <string>
#include <tuple>

#include "dcp/errors.h"
#include "dcp/parallel.h"
#include "dcp/rng.h"

namespace dcp {

std::string_view to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::kRequestBroadcast: return "RequestBroadcast";
    case MessageKind::kRelevanceReply: return "RelevanceReply";
    case MessageKind::kFeatureGrant: return "FeatureGrant";
  }
  return "Unknown";
}

std::string_view to_string(CommAccounting mode) {
  return mode == CommAccounting::kFeatureOnly ? "feature_only" : "total";
}

CommAccounting parse_comm_accounting(std::string_view name) {
  if (name == "feature_only") return CommAccounting::kFeatureOnly;
  if (name == "total") return CommAccounting::kTotal;
  throw InputError("unknown comm accounting '" + std::string(name) +
                   "' (expected feature_only or total)");
}

// ---------------------------------------------------------------------------
// Wire format

namespace {

constexpr char kMagic[4] = {'D', 'C', 'P', 'M'};

bool valid_kind(std::uint8_t k) { return k >= 1 && k <= 3; }

}  // namespace

std::vector<std::uint8_t> serialize_message(const ProtocolMessage& message) {
  if (message.payload.size() > (0xffffffffULL / 4)) {
    throw FramingError("payload too large to frame");
  }
  std::vector<std::uint8_t> out;
  out.reserve(message.wire_bytes());
  out.insert(out.end(), kMagic, kMagic + 4);
  le::put_u8(out, static_cast<std::uint8_t>(message.kind));
  le::put_u16(out, message.src);
  le::put_u16(out, message.dst);
  le::put_u32(out, message.frame);
  le::put_u32(out, static_cast<std::uint32_t>(message.payload_bytes()));
  for (float v : message.payload) le::put_f32(out, v);
  return out;
}

ProtocolMessage parse_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMessageHeaderBytes) {
    throw FramingError("truncated header: " + std::to_string(bytes.size()) +
                       " bytes");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FramingError("bad magic");
  }
  const std::uint8_t* p = bytes.data();
  if (!valid_kind(p[4])) {
    throw FramingError("unknown message kind " + std::to_string(p[4]));
  }
  ProtocolMessage m;
  m.kind = static_cast<MessageKind>(p[4]);
  m.src = le::get_u16(p + 5);
  m.dst = le::get_u16(p + 7);
  m.frame = le::get_u32(p + 9);
  const std::uint32_t length = le::get_u32(p + 13);
  const std::size_t available = bytes.size() - kMessageHeaderBytes;
  if (length != available) {
    throw FramingError("payload length field " + std::to_string(length) +
                       " disagrees with " + std::to_string(available) +
                       " payload bytes");
  }
  if (length % 4 != 0) {
    throw FramingError("payload length " + std::to_string(length) +
                       " is not a multiple of 4");
  }
  if (m.kind == MessageKind::kRelevanceReply && length != 4) {
    throw FramingError("relevance reply carries " + std::to_string(length) +
                       " payload bytes, expected 4");
  }
  m.payload.resize(length / 4);
  for (std::size_t i = 0; i < m.payload.size(); ++i) {
    m.payload[i] = le::get_f32(p + kMessageHeaderBytes + 4 * i);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ledger

void CommLedger::record(const ProtocolMessage& message,
                        std::size_t serialized_bytes) {
  LedgerEntry e;
  e.frame = message.frame;
  e.src = message.src;
  e.dst = message.dst;
  e.kind = message.kind;
  e.wire_bytes = serialized_bytes;
  e.payload_bytes = serialized_bytes - kMessageHeaderBytes;
  entries_.push_back(e);
  total_bytes_ += e.wire_bytes;
  if (e.kind == MessageKind::kFeatureGrant) feature_bytes_ += e.payload_bytes;
}

void CommLedger::append(const CommLedger& other) {
  entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
  total_bytes_ += other.total_bytes_;
  feature_bytes_ += other.feature_bytes_;
}

std::size_t CommLedger::count(MessageKind kind) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(),
      [kind](const LedgerEntry& e) { return e.kind == kind; }));
}

std::size_t CommLedger::bytes(CommAccounting mode) const {
  return mode == CommAccounting::kFeatureOnly ? feature_bytes_ : total_bytes_;
}

void CommLedger::write_csv(std::ostream& out) const {
  out << "frame,src,dst,kind,bytes\n";
  for (const LedgerEntry& e : entries_) {
    out << e.frame << ',' << e.src << ',' << e.dst << ',' << to_string(e.kind)
        << ',' << e.wire_bytes << '\n';
  }
}

double mbpf(const CommLedger& ledger, std::size_t frames, CommAccounting mode) {
  if (frames == 0) throw InputError("mbpf: frames must be >= 1");
  return static_cast<double>(ledger.bytes(mode)) / static_cast<double>(frames) /
         1048576.0;
}

// ---------------------------------------------------------------------------
// Bus

MessageBus::MessageBus(std::size_t num_platforms) : outboxes_(num_platforms) {}

void MessageBus::post(PlatformId src, ProtocolMessage message) {
  if (src >= outboxes_.size() || message.dst >= outboxes_.size()) {
    throw ProtocolError("message " + std::to_string(message.src) + " -> " +
                        std::to_string(message.dst) +
                        " references an unknown platform");
  }
  message.src = src;
  outboxes_[src].push_back(std::move(message));
}

std::vector<std::vector<ProtocolMessage>> MessageBus::barrier(CommLedger& ledger) {
  std::vector<ProtocolMessage> pending;
  for (auto& box : outboxes_) {
    for (auto& m : box) pending.push_back(std::move(m));
    box.clear();
  }
  std::stable_sort(pending.begin(), pending.end(),
                   [](const ProtocolMessage& a, const ProtocolMessage& b) {
                     return std::tuple(a.frame, a.src, a.dst, a.kind) <
                            std::tuple(b.frame, b.src, b.dst, b.kind);
                   });
  std::vector<std::vector<ProtocolMessage>> inboxes(outboxes_.size());
  for (const ProtocolMessage& m : pending) {
    const std::vector<std::uint8_t> wire = serialize_message(m);
    ledger.record(m, wire.size());
    ProtocolMessage delivered = parse_message(wire);
    inboxes[delivered.dst].push_back(std::move(delivered));
  }
  return inboxes;
}

// ---------------------------------------------------------------------------
// Platform actors

namespace {

// Per-platform state, only touched by the worker running that platform
// between barriers.
struct PlatformActor {
  PlatformId id = 0;
  Tensor feature;
  Tensor local_logits;
  SmimState state;
  bool fuse = false;
  std::vector<std::size_t> supporter_slots;  // into the candidate list
  std::vector<PlatformId> candidates;
  std::vector<double> scores;
};

std::vector<float> to_wire(std::span<const double> v) {
  return std::vector<float>(v.begin(), v.end());
}

Tensor from_wire(const ProtocolMessage& m, const Shape& shape) {
  if (m.payload.size() != shape_size(shape)) {
    throw ProtocolError("feature grant " + std::to_string(m.src) + " -> " +
                        std::to_string(m.dst) + " carries " +
                        std::to_string(m.payload.size()) + " values, expected " +
                        shape_to_string(shape));
  }
  return Tensor(shape, std::vector<double>(m.payload.begin(), m.payload.end()));
}

void check_sample(const SceneSample& sample, const ModelParams& params) {
  if (sample.num_platforms() != params.config.num_platforms) {
    throw InputError("sample has " + std::to_string(sample.num_platforms()) +
                     " platforms, model expects " +
                     std::to_string(params.config.num_platforms));
  }
  if (sample.num_platforms() > 0xffff) throw InputError("too many platforms");
}

Tensor decode_logits(const Tensor& fused, const ModelParams& params) {
  Graph g;
  return g.value(decode_segmentation(g, g.constant(fused), params.decoder));
}

Tensor encode_feature(const Image& view, const ModelParams& params) {
  Graph g;
  return g.value(encode_view(g, g.constant(view.to_tensor()), params.encoder));
}

void finish(FrameResult& out, std::vector<Tensor>& logits) {
  out.predictions.clear();
  for (const Tensor& l : logits) out.predictions.push_back(argmax_classes(l));
  out.logits = std::move(logits);
}

}  // namespace

FrameResult run_frame(const SceneSample& sample, const ModelParams& params,
                      const ProtocolConfig& config) {
  if (params.config.kind != BaselineKind::kDcpNet || !params.smim || !params.rff) {
    throw ConfigError("run_frame needs DCP-Net parameters, got " +
                      std::string(to_string(params.config.kind)));
  }
  check_sample(sample, params);
  const std::size_t n = sample.num_platforms();
  SmimConfig smim_config{config.request_threshold, n};
  smim_config.validate();
  const SmimParams& smim = *params.smim;
  const std::uint32_t frame = static_cast<std::uint32_t>(sample.index);

  std::vector<PlatformActor> actors(n);
  FrameResult out;
  MessageBus bus(n);

  // Local encoding, confidence and the request decision.
  parallel_for(n, config.threads, [&](std::size_t i) {
    PlatformActor& a = actors[i];
    a.id = static_cast<PlatformId>(i);
    Graph g;
    const Var f = encode_view(g, g.constant(sample.views[i].to_tensor()),
                              params.encoder);
    const QueryKey qk = encode_query_key(g, f, smim);
    const Var r = encode_request(g, f, smim);
    const Var corr = matmul(g, qk.q, transpose(g, qk.k));
    const Var p = sigmoid(g, corr);
    a.feature = g.value(f);
    a.state.q = g.value(qk.q).values();
    a.state.k = g.value(qk.k).values();
    a.state.r = g.value(r).values();
    a.state.correlation = g.value(corr).item();
    a.state.confidence = g.value(p).item();
    const bool eligible = !config.only_requester || *config.only_requester == i;
    a.state.requested = eligible && decide_request(a.state.confidence, smim_config);
    if (a.state.requested) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        bus.post(a.id, ProtocolMessage{MessageKind::kRequestBroadcast, a.id,
                                       static_cast<PlatformId>(j), frame,
                                       to_wire(a.state.r)});
      }
    }
  });
  std::vector<std::vector<ProtocolMessage>> inbox = bus.barrier(out.ledger);

  // Candidates score each incoming request against their own key.
  parallel_for(n, config.threads, [&](std::size_t j) {
    PlatformActor& a = actors[j];
    for (const ProtocolMessage& m : inbox[j]) {
      if (m.kind != MessageKind::kRequestBroadcast) continue;
      const std::vector<double> request(m.payload.begin(), m.payload.end());
      const double rel = candidate_relevance(request, a.state.k, smim.w_alpha);
      bus.post(a.id, ProtocolMessage{MessageKind::kRelevanceReply, a.id, m.src,
                                     frame, {static_cast<float>(rel)}});
    }
  });
  inbox = bus.barrier(out.ledger);

  // Requesters pick supporters. The grant notice travels with the barrier.
  parallel_for(n, config.threads, [&](std::size_t i) {
    PlatformActor& a = actors[i];
    if (!a.state.requested) return;
    std::vector<double> relevance;
    for (const ProtocolMessage& m : inbox[i]) {
      if (m.kind != MessageKind::kRelevanceReply) continue;
      a.candidates.push_back(m.src);
      relevance.push_back(m.payload[0]);
    }
    a.scores = match_scores(relevance);
    a.supporter_slots = select_supporters(a.scores, n);
    for (std::size_t c = 0; c < a.candidates.size(); ++c) {
      a.state.match_scores[a.candidates[c]] = a.scores[c];
    }
    for (std::size_t slot : a.supporter_slots) {
      a.state.supporters.push_back(a.candidates[slot]);
    }
    a.fuse = !a.supporter_slots.empty();
  });
  for (const PlatformActor& a : actors) {
    for (PlatformId s : a.state.supporters) {
      if (config.failed_links.count({s, a.id})) {
        throw ProtocolError("supporter " + std::to_string(s) +
                            " failed to grant its feature to platform " +
                            std::to_string(a.id) + " on link " +
                            std::to_string(s) + "->" + std::to_string(a.id) +
                            " (frame " + std::to_string(frame) + ")");
      }
    }
  }
  parallel_for(n, config.threads, [&](std::size_t j) {
    for (const PlatformActor& a : actors) {
      for (PlatformId s : a.state.supporters) {
        if (s != j) continue;
        bus.post(static_cast<PlatformId>(j),
                 ProtocolMessage{MessageKind::kFeatureGrant,
                                 static_cast<PlatformId>(j), a.id, frame,
                                 to_wire(actors[j].feature.data())});
      }
    }
  });
  inbox = bus.barrier(out.ledger);

  // Fusion and decoding.
  std::vector<Tensor> logits(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    const PlatformActor& a = actors[i];
    Graph g;
    const Var local = g.constant(a.feature);
    const Var p = g.constant(Tensor({1, 1}, {a.state.confidence}));
    FuseOptions options{a.fuse, config.eq9_literal};
    std::vector<std::optional<Var>> related;
    std::vector<Var> weights;
    if (a.fuse) {
      for (std::size_t c = 0; c < a.candidates.size(); ++c) {
        const bool kept = std::find(a.supporter_slots.begin(),
                                    a.supporter_slots.end(),
                                    c) != a.supporter_slots.end();
        std::optional<Var> rel;
        if (kept) {
          auto grant = std::find_if(
              inbox[i].begin(), inbox[i].end(), [&](const ProtocolMessage& m) {
                return m.kind == MessageKind::kFeatureGrant &&
                       m.src == a.candidates[c];
              });
          if (grant == inbox[i].end()) {
            throw ProtocolError("platform " + std::to_string(a.candidates[c]) +
                                " never granted its feature to platform " +
                                std::to_string(a.id));
          }
          const Var collab = g.constant(from_wire(*grant, a.feature.shape()));
          rel = related_feature_for(g, local, collab, *params.rff);
        }
        related.push_back(rel);
        weights.push_back(g.constant(Tensor({1, 1}, {kept ? a.scores[c] : 0.0})));
      }
    }
    const Var fused = fuse(g, local, related, p, weights, options);
    logits[i] = g.value(decode_segmentation(g, fused, params.decoder));
  });
  out.states.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.states[i] = std::move(actors[i].state);
  finish(out, logits);
  return out;
}

std::size_t random_candidate(std::size_t num_platforms, std::size_t ego,
                             std::uint64_t seed, std::uint64_t index) {
  if (num_platforms < 2 || ego >= num_platforms) {
    throw InputError("random_candidate: bad platform count or ego");
  }
  auto rng = make_rng(seed, streams::kRandomSelection, index);
  std::uniform_int_distribution<std::size_t> pick(0, num_platforms - 2);
  const std::size_t c = pick(rng);
  return c >= ego ? c + 1 : c;
}

FrameResult run_baseline_frame(const SceneSample& sample,
                               const ModelParams& params, PlatformId ego,
                               std::uint64_t seed, unsigned threads) {
  check_sample(sample, params);
  const std::size_t n = sample.num_platforms();
  if (ego >= n) throw InputError("ego platform out of range");
  const BaselineKind kind = params.config.kind;
  if (kind == BaselineKind::kDcpNet) {
    throw ConfigError("run_baseline_frame does not run DCP-Net; use run_frame");
  }
  const std::uint32_t frame = static_cast<std::uint32_t>(sample.index);
  FrameResult out;
  MessageBus bus(n);

  std::vector<Tensor> features(n);
  parallel_for(n, threads, [&](std::size_t i) {
    features[i] = encode_feature(sample.views[i], params);
  });

  std::vector<std::size_t> senders;
  if (kind == BaselineKind::kConcatAll || kind == BaselineKind::kAuxViewAttention) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != ego) senders.push_back(j);
    }
  } else if (kind == BaselineKind::kRandomSelection) {
    senders.push_back(random_candidate(n, ego, seed, sample.index));
  }
  for (std::size_t j : senders) {
    bus.post(static_cast<PlatformId>(j),
             ProtocolMessage{MessageKind::kFeatureGrant, static_cast<PlatformId>(j),
                             ego, frame, to_wire(features[j].data())});
  }
  const auto inbox = bus.barrier(out.ledger);

  std::vector<Tensor> logits(n);
  parallel_for(n, threads, [&](std::size_t i) {
    if (i != ego || senders.empty()) {
      logits[i] = decode_logits(features[i], params);
      return;
    }
    Graph g;
    std::vector<Var> vars(n);
    vars[i] = g.constant(features[i]);
    for (const ProtocolMessage& m : inbox[i]) {
      vars[m.src] = g.constant(from_wire(m, features[i].shape()));
    }
    Var fused;
    switch (kind) {
      case BaselineKind::kConcatAll:
        fused = concat_all_fuse(g, vars, i, *params.concat);
        break;
      case BaselineKind::kAuxViewAttention:
        fused = aux_attention_fuse(g, vars, i, *params.attention);
        break;
      default:
        fused = random_selection_fuse(g, vars[i], vars[senders.front()]);
        break;
    }
    logits[i] = g.value(decode_segmentation(g, fused, params.decoder));
  });
  out.states.resize(n);
  finish(out, logits);
  return out;
}

}  // namespace dcp
