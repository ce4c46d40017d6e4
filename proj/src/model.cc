#include "dcp/model.h"

#include <fstream>
#include <map>
#include <vector>

#include "dcp/errors.h"
#include "dcp/rng.h"

namespace dcp {

std::string_view to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kNoInteraction: return "no-interaction";
    case BaselineKind::kConcatAll: return "concat-all";
    case BaselineKind::kAuxViewAttention: return "aux-view-attention";
    case BaselineKind::kRandomSelection: return "random-selection";
    case BaselineKind::kDcpNet: return "dcp-net";
  }
  return "unknown";
}

std::string_view display_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kNoInteraction: return "No-Interaction";
    case BaselineKind::kConcatAll: return "Concat-All";
    case BaselineKind::kAuxViewAttention: return "Auxiliary-View Attention";
    case BaselineKind::kRandomSelection: return "Random-Selection";
    case BaselineKind::kDcpNet: return "DCP-Net";
  }
  return "unknown";
}

std::string_view fusion_type(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kNoInteraction: return "individual";
    case BaselineKind::kConcatAll:
    case BaselineKind::kAuxViewAttention: return "centralized";
    case BaselineKind::kRandomSelection:
    case BaselineKind::kDcpNet: return "distributed";
  }
  return "unknown";
}

BaselineKind parse_baseline(std::string_view name) {
  for (BaselineKind k :
       {BaselineKind::kNoInteraction, BaselineKind::kConcatAll,
        BaselineKind::kAuxViewAttention, BaselineKind::kRandomSelection,
        BaselineKind::kDcpNet}) {
    if (name == to_string(k)) return k;
  }
  throw InputError("unknown baseline '" + std::string(name) + "'");
}

std::size_t ModelConfig::resolved_embed_dim() const {
  return embed_dim ? embed_dim : backbone.feature_channels / 4;
}

void ModelConfig::validate() const {
  if (num_platforms < 2) throw ConfigError("need at least 2 platforms");
  if (backbone.num_classes < 2) throw ConfigError("need at least 2 classes");
  if (backbone.feature_channels == 0) throw ConfigError("feature_channels is 0");
  if (kind == BaselineKind::kDcpNet) {
    const std::size_t limit = allow_uncompressed_request ? qk_dim : qk_dim / 2;
    if (request_dim == 0 || request_dim > limit) {
      throw ConfigError("request_dim " + std::to_string(request_dim) +
                        " must be in [1, " + std::to_string(limit) +
                        "] (qk_dim " + std::to_string(qk_dim) + ")");
    }
    const std::size_t e = resolved_embed_dim();
    if (e == 0 || 4 * e > backbone.feature_channels) {
      throw ConfigError("embed_dim " + std::to_string(e) + " must be in [1, C/4]");
    }
  }
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = make_rng(seed, streams::kInit);
  ModelParams p;
  p.config = config;
  p.encoder = EncoderParams::init(config.backbone, rng);
  p.decoder = DecoderParams::init(config.backbone, rng);
  const std::size_t c = config.backbone.feature_channels;
  switch (config.kind) {
    case BaselineKind::kDcpNet:
      p.smim = SmimParams::init(c, config.qk_dim, config.request_dim, rng,
                                !config.allow_uncompressed_request);
      p.rff = RffParams::init(c, config.resolved_embed_dim(), rng);
      break;
    case BaselineKind::kConcatAll: {
      const std::size_t in = config.num_platforms * c;
      p.concat = ConcatHeadParams{glorot_uniform({in, c}, in, c, rng), Tensor({c})};
      break;
    }
    case BaselineKind::kAuxViewAttention:
      p.attention = AttentionHeadParams{glorot_uniform({c, c}, c, c, rng),
                                        glorot_uniform({c, c}, c, c, rng)};
      break;
    case BaselineKind::kNoInteraction:
    case BaselineKind::kRandomSelection:
      break;
  }
  return p;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

Var concat_all_fuse(Graph& g, std::span<const Var> features, std::size_t self,
                    const ConcatHeadParams& head) {
  if (self >= features.size()) throw InputError("concat_all_fuse: bad self index");
  std::vector<Var> ordered;
  ordered.reserve(features.size());
  ordered.push_back(features[self]);
  for (std::size_t j = 0; j < features.size(); ++j) {
    if (j != self) ordered.push_back(features[j]);
  }
  const Var stacked = concat(g, ordered, 2);
  return conv1x1(g, stacked, g.param(head.w), g.param(head.b));
}

Var aux_attention_fuse(Graph& g, std::span<const Var> features,
                       std::size_t self, const AttentionHeadParams& head) {
  if (self >= features.size()) {
    throw InputError("aux_attention_fuse: bad self index");
  }
  const Var query = matmul(g, mean_pool(g, features[self]), g.param(head.query_w));
  std::vector<Var> keys;
  for (Var f : features) {
    keys.push_back(matmul(g, mean_pool(g, f), g.param(head.key_w)));
  }
  const Var key_matrix = concat(g, keys, 0);  // N x C
  const Var weights =
      softmax(g, matmul(g, query, transpose(g, key_matrix)), 1);  // 1 x N
  std::optional<Var> out;
  for (std::size_t j = 0; j < features.size(); ++j) {
    const Var term = scale_by(g, features[j], pick(g, weights, j));
    out = out ? add(g, *out, term) : term;
  }
  return *out;
}

Var random_selection_fuse(Graph& g, Var local, Var chosen) {
  return add(g, local, chosen);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointName = "checkpoint.txt";
constexpr const char* kCheckpointHeader = "dcp-checkpoint 1";

std::string tensor_file(const std::string& key) {
  std::string f = key;
  for (char& ch : f) {
    if (ch == '.') ch = '_';
  }
  return f + ".dcpt";
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / kCheckpointName);
  if (!m) throw FormatError("cannot write checkpoint in " + dir.string());
  const ModelConfig& c = params.config;
  m << kCheckpointHeader << '\n'
    << "kind " << to_string(c.kind) << '\n'
    << "image_channels " << c.backbone.image_channels << '\n'
    << "stage_channels " << c.backbone.stage_channels[0] << ' '
    << c.backbone.stage_channels[1] << ' ' << c.backbone.stage_channels[2] << '\n'
    << "feature_channels " << c.backbone.feature_channels << '\n'
    << "classes " << c.backbone.num_classes << '\n'
    << "platforms " << c.num_platforms << '\n'
    << "qk_dim " << c.qk_dim << '\n'
    << "request_dim " << c.request_dim << '\n'
    << "embed_dim " << c.embed_dim << '\n'
    << "uncompressed_request " << (c.allow_uncompressed_request ? 1 : 0) << '\n';
  params.for_each([&](const std::string& key, const Tensor& t) {
    const std::string file = tensor_file(key);
    save_tensor(dir / file, t);
    m << "tensor " << key << ' ' << file << '\n';
  });
  if (!m) throw FormatError("failed writing checkpoint in " + dir.string());
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream m(dir / kCheckpointName);
  if (!m) throw FormatError("no checkpoint manifest in " + dir.string());
  std::string header;
  std::getline(m, header);
  if (header != kCheckpointHeader) {
    throw FormatError("unrecognised checkpoint header '" + header + "'");
  }
  ModelConfig c;
  std::map<std::string, std::string> files;
  std::string key;
  while (m >> key) {
    if (key == "kind") {
      std::string v;
      m >> v;
      c.kind = parse_baseline(v);
    } else if (key == "image_channels") {
      m >> c.backbone.image_channels;
    } else if (key == "stage_channels") {
      m >> c.backbone.stage_channels[0] >> c.backbone.stage_channels[1] >>
          c.backbone.stage_channels[2];
    } else if (key == "feature_channels") {
      m >> c.backbone.feature_channels;
    } else if (key == "classes") {
      m >> c.backbone.num_classes;
    } else if (key == "platforms") {
      m >> c.num_platforms;
    } else if (key == "qk_dim") {
      m >> c.qk_dim;
    } else if (key == "request_dim") {
      m >> c.request_dim;
    } else if (key == "embed_dim") {
      m >> c.embed_dim;
    } else if (key == "uncompressed_request") {
      m >> c.allow_uncompressed_request;
    } else if (key == "tensor") {
      std::string name, file;
      m >> name >> file;
      files[name] = file;
    } else {
      throw FormatError("unknown checkpoint field '" + key + "'");
    }
    if (!m) throw FormatError("truncated checkpoint field '" + key + "'");
  }
  ModelParams p = ModelParams::init(c, 0);
  p.for_each([&](const std::string& name, Tensor& t) {
    auto it = files.find(name);
    if (it == files.end()) {
      throw FormatError("checkpoint is missing tensor '" + name + "'");
    }
    Tensor loaded = load_tensor(dir / it->second);
    if (loaded.shape() != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_to_string(loaded.shape()) + ", expected " +
                        shape_to_string(t.shape()));
    }
    t = std::move(loaded);
  });
  return p;
}

}  // namespace dcp
