#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "dcp/perception_net.h"
#include "dcp/rff.h"
#include "dcp/smim.h"

namespace dcp {

// Fusion policy a model is trained and evaluated with.
enum class BaselineKind {
  kNoInteraction,
  kConcatAll,
  kAuxViewAttention,
  kRandomSelection,
  kDcpNet,
};

std::string_view to_string(BaselineKind kind);
BaselineKind parse_baseline(std::string_view name);
// Row label used in report tables.
std::string_view display_name(BaselineKind kind);
// individual, centralized or distributed.
std::string_view fusion_type(BaselineKind kind);

struct ModelConfig {
  BaselineKind kind = BaselineKind::kDcpNet;
  BackboneConfig backbone;
  std::size_t num_platforms = 4;
  std::size_t qk_dim = 128;
  std::size_t request_dim = 32;
  // Admits request_dim up to qk_dim; used by the request-size sweep.
  bool allow_uncompressed_request = false;
  // C' of the RFF embeddings; 0 means C / 4.
  std::size_t embed_dim = 0;

  std::size_t resolved_embed_dim() const;
  void validate() const;
};

// Channel concatenation of all N features reduced back to C.
struct ConcatHeadParams {
  Tensor w, b;  // N*C x C, C

  template <class F>
  void for_each(F&& f) {
    f("w", w);
    f("b", b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("w", w);
    f("b", b);
  }
};

// Scalar attention over platforms from pooled-feature dot products.
struct AttentionHeadParams {
  Tensor query_w, key_w;  // C x C

  template <class F>
  void for_each(F&& f) {
    f("query_w", query_w);
    f("key_w", key_w);
  }
  template <class F>
  void for_each(F&& f) const {
    f("query_w", query_w);
    f("key_w", key_w);
  }
};

struct ModelParams {
  ModelConfig config;
  EncoderParams encoder;
  DecoderParams decoder;
  std::optional<SmimParams> smim;
  std::optional<RffParams> rff;
  std::optional<ConcatHeadParams> concat;
  std::optional<AttentionHeadParams> attention;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  // Visits every tensor with a stable dotted name, e.g. "encoder.conv1_w".
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;

 private:
  template <class Self, class F>
  static void visit(Self& p, F& f) {
    auto prefixed = [&f](const char* prefix) {
      return [&f, prefix](const char* name, auto& t) {
        f(std::string(prefix) + "." + name, t);
      };
    };
    p.encoder.for_each(prefixed("encoder"));
    p.decoder.for_each(prefixed("decoder"));
    if (p.smim) p.smim->for_each(prefixed("smim"));
    if (p.rff) p.rff->for_each(prefixed("rff"));
    if (p.concat) p.concat->for_each(prefixed("concat"));
    if (p.attention) p.attention->for_each(prefixed("attention"));
  }
};

// Fusion heads of the comparison policies. `features` holds every
// platform's feature in platform order; `self` is the fusing platform.
Var concat_all_fuse(Graph& g, std::span<const Var> features, std::size_t self,
                    const ConcatHeadParams& head);
Var aux_attention_fuse(Graph& g, std::span<const Var> features,
                       std::size_t self, const AttentionHeadParams& head);
Var random_selection_fuse(Graph& g, Var local, Var chosen);

// Directory holding checkpoint.txt (config + key -> file) and DCPT tensors.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir);
ModelParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace dcp
