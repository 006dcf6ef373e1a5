#pragma once

#include <span>
#include <string>
#include <vector>

#include "smi/rng.hpp"
#include "smi/tensor/graph.hpp"
#include "smi/tensor/ops.hpp"
#include "smi/tensor/tensor.hpp"

namespace smi {

struct VitConfig {
  int image_size = 28;
  int channels = 1;
  int patch_size = 7;
  int embed_dim = 32;
  int num_heads = 4;
  int num_layers = 3;
  int ffn_hidden = 128;
  int num_classes = 10;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int head_dim() const { return embed_dim / num_heads; }
  int patch_dim() const { return patch_size * patch_size * channels; }

  // Throws InvalidArgument when the geometry is inconsistent.
  void validate() const;

  bool operator==(const VitConfig&) const = default;
};

template <typename T>
struct VitLayerParams {
  T ln1_gamma, ln1_beta;
  T wq, bq, wk, bk, wv, bv, wo, bo;
  T ln2_gamma, ln2_beta;
  T ffn1_w, ffn1_b, ffn2_w, ffn2_b;
};

/// Parameter set of the ViT, generic over the element type so the same layout
/// serves stored tensors and graph bindings.
template <typename T>
struct VitParams {
  T patch_w, patch_b;  // [P²C, D], [D]
  T cls_token;         // [D]
  T pos_embed;         // [L+1, D]; row 0 belongs to CLS
  std::vector<VitLayerParams<T>> layers;
  T norm_gamma, norm_beta;
  T head_w, head_b;  // [D, classes], [classes]
};

/// Calls f(name, a_member, b_member) for every parameter in a fixed order.
template <typename A, typename B, typename F>
void zip_parameters(A& a, B& b, F&& f) {
  f("patch_embed.weight", a.patch_w, b.patch_w);
  f("patch_embed.bias", a.patch_b, b.patch_b);
  f("cls_token", a.cls_token, b.cls_token);
  f("pos_embed", a.pos_embed, b.pos_embed);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    auto& la = a.layers[i];
    auto& lb = b.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "ln1.gamma", la.ln1_gamma, lb.ln1_gamma);
    f(p + "ln1.beta", la.ln1_beta, lb.ln1_beta);
    f(p + "attn.wq", la.wq, lb.wq);
    f(p + "attn.bq", la.bq, lb.bq);
    f(p + "attn.wk", la.wk, lb.wk);
    f(p + "attn.bk", la.bk, lb.bk);
    f(p + "attn.wv", la.wv, lb.wv);
    f(p + "attn.bv", la.bv, lb.bv);
    f(p + "attn.wo", la.wo, lb.wo);
    f(p + "attn.bo", la.bo, lb.bo);
    f(p + "ln2.gamma", la.ln2_gamma, lb.ln2_gamma);
    f(p + "ln2.beta", la.ln2_beta, lb.ln2_beta);
    f(p + "ffn1.weight", la.ffn1_w, lb.ffn1_w);
    f(p + "ffn1.bias", la.ffn1_b, lb.ffn1_b);
    f(p + "ffn2.weight", la.ffn2_w, lb.ffn2_w);
    f(p + "ffn2.bias", la.ffn2_b, lb.ffn2_b);
  }
  f("norm.gamma", a.norm_gamma, b.norm_gamma);
  f("norm.beta", a.norm_beta, b.norm_beta);
  f("head.weight", a.head_w, b.head_w);
  f("head.bias", a.head_b, b.head_b);
}

template <typename P, typename F>
void visit_parameters(P& params, F&& f) {
  zip_parameters(params, params, [&](const std::string& name, auto& x, auto&) { f(name, x); });
}

/// True for the weight matrices of linear maps (the quantized weight set).
bool is_linear_weight(const std::string& name);
/// True for parameters belonging to the classifier head (the linear-probe set).
bool is_head_parameter(const std::string& name);

struct VitModel {
  VitConfig config;
  VitParams<Tensor> params;

  /// Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains.
  static VitModel init(const VitConfig& config, Rng& rng, double stddev = 0.02);

  // Rounds every parameter to the nearest float, the checkpoint storage precision.
  void round_to_float();
  bool all_finite() const;
  std::size_t parameter_count() const;
};

bool bit_equal(const VitModel& a, const VitModel& b);

using ModelVars = VitParams<Var<double>>;

/// Binds every parameter of `model` into `graph` without copying.
ModelVars bind_parameters(const VitModel& model, Graph<double>& graph, bool requires_grad);

// ---------------------------------------------------------------------------
// Patches

/// [H,W,C] image -> [L, P²C]; row i is the patch at grid (i / (W/P), i % (W/P)),
/// flattened rows-then-cols-then-channels.
Tensor patchify(const Tensor& image, int patch_size);
Tensor unpatchify(const Tensor& patches, int height, int width, int channels, int patch_size);
/// Rows of patchify(image) for the given 0-based patch indices, in that order.
Tensor gather_patches(const Tensor& image, int patch_size, std::span<const Index> indices);
std::vector<Index> all_patches(const VitConfig& config);

// ---------------------------------------------------------------------------
// Forward

/// Activation sites observed by quantization hooks. Layer is -1 for the
/// embedding and classifier inputs.
enum class Site { EmbedIn, QkvIn, AttnQ, AttnK, AttnProbs, AttnV, ProjIn, Ffn1In, Ffn2In, HeadIn };

struct SiteId {
  int layer;
  Site site;
  std::string name() const;
};

/// Every activation site of a model, in forward order.
std::vector<SiteId> activation_sites(const VitConfig& config);
/// Dense slot for a site in [0, activation_sites(config).size()).
std::size_t site_slot(const VitConfig& config, const SiteId& id);

class ActivationHook {
 public:
  virtual ~ActivationHook() = default;
  /// Returns the activation to use downstream (possibly transformed).
  virtual Var<double> on_activation(const SiteId& site, const Var<double>& x) = 0;
};

/// Attention maps of one forward: maps[layer][head] is (n+1)x(n+1) over
/// [CLS, retained...].
struct AttentionRecord {
  std::vector<Index> retained;
  int num_layers = 0;
  std::vector<std::vector<RowMatrix<double>>> maps;
  bool final_layer_only = false;
};

struct ForwardOptions {
  ActivationHook* hook = nullptr;
  bool record_all_layers = true;
};

struct ForwardResult {
  Var<double> logits;  // [1, classes]
  AttentionRecord record;
};

/// Forward over the retained patch subset. `patches` holds one row per entry
/// of `retained` (0-based patch indices). Position embeddings are applied per
/// patch before any layer sees the tokens, so the result equals embedding the
/// full image, adding position embeddings, then dropping pruned tokens.
ForwardResult forward(const VitConfig& config, const ModelVars& params, const Var<double>& patches,
                      std::span<const Index> retained, const ForwardOptions& options = {});

struct Prediction {
  Tensor logits;  // [1, classes]
  AttentionRecord record;
  MacCounter macs;
};

/// Inference-only forward over an [H,W,C] image restricted to `retained`.
Prediction predict(const VitModel& model, const Tensor& image, std::span<const Index> retained,
                   const ForwardOptions& options = {});
Prediction predict(const VitModel& model, const Tensor& image, const ForwardOptions& options = {});

/// Head-averaged final-layer CLS attention over the retained patches (CLS
/// self-weight dropped), indexed in retained order.
Tensor cls_attention(const AttentionRecord& record);

int argmax(const Tensor& logits);

}  // namespace smi
