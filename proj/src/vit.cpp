#include "smi/vit.hpp"

#include <algorithm>
#include <cmath>

namespace smi {

void VitConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "VitConfig: " + what); };
  if (image_size <= 0 || channels <= 0 || patch_size <= 0) fail("sizes must be positive");
  if (image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    fail("embed_dim must be a positive multiple of num_heads");
  }
  if (num_layers <= 0 || ffn_hidden <= 0) fail("num_layers and ffn_hidden must be positive");
  if (num_classes < 2) fail("need at least two classes");
}

bool is_linear_weight(const std::string& name) {
  return name == "patch_embed.weight" || name == "head.weight" ||
         (name.find(".attn.w") != std::string::npos) || name.ends_with("ffn1.weight") ||
         name.ends_with("ffn2.weight");
}

bool is_head_parameter(const std::string& name) { return name.starts_with("head."); }

VitModel VitModel::init(const VitConfig& config, Rng& rng, double stddev) {
  config.validate();
  const Index d = config.embed_dim;
  const Index f = config.ffn_hidden;
  VitModel m;
  m.config = config;
  auto& p = m.params;
  auto ones = [](Index n) { return Tensor(Shape{n}, RowMatrix<double>::Ones(1, n)); };
  auto zeros = [](Index n) { return Tensor(Shape{n}); };
  p.patch_w = trunc_normal({config.patch_dim(), d}, rng, stddev);
  p.patch_b = zeros(d);
  p.cls_token = trunc_normal({d}, rng, stddev);
  p.pos_embed = trunc_normal({config.num_patches() + 1, d}, rng, stddev);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& l : p.layers) {
    l.ln1_gamma = ones(d);
    l.ln1_beta = zeros(d);
    l.wq = trunc_normal({d, d}, rng, stddev);
    l.bq = zeros(d);
    l.wk = trunc_normal({d, d}, rng, stddev);
    l.bk = zeros(d);
    l.wv = trunc_normal({d, d}, rng, stddev);
    l.bv = zeros(d);
    l.wo = trunc_normal({d, d}, rng, stddev);
    l.bo = zeros(d);
    l.ln2_gamma = ones(d);
    l.ln2_beta = zeros(d);
    l.ffn1_w = trunc_normal({d, f}, rng, stddev);
    l.ffn1_b = zeros(f);
    l.ffn2_w = trunc_normal({f, d}, rng, stddev);
    l.ffn2_b = zeros(d);
  }
  p.norm_gamma = ones(d);
  p.norm_beta = zeros(d);
  p.head_w = trunc_normal({d, config.num_classes}, rng, stddev);
  p.head_b = zeros(config.num_classes);
  return m;
}

void VitModel::round_to_float() {
  visit_parameters(params, [](const std::string&, Tensor& t) {
    for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  });
}

bool VitModel::all_finite() const {
  bool ok = true;
  visit_parameters(params, [&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

std::size_t VitModel::parameter_count() const {
  std::size_t n = 0;
  visit_parameters(params, [&](const std::string&, const Tensor& t) { n += static_cast<std::size_t>(t.numel()); });
  return n;
}

bool bit_equal(const VitModel& a, const VitModel& b) {
  if (!(a.config == b.config) || a.params.layers.size() != b.params.layers.size()) return false;
  bool eq = true;
  zip_parameters(a.params, b.params,
                 [&](const std::string&, const Tensor& x, const Tensor& y) { eq = eq && bit_equal(x, y); });
  return eq;
}

ModelVars bind_parameters(const VitModel& model, Graph<double>& graph, bool requires_grad) {
  ModelVars vars;
  vars.layers.resize(model.params.layers.size());
  zip_parameters(model.params, vars, [&](const std::string&, const Tensor& t, Var<double>& v) {
    v = graph.param(t, requires_grad);
  });
  return vars;
}

// ---------------------------------------------------------------------------

namespace {

void check_image(const Tensor& image, int patch_size) {
  if (image.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "image must be [H,W,C]");
  if (patch_size <= 0 || image.dim(0) % patch_size != 0 || image.dim(1) % patch_size != 0) {
    throw Error(ErrorCode::ShapeMismatch, "image " + shape_string(image.shape()) +
                                              " not divisible into patches of " + std::to_string(patch_size));
  }
}

void copy_patch(const Tensor& image, int patch_size, Index patch, double* out) {
  const Index w = image.dim(1), c = image.dim(2);
  const Index gw = w / patch_size;
  const Index r0 = (patch / gw) * patch_size;
  const Index c0 = (patch % gw) * patch_size;
  const double* src = image.data();
  for (Index r = 0; r < patch_size; ++r) {
    const double* row = src + ((r0 + r) * w + c0) * c;
    std::copy(row, row + patch_size * c, out);
    out += patch_size * c;
  }
}

}  // namespace

Tensor patchify(const Tensor& image, int patch_size) {
  check_image(image, patch_size);
  const Index gh = image.dim(0) / patch_size, gw = image.dim(1) / patch_size;
  std::vector<Index> idx(static_cast<std::size_t>(gh * gw));
  for (Index i = 0; i < gh * gw; ++i) idx[static_cast<std::size_t>(i)] = i;
  return gather_patches(image, patch_size, idx);
}

Tensor gather_patches(const Tensor& image, int patch_size, std::span<const Index> indices) {
  check_image(image, patch_size);
  const Index count = (image.dim(0) / patch_size) * (image.dim(1) / patch_size);
  const Index pd = static_cast<Index>(patch_size) * patch_size * image.dim(2);
  Tensor out(Shape{static_cast<Index>(indices.size()), pd});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= count) {
      throw Error(ErrorCode::ShapeMismatch, "patch index " + std::to_string(indices[i]) + " out of range");
    }
    copy_patch(image, patch_size, indices[i], out.data() + static_cast<Index>(i) * pd);
  }
  return out;
}

Tensor unpatchify(const Tensor& patches, int height, int width, int channels, int patch_size) {
  if (patch_size <= 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw Error(ErrorCode::ShapeMismatch, "unpatchify: image not divisible by patch size");
  }
  const Index gw = width / patch_size;
  const Index count = (height / patch_size) * gw;
  const Index pd = static_cast<Index>(patch_size) * patch_size * channels;
  if (patches.rank() != 2 || patches.dim(0) != count || patches.dim(1) != pd) {
    throw Error(ErrorCode::ShapeMismatch, "unpatchify: patches shape " + shape_string(patches.shape()));
  }
  Tensor image(Shape{height, width, channels});
  for (Index p = 0; p < count; ++p) {
    const Index r0 = (p / gw) * patch_size, c0 = (p % gw) * patch_size;
    const double* src = patches.data() + p * pd;
    for (Index r = 0; r < patch_size; ++r) {
      std::copy(src, src + patch_size * channels, image.data() + ((r0 + r) * width + c0) * channels);
      src += patch_size * channels;
    }
  }
  return image;
}

std::vector<Index> all_patches(const VitConfig& config) {
  std::vector<Index> idx(static_cast<std::size_t>(config.num_patches()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  return idx;
}

// ---------------------------------------------------------------------------

std::string SiteId::name() const {
  const char* s = "";
  switch (site) {
    case Site::EmbedIn: return "embed_in";
    case Site::HeadIn: return "head_in";
    case Site::QkvIn: s = "qkv_in"; break;
    case Site::AttnQ: s = "attn_q"; break;
    case Site::AttnK: s = "attn_k"; break;
    case Site::AttnProbs: s = "attn_probs"; break;
    case Site::AttnV: s = "attn_v"; break;
    case Site::ProjIn: s = "proj_in"; break;
    case Site::Ffn1In: s = "ffn1_in"; break;
    case Site::Ffn2In: s = "ffn2_in"; break;
  }
  return "layers." + std::to_string(layer) + "." + s;
}

namespace {
constexpr Site kLayerSites[] = {Site::QkvIn, Site::AttnQ,  Site::AttnK,  Site::AttnProbs,
                                Site::AttnV, Site::ProjIn, Site::Ffn1In, Site::Ffn2In};
constexpr std::size_t kSitesPerLayer = std::size(kLayerSites);
}  // namespace

std::vector<SiteId> activation_sites(const VitConfig& config) {
  std::vector<SiteId> out;
  out.push_back({-1, Site::EmbedIn});
  for (int l = 0; l < config.num_layers; ++l) {
    for (Site s : kLayerSites) out.push_back({l, s});
  }
  out.push_back({-1, Site::HeadIn});
  return out;
}

std::size_t site_slot(const VitConfig& config, const SiteId& id) {
  if (id.site == Site::EmbedIn) return 0;
  if (id.site == Site::HeadIn) return 1 + kSitesPerLayer * static_cast<std::size_t>(config.num_layers);
  std::size_t k = 0;
  while (kLayerSites[k] != id.site) ++k;
  return 1 + kSitesPerLayer * static_cast<std::size_t>(id.layer) + k;
}

ForwardResult forward(const VitConfig& config, const ModelVars& p, const Var<double>& patches,
                      std::span<const Index> retained, const ForwardOptions& options) {
  if (retained.empty()) throw Error(ErrorCode::EmptyRetained, "forward needs at least one patch");
  if (patches.rows() != static_cast<Index>(retained.size()) || patches.cols() != config.patch_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "patches " + shape_string(patches.shape()) + " vs " +
                                              std::to_string(retained.size()) + " retained");
  }
  auto hook = [&](int layer, Site site, const Var<double>& x) {
    return options.hook ? options.hook->on_activation(SiteId{layer, site}, x) : x;
  };

  std::vector<Index> pos_rows(retained.size());
  const Index num_patches = config.num_patches();
  for (std::size_t i = 0; i < retained.size(); ++i) {
    if (retained[i] < 0 || retained[i] >= num_patches) {
      throw Error(ErrorCode::ShapeMismatch, "retained index out of range");
    }
    pos_rows[i] = retained[i] + 1;
  }
  const Index cls_row[] = {0};

  Var<double> tok = matmul(hook(-1, Site::EmbedIn, patches), p.patch_w, MacTag::Embed);
  tok = add_row_broadcast(tok, p.patch_b);
  tok = tok + gather_rows(p.pos_embed, std::span<const Index>(pos_rows));
  Var<double> cls = add_row_broadcast(gather_rows(p.pos_embed, std::span<const Index>(cls_row)), p.cls_token);
  Var<double> x = concat_rows(cls, tok);

  ForwardResult result;
  result.record.retained.assign(retained.begin(), retained.end());
  result.record.num_layers = config.num_layers;
  result.record.final_layer_only = !options.record_all_layers;
  result.record.maps.resize(static_cast<std::size_t>(config.num_layers));

  const int heads = config.num_heads;
  const Index hd = config.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var<double>> head_out(static_cast<std::size_t>(heads));

  for (int li = 0; li < config.num_layers; ++li) {
    const auto& L = p.layers[static_cast<std::size_t>(li)];
    const bool keep = options.record_all_layers || li + 1 == config.num_layers;

    Var<double> h = hook(li, Site::QkvIn, layernorm(x, L.ln1_gamma, L.ln1_beta));
    Var<double> q = hook(li, Site::AttnQ, add_row_broadcast(matmul(h, L.wq, MacTag::Qkv), L.bq));
    Var<double> k = hook(li, Site::AttnK, add_row_broadcast(matmul(h, L.wk, MacTag::Qkv), L.bk));
    Var<double> v = hook(li, Site::AttnV, add_row_broadcast(matmul(h, L.wv, MacTag::Qkv), L.bv));

    auto& maps = result.record.maps[static_cast<std::size_t>(li)];
    if (keep) maps.reserve(static_cast<std::size_t>(heads));
    for (int hi = 0; hi < heads; ++hi) {
      Var<double> qh = slice_cols(q, hi * hd, hd);
      Var<double> kh = slice_cols(k, hi * hd, hd);
      Var<double> vh = slice_cols(v, hi * hd, hd);
      Var<double> attn = softmax_lastdim(scale(matmul_nt(qh, kh, MacTag::Attention), inv_sqrt_d));
      if (keep) maps.push_back(attn.value());
      attn = hook(li, Site::AttnProbs, attn);
      head_out[static_cast<std::size_t>(hi)] = matmul(attn, vh, MacTag::Attention);
    }
    Var<double> o = hook(li, Site::ProjIn, concat_cols(std::span<const Var<double>>(head_out)));
    x = x + add_row_broadcast(matmul(o, L.wo, MacTag::Proj), L.bo);

    Var<double> h2 = hook(li, Site::Ffn1In, layernorm(x, L.ln2_gamma, L.ln2_beta));
    Var<double> f = gelu(add_row_broadcast(matmul(h2, L.ffn1_w, MacTag::Ffn), L.ffn1_b));
    f = hook(li, Site::Ffn2In, f);
    x = x + add_row_broadcast(matmul(f, L.ffn2_w, MacTag::Ffn), L.ffn2_b);
  }

  x = layernorm(x, p.norm_gamma, p.norm_beta);
  Var<double> c = hook(-1, Site::HeadIn, gather_rows(x, std::span<const Index>(cls_row)));
  result.logits = add_row_broadcast(matmul(c, p.head_w, MacTag::Head), p.head_b);
  return result;
}

Prediction predict(const VitModel& model, const Tensor& image, std::span<const Index> retained,
                   const ForwardOptions& options) {
  Graph<double> g;
  g.set_grad_enabled(false);
  ModelVars vars = bind_parameters(model, g, false);
  Var<double> patches = g.leaf(gather_patches(image, model.config.patch_size, retained));
  ForwardResult r = forward(model.config, vars, patches, retained, options);
  Prediction out;
  out.logits = r.logits.tensor();
  out.logits.node_id.reset();
  out.record = std::move(r.record);
  out.macs = g.macs();
  return out;
}

Prediction predict(const VitModel& model, const Tensor& image, const ForwardOptions& options) {
  const auto all = all_patches(model.config);
  return predict(model, image, all, options);
}

Tensor cls_attention(const AttentionRecord& record) {
  if (record.maps.empty() || record.maps.back().empty()) {
    throw Error(ErrorCode::StaleAttention, "attention record has no final-layer maps");
  }
  const auto& finals = record.maps.back();
  const Index n = finals.front().cols() - 1;
  RowMatrix<double> acc = RowMatrix<double>::Zero(1, n);
  for (const auto& a : finals) acc += a.block(0, 1, 1, n);
  acc /= static_cast<double>(finals.size());
  return Tensor(Shape{n}, std::move(acc));
}

int argmax(const Tensor& logits) {
  const auto v = logits.values();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace smi
