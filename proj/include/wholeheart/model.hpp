#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/graph.hpp"
#include "wholeheart/rng.hpp"
#include "wholeheart/tensor.hpp"
#include "wholeheart/tokenizer.hpp"

namespace wholeheart {

struct ModelConfig {
  int64_t image = 64;   // plane extent (H = W)
  int64_t frames = 50;  // T
  int64_t patch_spatial = 8;
  int64_t patch_temporal = 25;
  int64_t sa_planes = 6;
  int64_t la_planes = 3;
  int64_t dim = 128;
  int64_t heads = 4;
  int64_t enc_layers = 4;
  int64_t dec_dim = 64;
  int64_t dec_heads = 4;
  int64_t dec_layers = 2;
  int64_t mlp_ratio = 4;
  double mask_ratio = 0.7;

  int64_t patch_dim() const { return patch_spatial * patch_spatial * patch_temporal; }
  int64_t grid_xy() const { return image / patch_spatial; }
  int64_t grid_t() const { return frames / patch_temporal; }
  int64_t tokens_per_plane() const { return grid_xy() * grid_xy() * grid_t(); }
  int64_t total_planes() const { return sa_planes + la_planes; }
  int64_t total_tokens() const { return total_planes() * tokens_per_plane(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (image <= 0 || frames <= 0 || dim <= 0 || dec_dim <= 0) fail("non-positive extent");
    if (sa_planes < 0 || la_planes < 0 || total_planes() == 0) fail("no planes");
    if (image % patch_spatial != 0) fail("image extent not divisible by spatial patch");
    if (frames % patch_temporal != 0) fail("frames not divisible by temporal patch");
    if (dim % heads != 0) fail("dim not divisible by heads");
    if (dec_dim % dec_heads != 0) fail("decoder dim not divisible by decoder heads");
    if (dim % 8 != 0 || dec_dim % 8 != 0) fail("embedding dims must be divisible by 8");
    if (enc_layers <= 0 || dec_layers <= 0 || mlp_ratio <= 0) fail("non-positive depth");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) fail("mask ratio outside [0, 1)");
  }
};

template <typename T>
struct LinearT {
  TensorT<T> w, b;  // w: {in, out}, b: {1, out}

  static LinearT init(int64_t in, int64_t out, Rng& rng) {
    LinearT l;
    l.w = TensorT<T>::trunc_normal({in, out}, rng, 0.02);
    l.b = TensorT<T>::zeros({1, out});
    return l;
  }
};

template <typename T>
struct NormT {
  TensorT<T> g, b;

  static NormT init(int64_t d) {
    NormT n;
    n.g = TensorT<T>::full({1, d}, T(1));
    n.b = TensorT<T>::zeros({1, d});
    return n;
  }
};

template <typename T>
struct BlockT {
  NormT<T> ln1;
  LinearT<T> wq, wk, wv, wo;
  NormT<T> ln2;
  LinearT<T> fc1, fc2;

  static BlockT init(int64_t dim, int64_t mlp_ratio, Rng& rng) {
    BlockT b;
    b.ln1 = NormT<T>::init(dim);
    b.wq = LinearT<T>::init(dim, dim, rng);
    b.wk = LinearT<T>::init(dim, dim, rng);
    b.wv = LinearT<T>::init(dim, dim, rng);
    b.wo = LinearT<T>::init(dim, dim, rng);
    b.ln2 = NormT<T>::init(dim);
    b.fc1 = LinearT<T>::init(dim, dim * mlp_ratio, rng);
    b.fc2 = LinearT<T>::init(dim * mlp_ratio, dim, rng);
    return b;
  }
};

template <typename T>
struct EncoderT {
  std::vector<BlockT<T>> blocks;
  NormT<T> norm;

  static EncoderT init(int64_t dim, int64_t layers, int64_t mlp_ratio, Rng& rng) {
    EncoderT e;
    for (int64_t i = 0; i < layers; ++i) e.blocks.push_back(BlockT<T>::init(dim, mlp_ratio, rng));
    e.norm = NormT<T>::init(dim);
    return e;
  }
};

template <typename T>
struct MaeModelT {
  ModelConfig cfg;
  LinearT<T> patch_embed;
  EncoderT<T> encoder;
  LinearT<T> dec_embed;
  TensorT<T> mask_token;  // {1, dec_dim}
  EncoderT<T> decoder;
  LinearT<T> out_head;

  static MaeModelT init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cull));
    MaeModelT m;
    m.cfg = cfg;
    m.patch_embed = LinearT<T>::init(cfg.patch_dim(), cfg.dim, rng);
    m.encoder = EncoderT<T>::init(cfg.dim, cfg.enc_layers, cfg.mlp_ratio, rng);
    m.dec_embed = LinearT<T>::init(cfg.dim, cfg.dec_dim, rng);
    m.mask_token = TensorT<T>::randn({1, cfg.dec_dim}, rng, 0.02);
    m.decoder = EncoderT<T>::init(cfg.dec_dim, cfg.dec_layers, cfg.mlp_ratio, rng);
    m.out_head = LinearT<T>::init(cfg.dec_dim, cfg.patch_dim(), rng);
    return m;
  }
};

namespace detail {

template <typename T, class F>
void visit_linear(LinearT<T>& l, const std::string& name, F&& f) {
  f(name + ".w", l.w);
  f(name + ".b", l.b);
}

template <typename T, class F>
void visit_norm(NormT<T>& n, const std::string& name, F&& f) {
  f(name + ".g", n.g);
  f(name + ".b", n.b);
}

template <typename T, class F>
void visit_block(BlockT<T>& b, const std::string& name, F&& f) {
  visit_norm(b.ln1, name + ".ln1", f);
  visit_linear(b.wq, name + ".q", f);
  visit_linear(b.wk, name + ".k", f);
  visit_linear(b.wv, name + ".v", f);
  visit_linear(b.wo, name + ".o", f);
  visit_norm(b.ln2, name + ".ln2", f);
  visit_linear(b.fc1, name + ".fc1", f);
  visit_linear(b.fc2, name + ".fc2", f);
}

template <typename T, class F>
void visit_encoder(EncoderT<T>& e, const std::string& name, F&& f) {
  for (size_t i = 0; i < e.blocks.size(); ++i) {
    visit_block(e.blocks[i], name + "." + std::to_string(i), f);
  }
  visit_norm(e.norm, name + ".norm", f);
}

}  // namespace detail

// Enumerates every parameter in a fixed order; names are the checkpoint keys.
template <typename T, class F>
void visit_params(MaeModelT<T>& m, F&& f) {
  detail::visit_linear(m.patch_embed, "patch_embed", f);
  detail::visit_encoder(m.encoder, "enc", f);
  detail::visit_linear(m.dec_embed, "dec_embed", f);
  f(std::string("mask_token"), m.mask_token);
  detail::visit_encoder(m.decoder, "dec", f);
  detail::visit_linear(m.out_head, "out_head", f);
}

// Encoder parameters only: the subset transferred into Phase II.
template <typename T, class F>
void visit_encoder_params(MaeModelT<T>& m, F&& f) {
  detail::visit_linear(m.patch_embed, "patch_embed", f);
  detail::visit_encoder(m.encoder, "enc", f);
}

template <typename T>
int64_t param_count(MaeModelT<T>& m) {
  int64_t n = 0;
  visit_params(m, [&](const std::string&, TensorT<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
typename GraphT<T>::NodeId linear(GraphT<T>& g, LinearT<T>& l,
                                  typename GraphT<T>::NodeId x) {
  return g.add(g.matmul(x, g.param(&l.w)), g.param(&l.b));
}

template <typename T>
typename GraphT<T>::NodeId block_forward(GraphT<T>& g, BlockT<T>& blk,
                                         typename GraphT<T>::NodeId x, int64_t heads) {
  using NodeId = typename GraphT<T>::NodeId;
  int64_t dim = blk.wq.w.rows();
  int64_t dh = dim / heads;

  NodeId xn = g.layer_norm(x, g.param(&blk.ln1.g), g.param(&blk.ln1.b));
  NodeId q = linear(g, blk.wq, xn);
  NodeId k = linear(g, blk.wk, xn);
  NodeId v = linear(g, blk.wv, xn);

  NodeId ctx = -1;
  for (int64_t h = 0; h < heads; ++h) {
    NodeId qh = g.slice(q, 1, h * dh, dh);
    NodeId kh = g.slice(k, 1, h * dh, dh);
    NodeId vh = g.slice(v, 1, h * dh, dh);
    NodeId scores = g.scale(g.matmul(qh, kh, true), 1.0 / std::sqrt(double(dh)));
    NodeId att = g.softmax(scores);
    NodeId ch = g.matmul(att, vh);
    ctx = h == 0 ? ch : g.concat(ctx, ch, 1);
  }
  x = g.add(x, linear(g, blk.wo, ctx));

  NodeId xm = g.layer_norm(x, g.param(&blk.ln2.g), g.param(&blk.ln2.b));
  NodeId mlp = linear(g, blk.fc2, g.gelu(linear(g, blk.fc1, xm)));
  return g.add(x, mlp);
}

template <typename T>
struct EncodedSeq {
  typename GraphT<T>::NodeId normed = -1;  // after the final norm
  std::vector<typename GraphT<T>::NodeId> after_block;
};

template <typename T>
EncodedSeq<T> encoder_forward(GraphT<T>& g, EncoderT<T>& enc,
                              typename GraphT<T>::NodeId x, int64_t heads,
                              const char* label = "enc") {
  EncodedSeq<T> out;
  for (size_t i = 0; i < enc.blocks.size(); ++i) {
    g.set_context(std::string(label) + " block " + std::to_string(i));
    x = block_forward(g, enc.blocks[i], x, heads);
    out.after_block.push_back(x);
  }
  g.set_context(std::string(label) + " norm");
  out.normed = g.layer_norm(x, g.param(&enc.norm.g), g.param(&enc.norm.b));
  return out;
}

// embedding = linear(patch values) + positional(index); no class token.
template <typename T>
typename GraphT<T>::NodeId embed_tokens(GraphT<T>& g, MaeModelT<T>& m,
                                        const TokenBatch& batch) {
  if (batch.patch_dim() != m.cfg.patch_dim()) {
    throw ConfigError("token patch_dim " + std::to_string(batch.patch_dim()) +
                      " does not match model " + std::to_string(m.cfg.patch_dim()));
  }
  auto vals = g.input(batch.values.template cast<T>());
  auto pos = g.input(positional_embedding_rows(batch.indices, m.cfg.dim).template cast<T>());
  return g.add(linear(g, m.patch_embed, vals), pos);
}

// Full Phase-I forward from kept tokens to the reconstructed token matrix,
// ordered as the original token sequence.
template <typename T>
struct PretrainForward {
  typename GraphT<T>::NodeId latents = -1;  // encoder output on kept tokens
  typename GraphT<T>::NodeId pred = -1;     // n_tokens x patch_dim
};

template <typename T>
PretrainForward<T> mae_forward(GraphT<T>& g, MaeModelT<T>& m, const TokenBatch& full,
                               const MaskPlan& plan) {
  using NodeId = typename GraphT<T>::NodeId;
  if (int64_t(plan.kept.size() + plan.masked.size()) != full.n_tokens()) {
    throw ConfigError("mask plan does not cover the token batch");
  }
  TokenBatch kept = apply_mask(full, plan);

  g.set_context("patch embedding");
  NodeId emb = embed_tokens(g, m, kept);
  EncodedSeq<T> enc = encoder_forward(g, m.encoder, emb, m.cfg.heads, "enc");

  g.set_context("decoder embed");
  NodeId d = linear(g, m.dec_embed, enc.normed);
  int64_t n = full.n_tokens();
  NodeId seq;
  if (plan.masked.empty()) {
    seq = g.scatter_rows(d, plan.kept, n);
  } else {
    NodeId kept_sc = g.scatter_rows(d, plan.kept, n);
    NodeId mask_rep = g.repeat_rows(g.param(&m.mask_token), int64_t(plan.masked.size()));
    NodeId mask_sc = g.scatter_rows(mask_rep, plan.masked, n);
    seq = g.add(kept_sc, mask_sc);
  }
  auto dec_pos = positional_embedding_rows(full.indices, m.cfg.dec_dim);
  seq = g.add(seq, g.input(dec_pos.template cast<T>()));

  EncodedSeq<T> dec = encoder_forward(g, m.decoder, seq, m.cfg.dec_heads, "dec");
  g.set_context("reconstruction head");

  PretrainForward<T> out;
  out.latents = enc.normed;
  out.pred = linear(g, m.out_head, dec.normed);
  return out;
}

enum class LossScope { kAll, kMasked };

inline LossScope loss_scope_from_string(const std::string& s) {
  if (s == "all") return LossScope::kAll;
  if (s == "masked") return LossScope::kMasked;
  throw ConfigError("loss scope must be 'all' or 'masked', got '" + s + "'");
}

template <typename T>
typename GraphT<T>::NodeId pretrain_loss(GraphT<T>& g, typename GraphT<T>::NodeId pred,
                                         const TokenBatch& full, const MaskPlan& plan,
                                         LossScope scope) {
  auto x = g.input(full.values.template cast<T>());
  if (scope == LossScope::kAll) return g.mse(pred, x);
  if (plan.masked.empty()) {
    throw ConfigError("scope=masked with an empty masked set");
  }
  auto pm = g.gather_rows(pred, plan.masked);
  auto xm = g.gather_rows(x, plan.masked);
  return g.mse(pm, xm);
}

// Arithmetic mean over token rows.
template <typename T>
typename GraphT<T>::NodeId pooled_representation(GraphT<T>& g,
                                                 typename GraphT<T>::NodeId latents) {
  return g.mean_rows(latents);
}

// Phase-II forward over the full (unmasked) token set.
template <typename T>
EncodedSeq<T> encode_full(GraphT<T>& g, MaeModelT<T>& m, const TokenBatch& full) {
  g.set_context("patch embedding");
  auto emb = embed_tokens(g, m, full);
  return encoder_forward(g, m.encoder, emb, m.cfg.heads, "enc");
}

}  // namespace wholeheart
