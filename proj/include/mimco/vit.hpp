#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimco/image.hpp"
#include "mimco/linalg.hpp"
#include "mimco/masking.hpp"
#include "mimco/nn.hpp"
#include "mimco/rng.hpp"

namespace mimco {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int image_h = 64;
  int image_w = 64;
  int in_channels = 3;
  int token_patch = 16;  // pixels per token side
  int embed_dim = 96;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  double dropout = 0.0;    // MLP hidden dropout rate
  double drop_path = 0.0;  // residual branch drop rate
  double ln_eps = 1e-5;

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || in_channels <= 0)
      throw std::invalid_argument("encoder: image dims and channels must be positive");
    if (token_patch <= 0) throw std::invalid_argument("encoder: token_patch must be positive");
    if (image_h % token_patch != 0 || image_w % token_patch != 0)
      throw std::invalid_argument("encoder: image size must be divisible by token_patch");
    if (embed_dim <= 0 || depth < 1 || heads < 1)
      throw std::invalid_argument("encoder: embed_dim, depth and heads must be positive");
    if (embed_dim % heads != 0)
      throw std::invalid_argument("encoder: embed_dim must be divisible by heads");
    if (mlp_ratio <= 0.0) throw std::invalid_argument("encoder: mlp_ratio must be positive");
    if (dropout < 0.0 || dropout >= 1.0 || drop_path < 0.0 || drop_path >= 1.0)
      throw std::invalid_argument("encoder: dropout rates must lie in [0, 1)");
    if (ln_eps <= 0.0) throw std::invalid_argument("encoder: ln_eps must be positive");
  }

  int token_h() const { return image_h / token_patch; }
  int token_w() const { return image_w / token_patch; }
  int tokens() const { return token_h() * token_w(); }
  int patch_dim() const { return in_channels * token_patch * token_patch; }
  int mlp_hidden() const {
    int h = static_cast<int>(embed_dim * mlp_ratio);
    return h < 1 ? 1 : h;
  }
  int head_dim() const { return embed_dim / heads; }
};

// Token features for a batch: row b * tokens + (ty * token_w + tx).
template <typename S>
struct FeatureMap {
  Mat<S> values;  // (batch * tokens) x dim
  int batch = 0;
  int token_h = 0;
  int token_w = 0;

  int tokens() const { return token_h * token_w; }
  Eigen::Index dim() const { return values.cols(); }
  auto image(int b) const { return values.middleRows(static_cast<Eigen::Index>(b) * tokens(), tokens()); }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct VitBlock {
  LayerNorm<S> norm1;
  Linear<S> qkv;   // embed -> 3 * embed, fused
  Linear<S> proj;  // embed -> embed
  LayerNorm<S> norm2;
  Linear<S> fc1;  // embed -> hidden
  Linear<S> fc2;  // hidden -> embed

  void init(const EncoderConfig& cfg, Rng& rng) {
    norm1.init(cfg.embed_dim, cfg.ln_eps);
    qkv.init(cfg.embed_dim, 3 * cfg.embed_dim, rng);
    proj.init(cfg.embed_dim, cfg.embed_dim, rng);
    norm2.init(cfg.embed_dim, cfg.ln_eps);
    fc1.init(cfg.embed_dim, cfg.mlp_hidden(), rng);
    fc2.init(cfg.mlp_hidden(), cfg.embed_dim, rng);
  }

  void collect(const std::string& prefix, ParamRegistry<S>& reg) {
    norm1.collect(prefix + ".norm1", reg);
    qkv.collect(prefix + ".attn.qkv", reg);
    proj.collect(prefix + ".attn.proj", reg);
    norm2.collect(prefix + ".norm2", reg);
    fc1.collect(prefix + ".mlp.fc1", reg);
    fc2.collect(prefix + ".mlp.fc2", reg);
  }
};

template <typename S>
struct VitParams {
  EncoderConfig cfg;
  Linear<S> patch_embed;  // patch_dim -> embed
  Param<S> mask_token;    // 1 x embed, substituted for masked tokens
  Param<S> pos_embed;     // tokens x embed, learned
  std::vector<VitBlock<S>> blocks;
  LayerNorm<S> norm;  // final norm

  void init(const EncoderConfig& config, Rng& rng) {
    config.validate();
    cfg = config;
    patch_embed.init(cfg.patch_dim(), cfg.embed_dim, rng);
    mask_token.resize(1, cfg.embed_dim);
    mask_token.decay = false;
    trunc_normal_fill(mask_token.v, 0.02, rng);
    pos_embed.resize(cfg.tokens(), cfg.embed_dim);
    pos_embed.decay = false;
    trunc_normal_fill(pos_embed.v, 0.02, rng);
    blocks.resize(cfg.depth);
    for (auto& b : blocks) b.init(cfg, rng);
    norm.init(cfg.embed_dim, cfg.ln_eps);
  }
};

// Registry with stable names; checkpoint files key tensors by these.
template <typename S>
ParamRegistry<S> collect_params(VitParams<S>& p, const std::string& prefix = "encoder") {
  ParamRegistry<S> reg;
  p.patch_embed.collect(prefix + ".patch_embed", reg);
  reg.push_back({prefix + ".mask_token", &p.mask_token});
  reg.push_back({prefix + ".pos_embed", &p.pos_embed});
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    p.blocks[i].collect(prefix + ".blocks." + std::to_string(i), reg);
  p.norm.collect(prefix + ".norm", reg);
  return reg;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename S>
struct BlockActs {
  typename LayerNorm<S>::Cache ln1;
  Mat<S> x0;      // block input
  Mat<S> n1;      // norm1 output (qkv input)
  Mat<S> attn;    // per-head softmax weights, (batch * heads * T) x T
  Mat<S> concat;  // attention head outputs before proj
  Mat<S> x1;      // after attention residual
  typename LayerNorm<S>::Cache ln2;
  Mat<S> n2;      // norm2 output (fc1 input)
  Mat<S> h_pre;   // fc1 output before GELU
  Mat<S> h_act;   // after GELU (and dropout), fc2 input
  std::vector<std::uint8_t> drop_mask;   // hidden dropout keep flags, empty if unused
  std::vector<std::uint8_t> keep_attn;   // per-image drop-path keep, empty if unused
  std::vector<std::uint8_t> keep_mlp;
};

template <typename S>
struct VitActs {
  Mat<S> patches;                       // patchified pixels, patch_embed input
  std::vector<std::uint8_t> mask_rows;  // 1 where mask token was substituted
  Mat<S> x_final;                       // input of final norm
  typename LayerNorm<S>::Cache ln_final;
  std::vector<BlockActs<S>> blocks;
  int batch = 0;
};

namespace detail {

// Flattens per-token pixel patches. Row b*T + t; within a row the layout is
// channel-major, then patch row, then patch column.
template <typename S>
Mat<S> patchify(const EncoderConfig& cfg, const Mat<S>& pixels) {
  const int tph = cfg.token_h();
  const int tpw = cfg.token_w();
  const int tp = cfg.token_patch;
  const Eigen::Index batch = pixels.rows();
  Mat<S> out(batch * cfg.tokens(), cfg.patch_dim());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int ty = 0; ty < tph; ++ty) {
      for (int tx = 0; tx < tpw; ++tx) {
        S* row = out.row(b * cfg.tokens() + ty * tpw + tx).data();
        int k = 0;
        for (int c = 0; c < cfg.in_channels; ++c) {
          const Eigen::Index plane = static_cast<Eigen::Index>(c) * cfg.image_h * cfg.image_w;
          for (int py = 0; py < tp; ++py) {
            const Eigen::Index base = plane + static_cast<Eigen::Index>(ty * tp + py) * cfg.image_w + tx * tp;
            for (int px = 0; px < tp; ++px) row[k++] = pixels(b, base + px);
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
void softmax_rows_inplace(Mat<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const S mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

}  // namespace detail

// Forward pass over a batch of flattened images (row = planar CHW pixels).
// token_mask, when given, holds batch*tokens flags; masked tokens are replaced
// by the learned mask token after patch embedding and before position
// embeddings, so masked pixel content never enters the network. acts may be
// null for inference; rng is required only when train is true and a dropout
// rate is nonzero.
template <typename S>
FeatureMap<S> encode_batch(VitParams<S>& p, const Mat<S>& pixels,
                           const std::vector<std::uint8_t>* token_mask, bool train = false,
                           Rng* rng = nullptr, VitActs<S>* acts = nullptr) {
  const EncoderConfig& cfg = p.cfg;
  const int T = cfg.tokens();
  const Eigen::Index batch = pixels.rows();
  if (pixels.cols() != static_cast<Eigen::Index>(cfg.in_channels) * cfg.image_h * cfg.image_w)
    throw std::invalid_argument("encode: pixel row length does not match encoder config");
  if (token_mask && static_cast<Eigen::Index>(token_mask->size()) != batch * T)
    throw std::invalid_argument("encode: token mask length must be batch * tokens");
  const bool need_dropout = train && cfg.dropout > 0.0;
  const bool need_droppath = train && cfg.drop_path > 0.0;
  if ((need_dropout || need_droppath) && !rng)
    throw std::invalid_argument("encode: training with dropout requires an rng");

  Mat<S> patches = detail::patchify(cfg, pixels);
  Mat<S> x = p.patch_embed.forward(patches);

  std::vector<std::uint8_t> mask_rows;
  if (token_mask) {
    mask_rows = *token_mask;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      if (mask_rows[static_cast<std::size_t>(r)]) x.row(r) = p.mask_token.v.row(0);
  }

  for (Eigen::Index b = 0; b < batch; ++b)
    x.middleRows(b * T, T) += p.pos_embed.v;

  if (acts) {
    acts->patches = std::move(patches);
    acts->mask_rows = mask_rows;
    acts->blocks.assign(p.blocks.size(), {});
    acts->batch = static_cast<int>(batch);
  }

  const int H = cfg.heads;
  const int d = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(d));

  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    VitBlock<S>& blk = p.blocks[bi];
    BlockActs<S>* ba = acts ? &acts->blocks[bi] : nullptr;
    BlockActs<S> scratch;
    BlockActs<S>& c = ba ? *ba : scratch;

    if (acts) c.x0 = x;
    Mat<S> n1 = blk.norm1.forward(x, acts ? &c.ln1 : nullptr);
    Mat<S> qkv = blk.qkv.forward(n1);
    if (acts) c.n1 = std::move(n1);

    Mat<S> concat(batch * T, cfg.embed_dim);
    Mat<S> attn_cache;
    if (acts) attn_cache.resize(static_cast<Eigen::Index>(batch) * H * T, T);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        auto q = qkv.block(b * T, h * d, T, d);
        auto k = qkv.block(b * T, cfg.embed_dim + h * d, T, d);
        auto v = qkv.block(b * T, 2 * cfg.embed_dim + h * d, T, d);
        Mat<S> att = (q * k.transpose()) * scale;
        detail::softmax_rows_inplace(att);
        concat.block(b * T, h * d, T, d).noalias() = att * v;
        if (acts) attn_cache.middleRows((b * H + h) * T, T) = std::move(att);
      }
    }
    if (acts) c.attn = std::move(attn_cache);

    Mat<S> attn_out = blk.proj.forward(concat);
    if (acts) c.concat = std::move(concat);

    if (need_droppath) {
      c.keep_attn.resize(static_cast<std::size_t>(batch));
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.drop_path);
      for (Eigen::Index b = 0; b < batch; ++b) {
        const bool keep = !rng->bernoulli(cfg.drop_path);
        c.keep_attn[static_cast<std::size_t>(b)] = keep ? 1 : 0;
        if (keep)
          attn_out.middleRows(b * T, T) *= inv_keep;
        else
          attn_out.middleRows(b * T, T).setZero();
      }
    }
    x += attn_out;
    if (acts) c.x1 = x;

    Mat<S> n2 = blk.norm2.forward(x, acts ? &c.ln2 : nullptr);
    Mat<S> h_pre = blk.fc1.forward(n2);
    if (acts) c.n2 = std::move(n2);
    Mat<S> h_act = gelu_forward(h_pre);
    if (acts) c.h_pre = std::move(h_pre);

    if (need_dropout) {
      c.drop_mask.resize(static_cast<std::size_t>(h_act.size()));
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.dropout);
      S* data = h_act.data();
      for (Eigen::Index i = 0; i < h_act.size(); ++i) {
        const bool keep = !rng->bernoulli(cfg.dropout);
        c.drop_mask[static_cast<std::size_t>(i)] = keep ? 1 : 0;
        data[i] = keep ? data[i] * inv_keep : S(0);
      }
    }

    Mat<S> mlp_out = blk.fc2.forward(h_act);
    if (acts) c.h_act = std::move(h_act);

    if (need_droppath) {
      c.keep_mlp.resize(static_cast<std::size_t>(batch));
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.drop_path);
      for (Eigen::Index b = 0; b < batch; ++b) {
        const bool keep = !rng->bernoulli(cfg.drop_path);
        c.keep_mlp[static_cast<std::size_t>(b)] = keep ? 1 : 0;
        if (keep)
          mlp_out.middleRows(b * T, T) *= inv_keep;
        else
          mlp_out.middleRows(b * T, T).setZero();
      }
    }
    x += mlp_out;
  }

  if (acts) acts->x_final = x;
  FeatureMap<S> out;
  out.values = p.norm.forward(x, acts ? &acts->ln_final : nullptr);
  out.batch = static_cast<int>(batch);
  out.token_h = cfg.token_h();
  out.token_w = cfg.token_w();
  return out;
}

// Backpropagates dL/d(output tokens), accumulating into parameter grads.
// Input-pixel gradients are not produced; nothing upstream needs them.
template <typename S>
void encode_backward(VitParams<S>& p, const VitActs<S>& acts, const Mat<S>& d_out) {
  const EncoderConfig& cfg = p.cfg;
  const int T = cfg.tokens();
  const Eigen::Index batch = acts.batch;
  const int H = cfg.heads;
  const int d = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(d));

  Mat<S> dx = p.norm.backward(acts.ln_final, d_out);

  for (std::size_t ri = p.blocks.size(); ri-- > 0;) {
    VitBlock<S>& blk = p.blocks[ri];
    const BlockActs<S>& c = acts.blocks[ri];

    // MLP branch
    Mat<S> d_mlp_out = dx;
    if (!c.keep_mlp.empty()) {
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.drop_path);
      for (Eigen::Index b = 0; b < batch; ++b) {
        if (c.keep_mlp[static_cast<std::size_t>(b)])
          d_mlp_out.middleRows(b * T, T) *= inv_keep;
        else
          d_mlp_out.middleRows(b * T, T).setZero();
      }
    }
    Mat<S> d_h_act = blk.fc2.backward(c.h_act, d_mlp_out);
    if (!c.drop_mask.empty()) {
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.dropout);
      S* data = d_h_act.data();
      for (Eigen::Index i = 0; i < d_h_act.size(); ++i)
        data[i] = c.drop_mask[static_cast<std::size_t>(i)] ? data[i] * inv_keep : S(0);
    }
    Mat<S> d_h_pre = gelu_backward(c.h_pre, d_h_act);
    Mat<S> d_n2 = blk.fc1.backward(c.n2, d_h_pre);
    dx += blk.norm2.backward(c.ln2, d_n2);

    // Attention branch
    Mat<S> d_attn_out = dx;
    if (!c.keep_attn.empty()) {
      const S inv_keep = S(1) / static_cast<S>(1.0 - cfg.drop_path);
      for (Eigen::Index b = 0; b < batch; ++b) {
        if (c.keep_attn[static_cast<std::size_t>(b)])
          d_attn_out.middleRows(b * T, T) *= inv_keep;
        else
          d_attn_out.middleRows(b * T, T).setZero();
      }
    }
    Mat<S> d_concat = blk.proj.backward(c.concat, d_attn_out);

    Mat<S> d_qkv = Mat<S>::Zero(batch * T, 3 * cfg.embed_dim);
    // qkv activations are recomputed from the cached norm1 output; cheaper to
    // redo one GEMM than to hold both qkv and concat for every block.
    Mat<S> qkv = blk.qkv.forward(c.n1);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        auto q = qkv.block(b * T, h * d, T, d);
        auto k = qkv.block(b * T, cfg.embed_dim + h * d, T, d);
        auto v = qkv.block(b * T, 2 * cfg.embed_dim + h * d, T, d);
        auto att = c.attn.middleRows((b * H + h) * T, T);
        auto d_o = d_concat.block(b * T, h * d, T, d);

        Mat<S> d_att = d_o * v.transpose();
        d_qkv.block(b * T, 2 * cfg.embed_dim + h * d, T, d).noalias() = att.transpose() * d_o;
        // softmax backward row by row
        Mat<S> d_scores(T, T);
        for (int i = 0; i < T; ++i) {
          const S dot = att.row(i).dot(d_att.row(i));
          d_scores.row(i) = att.row(i).cwiseProduct(d_att.row(i)) - dot * att.row(i);
        }
        d_scores *= scale;
        d_qkv.block(b * T, h * d, T, d).noalias() = d_scores * k;
        d_qkv.block(b * T, cfg.embed_dim + h * d, T, d).noalias() = d_scores.transpose() * q;
      }
    }
    Mat<S> d_n1 = blk.qkv.backward(c.n1, d_qkv);
    dx += blk.norm1.backward(c.ln1, d_n1);
  }

  // Position embeddings receive gradient from every image in the batch.
  for (Eigen::Index b = 0; b < batch; ++b) p.pos_embed.g += dx.middleRows(b * T, T);

  if (!acts.mask_rows.empty()) {
    Mat<S> d_embed = dx;
    for (Eigen::Index r = 0; r < d_embed.rows(); ++r) {
      if (acts.mask_rows[static_cast<std::size_t>(r)]) {
        p.mask_token.g.row(0) += d_embed.row(r);
        d_embed.row(r).setZero();
      }
    }
    p.patch_embed.backward(acts.patches, d_embed);
  } else {
    p.patch_embed.backward(acts.patches, dx);
  }
}

// ---------------------------------------------------------------------------
// Convenience entry points
// ---------------------------------------------------------------------------

template <typename S>
Mat<S> image_to_row(const Image& img) {
  Mat<S> row(1, static_cast<Eigen::Index>(img.data.size()));
  for (std::size_t i = 0; i < img.data.size(); ++i)
    row(0, static_cast<Eigen::Index>(i)) = static_cast<S>(img.data[i]);
  return row;
}

template <typename S>
Mat<S> images_to_batch(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("images_to_batch: empty batch");
  const std::size_t len = imgs[0]->data.size();
  Mat<S> out(static_cast<Eigen::Index>(imgs.size()), static_cast<Eigen::Index>(len));
  for (std::size_t b = 0; b < imgs.size(); ++b) {
    if (imgs[b]->data.size() != len)
      throw std::invalid_argument("images_to_batch: images differ in shape");
    for (std::size_t i = 0; i < len; ++i)
      out(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) = static_cast<S>(imgs[b]->data[i]);
  }
  return out;
}

// Masked forward for one image. token_mask has one flag per token.
template <typename S>
FeatureMap<S> encode_masked(VitParams<S>& p, const Image& img,
                            const std::vector<std::uint8_t>& token_mask) {
  Mat<S> row = image_to_row<S>(img);
  return encode_batch(p, row, &token_mask);
}

template <typename S>
FeatureMap<S> encode_full(VitParams<S>& p, const Image& img) {
  Mat<S> row = image_to_row<S>(img);
  return encode_batch<S>(p, row, nullptr);
}

// Mean over all token positions, one row per image.
template <typename S>
Mat<S> global_average_pool(const FeatureMap<S>& fm) {
  const int T = fm.tokens();
  if (T <= 0 || fm.batch <= 0) throw std::invalid_argument("global_average_pool: empty feature map");
  Mat<S> out(fm.batch, fm.dim());
  for (int b = 0; b < fm.batch; ++b) out.row(b) = fm.image(b).colwise().mean();
  return out;
}

// Spreads dL/d(pooled) back to token rows.
template <typename S>
Mat<S> global_average_pool_backward(const Mat<S>& d_pooled, int tokens) {
  Mat<S> out(d_pooled.rows() * tokens, d_pooled.cols());
  for (Eigen::Index b = 0; b < d_pooled.rows(); ++b)
    for (int t = 0; t < tokens; ++t)
      out.row(b * tokens + t) = d_pooled.row(b) / static_cast<S>(tokens);
  return out;
}

}  // namespace mimco
