#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mimco/adamw.hpp"
#include "mimco/augment.hpp"
#include "mimco/checkpoint.hpp"
#include "mimco/config.hpp"
#include "mimco/heads.hpp"
#include "mimco/image.hpp"
#include "mimco/key_queue.hpp"
#include "mimco/losses.hpp"
#include "mimco/vit.hpp"

namespace mimco {

// Frozen product of stage 1: encoder weights plus provenance metadata. The
// stage-2 loop treats the encoder as a constant feature extractor.
template <typename S>
struct TeacherBundle {
  VitParams<S> encoder;
  std::map<std::string, std::string> meta;
};

// Contrastive pre-training state for the teacher: an online encoder trained
// by gradient, a momentum encoder updated by EMA, image-level heads, and a
// key queue of past momentum features.
template <typename S>
struct Stage1State {
  RunConfig cfg;
  VitParams<S> online;
  VitParams<S> momentum;
  ImageHeadParams<S> heads;
  KeyQueue<S> queue;
  AdamW<S> opt;
  Rng rng;
  std::uint64_t step = 0;

  ParamRegistry<S> online_params() {
    ParamRegistry<S> reg = collect_params(online, "encoder");
    heads.collect_online("image_head", reg);
    return reg;
  }

  ParamRegistry<S> momentum_params() {
    ParamRegistry<S> reg = collect_params(momentum, "encoder");
    heads.collect_momentum("image_head", reg);
    return reg;
  }
};

template <typename S>
Stage1State<S> init_stage1(const RunConfig& cfg) {
  cfg.validate();
  Stage1State<S> st;
  st.cfg = cfg;
  Rng init_rng = Rng::derive(cfg.s1_seed, {0x696e697431ull});  // "init1"
  st.online.init(cfg.encoder_config(), init_rng);
  st.momentum = st.online;  // EMA target starts as an exact copy
  st.heads.init(cfg.embed_dim, cfg.resolved_head_hidden(), cfg.head_out, init_rng);
  st.queue.reset(cfg.s1_queue_size, cfg.head_out);
  st.opt = AdamW<S>(0.9, 0.999, 1e-8, cfg.s1_weight_decay);
  ParamRegistry<S> reg = st.online_params();
  st.opt.attach(reg);
  st.rng.reseed(Rng::derive(cfg.s1_seed, {0x73747265616dull}).next_u64());  // "stream"
  return st;
}

struct Stage1Stats {
  double loss = 0.0;
  Eigen::Index queue_fill = 0;
};

// One symmetric contrastive step over a batch of raw (unaugmented) images.
// Two jittered views per image; each side's online prediction is matched
// against the other side's momentum key plus the queue, both momentum keys
// are enqueued after the loss, and the momentum branch trails by EMA.
template <typename S>
Stage1Stats stage1_train_step(Stage1State<S>& st, const std::vector<const Image*>& batch,
                              double lr) {
  if (batch.empty()) throw std::invalid_argument("stage1: empty batch");
  const AugmentationConfig aug = st.cfg.stage1_augment();
  const int T = st.online.cfg.tokens();

  std::vector<Image> view1, view2;
  view1.reserve(batch.size());
  view2.reserve(batch.size());
  for (const Image* img : batch) {
    view1.push_back(apply_weak_augmentation(*img, aug, st.rng));
    view2.push_back(apply_weak_augmentation(*img, aug, st.rng));
  }
  std::vector<const Image*> v1p, v2p;
  for (const auto& v : view1) v1p.push_back(&v);
  for (const auto& v : view2) v2p.push_back(&v);
  Mat<S> px1 = images_to_batch<S>(v1p);
  Mat<S> px2 = images_to_batch<S>(v2p);

  ParamRegistry<S> reg = st.online_params();
  zero_grads(reg);

  VitActs<S> acts1, acts2;
  FeatureMap<S> f1 = encode_batch(st.online, px1, nullptr, true, &st.rng, &acts1);
  FeatureMap<S> f2 = encode_batch(st.online, px2, nullptr, true, &st.rng, &acts2);
  Mat<S> pooled1 = global_average_pool(f1);
  Mat<S> pooled2 = global_average_pool(f2);

  OnlineHeadCache<S> hc1, hc2;
  Mat<S> q1 = image_online_head(st.heads, pooled1, &hc1);
  Mat<S> q2 = image_online_head(st.heads, pooled2, &hc2);

  // momentum branch, outside the gradient graph
  FeatureMap<S> m1 = encode_batch(st.momentum, px1, nullptr);
  FeatureMap<S> m2 = encode_batch(st.momentum, px2, nullptr);
  Mat<S> k1 = image_momentum_head(st.heads, global_average_pool(m1));
  Mat<S> k2 = image_momentum_head(st.heads, global_average_pool(m2));

  Mat<S> negs = st.queue.negatives();
  ImageLossResult<S> la = image_reconstruction_loss(q1, k2, negs, st.cfg.s1_tau);
  ImageLossResult<S> lb = image_reconstruction_loss(q2, k1, negs, st.cfg.s1_tau);
  const S loss = (la.loss + lb.loss) / S(2);

  Mat<S> d_pooled1 = online_head_backward(st.heads, hc1, (la.d_queries * S(0.5)).eval());
  Mat<S> d_pooled2 = online_head_backward(st.heads, hc2, (lb.d_queries * S(0.5)).eval());
  encode_backward(st.online, acts1, global_average_pool_backward(d_pooled1, T));
  encode_backward(st.online, acts2, global_average_pool_backward(d_pooled2, T));

  st.opt.step(reg, lr);

  // EMA after the optimizer step so the momentum branch tracks fresh weights
  ParamRegistry<S> mom_enc = collect_params(st.momentum, "encoder");
  ParamRegistry<S> onl_enc = collect_params(st.online, "encoder");
  ema_update(mom_enc, onl_enc, st.cfg.s1_ema_momentum);
  ema_update(st.heads, st.cfg.s1_ema_momentum);

  st.queue.enqueue_dequeue(normalized_rows(k1));
  st.queue.enqueue_dequeue(normalized_rows(k2));
  ++st.step;

  Stage1Stats stats;
  stats.loss = static_cast<double>(loss);
  stats.queue_fill = st.queue.filled();
  return stats;
}

// Detaches the trained online encoder as the frozen teacher.
template <typename S>
TeacherBundle<S> freeze_teacher(const Stage1State<S>& st) {
  TeacherBundle<S> b;
  b.encoder = st.online;
  b.meta["kind"] = "teacher";
  b.meta["stage1_steps"] = std::to_string(st.step);
  b.meta["seed"] = std::to_string(st.cfg.s1_seed);
  b.meta["embed_dim"] = std::to_string(st.cfg.embed_dim);
  b.meta["depth"] = std::to_string(st.cfg.depth);
  return b;
}

template <typename S>
void save_teacher(const TeacherBundle<S>& bundle, const std::string& path,
                  std::uint64_t config_hash) {
  CheckpointWriter w(config_hash);
  w.add_meta("meta", bundle.meta);
  VitParams<S> tmp = bundle.encoder;  // collect_params needs mutable refs
  w.add_tensors("params", registry_blobs(collect_params(tmp, "encoder")));
  // encoder geometry so a loader can rebuild without the original config
  std::vector<std::pair<std::string, std::uint64_t>> shape = {
      {"image_h", static_cast<std::uint64_t>(bundle.encoder.cfg.image_h)},
      {"image_w", static_cast<std::uint64_t>(bundle.encoder.cfg.image_w)},
      {"in_channels", static_cast<std::uint64_t>(bundle.encoder.cfg.in_channels)},
      {"token_patch", static_cast<std::uint64_t>(bundle.encoder.cfg.token_patch)},
      {"embed_dim", static_cast<std::uint64_t>(bundle.encoder.cfg.embed_dim)},
      {"depth", static_cast<std::uint64_t>(bundle.encoder.cfg.depth)},
      {"heads", static_cast<std::uint64_t>(bundle.encoder.cfg.heads)},
      {"mlp_ratio_milli", static_cast<std::uint64_t>(bundle.encoder.cfg.mlp_ratio * 1000.0 + 0.5)}};
  w.add_u64s("geometry", shape);
  w.write(path);
}

template <typename S>
TeacherBundle<S> load_teacher(const std::string& path) {
  CheckpointReader r(path);
  TeacherBundle<S> b;
  b.meta = r.meta("meta");
  if (b.meta.count("kind") == 0 || b.meta.at("kind") != "teacher")
    throw IntegrityError("teacher: file is not a teacher bundle");

  EncoderConfig cfg;
  for (const auto& [k, v] : r.u64s("geometry")) {
    if (k == "image_h") cfg.image_h = static_cast<int>(v);
    else if (k == "image_w") cfg.image_w = static_cast<int>(v);
    else if (k == "in_channels") cfg.in_channels = static_cast<int>(v);
    else if (k == "token_patch") cfg.token_patch = static_cast<int>(v);
    else if (k == "embed_dim") cfg.embed_dim = static_cast<int>(v);
    else if (k == "depth") cfg.depth = static_cast<int>(v);
    else if (k == "heads") cfg.heads = static_cast<int>(v);
    else if (k == "mlp_ratio_milli") cfg.mlp_ratio = static_cast<double>(v) / 1000.0;
  }
  Rng tmp_rng(0);
  b.encoder.init(cfg, tmp_rng);
  ParamRegistry<S> reg = collect_params(b.encoder, "encoder");
  restore_registry(reg, r.tensors("params"));
  return b;
}

}  // namespace mimco
