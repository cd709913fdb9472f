#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
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
#include "mimco/masking.hpp"
#include "mimco/teacher.hpp"
#include "mimco/vit.hpp"

namespace mimco {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct TrainSchedule {
  double peak_lr = 0.0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;
};

// Linear ramp 0 -> peak over the warmup, then cosine decay to 0 at the end.
// lr_at(0) is exactly 0 and lr_at(warmup_steps) is exactly peak_lr.
inline double lr_at(const TrainSchedule& s, std::uint64_t step) {
  if (s.total_steps == 0) throw std::invalid_argument("lr_at: schedule has no steps");
  if (step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return 0.0;
  if (s.total_steps <= s.warmup_steps) return s.peak_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak_lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

template <typename S>
struct TrainState {
  RunConfig cfg;
  LossMode mode = LossMode::mimco;
  TrainSchedule schedule;
  int steps_per_epoch = 0;

  VitParams<S> student;
  TeacherBundle<S> teacher;       // only populated when the mode distills
  VitParams<S> momentum_student;  // multitask mode's key encoder
  PatchHeadParams<S> patch_heads;
  ImageHeadParams<S> image_heads;
  Linear<S> pixel_head;  // embed -> patch pixels, for the pixel modes
  KeyQueue<S> patch_queue;
  KeyQueue<S> image_queue;
  AdamW<S> opt;
  Rng rng;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;

  bool use_patch_nce() const {
    return mode == LossMode::mimco || mode == LossMode::patch_only ||
           mode == LossMode::no_mask_distill;
  }
  bool use_l1() const { return mode == LossMode::l1_patch; }
  bool use_image_nce() const {
    return mode == LossMode::mimco || mode == LossMode::image_only ||
           mode == LossMode::no_mask_distill || mode == LossMode::multitask_pixel_plus_image;
  }
  bool use_pixel() const { return mode_uses_pixel_head(mode); }
  bool use_teacher() const { return mode_uses_teacher(mode); }
  bool use_momentum_student() const { return mode == LossMode::multitask_pixel_plus_image; }
  bool masked_forward() const { return mode != LossMode::no_mask_distill; }

  // Everything the optimizer trains, in a fixed order that the checkpoint
  // optimizer slots rely on.
  ParamRegistry<S> online_params() {
    ParamRegistry<S> reg = collect_params(student, "student");
    if (use_patch_nce() || use_l1()) patch_heads.collect_online("patch_head", reg);
    if (use_image_nce()) image_heads.collect_online("image_head", reg);
    if (use_pixel()) pixel_head.collect("pixel_head", reg);
    return reg;
  }

  ParamRegistry<S> momentum_params() {
    ParamRegistry<S> reg;
    if (use_patch_nce() || use_l1()) patch_heads.collect_momentum("patch_head", reg);
    if (use_image_nce()) image_heads.collect_momentum("image_head", reg);
    if (use_momentum_student()) {
      ParamRegistry<S> enc = collect_params(momentum_student, "momentum_student");
      reg.insert(reg.end(), enc.begin(), enc.end());
    }
    return reg;
  }

  ParamRegistry<S> teacher_params() { return collect_params(teacher.encoder, "teacher"); }
};

namespace detail {

inline void check_teacher_geometry(const EncoderConfig& teacher, const EncoderConfig& model) {
  if (teacher.image_h != model.image_h || teacher.image_w != model.image_w ||
      teacher.in_channels != model.in_channels || teacher.token_patch != model.token_patch ||
      teacher.embed_dim != model.embed_dim)
    throw std::invalid_argument("trainer: teacher geometry does not match the model config");
}

}  // namespace detail

// Builds a fresh stage-2 state. teacher may be null only for modes that do
// not distill, or when a checkpoint restore will supply the weights.
template <typename S>
TrainState<S> init_train(const RunConfig& cfg, int dataset_size,
                         const TeacherBundle<S>* teacher_bundle,
                         bool allow_missing_teacher = false) {
  cfg.validate();
  TrainState<S> st;
  st.cfg = cfg;
  st.mode = loss_mode_from_string(cfg.loss_mode);

  st.steps_per_epoch = dataset_size / cfg.batch_size;  // drop-last batching
  if (st.steps_per_epoch < 1)
    throw std::invalid_argument("trainer: dataset smaller than one batch");
  st.schedule.peak_lr = cfg.scaled_lr();
  st.schedule.warmup_steps =
      static_cast<std::uint64_t>(cfg.warmup_epochs) * static_cast<std::uint64_t>(st.steps_per_epoch);
  st.schedule.total_steps =
      static_cast<std::uint64_t>(cfg.epochs) * static_cast<std::uint64_t>(st.steps_per_epoch);

  Rng init_rng = Rng::derive(cfg.train_seed, {0x696e697432ull});  // "init2"
  st.student.init(cfg.encoder_config(), init_rng);

  const int C = cfg.embed_dim;
  const int hidden = cfg.resolved_head_hidden();
  if (st.use_patch_nce() || st.use_l1()) st.patch_heads.init(C, hidden, cfg.head_out, init_rng);
  if (st.use_image_nce()) st.image_heads.init(C, hidden, cfg.head_out, init_rng);
  if (st.use_pixel()) st.pixel_head.init(C, st.student.cfg.patch_dim(), init_rng);
  if (st.use_momentum_student()) st.momentum_student = st.student;

  if (st.use_teacher()) {
    if (teacher_bundle) {
      detail::check_teacher_geometry(teacher_bundle->encoder.cfg, cfg.encoder_config());
      st.teacher = *teacher_bundle;
    } else if (allow_missing_teacher) {
      st.teacher.encoder.init(cfg.encoder_config(), init_rng);  // overwritten by restore
    } else {
      throw std::invalid_argument("trainer: loss mode '" + cfg.loss_mode +
                                  "' requires a teacher bundle");
    }
  }

  if (st.use_patch_nce()) st.patch_queue.reset(cfg.queue_size, cfg.head_out);
  if (st.use_image_nce()) st.image_queue.reset(cfg.queue_size, cfg.head_out);

  st.opt = AdamW<S>(0.9, 0.999, 1e-8, cfg.weight_decay);
  ParamRegistry<S> reg = st.online_params();
  st.opt.attach(reg);
  st.rng.reseed(Rng::derive(cfg.train_seed, {0x73747265616d32ull}).next_u64());  // "stream2"
  return st;
}

struct StepStats {
  std::uint64_t step = 0;  // index of the step that was just executed
  std::uint64_t epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_patch = 0.0;  // patch-level term in whatever form the mode uses
  double loss_image = 0.0;
  Eigen::Index queue_fill_patch = 0;
  Eigen::Index queue_fill_image = 0;
  double wall_ms = 0.0;
};

// One full training step. Order of operations: augment, mask, student masked
// forward, key-branch full forward (no gradient), patch heads and patch-level
// loss at the flagged positions, patch-queue enqueue of the per-image mean
// key, pooling, image heads and image-level loss, image-queue enqueue,
// backprop of the combined loss, optimizer step, EMA of the momentum heads.
// Modes drop the parts they do not use but keep this order for the rest.
template <typename S>
StepStats mimco_train_step(TrainState<S>& st, const std::vector<const Image*>& batch) {
  const auto t0 = std::chrono::steady_clock::now();
  if (static_cast<int>(batch.size()) != st.cfg.batch_size)
    throw std::invalid_argument("trainer: batch size does not match config");
  const int B = static_cast<int>(batch.size());
  const int T = st.student.cfg.tokens();
  const double lr = lr_at(st.schedule, st.step);

  // augment, then mask, consuming the state rng in a fixed order
  const AugmentationConfig aug = st.cfg.stage2_augment();
  std::vector<Image> views;
  views.reserve(batch.size());
  for (const Image* img : batch) views.push_back(apply_weak_augmentation(*img, aug, st.rng));

  std::vector<std::uint8_t> token_mask;
  if (st.masked_forward()) {
    PatchGrid grid(st.cfg.image_size, st.cfg.image_size, st.cfg.mask_patch, st.cfg.token_patch);
    token_mask.reserve(static_cast<std::size_t>(B) * T);
    for (int b = 0; b < B; ++b) {
      Mask m = generate_mask(grid, st.cfg.mask_ratio, st.rng);
      std::vector<std::uint8_t> tokens = expand_to_tokens(m, grid);
      token_mask.insert(token_mask.end(), tokens.begin(), tokens.end());
    }
  }

  std::vector<const Image*> view_ptrs;
  for (const auto& v : views) view_ptrs.push_back(&v);
  Mat<S> px = images_to_batch<S>(view_ptrs);

  ParamRegistry<S> reg = st.online_params();
  zero_grads(reg);

  // student branch (gradients flow), key branch (constants)
  VitActs<S> acts;
  FeatureMap<S> student_fm =
      encode_batch(st.student, px, st.masked_forward() ? &token_mask : nullptr, true, &st.rng, &acts);
  FeatureMap<S> key_fm;
  if (st.use_teacher()) key_fm = encode_batch(st.teacher.encoder, px, nullptr);
  else if (st.use_momentum_student()) key_fm = encode_batch(st.momentum_student, px, nullptr);

  const std::vector<std::uint8_t> all_positions(static_cast<std::size_t>(B) * T, 1);
  const std::vector<std::uint8_t>& positions = st.masked_forward() ? token_mask : all_positions;

  Mat<S> d_tokens = Mat<S>::Zero(static_cast<Eigen::Index>(B) * T, st.cfg.embed_dim);
  double loss_patch = 0.0;
  double loss_image = 0.0;

  // patch-level term
  OnlineHeadCache<S> patch_cache;
  if (st.use_patch_nce() || st.use_l1()) {
    Mat<S> q = patch_online_head(st.patch_heads, student_fm, &patch_cache);
    Mat<S> k = patch_momentum_head(st.patch_heads, key_fm);
    Mat<S> d_q;
    if (st.use_patch_nce()) {
      PatchLossResult<S> res = patch_reconstruction_loss(q, k, positions, st.patch_queue.negatives(),
                                                         st.cfg.tau, B, T);
      loss_patch = static_cast<double>(res.loss);
      d_q = std::move(res.d_queries);
      st.patch_queue.enqueue_dequeue(mean_patch_keys(k, B, T));
    } else {
      ElementLossResult<S> res = l1_feature_loss(q, k, positions, B, T);
      loss_patch = static_cast<double>(res.loss);
      d_q = std::move(res.d_pred);
    }
    d_q *= static_cast<S>(st.cfg.w_patch);
    d_tokens += online_head_backward(st.patch_heads, patch_cache, d_q);
  } else if (st.use_pixel()) {
    Mat<S> pred = st.pixel_head.forward(student_fm.values);
    ElementLossResult<S> res = pixel_reconstruction_loss(pred, acts.patches, positions, B, T);
    loss_patch = static_cast<double>(res.loss);
    Mat<S> d_pred = res.d_pred * static_cast<S>(st.cfg.w_patch);
    d_tokens += st.pixel_head.backward(student_fm.values, d_pred);
  }

  // image-level term
  OnlineHeadCache<S> image_cache;
  if (st.use_image_nce()) {
    Mat<S> pooled_q = global_average_pool(student_fm);
    Mat<S> pooled_k = global_average_pool(key_fm);
    Mat<S> q = image_online_head(st.image_heads, pooled_q, &image_cache);
    Mat<S> k = image_momentum_head(st.image_heads, pooled_k);
    ImageLossResult<S> res = image_reconstruction_loss(q, k, st.image_queue.negatives(), st.cfg.tau);
    loss_image = static_cast<double>(res.loss);
    st.image_queue.enqueue_dequeue(normalized_rows(k));
    Mat<S> d_q = res.d_queries * static_cast<S>(st.cfg.w_image);
    Mat<S> d_pooled = online_head_backward(st.image_heads, image_cache, d_q);
    d_tokens += global_average_pool_backward(d_pooled, T);
  }

  const double loss_total = st.cfg.w_patch * loss_patch + st.cfg.w_image * loss_image;
  if (!std::isfinite(loss_total))
    throw std::runtime_error("trainer: non-finite loss at step " + std::to_string(st.step) +
                             " (patch=" + std::to_string(loss_patch) +
                             ", image=" + std::to_string(loss_image) + ")");

  encode_backward(st.student, acts, d_tokens);
  st.opt.step(reg, lr);

  const bool ema_heads = st.cfg.momentum_heads == "ema";
  if ((st.use_patch_nce() || st.use_l1()) && ema_heads)
    ema_update(st.patch_heads, st.cfg.ema_momentum);
  if (st.use_image_nce() && ema_heads) ema_update(st.image_heads, st.cfg.ema_momentum);
  if (st.use_momentum_student()) {
    ParamRegistry<S> mom = collect_params(st.momentum_student, "enc");
    ParamRegistry<S> onl = collect_params(st.student, "enc");
    ema_update(mom, onl, st.cfg.ema_momentum);
  }

  StepStats stats;
  stats.step = st.step;
  stats.epoch = st.epoch;
  stats.lr = lr;
  stats.loss_total = loss_total;
  stats.loss_patch = loss_patch;
  stats.loss_image = loss_image;
  stats.queue_fill_patch = st.use_patch_nce() ? st.patch_queue.filled() : 0;
  stats.queue_fill_image = st.use_image_nce() ? st.image_queue.filled() : 0;
  ++st.step;
  st.epoch = st.step / static_cast<std::uint64_t>(st.steps_per_epoch);
  stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void add_queue_sections(CheckpointWriter& w, const std::string& name, const KeyQueue<S>& q) {
  w.add_tensors(name + ".storage", {to_blob(name, q.raw())});
  w.add_u64s(name + ".state", {{"write", static_cast<std::uint64_t>(q.write_pos())},
                               {"filled", static_cast<std::uint64_t>(q.filled())}});
}

template <typename S>
void restore_queue_sections(const CheckpointReader& r, const std::string& name, KeyQueue<S>& q) {
  const auto blobs = r.tensors(name + ".storage");
  if (blobs.size() != 1) throw IntegrityError("checkpoint: bad queue section " + name);
  Eigen::Index write = 0, filled = 0;
  for (const auto& [k, v] : r.u64s(name + ".state")) {
    if (k == "write") write = static_cast<Eigen::Index>(v);
    else if (k == "filled") filled = static_cast<Eigen::Index>(v);
  }
  q.restore(from_blob<S>(blobs[0]), write, filled);
}

}  // namespace detail

template <typename S>
void save_checkpoint(TrainState<S>& st, const std::string& path) {
  CheckpointWriter w(st.cfg.hash());
  w.add_meta("meta", {{"kind", "stage2"},
                      {"loss_mode", st.cfg.loss_mode},
                      {"config", st.cfg.to_json().dump()}});
  w.add_tensors("params.online", registry_blobs(st.online_params()));
  w.add_tensors("params.momentum", registry_blobs(st.momentum_params()));
  if (st.use_teacher()) w.add_tensors("params.teacher", registry_blobs(st.teacher_params()));

  ParamRegistry<S> reg = st.online_params();
  std::vector<TensorBlob> m1, m2;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    m1.push_back(to_blob(reg[i].name, st.opt.moment1(i)));
    m2.push_back(to_blob(reg[i].name, st.opt.moment2(i)));
  }
  w.add_tensors("opt.m", m1);
  w.add_tensors("opt.v", m2);
  w.add_u64s("opt.meta", {{"steps", st.opt.steps_taken()}});

  if (st.use_patch_nce()) detail::add_queue_sections(w, "queue.patch", st.patch_queue);
  if (st.use_image_nce()) detail::add_queue_sections(w, "queue.image", st.image_queue);

  const Rng::State rs = st.rng.save_state();
  std::uint64_t spare_bits;
  std::memcpy(&spare_bits, &rs.spare, sizeof(spare_bits));
  w.add_u64s("rng", {{"w0", rs.words[0]},
                     {"w1", rs.words[1]},
                     {"w2", rs.words[2]},
                     {"w3", rs.words[3]},
                     {"has_spare", rs.has_spare ? 1u : 0u},
                     {"spare_bits", spare_bits}});
  w.add_u64s("counters", {{"step", st.step}, {"epoch", st.epoch}});
  w.write(path);
}

// Rebuilds a state from cfg and restores every mutable piece from the file.
// The config must hash-match the checkpoint; resuming under a different
// configuration is refused rather than silently blended.
template <typename S>
TrainState<S> load_checkpoint(const RunConfig& cfg, int dataset_size, const std::string& path) {
  CheckpointReader r(path);
  if (r.config_hash() != cfg.hash()) {
    std::ostringstream msg;
    msg << "checkpoint: config hash mismatch (file " << std::hex << r.config_hash() << ", current "
        << cfg.hash() << "); resume requires the original configuration";
    throw std::runtime_error(msg.str());
  }
  const auto meta = r.meta("meta");
  if (meta.count("kind") == 0 || meta.at("kind") != "stage2")
    throw IntegrityError("checkpoint: not a stage-2 training checkpoint");

  TrainState<S> st = init_train<S>(cfg, dataset_size, nullptr, /*allow_missing_teacher=*/true);

  ParamRegistry<S> online = st.online_params();
  restore_registry(online, r.tensors("params.online"));
  ParamRegistry<S> momentum = st.momentum_params();
  restore_registry(momentum, r.tensors("params.momentum"));
  if (st.use_teacher()) {
    ParamRegistry<S> teacher = st.teacher_params();
    restore_registry(teacher, r.tensors("params.teacher"));
  }

  const auto m1 = r.tensors("opt.m");
  const auto m2 = r.tensors("opt.v");
  if (m1.size() != online.size() || m2.size() != online.size())
    throw IntegrityError("checkpoint: optimizer slot count does not match model");
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (m1[i].name != online[i].name || m2[i].name != online[i].name)
      throw IntegrityError("checkpoint: optimizer slot order does not match model");
    st.opt.restore_slot(i, from_blob<S>(m1[i]), from_blob<S>(m2[i]));
  }
  for (const auto& [k, v] : r.u64s("opt.meta"))
    if (k == "steps") st.opt.restore_steps(v);

  if (st.use_patch_nce()) detail::restore_queue_sections(r, "queue.patch", st.patch_queue);
  if (st.use_image_nce()) detail::restore_queue_sections(r, "queue.image", st.image_queue);

  Rng::State rs{};
  for (const auto& [k, v] : r.u64s("rng")) {
    if (k == "w0") rs.words[0] = v;
    else if (k == "w1") rs.words[1] = v;
    else if (k == "w2") rs.words[2] = v;
    else if (k == "w3") rs.words[3] = v;
    else if (k == "has_spare") rs.has_spare = v != 0;
    else if (k == "spare_bits") std::memcpy(&rs.spare, &v, sizeof(rs.spare));
  }
  st.rng.restore_state(rs);

  for (const auto& [k, v] : r.u64s("counters")) {
    if (k == "step") st.step = v;
    else if (k == "epoch") st.epoch = v;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "step,epoch,lr,loss_total,loss_patch,loss_image,queue_fill_patch,queue_fill_image,wall_ms";

// Append-only CSV logger. Numeric formatting is fixed so identical runs
// produce byte-identical rows; wall_ms is the one column that legitimately
// differs between runs.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool append) {
    const bool write_header = !append || !std::filesystem::exists(path) ||
                              std::filesystem::file_size(path) == 0;
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("metrics: cannot open " + path);
    if (write_header) out_ << kMetricsHeader << "\n";
  }

  void write_row(const StepStats& s) {
    std::ostringstream row;
    row << s.step << ',' << s.epoch << ',' << std::setprecision(17) << s.lr << ','
        << s.loss_total << ',' << s.loss_patch << ',' << s.loss_image << ','
        << s.queue_fill_patch << ',' << s.queue_fill_image << ',' << std::setprecision(6)
        << s.wall_ms;
    out_ << row.str() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace mimco
