#pragma once

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "mimco/config.hpp"
#include "mimco/dataset.hpp"
#include "mimco/eval.hpp"
#include "mimco/teacher.hpp"
#include "mimco/trainer.hpp"

namespace mimco {

// Synthetic dataset stream tags; train and eval draw from disjoint streams.
inline constexpr std::uint64_t kTrainTag = 1;
inline constexpr std::uint64_t kEvalTag = 2;

inline Dataset runner_train_dataset(const RunConfig& cfg) {
  if (cfg.data_source == "synthetic") {
    SyntheticConfig sc;
    sc.num_classes = cfg.num_classes;
    sc.image_size = cfg.image_size;
    sc.seed = cfg.data_seed;
    return make_synthetic_dataset(sc, cfg.train_count, kTrainTag);
  }
  return load_directory_dataset(cfg.data_dir, cfg.data_labels);
}

inline Dataset runner_eval_dataset(const RunConfig& cfg) {
  if (cfg.data_source == "synthetic") {
    SyntheticConfig sc;
    sc.num_classes = cfg.num_classes;
    sc.image_size = cfg.image_size;
    sc.seed = cfg.data_seed;
    return make_synthetic_dataset(sc, cfg.eval_count, kEvalTag);
  }
  const std::string dir = cfg.data_eval_dir.empty() ? cfg.data_dir : cfg.data_eval_dir;
  const std::string labels = cfg.data_eval_labels.empty() ? cfg.data_labels : cfg.data_eval_labels;
  return load_directory_dataset(dir, labels);
}

// Shuffle order for one epoch, derived from (seed, epoch) alone so a resumed
// run rebuilds the identical order without replaying earlier epochs.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, {0x73687566666c65ull, epoch});  // "shuffle"
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("runner: cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("runner: short write to " + path);
}

// Every command drops the fully resolved configuration next to its outputs
// so any run can be replayed exactly.
inline void write_resolved_config(const RunConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_json_file(out_dir + "/config.json", cfg.to_json());
}

// ---------------------------------------------------------------------------
// pretrain-teacher
// ---------------------------------------------------------------------------

struct TeacherRunResult {
  std::string bundle_path;
  std::string metrics_path;
  double final_loss = 0.0;
  std::uint64_t steps = 0;
};

template <typename S>
TeacherRunResult run_pretrain_teacher(const RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  Dataset data = runner_train_dataset(cfg);
  Stage1State<S> st = init_stage1<S>(cfg);

  const int spe = static_cast<int>(data.items.size()) / cfg.batch_size;
  if (spe < 1) throw std::invalid_argument("pretrain-teacher: dataset smaller than one batch");
  TrainSchedule sched;
  sched.peak_lr = cfg.s1_scaled_lr();
  sched.warmup_steps = static_cast<std::uint64_t>(cfg.s1_warmup_epochs) * spe;
  sched.total_steps = static_cast<std::uint64_t>(cfg.s1_epochs) * spe;

  const std::string metrics_path = out_dir + "/teacher_metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("pretrain-teacher: cannot open " + metrics_path);
  metrics << "step,epoch,lr,loss,queue_fill\n";

  std::vector<const Image*> batch(static_cast<std::size_t>(cfg.batch_size));
  double last_loss = 0.0;
  while (st.step < sched.total_steps) {
    const std::uint64_t epoch = st.step / spe;
    const auto perm = epoch_permutation(data.items.size(), cfg.s1_seed, epoch);
    for (std::uint64_t pos = st.step % spe; pos < static_cast<std::uint64_t>(spe) &&
                                            st.step < sched.total_steps;
         ++pos) {
      for (int i = 0; i < cfg.batch_size; ++i)
        batch[static_cast<std::size_t>(i)] =
            &data.items[perm[pos * cfg.batch_size + i]].image;
      const double lr = lr_at(sched, st.step);
      const std::uint64_t executed = st.step;
      Stage1Stats stats = stage1_train_step(st, batch, lr);
      metrics << executed << ',' << epoch << ',' << std::setprecision(17) << lr << ','
              << stats.loss << ',' << stats.queue_fill << "\n";
      last_loss = stats.loss;
    }
  }

  TeacherBundle<S> bundle = freeze_teacher(st);
  const std::string bundle_path = out_dir + "/teacher.ckpt";
  save_teacher(bundle, bundle_path, cfg.hash());

  TeacherRunResult res;
  res.bundle_path = bundle_path;
  res.metrics_path = metrics_path;
  res.final_loss = last_loss;
  res.steps = st.step;
  return res;
}

// ---------------------------------------------------------------------------
// pretrain-mimco
// ---------------------------------------------------------------------------

struct Stage2RunResult {
  std::string checkpoint_path;
  std::string metrics_path;
  StepStats last;
};

template <typename S>
Stage2RunResult run_pretrain_mimco(const RunConfig& cfg, const std::string& out_dir,
                                   const std::string& teacher_path,
                                   const std::string& resume_path = "") {
  write_resolved_config(cfg, out_dir);
  Dataset data = runner_train_dataset(cfg);

  TrainState<S> st = [&] {
    if (!resume_path.empty())
      return load_checkpoint<S>(cfg, static_cast<int>(data.items.size()), resume_path);
    const LossMode mode = loss_mode_from_string(cfg.loss_mode);
    if (mode_uses_teacher(mode)) {
      if (teacher_path.empty())
        throw std::invalid_argument("pretrain-mimco: missing required --teacher (path to a "
                                    "stage-1 teacher bundle) for loss mode '" +
                                    cfg.loss_mode + "'");
      TeacherBundle<S> bundle = load_teacher<S>(teacher_path);
      return init_train<S>(cfg, static_cast<int>(data.items.size()), &bundle);
    }
    return init_train<S>(cfg, static_cast<int>(data.items.size()), nullptr);
  }();

  const std::string metrics_path = out_dir + "/metrics.csv";
  const std::string ckpt_path = out_dir + "/stage2.ckpt";
  MetricsWriter metrics(metrics_path, /*append=*/!resume_path.empty());

  std::vector<const Image*> batch(static_cast<std::size_t>(cfg.batch_size));
  StepStats last;
  while (st.step < st.schedule.total_steps) {
    const std::uint64_t epoch = st.step / static_cast<std::uint64_t>(st.steps_per_epoch);
    const auto perm = epoch_permutation(data.items.size(), cfg.train_seed, epoch);
    for (std::uint64_t pos = st.step % static_cast<std::uint64_t>(st.steps_per_epoch);
         pos < static_cast<std::uint64_t>(st.steps_per_epoch) && st.step < st.schedule.total_steps;
         ++pos) {
      for (int i = 0; i < cfg.batch_size; ++i)
        batch[static_cast<std::size_t>(i)] = &data.items[perm[pos * cfg.batch_size + i]].image;
      last = mimco_train_step(st, batch);
      if (last.step % static_cast<std::uint64_t>(cfg.log_every) == 0) metrics.write_row(last);
      if (cfg.checkpoint_every > 0 &&
          st.step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0)
        save_checkpoint(st, ckpt_path);
    }
  }
  save_checkpoint(st, ckpt_path);

  Stage2RunResult res;
  res.checkpoint_path = ckpt_path;
  res.metrics_path = metrics_path;
  res.last = last;
  return res;
}

// ---------------------------------------------------------------------------
// Encoder extraction for evaluation
// ---------------------------------------------------------------------------

namespace detail {

// Restores the registry entries found in blobs; extra blobs are ignored.
// Used to pull one component (the student encoder) out of a full checkpoint.
template <typename S>
void restore_registry_subset(ParamRegistry<S>& reg, const std::vector<TensorBlob>& blobs) {
  std::map<std::string, const TensorBlob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  for (auto& ref : reg) {
    auto it = by_name.find(ref.name);
    if (it == by_name.end())
      throw IntegrityError("checkpoint: missing tensor '" + ref.name + "'");
    const TensorBlob& b = *it->second;
    if (static_cast<Eigen::Index>(b.rows) != ref.p->v.rows() ||
        static_cast<Eigen::Index>(b.cols) != ref.p->v.cols())
      throw IntegrityError("checkpoint: shape mismatch for '" + ref.name + "'");
    ref.p->v = from_blob<S>(b);
  }
}

}  // namespace detail

// Loads an encoder from either artifact kind: a stage-1 teacher bundle or a
// stage-2 training checkpoint (the student weights). The model geometry comes
// from cfg and must match what was saved.
template <typename S>
VitParams<S> load_encoder_any(const std::string& path, const RunConfig& cfg) {
  CheckpointReader r(path);
  const auto meta = r.meta("meta");
  const std::string kind = meta.count("kind") ? meta.at("kind") : "";
  if (kind == "teacher") {
    TeacherBundle<S> b = load_teacher<S>(path);
    detail::check_teacher_geometry(b.encoder.cfg, cfg.encoder_config());
    return b.encoder;
  }
  if (kind == "stage2") {
    VitParams<S> enc;
    Rng tmp(0);
    enc.init(cfg.encoder_config(), tmp);
    ParamRegistry<S> reg = collect_params(enc, "student");
    detail::restore_registry_subset(reg, r.tensors("params.online"));
    return enc;
  }
  throw IntegrityError("checkpoint: '" + path + "' is neither a teacher bundle nor a stage-2 checkpoint");
}

// ---------------------------------------------------------------------------
// Evaluation commands
// ---------------------------------------------------------------------------

template <typename S>
json run_eval_knn(const RunConfig& cfg, const std::string& checkpoint_path,
                  const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  VitParams<S> enc = load_encoder_any<S>(checkpoint_path, cfg);
  const AugmentationConfig aug = cfg.stage2_augment();
  EmbeddingSet<S> train_emb = compute_embeddings(enc, runner_train_dataset(cfg), aug);
  EmbeddingSet<S> eval_emb = compute_embeddings(enc, runner_eval_dataset(cfg), aug);
  KnnResult res = knn_eval(train_emb, eval_emb, cfg.knn_k);
  json report = {{"command", "eval-knn"},
                 {"checkpoint", checkpoint_path},
                 {"k", cfg.knn_k},
                 {"correct", res.correct},
                 {"total", res.total},
                 {"accuracy", res.accuracy}};
  write_json_file(out_dir + "/knn_report.json", report);
  return report;
}

template <typename S>
json run_eval_retrieval(const RunConfig& cfg, const std::string& checkpoint_path,
                        const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  VitParams<S> enc = load_encoder_any<S>(checkpoint_path, cfg);
  const AugmentationConfig aug = cfg.stage2_augment();
  EmbeddingSet<S> db = compute_embeddings(enc, runner_train_dataset(cfg), aug);
  EmbeddingSet<S> queries = compute_embeddings(enc, runner_eval_dataset(cfg), aug);
  RetrievalResult res = retrieval_map(queries, db, cfg.retrieval_topk);
  if (res.skipped > 0)
    std::cerr << "eval-retrieval: " << res.skipped
              << " queries had no relevant database entries and were skipped\n";
  json report = {{"command", "eval-retrieval"},
                 {"checkpoint", checkpoint_path},
                 {"topk", cfg.retrieval_topk},
                 {"mean_ap", res.mean_ap},
                 {"evaluated", res.evaluated},
                 {"skipped", res.skipped}};
  write_json_file(out_dir + "/retrieval_report.json", report);
  return report;
}

template <typename S>
json run_export_embeddings(const RunConfig& cfg, const std::string& checkpoint_path,
                           const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  VitParams<S> enc = load_encoder_any<S>(checkpoint_path, cfg);
  const AugmentationConfig aug = cfg.stage2_augment();
  EmbeddingSet<S> emb = compute_embeddings(enc, runner_eval_dataset(cfg), aug);
  const std::string csv_path = out_dir + "/embeddings.csv";
  export_embeddings(emb, csv_path);
  json report = {{"command", "export-embeddings"},
                 {"checkpoint", checkpoint_path},
                 {"path", csv_path},
                 {"count", emb.size()},
                 {"dim", emb.features.cols()}};
  write_json_file(out_dir + "/export_report.json", report);
  return report;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationCell {
  std::string name;
  json overrides;  // section -> key -> value patches applied to the base config
};

struct AblationMatrix {
  std::string name;
  std::vector<AblationCell> cells;
};

// The five comparison grids: mask ratio sweep, loss-term split, l1 vs
// contrastive patch loss, single-stage multitask baseline, and the mask-off
// distillation arm.
inline std::vector<AblationMatrix> ablation_matrices() {
  std::vector<AblationMatrix> out;
  out.push_back({"mask_ratio",
                 {{"ratio_0.5", json{{"mask", {{"ratio", 0.5}}}}},
                  {"ratio_0.6", json{{"mask", {{"ratio", 0.6}}}}},
                  {"ratio_0.7", json{{"mask", {{"ratio", 0.7}}}}}}});
  out.push_back({"loss_terms",
                 {{"patch_only", json{{"train", {{"loss_mode", "patch_only"}}}}},
                  {"image_only", json{{"train", {{"loss_mode", "image_only"}}}}},
                  {"both", json{{"train", {{"loss_mode", "mimco"}}}}}}});
  out.push_back({"patch_loss",
                 {{"l1", json{{"train", {{"loss_mode", "l1_patch"}}}}},
                  {"contrastive", json{{"train", {{"loss_mode", "patch_only"}}}}}}});
  out.push_back({"multitask",
                 {{"multitask", json{{"train", {{"loss_mode", "multitask_pixel_plus_image"}}}}},
                  {"two_stage", json{{"train", {{"loss_mode", "mimco"}}}}}}});
  out.push_back({"mask_off",
                 {{"no_mask", json{{"train", {{"loss_mode", "no_mask_distill"}}}}},
                  {"masked", json{{"train", {{"loss_mode", "mimco"}}}}}}});
  return out;
}

template <typename S>
json run_ablation_cell(const RunConfig& base, const AblationCell& cell,
                       const std::string& cell_dir, const std::string& teacher_path) {
  const json patched = merge_config_json(base.to_json(), cell.overrides);
  RunConfig cfg = config_from_json(patched);
  cfg.validate();

  const LossMode mode = loss_mode_from_string(cfg.loss_mode);
  Stage2RunResult train =
      run_pretrain_mimco<S>(cfg, cell_dir, mode_uses_teacher(mode) ? teacher_path : "", "");

  VitParams<S> enc = load_encoder_any<S>(train.checkpoint_path, cfg);
  const AugmentationConfig aug = cfg.stage2_augment();
  EmbeddingSet<S> train_emb = compute_embeddings(enc, runner_train_dataset(cfg), aug);
  EmbeddingSet<S> eval_emb = compute_embeddings(enc, runner_eval_dataset(cfg), aug);
  KnnResult knn = knn_eval(train_emb, eval_emb, cfg.knn_k);

  return json{{"name", cell.name},
              {"overrides", cell.overrides},
              {"loss_mode", cfg.loss_mode},
              {"mask_ratio", cfg.mask_ratio},
              {"steps", train.last.step + 1},
              {"final_loss_total", train.last.loss_total},
              {"final_loss_patch", train.last.loss_patch},
              {"final_loss_image", train.last.loss_image},
              {"knn_accuracy", knn.accuracy},
              {"knn_correct", knn.correct},
              {"knn_total", knn.total}};
}

// Runs every matrix (or a named subset) and writes one comparison report per
// matrix. A shared teacher is trained once unless a bundle is supplied.
template <typename S>
std::vector<std::string> run_ablate(const RunConfig& cfg, const std::string& out_dir,
                                    std::string teacher_path,
                                    const std::vector<std::string>& only_matrices = {},
                                    bool parallel = false) {
  write_resolved_config(cfg, out_dir);
  std::vector<AblationMatrix> matrices = ablation_matrices();
  if (!only_matrices.empty()) {
    std::vector<AblationMatrix> filtered;
    for (const auto& want : only_matrices) {
      bool found = false;
      for (const auto& m : matrices)
        if (m.name == want) {
          filtered.push_back(m);
          found = true;
        }
      if (!found) throw std::invalid_argument("ablate: unknown matrix '" + want + "'");
    }
    matrices = std::move(filtered);
  }

  const bool needs_teacher = [&] {
    for (const auto& m : matrices)
      for (const auto& c : m.cells) {
        const json patched = merge_config_json(cfg.to_json(), c.overrides);
        if (mode_uses_teacher(loss_mode_from_string(
                patched.at("train").at("loss_mode").get<std::string>())))
          return true;
      }
    return false;
  }();
  if (needs_teacher && teacher_path.empty()) {
    TeacherRunResult teacher = run_pretrain_teacher<S>(cfg, out_dir + "/teacher");
    teacher_path = teacher.bundle_path;
  }

  std::vector<std::string> report_paths;
  for (const auto& matrix : matrices) {
    json cells = json::array();
    if (parallel) {
      std::vector<std::future<json>> futures;
      for (const auto& cell : matrix.cells)
        futures.push_back(std::async(std::launch::async, [&, cell] {
          return run_ablation_cell<S>(cfg, cell, out_dir + "/" + matrix.name + "/" + cell.name,
                                      teacher_path);
        }));
      for (auto& f : futures) cells.push_back(f.get());
    } else {
      for (const auto& cell : matrix.cells)
        cells.push_back(run_ablation_cell<S>(cfg, cell,
                                             out_dir + "/" + matrix.name + "/" + cell.name,
                                             teacher_path));
    }
    json report = {{"matrix", matrix.name}, {"cells", cells}};
    const std::string path = out_dir + "/report_" + matrix.name + ".json";
    write_json_file(path, report);
    report_paths.push_back(path);
  }
  return report_paths;
}

}  // namespace mimco
