// Command-line driver: teacher pre-training, masked-student pre-training,
// evaluation, embedding export, and the ablation harness.

#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mimco/mimco.hpp"

namespace {

using Scalar = float;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "runs/out";
  std::int64_t seed = -1;  // -1 = keep the config's seeds
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file; defaults apply for absent keys")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.overrides,
                  "Override one config key, e.g. --set train.epochs=5 (repeatable)");
  cmd->add_option("--out", opts.out_dir, "Output directory for checkpoints, metrics and reports");
  cmd->add_option("--seed", opts.seed, "Convenience override for data, stage-1 and train seeds");
}

mimco::RunConfig resolve_config(const CommonOpts& opts) {
  std::vector<std::string> overrides = opts.overrides;
  if (opts.seed >= 0) {
    const std::string s = std::to_string(opts.seed);
    overrides.push_back("data.seed=" + s);
    overrides.push_back("stage1.seed=" + s);
    overrides.push_back("train.seed=" + s);
  }
  return mimco::load_config(opts.config_path, overrides);
}

std::string config_key_footer() {
  std::ostringstream out;
  out << "Config keys (--set key=value):\n";
  for (const auto& line : mimco::config_key_help()) out << "  " << line << "\n";
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage masked-image pre-training: a frozen contrastive teacher "
               "supervises a masked ViT student through patch- and image-level "
               "contrastive reconstruction."};
  app.require_subcommand(1);
  app.footer(config_key_footer());

  CommonOpts teacher_opts;
  auto* cmd_teacher = app.add_subcommand("pretrain-teacher", "Stage 1: contrastive teacher pre-training");
  add_common(cmd_teacher, teacher_opts);

  CommonOpts mimco_opts;
  std::string teacher_path;
  std::string resume_path;
  auto* cmd_mimco = app.add_subcommand("pretrain-mimco", "Stage 2: masked student pre-training");
  add_common(cmd_mimco, mimco_opts);
  cmd_mimco->add_option("--teacher", teacher_path, "Stage-1 teacher bundle (required for distilling modes)");
  cmd_mimco->add_option("--resume", resume_path, "Resume from a stage-2 checkpoint")
      ->check(CLI::ExistingFile);

  CommonOpts knn_opts;
  std::string knn_ckpt;
  auto* cmd_knn = app.add_subcommand("eval-knn", "k-nearest-neighbor classification accuracy");
  add_common(cmd_knn, knn_opts);
  cmd_knn->add_option("--checkpoint", knn_ckpt, "Teacher bundle or stage-2 checkpoint")
      ->required()
      ->check(CLI::ExistingFile);

  CommonOpts ret_opts;
  std::string ret_ckpt;
  auto* cmd_ret = app.add_subcommand("eval-retrieval", "Retrieval mean average precision");
  add_common(cmd_ret, ret_opts);
  cmd_ret->add_option("--checkpoint", ret_ckpt, "Teacher bundle or stage-2 checkpoint")
      ->required()
      ->check(CLI::ExistingFile);

  CommonOpts exp_opts;
  std::string exp_ckpt;
  auto* cmd_exp = app.add_subcommand("export-embeddings", "Write eval-set embeddings as CSV");
  add_common(cmd_exp, exp_opts);
  cmd_exp->add_option("--checkpoint", exp_ckpt, "Teacher bundle or stage-2 checkpoint")
      ->required()
      ->check(CLI::ExistingFile);

  CommonOpts abl_opts;
  std::string abl_teacher;
  std::vector<std::string> abl_matrices;
  bool abl_parallel = false;
  auto* cmd_abl = app.add_subcommand("ablate", "Run the comparison matrices and emit reports");
  add_common(cmd_abl, abl_opts);
  cmd_abl->add_option("--teacher", abl_teacher, "Reuse an existing teacher bundle");
  cmd_abl->add_option("--matrix", abl_matrices,
                      "Run only the named matrices: mask_ratio, loss_terms, patch_loss, "
                      "multitask, mask_off (repeatable)");
  cmd_abl->add_flag("--parallel", abl_parallel, "Run the cells of each matrix concurrently");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_teacher->parsed()) {
      const mimco::RunConfig cfg = resolve_config(teacher_opts);
      const auto res = mimco::run_pretrain_teacher<Scalar>(cfg, teacher_opts.out_dir);
      std::cout << "teacher bundle: " << res.bundle_path << "\n"
                << "steps: " << res.steps << ", final loss: " << res.final_loss << "\n";
    } else if (cmd_mimco->parsed()) {
      const mimco::RunConfig cfg = resolve_config(mimco_opts);
      const auto res =
          mimco::run_pretrain_mimco<Scalar>(cfg, mimco_opts.out_dir, teacher_path, resume_path);
      std::cout << "checkpoint: " << res.checkpoint_path << "\n"
                << "metrics: " << res.metrics_path << "\n"
                << "final loss_total: " << res.last.loss_total << "\n";
    } else if (cmd_knn->parsed()) {
      const mimco::RunConfig cfg = resolve_config(knn_opts);
      const auto report = mimco::run_eval_knn<Scalar>(cfg, knn_ckpt, knn_opts.out_dir);
      std::cout << report.dump(2) << "\n";
    } else if (cmd_ret->parsed()) {
      const mimco::RunConfig cfg = resolve_config(ret_opts);
      const auto report = mimco::run_eval_retrieval<Scalar>(cfg, ret_ckpt, ret_opts.out_dir);
      std::cout << report.dump(2) << "\n";
    } else if (cmd_exp->parsed()) {
      const mimco::RunConfig cfg = resolve_config(exp_opts);
      const auto report = mimco::run_export_embeddings<Scalar>(cfg, exp_ckpt, exp_opts.out_dir);
      std::cout << report.dump(2) << "\n";
    } else if (cmd_abl->parsed()) {
      const mimco::RunConfig cfg = resolve_config(abl_opts);
      const auto reports = mimco::run_ablate<Scalar>(cfg, abl_opts.out_dir, abl_teacher,
                                                     abl_matrices, abl_parallel);
      for (const auto& p : reports) std::cout << "report: " << p << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
