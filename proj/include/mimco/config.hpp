#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimco/augment.hpp"
#include "mimco/checkpoint.hpp"
#include "mimco/vit.hpp"

namespace mimco {

using json = nlohmann::json;

enum class LossMode {
  mimco,                       // patch + image InfoNCE against the frozen teacher
  patch_only,                  // patch InfoNCE only
  image_only,                  // image InfoNCE only
  l1_patch,                    // patch-level l1 feature regression only
  pixel_only,                  // raw pixel regression baseline, no teacher
  multitask_pixel_plus_image,  // pixel regression + image InfoNCE, no teacher
  no_mask_distill              // no masking; patch InfoNCE over every position
};

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "mimco") return LossMode::mimco;
  if (s == "patch_only") return LossMode::patch_only;
  if (s == "image_only") return LossMode::image_only;
  if (s == "l1_patch") return LossMode::l1_patch;
  if (s == "pixel_only") return LossMode::pixel_only;
  if (s == "multitask_pixel_plus_image") return LossMode::multitask_pixel_plus_image;
  if (s == "no_mask_distill") return LossMode::no_mask_distill;
  throw std::invalid_argument("unknown loss_mode '" + s + "'");
}

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::mimco: return "mimco";
    case LossMode::patch_only: return "patch_only";
    case LossMode::image_only: return "image_only";
    case LossMode::l1_patch: return "l1_patch";
    case LossMode::pixel_only: return "pixel_only";
    case LossMode::multitask_pixel_plus_image: return "multitask_pixel_plus_image";
    case LossMode::no_mask_distill: return "no_mask_distill";
  }
  throw std::logic_error("unhandled loss mode");
}

// Does this mode use a frozen stage-1 teacher?
inline bool mode_uses_teacher(LossMode m) {
  return m == LossMode::mimco || m == LossMode::patch_only || m == LossMode::image_only ||
         m == LossMode::l1_patch || m == LossMode::no_mask_distill;
}

inline bool mode_uses_pixel_head(LossMode m) {
  return m == LossMode::pixel_only || m == LossMode::multitask_pixel_plus_image;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

// Full configuration for every CLI entry point. The JSON schema is defined by
// default_config_json(); config files and --set overrides may only touch keys
// that exist there, anything else is rejected with its full path.
struct RunConfig {
  // data
  std::string data_source = "synthetic";  // "synthetic" or "directory"
  std::string data_dir;
  std::string data_labels;
  std::string data_eval_dir;     // directory source only; empty = reuse data_dir
  std::string data_eval_labels;  // empty = reuse data_labels
  int train_count = 2000;
  int eval_count = 500;
  int num_classes = 4;
  int image_size = 64;
  std::uint64_t data_seed = 1;

  // model
  int token_patch = 16;
  int embed_dim = 96;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  double dropout = 0.0;
  double drop_path = 0.0;

  // mask
  int mask_patch = 32;
  double mask_ratio = 0.6;

  // heads
  int head_hidden = 0;  // 0 means embed_dim
  int head_out = 128;

  // augment (stage 2 and eval-time normalization)
  double crop_scale_lo = 0.67;
  double crop_scale_hi = 1.0;
  double aspect_lo = 0.75;
  double aspect_hi = 4.0 / 3.0;
  double hflip_prob = 0.5;
  double color_jitter = 0.0;
  double grayscale_prob = 0.0;

  // stage-2 training
  std::string loss_mode = "mimco";
  int epochs = 20;
  int warmup_epochs = 2;
  int batch_size = 64;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double tau = 0.2;
  int queue_size = 4096;
  double ema_momentum = 0.99;
  std::string momentum_heads = "ema";  // "ema" or "frozen"
  double w_patch = 1.0;
  double w_image = 1.0;
  std::uint64_t train_seed = 1;
  int checkpoint_every = 0;  // steps; 0 = only at the end
  int log_every = 1;         // metrics rows every N steps

  // stage-1 teacher training
  int s1_epochs = 5;
  int s1_warmup_epochs = 1;
  double s1_base_lr = 1e-3;
  double s1_weight_decay = 0.05;
  double s1_tau = 0.2;
  int s1_queue_size = 4096;
  double s1_ema_momentum = 0.99;
  double s1_color_jitter = 0.4;
  double s1_grayscale_prob = 0.2;
  std::uint64_t s1_seed = 1;

  // eval
  int knn_k = 10;
  int retrieval_topk = 0;  // 0 = full ranking
  int pattern_topk = 5;

  void validate() const;
  EncoderConfig encoder_config() const;
  AugmentationConfig stage2_augment() const;
  AugmentationConfig stage1_augment() const;
  int resolved_head_hidden() const { return head_hidden > 0 ? head_hidden : embed_dim; }
  // Effective learning rate under the linear scaling rule.
  double scaled_lr() const { return base_lr * batch_size / 512.0; }
  double s1_scaled_lr() const { return s1_base_lr * batch_size / 512.0; }
  json to_json() const;
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

inline json default_config_json() { return RunConfig{}.to_json(); }

inline json RunConfig::to_json() const {
  return json{
      {"data",
       {{"source", data_source},
        {"dir", data_dir},
        {"labels", data_labels},
        {"eval_dir", data_eval_dir},
        {"eval_labels", data_eval_labels},
        {"train_count", train_count},
        {"eval_count", eval_count},
        {"num_classes", num_classes},
        {"image_size", image_size},
        {"seed", data_seed}}},
      {"model",
       {{"token_patch", token_patch},
        {"embed_dim", embed_dim},
        {"depth", depth},
        {"heads", heads},
        {"mlp_ratio", mlp_ratio},
        {"dropout", dropout},
        {"drop_path", drop_path}}},
      {"mask", {{"mask_patch", mask_patch}, {"ratio", mask_ratio}}},
      {"heads", {{"hidden", head_hidden}, {"out", head_out}}},
      {"augment",
       {{"crop_scale_lo", crop_scale_lo},
        {"crop_scale_hi", crop_scale_hi},
        {"aspect_lo", aspect_lo},
        {"aspect_hi", aspect_hi},
        {"hflip_prob", hflip_prob},
        {"color_jitter", color_jitter},
        {"grayscale_prob", grayscale_prob}}},
      {"train",
       {{"loss_mode", loss_mode},
        {"epochs", epochs},
        {"warmup_epochs", warmup_epochs},
        {"batch_size", batch_size},
        {"base_lr", base_lr},
        {"weight_decay", weight_decay},
        {"tau", tau},
        {"queue_size", queue_size},
        {"ema_momentum", ema_momentum},
        {"momentum_heads", momentum_heads},
        {"w_patch", w_patch},
        {"w_image", w_image},
        {"seed", train_seed},
        {"checkpoint_every", checkpoint_every},
        {"log_every", log_every}}},
      {"stage1",
       {{"epochs", s1_epochs},
        {"warmup_epochs", s1_warmup_epochs},
        {"base_lr", s1_base_lr},
        {"weight_decay", s1_weight_decay},
        {"tau", s1_tau},
        {"queue_size", s1_queue_size},
        {"ema_momentum", s1_ema_momentum},
        {"color_jitter", s1_color_jitter},
        {"grayscale_prob", s1_grayscale_prob},
        {"seed", s1_seed}}},
      {"eval",
       {{"knn_k", knn_k}, {"retrieval_topk", retrieval_topk}, {"pattern_topk", pattern_topk}}}};
}

namespace detail {

// Recursively checks that every key in patch exists in schema with a
// compatible type; integrals and floats are interchangeable where the schema
// holds a number.
inline void check_against_schema(const json& schema, const json& patch, const std::string& path) {
  if (!patch.is_object())
    throw std::invalid_argument("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
  for (const auto& [key, value] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw std::invalid_argument("config: unknown key '" + where + "'");
    const json& ref = schema.at(key);
    if (ref.is_object()) {
      check_against_schema(ref, value, where);
    } else if (ref.is_string()) {
      if (!value.is_string())
        throw std::invalid_argument("config: '" + where + "' must be a string");
    } else if (ref.is_boolean()) {
      if (!value.is_boolean())
        throw std::invalid_argument("config: '" + where + "' must be a boolean");
    } else if (ref.is_number()) {
      if (!value.is_number())
        throw std::invalid_argument("config: '" + where + "' must be a number");
    }
  }
}

inline void merge_patch(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.at(key).is_object())
      merge_patch(base.at(key), value);
    else
      base.at(key) = value;
  }
}

}  // namespace detail

// Applies a JSON object on top of the defaults, rejecting unknown keys.
inline json merge_config_json(json base, const json& patch) {
  detail::check_against_schema(default_config_json(), patch, "");
  detail::merge_patch(base, patch);
  return base;
}

// Applies one "section.key=value" override. Values parse as JSON when they
// can (numbers, booleans) and fall back to plain strings.
inline void apply_override(json& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + spec + "' must look like section.key=value");
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
    if (value.is_object() || value.is_array()) value = raw;
  } catch (const json::parse_error&) {
    value = raw;
  }

  // build a nested single-key object and reuse the schema check
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= path.size(); ++i) {
    if (i == path.size() || path[i] == '.') {
      if (i == start) throw std::invalid_argument("override '" + spec + "' has an empty key segment");
      parts.push_back(path.substr(start, i - start));
      start = i + 1;
    }
  }
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  detail::check_against_schema(default_config_json(), patch, "");
  detail::merge_patch(cfg, patch);
}

inline RunConfig config_from_json(const json& j);

// Loads defaults, then an optional config file, then key=value overrides.
inline RunConfig load_config(const std::string& config_path,
                             const std::vector<std::string>& overrides) {
  json cfg = default_config_json();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("config: cannot open " + config_path);
    json file_json;
    try {
      file_json = json::parse(f);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("config: " + config_path + " is not valid JSON: " + e.what());
    }
    cfg = merge_config_json(cfg, file_json);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  RunConfig rc = config_from_json(cfg);
  rc.validate();
  return rc;
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  const json& d = j.at("data");
  c.data_source = d.at("source").get<std::string>();
  c.data_dir = d.at("dir").get<std::string>();
  c.data_labels = d.at("labels").get<std::string>();
  c.data_eval_dir = d.at("eval_dir").get<std::string>();
  c.data_eval_labels = d.at("eval_labels").get<std::string>();
  c.train_count = d.at("train_count").get<int>();
  c.eval_count = d.at("eval_count").get<int>();
  c.num_classes = d.at("num_classes").get<int>();
  c.image_size = d.at("image_size").get<int>();
  c.data_seed = d.at("seed").get<std::uint64_t>();

  const json& m = j.at("model");
  c.token_patch = m.at("token_patch").get<int>();
  c.embed_dim = m.at("embed_dim").get<int>();
  c.depth = m.at("depth").get<int>();
  c.heads = m.at("heads").get<int>();
  c.mlp_ratio = m.at("mlp_ratio").get<double>();
  c.dropout = m.at("dropout").get<double>();
  c.drop_path = m.at("drop_path").get<double>();

  c.mask_patch = j.at("mask").at("mask_patch").get<int>();
  c.mask_ratio = j.at("mask").at("ratio").get<double>();

  c.head_hidden = j.at("heads").at("hidden").get<int>();
  c.head_out = j.at("heads").at("out").get<int>();

  const json& a = j.at("augment");
  c.crop_scale_lo = a.at("crop_scale_lo").get<double>();
  c.crop_scale_hi = a.at("crop_scale_hi").get<double>();
  c.aspect_lo = a.at("aspect_lo").get<double>();
  c.aspect_hi = a.at("aspect_hi").get<double>();
  c.hflip_prob = a.at("hflip_prob").get<double>();
  c.color_jitter = a.at("color_jitter").get<double>();
  c.grayscale_prob = a.at("grayscale_prob").get<double>();

  const json& t = j.at("train");
  c.loss_mode = t.at("loss_mode").get<std::string>();
  c.epochs = t.at("epochs").get<int>();
  c.warmup_epochs = t.at("warmup_epochs").get<int>();
  c.batch_size = t.at("batch_size").get<int>();
  c.base_lr = t.at("base_lr").get<double>();
  c.weight_decay = t.at("weight_decay").get<double>();
  c.tau = t.at("tau").get<double>();
  c.queue_size = t.at("queue_size").get<int>();
  c.ema_momentum = t.at("ema_momentum").get<double>();
  c.momentum_heads = t.at("momentum_heads").get<std::string>();
  c.w_patch = t.at("w_patch").get<double>();
  c.w_image = t.at("w_image").get<double>();
  c.train_seed = t.at("seed").get<std::uint64_t>();
  c.checkpoint_every = t.at("checkpoint_every").get<int>();
  c.log_every = t.at("log_every").get<int>();

  const json& s = j.at("stage1");
  c.s1_epochs = s.at("epochs").get<int>();
  c.s1_warmup_epochs = s.at("warmup_epochs").get<int>();
  c.s1_base_lr = s.at("base_lr").get<double>();
  c.s1_weight_decay = s.at("weight_decay").get<double>();
  c.s1_tau = s.at("tau").get<double>();
  c.s1_queue_size = s.at("queue_size").get<int>();
  c.s1_ema_momentum = s.at("ema_momentum").get<double>();
  c.s1_color_jitter = s.at("color_jitter").get<double>();
  c.s1_grayscale_prob = s.at("grayscale_prob").get<double>();
  c.s1_seed = s.at("seed").get<std::uint64_t>();

  const json& e = j.at("eval");
  c.knn_k = e.at("knn_k").get<int>();
  c.retrieval_topk = e.at("retrieval_topk").get<int>();
  c.pattern_topk = e.at("pattern_topk").get<int>();
  return c;
}

inline void RunConfig::validate() const {
  if (data_source != "synthetic" && data_source != "directory")
    throw std::invalid_argument("config: data.source must be 'synthetic' or 'directory'");
  if (data_source == "directory" && data_dir.empty())
    throw std::invalid_argument("config: data.dir is required when data.source is 'directory'");
  if (train_count <= 0 || eval_count <= 0)
    throw std::invalid_argument("config: data counts must be positive");
  if (num_classes < 1 || num_classes > 6)
    throw std::invalid_argument("config: data.num_classes must lie in [1, 6]");
  encoder_config().validate();  // covers model and image size fields
  PatchGrid grid(image_size, image_size, mask_patch, token_patch);
  masked_cell_count(mask_ratio, grid.cells());  // range-checks the ratio
  if (head_hidden < 0 || head_out <= 0)
    throw std::invalid_argument("config: head dims must be positive");
  stage2_augment().validate();
  stage1_augment().validate();
  loss_mode_from_string(loss_mode);
  if (epochs <= 0 || warmup_epochs < 0 || warmup_epochs > epochs)
    throw std::invalid_argument("config: train.epochs must be positive with warmup <= epochs");
  if (batch_size <= 0) throw std::invalid_argument("config: train.batch_size must be positive");
  if (base_lr <= 0.0 || weight_decay < 0.0)
    throw std::invalid_argument("config: train.base_lr must be positive, weight_decay nonnegative");
  if (tau <= 0.0) throw std::invalid_argument("config: train.tau must be positive");
  if (queue_size <= 0) throw std::invalid_argument("config: train.queue_size must be positive");
  if (ema_momentum < 0.0 || ema_momentum > 1.0)
    throw std::invalid_argument("config: train.ema_momentum must lie in [0, 1]");
  if (momentum_heads != "ema" && momentum_heads != "frozen")
    throw std::invalid_argument("config: train.momentum_heads must be 'ema' or 'frozen'");
  if (w_patch < 0.0 || w_image < 0.0)
    throw std::invalid_argument("config: loss weights must be nonnegative");
  if (checkpoint_every < 0 || log_every <= 0)
    throw std::invalid_argument("config: train.checkpoint_every >= 0 and log_every > 0 required");
  if (s1_epochs <= 0 || s1_warmup_epochs < 0 || s1_warmup_epochs > s1_epochs)
    throw std::invalid_argument("config: stage1.epochs must be positive with warmup <= epochs");
  if (s1_base_lr <= 0.0 || s1_weight_decay < 0.0 || s1_tau <= 0.0 || s1_queue_size <= 0)
    throw std::invalid_argument("config: stage1 optimizer fields out of range");
  if (s1_ema_momentum < 0.0 || s1_ema_momentum > 1.0)
    throw std::invalid_argument("config: stage1.ema_momentum must lie in [0, 1]");
  if (knn_k <= 0) throw std::invalid_argument("config: eval.knn_k must be positive");
  if (retrieval_topk < 0 || pattern_topk <= 0)
    throw std::invalid_argument("config: eval top-k fields out of range");
}

inline EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.image_h = image_size;
  e.image_w = image_size;
  e.in_channels = 3;
  e.token_patch = token_patch;
  e.embed_dim = embed_dim;
  e.depth = depth;
  e.heads = heads;
  e.mlp_ratio = mlp_ratio;
  e.dropout = dropout;
  e.drop_path = drop_path;
  return e;
}

inline AugmentationConfig RunConfig::stage2_augment() const {
  AugmentationConfig a;
  a.crop_scale_lo = crop_scale_lo;
  a.crop_scale_hi = crop_scale_hi;
  a.aspect_lo = aspect_lo;
  a.aspect_hi = aspect_hi;
  a.hflip_prob = hflip_prob;
  a.color_jitter = color_jitter;
  a.grayscale_prob = grayscale_prob;
  a.out_h = image_size;
  a.out_w = image_size;
  return a;
}

inline AugmentationConfig RunConfig::stage1_augment() const {
  AugmentationConfig a = stage2_augment();
  a.color_jitter = s1_color_jitter;
  a.grayscale_prob = s1_grayscale_prob;
  return a;
}

// Flat "path = value" listing of every known key with its default, used by
// the CLI help text.
inline std::vector<std::string> config_key_help() {
  std::vector<std::string> out;
  const json defaults = default_config_json();
  for (const auto& [section, body] : defaults.items())
    for (const auto& [key, value] : body.items())
      out.push_back(section + "." + key + " (default: " + value.dump() + ")");
  return out;
}

}  // namespace mimco
