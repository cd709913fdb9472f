#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimco/image.hpp"
#include "mimco/rng.hpp"

namespace mimco {

struct LabeledImage {
  std::string id;
  int label = -1;
  Image image;
};

struct Dataset {
  std::vector<LabeledImage> items;
  int num_classes = 0;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct SyntheticConfig {
  int num_classes = 4;   // shapes: disc, square, triangle, cross, ring, diamond
  int image_size = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 1 || num_classes > 6)
      throw std::invalid_argument("SyntheticConfig: num_classes must be in [1, 6]");
    if (image_size < 16) throw std::invalid_argument("SyntheticConfig: image_size must be >= 16");
  }
};

namespace detail {

// Foreground/background colors with a guaranteed luma gap so every shape is
// visible regardless of the color draw.
inline void sample_colors(Rng& rng, float fg[3], float bg[3]) {
  for (int c = 0; c < 3; ++c) bg[c] = static_cast<float>(rng.uniform(0.0, 0.35));
  for (int c = 0; c < 3; ++c) fg[c] = static_cast<float>(rng.uniform(0.55, 1.0));
}

inline bool inside_shape(int cls, double nx, double ny, double r, double half_thick) {
  const double ax = std::abs(nx);
  const double ay = std::abs(ny);
  switch (cls) {
    case 0:  // disc
      return nx * nx + ny * ny <= r * r;
    case 1:  // square
      return ax <= r && ay <= r;
    case 2:  // upward triangle, apex at the top
      return ny >= -r && ny <= r && ax <= (ny + r) / 2.0;
    case 3:  // cross
      return (ax <= half_thick && ay <= r) || (ay <= half_thick && ax <= r);
    case 4:  // ring
      {
        const double d2 = nx * nx + ny * ny;
        const double inner = r - 2.0 * half_thick;
        return d2 <= r * r && d2 >= inner * inner;
      }
    case 5:  // diamond
      return ax + ay <= r;
    default:
      return false;
  }
}

}  // namespace detail

// One synthetic sample, fully determined by (cfg.seed, tag, index). Class is
// encoded by shape only; colors, position and size are nuisance factors.
inline LabeledImage make_synthetic_sample(const SyntheticConfig& cfg, std::uint64_t tag,
                                          int index, int label) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, {0x5348415045ULL /* shape stream */, tag,
                                   static_cast<std::uint64_t>(index)});
  const int s = cfg.image_size;
  Image img(s, s, 3);
  float fg[3], bg[3];
  detail::sample_colors(rng, fg, bg);

  const double r = rng.uniform(0.28, 0.42) * s;
  const double cx = s / 2.0 + rng.uniform(-0.08, 0.08) * s;
  const double cy = s / 2.0 + rng.uniform(-0.08, 0.08) * s;
  const double half_thick = std::max(2.0, 0.16 * r);

  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double nx = x + 0.5 - cx;
      const double ny = y + 0.5 - cy;
      const bool in = detail::inside_shape(label, nx, ny, r, half_thick);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = in ? fg[c] : bg[c];
    }

  // Light pixel noise.
  for (auto& v : img.data)
    v = std::clamp(v + static_cast<float>(rng.normal(0.0, 0.02)), 0.f, 1.f);

  LabeledImage out;
  out.id = "syninst-" + std::to_string(tag) + "-" + std::to_string(index);
  out.label = label;
  out.image = std::move(img);
  return out;
}

// Deterministic synthetic split. `tag` separates train/test streams.
inline Dataset make_synthetic_dataset(const SyntheticConfig& cfg, int count, std::uint64_t tag) {
  cfg.validate();
  if (count < 0) throw std::invalid_argument("make_synthetic_dataset: count must be >= 0");
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.items.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int label = i % cfg.num_classes;
    ds.items.push_back(make_synthetic_sample(cfg, tag, i, label));
  }
  return ds;
}

// Directory dataset: a label file with lines "relative_path,label" next to
// binary PPM images.
inline Dataset load_directory_dataset(const std::string& dir, const std::string& label_file) {
  std::ifstream f(label_file);
  if (!f) throw std::runtime_error("load_directory_dataset: cannot open " + label_file);
  Dataset ds;
  std::string line;
  int max_label = -1;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find_last_of(',');
    if (comma == std::string::npos)
      throw std::runtime_error("load_directory_dataset: bad line '" + line + "'");
    LabeledImage item;
    item.id = line.substr(0, comma);
    item.label = std::stoi(line.substr(comma + 1));
    item.image = load_ppm(dir + "/" + item.id);
    max_label = std::max(max_label, item.label);
    ds.items.push_back(std::move(item));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace mimco
