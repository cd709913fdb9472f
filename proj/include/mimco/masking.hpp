#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mimco/rng.hpp"

namespace mimco {

// Geometry shared by masking and tokenization. Masking happens on a coarse
// cell grid (mask_patch pixels per cell) while the encoder tokenizes at
// token_patch pixels, so one mask cell covers an integer block of tokens.
struct PatchGrid {
  int image_h = 0;
  int image_w = 0;
  int mask_patch = 32;
  int token_patch = 16;

  PatchGrid() = default;

  PatchGrid(int h, int w, int mask_px, int token_px)
      : image_h(h), image_w(w), mask_patch(mask_px), token_patch(token_px) {
    if (h <= 0 || w <= 0 || mask_px <= 0 || token_px <= 0)
      throw std::invalid_argument("PatchGrid: dimensions must be positive");
    if (h % mask_px != 0 || w % mask_px != 0)
      throw std::invalid_argument("PatchGrid: image dims must be divisible by mask_patch");
    if (h % token_px != 0 || w % token_px != 0)
      throw std::invalid_argument("PatchGrid: image dims must be divisible by token_patch");
    if (mask_px % token_px != 0)
      throw std::invalid_argument("PatchGrid: mask_patch must be divisible by token_patch");
  }

  int grid_h() const { return image_h / mask_patch; }
  int grid_w() const { return image_w / mask_patch; }
  int cells() const { return grid_h() * grid_w(); }
  int token_h() const { return image_h / token_patch; }
  int token_w() const { return image_w / token_patch; }
  int tokens() const { return token_h() * token_w(); }
  int tokens_per_cell() const {
    const int s = mask_patch / token_patch;
    return s * s;
  }
};

struct Mask {
  int grid_h = 0;
  int grid_w = 0;
  double ratio = 0.0;
  std::vector<std::uint8_t> cells;  // 1 = masked, row-major

  int masked_count() const {
    int n = 0;
    for (auto c : cells) n += c != 0;
    return n;
  }
};

// Round-half-to-even of ratio * cells. Keeps the count deterministic and
// unbiased across the ratio grid.
inline int masked_cell_count(double ratio, int cells) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask ratio must be in [0, 1]");
  if (cells <= 0) throw std::invalid_argument("mask grid has no cells");
  const double x = ratio * cells;
  const double f = std::floor(x);
  const double frac = x - f;
  int k;
  if (frac > 0.5) {
    k = static_cast<int>(f) + 1;
  } else if (frac < 0.5) {
    k = static_cast<int>(f);
  } else {
    const int fi = static_cast<int>(f);
    k = (fi % 2 == 0) ? fi : fi + 1;
  }
  if (k < 0) k = 0;
  if (k > cells) k = cells;
  return k;
}

// Exactly masked_cell_count(ratio, N) cells chosen uniformly without
// replacement (partial Fisher-Yates).
inline Mask generate_mask(const PatchGrid& grid, double ratio, Rng& rng) {
  const int n = grid.cells();
  const int k = masked_cell_count(ratio, n);
  Mask mask;
  mask.grid_h = grid.grid_h();
  mask.grid_w = grid.grid_w();
  mask.ratio = ratio;
  mask.cells.assign(static_cast<std::size_t>(n), 0);

  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    mask.cells[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  }
  return mask;
}

// Coarse cell mask -> token-level mask. Each cell expands to a
// (mask_patch/token_patch)^2 block of identical booleans.
inline std::vector<std::uint8_t> expand_to_tokens(const Mask& mask, const PatchGrid& grid) {
  if (mask.grid_h != grid.grid_h() || mask.grid_w != grid.grid_w())
    throw std::invalid_argument("expand_to_tokens: mask shape does not match grid");
  const int scale = grid.mask_patch / grid.token_patch;
  const int th = grid.token_h();
  const int tw = grid.token_w();
  std::vector<std::uint8_t> tokens(static_cast<std::size_t>(th * tw), 0);
  for (int cy = 0; cy < mask.grid_h; ++cy) {
    for (int cx = 0; cx < mask.grid_w; ++cx) {
      const std::uint8_t v = mask.cells[static_cast<std::size_t>(cy * mask.grid_w + cx)];
      if (!v) continue;
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx)
          tokens[static_cast<std::size_t>((cy * scale + dy) * tw + (cx * scale + dx))] = 1;
    }
  }
  return tokens;
}

}  // namespace mimco
