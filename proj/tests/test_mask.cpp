#include <map>
#include <stdexcept>

#include <gtest/gtest.h>

#include "mimco/masking.hpp"
#include "mimco/rng.hpp"

using mimco::generate_mask;
using mimco::Mask;
using mimco::masked_cell_count;
using mimco::PatchGrid;
using mimco::Rng;

TEST(PatchGrid, ComputesShapes) {
  PatchGrid g(64, 64, 32, 16);
  EXPECT_EQ(g.grid_h(), 2);
  EXPECT_EQ(g.grid_w(), 2);
  EXPECT_EQ(g.cells(), 4);
  EXPECT_EQ(g.token_h(), 4);
  EXPECT_EQ(g.token_w(), 4);
  EXPECT_EQ(g.tokens(), 16);
  EXPECT_EQ(g.tokens_per_cell(), 4);
}

TEST(PatchGrid, RejectsBadGeometry) {
  EXPECT_THROW(PatchGrid(60, 64, 32, 16), std::invalid_argument);   // not divisible by mask patch
  EXPECT_THROW(PatchGrid(64, 64, 24, 16), std::invalid_argument);   // mask not multiple of token
  EXPECT_THROW(PatchGrid(64, 64, 32, 0), std::invalid_argument);    // degenerate token patch
  EXPECT_THROW(PatchGrid(0, 64, 32, 16), std::invalid_argument);    // degenerate image
  EXPECT_THROW(PatchGrid(64, 64, 32, 48), std::invalid_argument);   // mask smaller than token
}

TEST(MaskedCellCount, RoundsHalfToEven) {
  EXPECT_EQ(masked_cell_count(0.6, 49), 29);  // 29.4 rounds down
  EXPECT_EQ(masked_cell_count(0.5, 49), 24);  // 24.5 rounds to even 24
  EXPECT_EQ(masked_cell_count(0.7, 49), 34);  // 34.3 rounds down
  EXPECT_EQ(masked_cell_count(0.5, 5), 2);    // 2.5 -> 2
  EXPECT_EQ(masked_cell_count(0.7, 5), 4);    // 3.5 -> 4
  EXPECT_EQ(masked_cell_count(0.6, 4), 2);    // 2.4 -> 2 (desk-scale grid)
  EXPECT_EQ(masked_cell_count(0.0, 10), 0);
  EXPECT_EQ(masked_cell_count(1.0, 10), 10);
}

TEST(MaskedCellCount, TracksRoundOfProduct) {
  // |count - r*N| <= 0.5 everywhere the ratio is valid
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const double r = rng.uniform();
    const int n = 1 + static_cast<int>(rng.uniform_int(200));
    const int c = masked_cell_count(r, n);
    EXPECT_LE(std::abs(c - r * n), 0.5 + 1e-9);
    EXPECT_GE(c, 0);
    EXPECT_LE(c, n);
  }
}

TEST(MaskedCellCount, RejectsBadInputs) {
  EXPECT_THROW(masked_cell_count(-0.1, 4), std::invalid_argument);
  EXPECT_THROW(masked_cell_count(1.1, 4), std::invalid_argument);
  EXPECT_THROW(masked_cell_count(0.5, 0), std::invalid_argument);
}

TEST(GenerateMask, ExactCountAndRange) {
  PatchGrid g(112, 112, 16, 16);  // 7x7 grid
  Rng rng(7);
  for (double ratio : {0.5, 0.6, 0.7}) {
    for (int i = 0; i < 50; ++i) {
      Mask m = generate_mask(g, ratio, rng);
      EXPECT_EQ(m.grid_h, 7);
      EXPECT_EQ(m.grid_w, 7);
      EXPECT_EQ(static_cast<int>(m.cells.size()), 49);
      EXPECT_EQ(m.masked_count(), masked_cell_count(ratio, 49));
    }
  }
}

TEST(GenerateMask, Deterministic) {
  PatchGrid g(64, 64, 32, 16);
  Rng a(3), b(3);
  for (int i = 0; i < 20; ++i) {
    Mask ma = generate_mask(g, 0.6, a);
    Mask mb = generate_mask(g, 0.6, b);
    EXPECT_EQ(ma.cells, mb.cells);
  }
}

TEST(GenerateMask, UniformOverCells) {
  PatchGrid g(112, 112, 16, 16);  // 49 cells, ratio 0.6 -> 29 masked
  Rng rng(99);
  const int draws = 4000;
  std::vector<int> hits(49, 0);
  for (int d = 0; d < draws; ++d) {
    Mask m = generate_mask(g, 0.6, rng);
    for (int c = 0; c < 49; ++c)
      if (m.cells[static_cast<std::size_t>(c)]) ++hits[static_cast<std::size_t>(c)];
  }
  const double expected = 29.0 / 49.0;  // per-cell frequency is k/N, not the ratio
  for (int c = 0; c < 49; ++c) {
    const double freq = static_cast<double>(hits[static_cast<std::size_t>(c)]) / draws;
    EXPECT_NEAR(freq, expected, 0.04) << "cell " << c;
  }
}

TEST(ExpandToTokens, BlocksFollowCells) {
  PatchGrid g(64, 64, 32, 16);  // 2x2 cells, each 2x2 tokens of a 4x4 token grid
  Mask m;
  m.grid_h = 2;
  m.grid_w = 2;
  m.ratio = 0.25;
  m.cells = {1, 0, 0, 0};  // top-left cell only
  const auto tokens = mimco::expand_to_tokens(m, g);
  ASSERT_EQ(tokens.size(), 16u);
  // token (ty,tx) masked iff ty<2 && tx<2
  for (int ty = 0; ty < 4; ++ty)
    for (int tx = 0; tx < 4; ++tx)
      EXPECT_EQ(tokens[static_cast<std::size_t>(ty * 4 + tx)], (ty < 2 && tx < 2) ? 1 : 0);
}

TEST(ExpandToTokens, CountScalesByTokensPerCell) {
  PatchGrid g(64, 64, 32, 16);
  Rng rng(5);
  Mask m = generate_mask(g, 0.6, rng);
  const auto tokens = mimco::expand_to_tokens(m, g);
  int masked_tokens = 0;
  for (auto t : tokens) masked_tokens += t;
  EXPECT_EQ(masked_tokens, m.masked_count() * g.tokens_per_cell());
}

TEST(ExpandToTokens, RejectsShapeMismatch) {
  PatchGrid g(64, 64, 32, 16);
  Mask m;
  m.grid_h = 3;  // wrong for this grid
  m.grid_w = 2;
  m.cells = {0, 0, 0, 0, 0, 0};
  EXPECT_THROW(mimco::expand_to_tokens(m, g), std::invalid_argument);
}
