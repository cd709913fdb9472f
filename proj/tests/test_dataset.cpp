#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <gtest/gtest.h>

#include "mimco/dataset.hpp"
#include "mimco/image.hpp"

namespace fs = std::filesystem;

using mimco::Dataset;
using mimco::Image;
using mimco::SyntheticConfig;

TEST(Synthetic, DeterministicPerSeedTagIndex) {
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 32;
  cfg.seed = 42;
  Dataset a = mimco::make_synthetic_dataset(cfg, 12, /*tag=*/1);
  Dataset b = mimco::make_synthetic_dataset(cfg, 12, /*tag=*/1);
  ASSERT_EQ(a.items.size(), 12u);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_EQ(a.items[i].id, b.items[i].id);
    EXPECT_EQ(a.items[i].label, b.items[i].label);
    EXPECT_EQ(a.items[i].image.data, b.items[i].image.data);
  }
}

TEST(Synthetic, SeedAndTagChangePixels) {
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 32;
  cfg.seed = 1;
  Dataset base = mimco::make_synthetic_dataset(cfg, 4, 1);
  Dataset tag = mimco::make_synthetic_dataset(cfg, 4, 2);
  cfg.seed = 2;
  Dataset seed = mimco::make_synthetic_dataset(cfg, 4, 1);
  EXPECT_NE(base.items[0].image.data, seed.items[0].image.data);
  EXPECT_NE(base.items[0].image.data, tag.items[0].image.data);
  // The id encodes the stream tag, so train/eval items never collide.
  EXPECT_NE(base.items[0].id, tag.items[0].id);
}

TEST(Synthetic, LabelsCycleThroughClasses) {
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 32;
  cfg.seed = 7;
  Dataset d = mimco::make_synthetic_dataset(cfg, 10, 1);
  for (std::size_t i = 0; i < d.items.size(); ++i)
    EXPECT_EQ(d.items[i].label, static_cast<int>(i % 4));
}

TEST(Synthetic, ClassesAreVisuallyDistinct) {
  // Mean pixel statistics should separate the classes, otherwise the
  // directional-learning checks downstream have nothing to learn.
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 64;
  cfg.seed = 3;
  Dataset d = mimco::make_synthetic_dataset(cfg, 64, 1);
  std::vector<double> mean_by_class(4, 0.0);
  std::vector<int> count(4, 0);
  for (const auto& item : d.items) {
    double s = 0;
    for (float v : item.image.data) s += v;
    s /= static_cast<double>(item.image.data.size());
    mean_by_class[static_cast<std::size_t>(item.label)] += s;
    count[static_cast<std::size_t>(item.label)] += 1;
  }
  // Within a class the generator varies instances, so images must not be
  // byte-identical copies of one template.
  const auto& first = d.items[0].image.data;
  const auto& later = d.items[4].image.data;  // same class, next instance
  EXPECT_NE(first, later);
  for (int c = 0; c < 4; ++c) {
    ASSERT_GT(count[static_cast<std::size_t>(c)], 0);
    mean_by_class[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
  }
  // At least one pair of classes should differ in mean brightness; the
  // shapes differ in structure too, but this is the cheap proxy.
  double lo = mean_by_class[0], hi = mean_by_class[0];
  for (double m : mean_by_class) {
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  EXPECT_GT(hi - lo, 1e-3);
}

TEST(Synthetic, RejectsBadConfigsAndNegativeCounts) {
  SyntheticConfig cfg;
  cfg.num_classes = 0;
  EXPECT_THROW(mimco::make_synthetic_dataset(cfg, 4, 1), std::invalid_argument);
  cfg = SyntheticConfig{};
  cfg.num_classes = 7;
  EXPECT_THROW(mimco::make_synthetic_dataset(cfg, 4, 1), std::invalid_argument);
  cfg = SyntheticConfig{};
  cfg.image_size = 8;
  EXPECT_THROW(mimco::make_synthetic_dataset(cfg, 4, 1), std::invalid_argument);
  cfg = SyntheticConfig{};
  EXPECT_THROW(mimco::make_synthetic_dataset(cfg, -1, 1), std::invalid_argument);
  EXPECT_TRUE(mimco::make_synthetic_dataset(cfg, 0, 1).empty());
}

TEST(DirectoryDataset, RoundTripsImagesAndLabels) {
  const fs::path dir = fs::temp_directory_path() / "mimco_dataset_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SyntheticConfig cfg;
  cfg.num_classes = 3;
  cfg.image_size = 16;
  cfg.seed = 9;
  Dataset src = mimco::make_synthetic_dataset(cfg, 6, 1);
  {
    std::ofstream labels(dir / "labels.csv");
    labels << "# relative_path,label\n";
    for (std::size_t i = 0; i < src.items.size(); ++i) {
      const std::string name = "img" + std::to_string(i) + ".ppm";
      mimco::save_ppm(src.items[i].image, (dir / name).string());
      labels << name << "," << src.items[i].label << "\n";
    }
  }

  Dataset loaded = mimco::load_directory_dataset(dir.string(), (dir / "labels.csv").string());
  ASSERT_EQ(loaded.items.size(), src.items.size());
  EXPECT_EQ(loaded.num_classes, 3);
  for (std::size_t i = 0; i < loaded.items.size(); ++i) {
    EXPECT_EQ(loaded.items[i].label, src.items[i].label);
    EXPECT_EQ(loaded.items[i].image.h, 16);
    EXPECT_EQ(loaded.items[i].image.w, 16);
    // One quantization trip through 8-bit PPM.
    for (std::size_t p = 0; p < loaded.items[i].image.data.size(); ++p)
      ASSERT_NEAR(loaded.items[i].image.data[p], src.items[i].image.data[p], 1.0f / 255.0f + 1e-6f);
  }
  fs::remove_all(dir);
}

TEST(DirectoryDataset, MissingLabelFileFails) {
  const fs::path dir = fs::temp_directory_path() / "mimco_dataset_missing";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(mimco::load_directory_dataset(dir.string(), (dir / "nope.csv").string()),
               std::runtime_error);
  fs::remove_all(dir);
}

TEST(DirectoryDataset, MissingImageListedInLabelsFails) {
  const fs::path dir = fs::temp_directory_path() / "mimco_dataset_badrow";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream labels(dir / "labels.csv");
    labels << "ghost.ppm,0\n";
  }
  EXPECT_THROW(mimco::load_directory_dataset(dir.string(), (dir / "labels.csv").string()),
               std::runtime_error);
  fs::remove_all(dir);
}
