#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mimco/checkpoint.hpp"
#include "mimco/linalg.hpp"
#include "mimco/rng.hpp"

namespace fs = std::filesystem;

using mimco::CheckpointReader;
using mimco::CheckpointWriter;
using mimco::IntegrityError;
using mimco::Mat;
using mimco::Param;
using mimco::ParamRegistry;
using mimco::TensorBlob;
using mimco::VersionError;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("mimco_ckpt_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Rebuilds the trailing checksum after the payload was tampered with, so the
// reader exercises checks beyond the checksum itself.
std::string with_fixed_checksum(std::string bytes) {
  const std::uint64_t h = mimco::fnv1a64(std::string_view(bytes.data(), bytes.size() - 8));
  std::memcpy(bytes.data() + bytes.size() - 8, &h, 8);
  return bytes;
}

std::string write_sample(const fs::path& path) {
  CheckpointWriter w(0xabcdef1234567890ull);
  w.add_meta("meta", {{"kind", "test"}, {"note", "fixture"}});
  Mat<float> m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  w.add_tensors("params", {mimco::to_blob("layer.weight", m)});
  w.add_u64s("counters", {{"step", 41}, {"epoch", 3}});
  w.write(path.string());
  return slurp(path);
}

}  // namespace

TEST(Fnv1a64, KnownVectors) {
  // Published FNV-1a test vectors.
  EXPECT_EQ(mimco::fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(mimco::fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(mimco::fnv1a64("foobar"), 0x85944171f73967e8ull);
}

TEST(Checkpoint, RoundTripsAllSectionKinds) {
  const fs::path path = temp_file("roundtrip.ckpt");
  write_sample(path);

  CheckpointReader r(path.string());
  EXPECT_EQ(r.config_hash(), 0xabcdef1234567890ull);
  EXPECT_TRUE(r.has("meta"));
  EXPECT_TRUE(r.has("params"));
  EXPECT_FALSE(r.has("ghost"));

  auto meta = r.meta("meta");
  EXPECT_EQ(meta.at("kind"), "test");
  EXPECT_EQ(meta.at("note"), "fixture");

  auto tensors = r.tensors("params");
  ASSERT_EQ(tensors.size(), 1u);
  EXPECT_EQ(tensors[0].name, "layer.weight");
  EXPECT_EQ(tensors[0].rows, 2u);
  EXPECT_EQ(tensors[0].cols, 3u);
  Mat<float> back = mimco::from_blob<float>(tensors[0]);
  Mat<float> expect(2, 3);
  expect << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(back, expect);

  auto counters = r.u64s("counters");
  ASSERT_EQ(counters.size(), 2u);
  EXPECT_EQ(counters[0].first, "step");
  EXPECT_EQ(counters[0].second, 41u);
  EXPECT_EQ(counters[1].second, 3u);
  fs::remove(path);
}

TEST(Checkpoint, FloatPayloadIsBitExact) {
  const fs::path path = temp_file("bits.ckpt");
  mimco::Rng rng(5);
  Mat<float> m(8, 8);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  CheckpointWriter w(1);
  w.add_tensors("t", {mimco::to_blob("m", m)});
  w.write(path.string());
  CheckpointReader r(path.string());
  Mat<float> back = mimco::from_blob<float>(r.tensors("t")[0]);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    ASSERT_EQ(std::memcmp(&m.data()[i], &back.data()[i], 4), 0);
  fs::remove(path);
}

TEST(Checkpoint, TruncationIsAnIntegrityError) {
  const fs::path path = temp_file("trunc.ckpt");
  std::string bytes = write_sample(path);
  dump(path, bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(CheckpointReader{path.string()}, IntegrityError);
  dump(path, bytes.substr(0, 10));
  EXPECT_THROW(CheckpointReader{path.string()}, IntegrityError);
  fs::remove(path);
}

TEST(Checkpoint, BadMagicIsAnIntegrityError) {
  const fs::path path = temp_file("magic.ckpt");
  std::string bytes = write_sample(path);
  bytes[0] = 'X';
  dump(path, bytes);
  EXPECT_THROW(CheckpointReader{path.string()}, IntegrityError);
  fs::remove(path);
}

TEST(Checkpoint, FlippedPayloadByteIsAnIntegrityError) {
  const fs::path path = temp_file("flip.ckpt");
  std::string bytes = write_sample(path);
  bytes[bytes.size() / 2] ^= 0x40;
  dump(path, bytes);
  EXPECT_THROW(CheckpointReader{path.string()}, IntegrityError);
  fs::remove(path);
}

TEST(Checkpoint, UnknownVersionIsAVersionError) {
  const fs::path path = temp_file("version.ckpt");
  std::string bytes = write_sample(path);
  // Version lives right after the 8-byte magic; bump it and re-seal.
  std::uint32_t v = 99;
  std::memcpy(bytes.data() + 8, &v, 4);
  dump(path, with_fixed_checksum(std::move(bytes)));
  EXPECT_THROW(CheckpointReader{path.string()}, VersionError);
  fs::remove(path);
}

TEST(Checkpoint, MissingSectionIsAnIntegrityError) {
  const fs::path path = temp_file("missing.ckpt");
  write_sample(path);
  CheckpointReader r(path.string());
  EXPECT_THROW(r.tensors("nope"), IntegrityError);
  fs::remove(path);
}

TEST(Checkpoint, WriteLeavesNoTempFileBehind) {
  const fs::path path = temp_file("atomic.ckpt");
  write_sample(path);
  EXPECT_TRUE(fs::exists(path));
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
  fs::remove(path);
}

TEST(RestoreRegistry, RoundTripAndMismatchDetection) {
  Param<float> a, b;
  a.resize(2, 2);
  b.resize(1, 3);
  a.v << 1, 2, 3, 4;
  b.v << 5, 6, 7;
  ParamRegistry<float> reg = {{"a", &a}, {"b", &b}};
  auto blobs = mimco::registry_blobs(reg);

  Param<float> a2, b2;
  a2.resize(2, 2);
  b2.resize(1, 3);
  ParamRegistry<float> reg2 = {{"a", &a2}, {"b", &b2}};
  mimco::restore_registry(reg2, blobs);
  EXPECT_EQ(a2.v, a.v);
  EXPECT_EQ(b2.v, b.v);

  // Missing tensor.
  auto missing = blobs;
  missing.pop_back();
  EXPECT_THROW(mimco::restore_registry(reg2, missing), IntegrityError);

  // Extra tensor.
  auto extra = blobs;
  extra.push_back(mimco::to_blob<float>("c", Mat<float>::Zero(1, 1)));
  EXPECT_THROW(mimco::restore_registry(reg2, extra), IntegrityError);

  // Duplicate name.
  auto dup = blobs;
  dup.push_back(blobs[0]);
  EXPECT_THROW(mimco::restore_registry(reg2, dup), IntegrityError);

  // Shape mismatch.
  auto wrong = blobs;
  wrong[0] = mimco::to_blob<float>("a", Mat<float>::Zero(3, 3));
  EXPECT_THROW(mimco::restore_registry(reg2, wrong), IntegrityError);
}
