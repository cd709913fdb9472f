#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mimco/linalg.hpp"

namespace mimco {

// File is unreadable as a checkpoint: bad magic, truncation, checksum
// mismatch, malformed section data.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File parses but its format version is not one this build understands.
class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'M', 'C', 'O', 'C', 'K', 'P'};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x00000100000001b3ull;
  }
  return h;
}

// Tensors are stored as float32 row-major regardless of the in-memory scalar;
// training runs in float32, so its checkpoints round-trip bit-exactly.
struct TensorBlob {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;
};

template <typename S>
TensorBlob to_blob(const std::string& name, const Mat<S>& m) {
  TensorBlob b;
  b.name = name;
  b.rows = static_cast<std::uint32_t>(m.rows());
  b.cols = static_cast<std::uint32_t>(m.cols());
  b.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i)
    b.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return b;
}

template <typename S>
Mat<S> from_blob(const TensorBlob& b) {
  Mat<S> m(b.rows, b.cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<S>(b.data[static_cast<std::size_t>(i)]);
  return m;
}

namespace detail {

struct ByteWriter {
  std::string bytes;
  void u32(std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); }
  void u64(std::uint64_t v) { bytes.append(reinterpret_cast<const char*>(&v), 8); }
  void f32s(const std::vector<float>& v) {
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.append(s);
  }
};

struct ByteReader {
  std::string_view bytes;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IntegrityError("checkpoint: truncated data");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes.substr(pos, n));
    pos += n;
    return s;
  }
  std::vector<float> f32s(std::size_t count) {
    need(count * sizeof(float));
    std::vector<float> v(count);
    std::memcpy(v.data(), bytes.data() + pos, count * sizeof(float));
    pos += count * sizeof(float);
    return v;
  }
};

}  // namespace detail

// Sectioned binary container. Layout: magic, u32 version, u64 config hash,
// u32 section count, sections (name, u64 payload length, payload), then a
// trailing FNV-1a-64 checksum of every preceding byte. Writes go through a
// temp file and a rename so a crash never leaves a half-written checkpoint
// at the target path.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::uint64_t config_hash) : config_hash_(config_hash) {}

  void add_meta(const std::string& section, const std::map<std::string, std::string>& kv) {
    detail::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(kv.size()));
    for (const auto& [k, v] : kv) {
      w.str(k);
      w.str(v);
    }
    sections_.emplace_back(section, std::move(w.bytes));
  }

  void add_tensors(const std::string& section, const std::vector<TensorBlob>& tensors) {
    detail::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.str(t.name);
      w.u32(t.rows);
      w.u32(t.cols);
      if (t.data.size() != static_cast<std::size_t>(t.rows) * t.cols)
        throw std::invalid_argument("checkpoint: tensor data does not match its shape");
      w.f32s(t.data);
    }
    sections_.emplace_back(section, std::move(w.bytes));
  }

  void add_u64s(const std::string& section,
                const std::vector<std::pair<std::string, std::uint64_t>>& values) {
    detail::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(values.size()));
    for (const auto& [k, v] : values) {
      w.str(k);
      w.u64(v);
    }
    sections_.emplace_back(section, std::move(w.bytes));
  }

  void write(const std::string& path) const {
    detail::ByteWriter w;
    w.bytes.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    w.u64(config_hash_);
    w.u32(static_cast<std::uint32_t>(sections_.size()));
    for (const auto& [name, payload] : sections_) {
      w.str(name);
      w.u64(payload.size());
      w.bytes.append(payload);
    }
    w.u64(fnv1a64(w.bytes));

    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp + " for writing");
      f.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
      if (!f) throw std::runtime_error("checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::uint64_t config_hash_;
  std::vector<std::pair<std::string, std::string>> sections_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    raw_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());

    if (raw_.size() < sizeof(kCheckpointMagic) + 4 + 8 + 4 + 8)
      throw IntegrityError("checkpoint: file too small");
    if (std::memcmp(raw_.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
      throw IntegrityError("checkpoint: bad magic");

    const std::string_view body(raw_.data(), raw_.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, raw_.data() + raw_.size() - 8, 8);
    if (fnv1a64(body) != stored) throw IntegrityError("checkpoint: checksum mismatch");

    detail::ByteReader r{body, sizeof(kCheckpointMagic)};
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
      throw VersionError("checkpoint: unsupported format version " + std::to_string(version));
    config_hash_ = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = r.str();
      const std::uint64_t len = r.u64();
      r.need(static_cast<std::size_t>(len));
      sections_[name] = std::string(body.substr(r.pos, static_cast<std::size_t>(len)));
      r.pos += static_cast<std::size_t>(len);
    }
  }

  std::uint64_t config_hash() const { return config_hash_; }
  bool has(const std::string& section) const { return sections_.count(section) != 0; }

  std::map<std::string, std::string> meta(const std::string& section) const {
    detail::ByteReader r = open(section);
    std::map<std::string, std::string> kv;
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string k = r.str();
      kv[k] = r.str();
    }
    return kv;
  }

  std::vector<TensorBlob> tensors(const std::string& section) const {
    detail::ByteReader r = open(section);
    std::vector<TensorBlob> out;
    const std::uint32_t n = r.u32();
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      TensorBlob t;
      t.name = r.str();
      t.rows = r.u32();
      t.cols = r.u32();
      t.data = r.f32s(static_cast<std::size_t>(t.rows) * t.cols);
      out.push_back(std::move(t));
    }
    return out;
  }

  std::vector<std::pair<std::string, std::uint64_t>> u64s(const std::string& section) const {
    detail::ByteReader r = open(section);
    std::vector<std::pair<std::string, std::uint64_t>> out;
    const std::uint32_t n = r.u32();
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string k = r.str();
      const std::uint64_t v = r.u64();
      out.emplace_back(std::move(k), v);
    }
    return out;
  }

 private:
  detail::ByteReader open(const std::string& section) const {
    auto it = sections_.find(section);
    if (it == sections_.end())
      throw IntegrityError("checkpoint: missing section '" + section + "'");
    return detail::ByteReader{it->second, 0};
  }

  std::vector<char> raw_;
  std::uint64_t config_hash_ = 0;
  std::map<std::string, std::string> sections_;
};

// Registry helpers shared by every checkpointed component.
template <typename S>
std::vector<TensorBlob> registry_blobs(const ParamRegistry<S>& reg) {
  std::vector<TensorBlob> out;
  out.reserve(reg.size());
  for (const auto& ref : reg) out.push_back(to_blob(ref.name, ref.p->v));
  return out;
}

// Restores values by name; every registry entry must be present with the
// right shape, and unknown tensor names are rejected rather than dropped.
template <typename S>
void restore_registry(ParamRegistry<S>& reg, const std::vector<TensorBlob>& blobs) {
  std::map<std::string, const TensorBlob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  if (by_name.size() != blobs.size())
    throw IntegrityError("checkpoint: duplicate tensor names in section");
  if (by_name.size() != reg.size())
    throw IntegrityError("checkpoint: tensor count does not match model");
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

}  // namespace mimco
