// Binary checkpoint container.
//
// Layout (little-endian):
//   "DASTCKPT" | u32 version | u64 n | n bytes JSON metadata
//   u32 group count, then per group: string name | u32 tensor count |
//     per tensor: string name | u64 rows | u64 cols | rows*cols f64
//   u64 FNV-1a checksum of every preceding byte
// Strings are u64 length + bytes. Doubles are stored bit-exactly.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dast/autodiff.hpp"

namespace dast::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

using ad::ParamSet;
using ad::Tensor;
using ordered_json = nlohmann::ordered_json;

inline constexpr char kMagic[8] = {'D', 'A', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, format, version, checksum, mismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct TensorGroup {
  std::string name;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

struct Archive {
  ordered_json meta = ordered_json::object();
  std::vector<TensorGroup> groups;

  bool has_group(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return true;
    return false;
  }
  const TensorGroup& group(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return g;
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint has no group '" + name + "'");
  }
  void add_group(TensorGroup g) { groups.push_back(std::move(g)); }
};

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail {

class Writer {
 public:
  template <class T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.append(s);
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_)
      throw CheckpointError(CheckpointError::Kind::format,
                            "checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_{0};
};

}  // namespace detail

inline std::string serialize(const Archive& a) {
  detail::Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kVersion);
  w.str(a.meta.dump());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.groups.size()));
  for (const auto& g : a.groups) {
    w.str(g.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(g.tensors.size()));
    for (const auto& [name, t] : g.tensors) {
      w.str(name);
      w.pod<std::uint64_t>(t.rows());
      w.pod<std::uint64_t>(t.cols());
      w.raw(t.data().data(), t.size() * sizeof(double));
    }
  }
  const std::uint64_t sum = fnv1a(w.bytes().data(), w.bytes().size());
  w.pod(sum);
  return std::move(w.bytes());
}

inline Archive deserialize(const std::string& bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < sizeof(kMagic) + 4 + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(K::format, "not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  detail::Reader r(bytes, body);
  char magic[sizeof(kMagic)];
  r.raw(magic, sizeof(magic));
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion)
    throw CheckpointError(K::version, "checkpoint version " + std::to_string(version) +
                                          " is not supported (expected " +
                                          std::to_string(kVersion) + ")");
  if (fnv1a(bytes.data(), body) != stored)
    throw CheckpointError(K::checksum, "checkpoint checksum mismatch (file is corrupt)");
  Archive a;
  try {
    a.meta = ordered_json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(K::format, std::string("checkpoint metadata: ") + e.what());
  }
  const auto groups = r.pod<std::uint32_t>();
  for (std::uint32_t gi = 0; gi < groups; ++gi) {
    TensorGroup g;
    g.name = r.str();
    const auto count = r.pod<std::uint32_t>();
    for (std::uint32_t ti = 0; ti < count; ++ti) {
      std::string name = r.str();
      const auto rows = r.pod<std::uint64_t>();
      const auto cols = r.pod<std::uint64_t>();
      if (rows == 0 || cols == 0 || rows > (body - r.position()) / sizeof(double) / cols)
        throw CheckpointError(K::format, "tensor '" + name + "' has an invalid shape");
      Tensor t(rows, cols);
      r.raw(t.data().data(), t.size() * sizeof(double));
      g.tensors.emplace_back(std::move(name), std::move(t));
    }
    a.groups.push_back(std::move(g));
  }
  if (r.position() != body) throw CheckpointError(K::format, "trailing bytes in checkpoint");
  return a;
}

inline void save(const std::filesystem::path& path, const Archive& a) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(a);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::io, "cannot write '" + tmp.string() + "'");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError(CheckpointError::Kind::io, "write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Archive load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

inline TensorGroup group_of(const std::string& name, const ParamSet& p) {
  TensorGroup g{name, {}};
  for (std::size_t i = 0; i < p.size(); ++i) g.tensors.emplace_back(p.name_at(i), p.at(i).value());
  return g;
}

inline TensorGroup group_of(const std::string& name, const std::vector<Tensor>& ts) {
  TensorGroup g{name, {}};
  for (std::size_t i = 0; i < ts.size(); ++i) g.tensors.emplace_back(std::to_string(i), ts[i]);
  return g;
}

inline ParamSet params_of(const TensorGroup& g) {
  ParamSet p;
  for (const auto& [name, t] : g.tensors) p.add(name, t);
  return p;
}

inline std::vector<Tensor> tensors_of(const TensorGroup& g) {
  std::vector<Tensor> out;
  for (const auto& kv : g.tensors) out.push_back(kv.second);
  return out;
}

}  // namespace dast::checkpoint
