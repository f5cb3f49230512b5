#pragma once

// Interaction files and the binary feature-cache format.
//
// XSMF layout (little-endian):
//   char[4] "XSMF" | u8 version | u8 modality | u16 reserved
//   u32 item_count | u32 layer_count | u32 dim
//   item_count x { u32 id_len | id bytes | layer_count*dim float32 }
//
// XSMG ground-truth sidecar:
//   char[4] "XSMG" | u8 version | u8[3] reserved
//   u32 windows | u32 users | u32 items
//   windows*users*items float32, window-major then user-major

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "xsmoe/error.hpp"
#include "xsmoe/features.hpp"
#include "xsmoe/model.hpp"

namespace xsmoe {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

/// Stable sort by (timestamp, user_id, item_id).
inline void sort_interactions(std::vector<Interaction>& xs) {
  std::stable_sort(xs.begin(), xs.end(), [](const Interaction& a, const Interaction& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.item_id < b.item_id;
  });
}

inline constexpr std::string_view kInteractionHeader = "user_id,item_id,timestamp";

inline std::vector<Interaction> parse_interactions(std::istream& in, const std::string& name) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw DataError(name + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
      if (line != kInteractionHeader) fail("expected header '" + std::string(kInteractionHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos)
      fail("expected 3 comma-separated fields");
    Interaction x;
    x.user_id = line.substr(0, c1);
    x.item_id = line.substr(c1 + 1, c2 - c1 - 1);
    if (x.user_id.empty()) fail("empty user_id");
    if (x.item_id.empty()) fail("empty item_id");
    const std::string_view ts(line.data() + c2 + 1, line.size() - c2 - 1);
    auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), x.timestamp);
    if (ts.empty() || ec != std::errc() || ptr != ts.data() + ts.size())
      fail("timestamp '" + std::string(ts) + "' is not an integer");
    out.push_back(std::move(x));
  }
  if (lineno == 0) throw DataError(name + ": empty file (missing header)");
  sort_interactions(out);
  return out;
}

inline std::vector<Interaction> load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file " + path.string());
  return parse_interactions(in, path.string());
}

inline void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& xs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kInteractionHeader << '\n';
  for (const auto& x : xs) {
    for (const auto* id : {&x.user_id, &x.item_id})
      if (id->empty() || id->find_first_of(",\r\n") != std::string::npos)
        throw DataError("identifier '" + *id + "' cannot be written as a CSV field");
    out << x.user_id << ',' << x.item_id << ',' << x.timestamp << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

namespace io {

inline void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& b, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(b, u);
}
inline void put_f64(std::string& b, double f) {
  std::uint64_t u;
  std::memcpy(&u, &f, 8);
  put_u64(b, u);
}
inline void put_str(std::string& b, std::string_view s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b.append(s);
}

/// Bounds-checked little-endian cursor; every short read is a truncation.
class Reader {
 public:
  Reader(std::string_view bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& name() const { return name_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n)
      throw DataError(name_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_) + " (need " +
                      std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(std::size_t n, const char* what) {
    auto s = take(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(uint(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(uint(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  float f32(const char* what) {
    const std::uint32_t u = u32(what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  double f64(const char* what) {
    const std::uint64_t u = u64(what);
    double f;
    std::memcpy(&f, &u, 8);
    return f;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    return std::string(take(n, what));
  }
  void expect_end() const {
    if (remaining() != 0)
      throw DataError(name_ + ": " + std::to_string(remaining()) + " trailing bytes after payload");
  }

 private:
  std::string_view bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace io

inline constexpr std::uint8_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderBytes = 20;

struct FeatureCache {
  Modality modality = Modality::visual;
  std::size_t layers = 0;  // M + 1
  std::size_t dim = 0;
  std::vector<std::string> item_ids;
  std::vector<float> values;  // item-major, then layer, then dim

  std::size_t items() const { return item_ids.size(); }
  std::span<const float> vector(std::size_t item, std::size_t layer) const {
    return std::span<const float>(values).subspan((item * layers + layer) * dim, dim);
  }
};

inline void check_cache(const FeatureCache& c, const std::string& name) {
  if (c.layers == 0 || c.dim == 0) throw DataError(name + ": layer count and dim must be positive");
  if (c.values.size() != c.items() * c.layers * c.dim)
    throw DataError(name + ": payload holds " + std::to_string(c.values.size()) + " floats, header implies " +
                    std::to_string(c.items() * c.layers * c.dim));
  std::unordered_set<std::string_view> seen;
  for (std::size_t i = 0; i < c.items(); ++i) {
    if (!seen.insert(c.item_ids[i]).second) throw DataError(name + ": duplicate item_id '" + c.item_ids[i] + "'");
    for (std::size_t l = 0; l < c.layers; ++l)
      for (float v : c.vector(i, l))
        if (!std::isfinite(v))
          throw DataError(name + ": non-finite value in item '" + c.item_ids[i] + "' layer " + std::to_string(l));
  }
}

inline std::string encode_cache(const FeatureCache& c) {
  check_cache(c, "cache");
  std::string b;
  b.reserve(kCacheHeaderBytes + c.values.size() * 4 + c.items() * 16);
  b.append("XSMF");
  io::put_u8(b, kCacheVersion);
  io::put_u8(b, static_cast<std::uint8_t>(c.modality));
  io::put_u16(b, 0);
  io::put_u32(b, static_cast<std::uint32_t>(c.items()));
  io::put_u32(b, static_cast<std::uint32_t>(c.layers));
  io::put_u32(b, static_cast<std::uint32_t>(c.dim));
  const std::size_t stride = c.layers * c.dim;
  for (std::size_t i = 0; i < c.items(); ++i) {
    io::put_str(b, c.item_ids[i]);
    for (std::size_t k = 0; k < stride; ++k) io::put_f32(b, c.values[i * stride + k]);
  }
  return b;
}

inline FeatureCache decode_cache(std::string_view bytes, const std::string& name) {
  io::Reader r(bytes, name);
  if (r.take(4, "magic") != "XSMF") throw DataError(name + ": bad magic (not an XSMF feature cache)");
  const auto version = r.u8("version");
  if (version != kCacheVersion)
    throw DataError(name + ": unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCacheVersion) + ")");
  const auto mod = r.u8("modality");
  if (mod > 1) throw DataError(name + ": unknown modality tag " + std::to_string(mod));
  r.u16("reserved");
  FeatureCache c;
  c.modality = static_cast<Modality>(mod);
  const std::size_t n = r.u32("item count");
  c.layers = r.u32("layer count");
  c.dim = r.u32("dim");
  if (c.layers == 0 || c.dim == 0) throw DataError(name + ": layer count and dim must be positive");
  const std::size_t stride = c.layers * c.dim;
  // Each item needs at least its length prefix and vectors.
  if (n > r.remaining() / (4 + 4 * stride))
    throw DataError(name + ": truncated payload (" + std::to_string(n) + " items declared)");
  c.item_ids.reserve(n);
  c.values.resize(n * stride);
  for (std::size_t i = 0; i < n; ++i) {
    c.item_ids.push_back(r.str("item id"));
    auto raw = r.take(4 * stride, "feature vectors");
    for (std::size_t k = 0; k < stride; ++k) {
      std::uint32_t u = 0;
      for (int j = 0; j < 4; ++j) u |= std::uint32_t(static_cast<unsigned char>(raw[4 * k + j])) << (8 * j);
      std::memcpy(&c.values[i * stride + k], &u, 4);
    }
  }
  r.expect_end();
  check_cache(c, name);
  return c;
}

inline void write_cache(const std::filesystem::path& path, const FeatureCache& c) {
  io::spit(path, encode_cache(c));
}

inline FeatureCache read_cache(const std::filesystem::path& path) {
  return decode_cache(io::slurp(path), path.string());
}

/// Feature bank aligned to a dense item index. Every id must be present;
/// missing ids are reported together.
inline FeatureBank align_features(const FeatureCache& c, const std::vector<std::string>& item_ids,
                                  const std::string& name) {
  std::unordered_map<std::string_view, std::size_t> pos;
  pos.reserve(c.items());
  for (std::size_t i = 0; i < c.items(); ++i) pos.emplace(c.item_ids[i], i);
  FeatureBank bank;
  bank.items = item_ids.size();
  bank.layers = c.layers;
  bank.dim = c.dim;
  bank.values.resize(bank.items * c.layers * c.dim);
  std::vector<std::string> missing;
  const std::size_t stride = c.layers * c.dim;
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    auto it = pos.find(item_ids[i]);
    if (it == pos.end()) {
      missing.push_back(item_ids[i]);
      continue;
    }
    std::copy_n(c.values.begin() + static_cast<std::ptrdiff_t>(it->second * stride), stride,
                bank.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  if (!missing.empty()) {
    std::string msg = name + ": " + std::to_string(missing.size()) + " item(s) have no feature stack:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  return bank;
}

/// Per-window ground-truth affinities of a synthetic world.
struct TruthTable {
  std::size_t windows = 0, users = 0, items = 0;
  std::vector<float> affinity;

  float at(std::size_t w, std::size_t u, std::size_t i) const { return affinity[(w * users + u) * items + i]; }
  std::span<const float> row(std::size_t w, std::size_t u) const {
    return std::span<const float>(affinity).subspan((w * users + u) * items, items);
  }
};

inline void write_truth(const std::filesystem::path& path, const TruthTable& t) {
  if (t.affinity.size() != t.windows * t.users * t.items) throw ContractError("write_truth: size mismatch");
  std::string b;
  b.reserve(20 + t.affinity.size() * 4);
  b.append("XSMG");
  io::put_u8(b, 1);
  for (int i = 0; i < 3; ++i) io::put_u8(b, 0);
  io::put_u32(b, static_cast<std::uint32_t>(t.windows));
  io::put_u32(b, static_cast<std::uint32_t>(t.users));
  io::put_u32(b, static_cast<std::uint32_t>(t.items));
  for (float v : t.affinity) io::put_f32(b, v);
  io::spit(path, b);
}

inline TruthTable read_truth(const std::filesystem::path& path) {
  const std::string bytes = io::slurp(path);
  io::Reader r(bytes, path.string());
  if (r.take(4, "magic") != "XSMG") throw DataError(path.string() + ": bad magic (not an XSMG truth file)");
  if (r.u8("version") != 1) throw DataError(path.string() + ": unsupported version");
  r.take(3, "reserved");
  TruthTable t;
  t.windows = r.u32("windows");
  t.users = r.u32("users");
  t.items = r.u32("items");
  const std::size_t n = t.windows * t.users * t.items;
  if (r.remaining() != n * 4) throw DataError(path.string() + ": payload size does not match header");
  t.affinity.resize(n);
  for (auto& v : t.affinity) v = r.f32("affinity");
  return t;
}

}  // namespace xsmoe
