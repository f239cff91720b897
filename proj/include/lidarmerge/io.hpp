#pragma once

// Bit-exact readers and writers for the on-disk formats the toolkit consumes:
//
//   KITTI-style scan  .bin    N x {f32 x, y, z, intensity}, little-endian
//   nuScenes scan     .bin    N x {f32 x, y, z, intensity, ring}
//   packed labels     .label  N x u32, semantic = low 16 bits, instance = high 16
//   tensor file               "LMTF" | u16 version | u8 dtype | u8 rank |
//                             rank x u64 dims | row-major f32 payload
//
// All readers reject trailing bytes.

#include "lidarmerge/core.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lidarmerge::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError(ErrorKind::malformed_file, path, 0, "cannot open file");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError(ErrorKind::malformed_file, path, 0, "cannot open file for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError(ErrorKind::malformed_file, path, 0, "write failed");
}

namespace detail {

template <class T>
T load(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

template <class T>
void store(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

inline PointCloud decode_float_records(std::span<const std::uint8_t> bytes, std::size_t floats_per_point,
                                       const std::string& path) {
  const std::size_t record = floats_per_point * sizeof(float);
  if (bytes.size() % record != 0) {
    throw FileError(ErrorKind::malformed_file, path, bytes.size() - bytes.size() % record,
                    "length " + std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(record));
  }
  const std::size_t n = bytes.size() / record;
  PointCloud cloud;
  cloud.coords.resize(n);
  cloud.intensity.emplace(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * record;
    cloud.coords[i] = Vec3(load<float>(bytes, base), load<float>(bytes, base + 4), load<float>(bytes, base + 8));
    (*cloud.intensity)[i] = load<float>(bytes, base + 12);
  }
  return cloud;
}

}  // namespace detail

inline constexpr std::size_t kKittiRecordBytes = 16;
inline constexpr std::size_t kNuscenesRecordBytes = 20;

inline PointCloud decode_kitti_bin(std::span<const std::uint8_t> bytes, const std::string& path = "<memory>") {
  return detail::decode_float_records(bytes, 4, path);
}

inline PointCloud read_kitti_bin(const std::string& path) { return decode_kitti_bin(read_file_bytes(path), path); }

/// Coordinates are narrowed to f32; missing intensity is written as 0.
inline std::vector<std::uint8_t> encode_kitti_bin(const PointCloud& cloud) {
  std::vector<std::uint8_t> out;
  out.reserve(cloud.size() * kKittiRecordBytes);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) detail::store(out, static_cast<float>(cloud.coords[i][k]));
    detail::store(out, cloud.intensity ? (*cloud.intensity)[i] : 0.0f);
  }
  return out;
}

inline void write_kitti_bin(const PointCloud& cloud, const std::string& path) {
  write_file_bytes(path, encode_kitti_bin(cloud));
}

/// The ring index of each record is dropped.
inline PointCloud decode_nuscenes_bin(std::span<const std::uint8_t> bytes, const std::string& path = "<memory>") {
  return detail::decode_float_records(bytes, 5, path);
}

inline PointCloud read_nuscenes_bin(const std::string& path) {
  return decode_nuscenes_bin(read_file_bytes(path), path);
}

inline std::vector<std::uint8_t> encode_nuscenes_bin(const PointCloud& cloud, std::span<const float> ring = {}) {
  std::vector<std::uint8_t> out;
  out.reserve(cloud.size() * kNuscenesRecordBytes);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) detail::store(out, static_cast<float>(cloud.coords[i][k]));
    detail::store(out, cloud.intensity ? (*cloud.intensity)[i] : 0.0f);
    detail::store(out, i < ring.size() ? ring[i] : 0.0f);
  }
  return out;
}

inline void write_nuscenes_bin(const PointCloud& cloud, const std::string& path, std::span<const float> ring = {}) {
  write_file_bytes(path, encode_nuscenes_bin(cloud, ring));
}

struct PackedLabels {
  std::vector<ClassId> semantic;
  std::vector<InstanceId> instance;
};

inline constexpr std::uint32_t pack_label(ClassId semantic, InstanceId instance) {
  return (semantic & 0xFFFFu) | (instance << 16);
}

inline constexpr std::pair<ClassId, InstanceId> unpack_label(std::uint32_t word) {
  return {word & 0xFFFFu, word >> 16};
}

inline PackedLabels decode_kitti_label(std::span<const std::uint8_t> bytes, const std::string& path = "<memory>") {
  if (bytes.size() % 4 != 0) {
    throw FileError(ErrorKind::malformed_file, path, bytes.size() - bytes.size() % 4,
                    "length " + std::to_string(bytes.size()) + " is not a multiple of 4");
  }
  PackedLabels out;
  const std::size_t n = bytes.size() / 4;
  out.semantic.resize(n);
  out.instance.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [s, inst] = unpack_label(detail::load<std::uint32_t>(bytes, i * 4));
    out.semantic[i] = s;
    out.instance[i] = inst;
  }
  return out;
}

inline PackedLabels read_kitti_label(const std::string& path) {
  return decode_kitti_label(read_file_bytes(path), path);
}

inline std::vector<std::uint8_t> encode_kitti_label(std::span<const ClassId> semantic,
                                                    std::span<const InstanceId> instance) {
  if (!instance.empty() && instance.size() != semantic.size()) {
    throw Error(ErrorKind::length_mismatch, "io", "semantic and instance labels differ in length");
  }
  std::vector<std::uint8_t> out;
  out.reserve(semantic.size() * 4);
  for (std::size_t i = 0; i < semantic.size(); ++i) {
    if (semantic[i] > 0xFFFFu || (!instance.empty() && instance[i] > 0xFFFFu)) {
      throw Error(ErrorKind::out_of_range, "io", "label at " + std::to_string(i) + " does not fit in 16 bits");
    }
    detail::store(out, pack_label(semantic[i], instance.empty() ? 0 : instance[i]));
  }
  return out;
}

inline void write_kitti_label(const std::string& path, std::span<const ClassId> semantic,
                              std::span<const InstanceId> instance = {}) {
  write_file_bytes(path, encode_kitti_label(semantic, instance));
}

inline constexpr std::array<char, 4> kTensorMagic{'L', 'M', 'T', 'F'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::size_t kMaxTensorRank = 4;

/// Shape plus f32 payload, exactly as stored.
struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.shape.size() > kMaxTensorRank) throw Error(ErrorKind::format, "io", "tensor rank above 4");
  if (t.element_count() != t.data.size()) throw Error(ErrorKind::format, "io", "tensor payload does not match shape");
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  detail::store(out, kTensorVersion);
  detail::store(out, kDtypeF32);
  detail::store(out, static_cast<std::uint8_t>(t.shape.size()));
  for (auto d : t.shape) detail::store(out, d);
  for (float v : t.data) detail::store(out, v);
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& path = "<memory>") {
  std::size_t off = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - off < n) {
      throw FileError(ErrorKind::format, path, bytes.size(), std::string("truncated ") + what);
    }
  };
  need(4, "magic");
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
    throw FileError(ErrorKind::format, path, 0, "bad magic");
  }
  off = 4;
  need(2, "version");
  const auto version = detail::load<std::uint16_t>(bytes, off);
  if (version != kTensorVersion) {
    throw FileError(ErrorKind::format, path, off, "unsupported version " + std::to_string(version));
  }
  off += 2;
  need(1, "dtype");
  if (bytes[off] != kDtypeF32) {
    throw FileError(ErrorKind::format, path, off, "unsupported dtype tag " + std::to_string(bytes[off]));
  }
  off += 1;
  need(1, "rank");
  const std::size_t rank = bytes[off];
  if (rank > kMaxTensorRank) throw FileError(ErrorKind::format, path, off, "rank " + std::to_string(rank) + " above 4");
  off += 1;
  Tensor t;
  for (std::size_t r = 0; r < rank; ++r) {
    need(8, "dims");
    t.shape.push_back(detail::load<std::uint64_t>(bytes, off));
    off += 8;
  }
  const std::uint64_t count = t.element_count();
  const std::size_t remaining = bytes.size() - off;
  if (count > remaining / sizeof(float)) {
    throw FileError(ErrorKind::format, path, bytes.size(),
                    "truncated payload: " + std::to_string(count) + " floats expected from byte " + std::to_string(off));
  }
  t.data.resize(count);
  for (std::uint64_t k = 0; k < count; ++k) t.data[k] = detail::load<float>(bytes, off + k * sizeof(float));
  off += count * sizeof(float);
  if (off != bytes.size()) throw FileError(ErrorKind::format, path, off, "trailing bytes after payload");
  return t;
}

inline Tensor read_tensor_file(const std::string& path) { return decode_tensor(read_file_bytes(path), path); }

inline void write_tensor_file(const Tensor& t, const std::string& path) { write_file_bytes(path, encode_tensor(t)); }

/// Rank-1 tensors become a single column; higher ranks flatten every
/// dimension after the first into columns.
inline FeatureMatrix to_matrix(const Tensor& t) {
  if (t.shape.empty()) throw Error(ErrorKind::format, "io", "scalar tensor cannot be a matrix");
  const auto rows = static_cast<Eigen::Index>(t.shape[0]);
  Eigen::Index cols = 1;
  for (std::size_t k = 1; k < t.shape.size(); ++k) cols *= static_cast<Eigen::Index>(t.shape[k]);
  FeatureMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) m.data()[i] = t.data[static_cast<std::size_t>(i)];
  return m;
}

inline Tensor from_matrix(const FeatureMatrix& m) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

inline FeatureMatrix read_matrix(const std::string& path) { return to_matrix(read_tensor_file(path)); }

inline void write_matrix(const FeatureMatrix& m, const std::string& path) { write_tensor_file(from_matrix(m), path); }

/// Integral class ids stored as a tensor of any shape.
inline std::vector<ClassId> to_class_ids(const Tensor& t, const std::string& path = "<tensor>") {
  std::vector<ClassId> out(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const float v = t.data[i];
    if (!(v >= 0.0f) || v != std::floor(v) || v > 65535.0f) {
      throw Error(ErrorKind::format, "io", path + ": element " + std::to_string(i) + " is not a class id");
    }
    out[i] = static_cast<ClassId>(v);
  }
  return out;
}

inline bool has_tensor_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::array<char, 4> head{};
  in.read(head.data(), 4);
  return in.gcount() == 4 && head == kTensorMagic;
}

}  // namespace lidarmerge::io
