#pragma once

// Data-space harmonization across datasets: origin offsets, dataset-specific
// voxel rasterization, per-dataset normalization statistics, and per-class
// radial distribution histograms.

#include "lidarmerge/core.hpp"

#include <array>
#include <map>
#include <numeric>

namespace lidarmerge::dataspace {

struct DatasetProfile {
  std::string dataset_id;
  Vec3 origin_offset = Vec3::Zero();
  Vec3 voxel_size = Vec3::Constant(0.05);
  std::size_t class_count = 0;
  std::optional<double> bandwidth;

  void validate() const {
    if (!(voxel_size.array() > 0.0).all() || !voxel_size.allFinite()) {
      throw Error(ErrorKind::parameter, "dataspace", "voxel size of '" + dataset_id + "' must be positive");
    }
  }
};

/// Shifts every point by the profile's origin offset. Labels and intensity
/// are carried over unchanged.
inline PointCloud apply_origin_offset(PointCloud cloud, const DatasetProfile& profile) {
  for (auto& p : cloud.coords) p += profile.origin_offset;
  return cloud;
}

/// Integer cell index. Ordered z-major, then y, then x.
struct CellKey {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t z = 0;

  friend bool operator==(const CellKey&, const CellKey&) = default;
  friend auto operator<=>(const CellKey& a, const CellKey& b) {
    if (auto c = a.z <=> b.z; c != 0) return c;
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
};

inline CellKey cell_of(const Vec3& p, const Vec3& voxel_size) {
  return CellKey{static_cast<std::int64_t>(std::floor(p.x() / voxel_size.x())),
                 static_cast<std::int64_t>(std::floor(p.y() / voxel_size.y())),
                 static_cast<std::int64_t>(std::floor(p.z() / voxel_size.z()))};
}

/// Non-empty cells of a voxelized cloud in compressed-row form. The grid
/// origin is the coordinate origin, so indices are comparable across scans.
class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(Vec3 voxel_size, std::size_t point_count, std::vector<CellKey> keys, std::vector<std::size_t> offsets,
            std::vector<std::size_t> members)
      : voxel_size_(voxel_size),
        point_count_(point_count),
        keys_(std::move(keys)),
        offsets_(std::move(offsets)),
        members_(std::move(members)) {}

  const Vec3& voxel_size() const noexcept { return voxel_size_; }
  std::size_t point_count() const noexcept { return point_count_; }
  /// Number of non-empty cells (m).
  std::size_t cell_count() const noexcept { return keys_.size(); }
  const CellKey& key(std::size_t cell) const { return keys_.at(cell); }
  std::span<const CellKey> keys() const noexcept { return keys_; }

  /// Point indices inside a cell, ascending.
  std::span<const std::size_t> members(std::size_t cell) const {
    return std::span<const std::size_t>(members_).subspan(offsets_.at(cell), offsets_.at(cell + 1) - offsets_[cell]);
  }

  std::optional<std::size_t> find(const CellKey& k) const {
    auto it = std::lower_bound(keys_.begin(), keys_.end(), k);
    if (it == keys_.end() || *it != k) return std::nullopt;
    return static_cast<std::size_t>(it - keys_.begin());
  }

 private:
  Vec3 voxel_size_ = Vec3::Ones();
  std::size_t point_count_ = 0;
  std::vector<CellKey> keys_;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::size_t> members_;
};

inline VoxelGrid voxelize(const PointCloud& cloud, const Vec3& voxel_size) {
  if (!(voxel_size.array() > 0.0).all() || !voxel_size.allFinite()) {
    throw Error(ErrorKind::parameter, "dataspace", "voxel size must be positive and finite");
  }
  const std::size_t n = cloud.size();
  std::vector<CellKey> point_keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& p = cloud.coords[i];
    if (!p.allFinite()) {
      throw Error(ErrorKind::invalid_input, "dataspace", "non-finite coordinate at point " + std::to_string(i));
    }
    point_keys[i] = cell_of(p, voxel_size);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (point_keys[a] != point_keys[b]) return point_keys[a] < point_keys[b];
    return a < b;
  });

  std::vector<CellKey> keys;
  std::vector<std::size_t> offsets{0};
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && point_keys[order[k]] == point_keys[order[k - 1]]) continue;
    if (k > 0) offsets.push_back(k);
    keys.push_back(point_keys[order[k]]);
  }
  if (n > 0) offsets.push_back(n);
  return VoxelGrid(voxel_size, n, std::move(keys), std::move(offsets), std::move(order));
}

/// Keeps the lowest-index point of every cell, in cell order.
inline PointCloud downsample_one_per_voxel(const VoxelGrid& grid, const PointCloud& cloud) {
  if (grid.point_count() != cloud.size()) {
    throw Error(ErrorKind::inconsistent_input, "dataspace",
                "grid was built from " + std::to_string(grid.point_count()) + " points, cloud has " +
                    std::to_string(cloud.size()));
  }
  PointCloud out;
  out.coords.reserve(grid.cell_count());
  if (cloud.intensity) out.intensity.emplace();
  if (cloud.semantic) out.semantic.emplace();
  if (cloud.instance) out.instance.emplace();
  for (std::size_t c = 0; c < grid.cell_count(); ++c) {
    const std::size_t i = grid.members(c).front();
    out.coords.push_back(cloud.coords[i]);
    if (cloud.intensity) out.intensity->push_back((*cloud.intensity)[i]);
    if (cloud.semantic) out.semantic->push_back((*cloud.semantic)[i]);
    if (cloud.instance) out.instance->push_back((*cloud.instance)[i]);
  }
  return out;
}

/// Streaming per-channel mean and (population) variance for one dataset.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> m2;
  std::uint64_t count = 0;

  std::size_t channels() const noexcept { return mean.size(); }
  double variance(std::size_t c) const { return count == 0 ? 0.0 : std::max(0.0, m2[c] / static_cast<double>(count)); }

  /// Chan et al. pairwise combination; associative up to rounding.
  void merge(const ChannelStats& other) {
    if (other.count == 0) return;
    if (count == 0) {
      *this = other;
      return;
    }
    if (other.channels() != channels()) {
      throw Error(ErrorKind::schema, "dataspace", "channel count changed from " + std::to_string(channels()) +
                                                      " to " + std::to_string(other.channels()));
    }
    const double na = static_cast<double>(count);
    const double nb = static_cast<double>(other.count);
    const double n = na + nb;
    for (std::size_t c = 0; c < channels(); ++c) {
      const double delta = other.mean[c] - mean[c];
      mean[c] += delta * nb / n;
      m2[c] += other.m2[c] + delta * delta * na * nb / n;
    }
    count += other.count;
  }

  /// Two-pass statistics of a batch (rows are samples).
  static ChannelStats of_batch(const FeatureMatrix& batch) {
    ChannelStats s;
    const auto cols = static_cast<std::size_t>(batch.cols());
    s.mean.assign(cols, 0.0);
    s.m2.assign(cols, 0.0);
    s.count = static_cast<std::uint64_t>(batch.rows());
    if (batch.rows() == 0) return s;
    for (std::size_t c = 0; c < cols; ++c) {
      CompensatedSum sum;
      for (Eigen::Index r = 0; r < batch.rows(); ++r) sum.add(batch(r, static_cast<Eigen::Index>(c)));
      const double mu = sum.value() / static_cast<double>(batch.rows());
      CompensatedSum sq;
      for (Eigen::Index r = 0; r < batch.rows(); ++r) {
        const double d = batch(r, static_cast<Eigen::Index>(c)) - mu;
        sq.add(d * d);
      }
      s.mean[c] = mu;
      s.m2[c] = sq.value();
    }
    return s;
  }
};

/// Per-dataset normalization statistics. Datasets never share state.
class NormStats {
 public:
  const ChannelStats* find(const std::string& dataset_id) const {
    auto it = per_dataset_.find(dataset_id);
    return it == per_dataset_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, ChannelStats>& datasets() const noexcept { return per_dataset_; }

  void update(const std::string& dataset_id, const FeatureMatrix& features) {
    require_finite(features, "dataspace", "normalization batch");
    auto& slot = per_dataset_[dataset_id];
    if (slot.count > 0 && slot.channels() != static_cast<std::size_t>(features.cols())) {
      throw Error(ErrorKind::schema, "dataspace",
                  "dataset '" + dataset_id + "' had " + std::to_string(slot.channels()) + " channels, batch has " +
                      std::to_string(features.cols()));
    }
    if (features.rows() == 0) {
      if (slot.count == 0) {
        slot.mean.assign(static_cast<std::size_t>(features.cols()), 0.0);
        slot.m2.assign(static_cast<std::size_t>(features.cols()), 0.0);
      }
      return;
    }
    slot.merge(ChannelStats::of_batch(features));
  }

  void merge(const NormStats& other) {
    for (const auto& [id, s] : other.per_dataset_) per_dataset_[id].merge(s);
  }

 private:
  std::map<std::string, ChannelStats> per_dataset_;
};

inline NormStats update_norm_stats(NormStats stats, const std::string& dataset_id, const FeatureMatrix& features) {
  stats.update(dataset_id, features);
  return stats;
}

enum class NormMode {
  running,  // stored per-dataset statistics
  batch,    // statistics of the batch being normalized
};

inline constexpr double kDefaultNormEpsilon = 1e-5;

/// (x - mean) / sqrt(variance + epsilon) per channel, using only the
/// statistics of `dataset_id`.
inline FeatureMatrix normalize(const FeatureMatrix& features, const NormStats& stats, const std::string& dataset_id,
                               double epsilon = kDefaultNormEpsilon, NormMode mode = NormMode::running) {
  if (!(epsilon >= 0.0)) throw Error(ErrorKind::parameter, "dataspace", "epsilon must be non-negative");
  ChannelStats batch_stats;
  const ChannelStats* s = nullptr;
  if (mode == NormMode::running) {
    s = stats.find(dataset_id);
    if (s == nullptr) {
      throw Error(ErrorKind::unknown_dataset, "dataspace", "no statistics for dataset '" + dataset_id + "'");
    }
    if (s->count < 2) {
      throw Error(ErrorKind::unknown_dataset, "dataspace",
                  "dataset '" + dataset_id + "' has fewer than 2 samples of statistics");
    }
  } else {
    batch_stats = ChannelStats::of_batch(features);
    s = &batch_stats;
  }
  if (s->channels() != static_cast<std::size_t>(features.cols())) {
    throw Error(ErrorKind::schema, "dataspace", "feature channel count does not match statistics");
  }
  FeatureMatrix out(features.rows(), features.cols());
  for (Eigen::Index c = 0; c < features.cols(); ++c) {
    const auto cc = static_cast<std::size_t>(c);
    const double inv = 1.0 / std::sqrt(s->variance(cc) + epsilon);
    for (Eigen::Index r = 0; r < features.rows(); ++r) out(r, c) = (features(r, c) - s->mean[cc]) * inv;
  }
  return out;
}

/// counts[class][bin] of points by planar radius sqrt(x^2 + y^2).
struct RangeHistogram {
  double bin_width = 0.5;
  std::size_t bin_count = 0;
  std::vector<std::vector<std::uint64_t>> counts;
};

inline constexpr double kDefaultHistogramBinWidth = 0.5;
inline constexpr double kDefaultHistogramMaxRange = 50.0;

/// Bins are [k*w, (k+1)*w) for k < ceil(max_range / w); anything at or past
/// the last bin edge is dropped. Labels must be below class_count; points
/// carrying `ignore` are skipped.
inline RangeHistogram range_class_histogram(const PointCloud& cloud, double bin_width, double max_range,
                                            std::size_t class_count, std::optional<ClassId> ignore = std::nullopt) {
  if (!(bin_width > 0.0) || !(max_range > 0.0) || !std::isfinite(bin_width) || !std::isfinite(max_range)) {
    throw Error(ErrorKind::parameter, "dataspace", "bin width and max range must be positive");
  }
  if (!cloud.semantic) throw Error(ErrorKind::missing_labels, "dataspace", "cloud has no semantic labels");
  const auto& labels = *cloud.semantic;
  if (labels.size() != cloud.size()) {
    throw Error(ErrorKind::length_mismatch, "dataspace", "semantic labels do not match point count");
  }
  RangeHistogram h;
  h.bin_width = bin_width;
  h.bin_count = static_cast<std::size_t>(std::ceil(max_range / bin_width - 1e-12));
  h.counts.assign(class_count, std::vector<std::uint64_t>(h.bin_count, 0));
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (ignore && labels[i] == *ignore) continue;
    if (labels[i] >= class_count) {
      throw Error(ErrorKind::invalid_label, "dataspace",
                  "label " + std::to_string(labels[i]) + " at point " + std::to_string(i) + " >= class count");
    }
    const double r = std::hypot(cloud.coords[i].x(), cloud.coords[i].y());
    const double b = std::floor(r / bin_width);
    if (!(b >= 0.0) || b >= static_cast<double>(h.bin_count)) continue;
    ++h.counts[labels[i]][static_cast<std::size_t>(b)];
  }
  return h;
}

}  // namespace lidarmerge::dataspace
