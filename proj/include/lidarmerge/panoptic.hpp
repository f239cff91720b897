#pragma once

// Offset-based instance extraction: thing filtering, shifting points toward
// predicted instance centers, flat-kernel mean-shift, and panoptic assembly.

#include "lidarmerge/core.hpp"
#include "lidarmerge/dataspace.hpp"

#include <array>
#include <map>

namespace lidarmerge::panoptic {

struct InstanceConfig {
  double bandwidth = 1.2;
  int max_iterations = 300;
  double shift_tolerance = 1e-3;
  /// Defaults to bandwidth / 2 when unset.
  std::optional<double> mode_merge_radius;
  std::size_t min_cluster_size = 1;

  double merge_radius() const { return mode_merge_radius.value_or(bandwidth / 2.0); }

  void validate() const {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
      throw Error(ErrorKind::parameter, "panoptic", "bandwidth must be positive");
    }
    if (!(shift_tolerance > 0.0) || !(merge_radius() > 0.0)) {
      throw Error(ErrorKind::parameter, "panoptic", "tolerances must be positive");
    }
    if (max_iterations < 1) throw Error(ErrorKind::parameter, "panoptic", "max_iterations must be at least 1");
  }
};

struct PanopticLabels {
  std::vector<ClassId> semantic;
  std::vector<InstanceId> instance;  // 0 for stuff, 1..K for things
};

/// Indices whose class is a thing class, ascending.
inline std::vector<std::size_t> filter_thing_points(std::span<const ClassId> semantic,
                                                    const std::vector<bool>& thing_mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < semantic.size(); ++i) {
    if (semantic[i] < thing_mask.size() && thing_mask[semantic[i]]) out.push_back(i);
  }
  return out;
}

inline std::vector<Vec3> shift_points(std::span<const Vec3> coords, std::span<const Vec3> offsets) {
  if (coords.size() != offsets.size()) {
    throw Error(ErrorKind::length_mismatch, "panoptic", "coords and offsets differ in length");
  }
  std::vector<Vec3> out(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) out[i] = coords[i] + offsets[i];
  return out;
}

struct MeanShiftResult {
  std::vector<InstanceId> labels;  // 1..K per input point
  std::vector<Vec3> modes;         // modes[k-1] is the center of cluster k
};

namespace detail {

/// Flat-kernel neighborhood mean over a bandwidth-sized hash grid. Visits
/// cells and members in a fixed order so the sum is reproducible.
class NeighborGrid {
 public:
  NeighborGrid(std::span<const Vec3> points, double radius) : points_(points), radius_(radius) {
    PointCloud tmp;
    tmp.coords.assign(points.begin(), points.end());
    grid_ = dataspace::voxelize(tmp, Vec3::Constant(radius));
  }

  /// Mean of points within `radius` of x; nullopt if none.
  std::optional<Vec3> mean_near(const Vec3& x) const {
    const auto center = dataspace::cell_of(x, grid_.voxel_size());
    const double r2 = radius_ * radius_;
    Vec3 sum = Vec3::Zero();
    std::size_t count = 0;
    for (std::int64_t dz = -1; dz <= 1; ++dz)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const auto cell = grid_.find({center.x + dx, center.y + dy, center.z + dz});
          if (!cell) continue;
          for (std::size_t j : grid_.members(*cell)) {
            if ((points_[j] - x).squaredNorm() <= r2) {
              sum += points_[j];
              ++count;
            }
          }
        }
    if (count == 0) return std::nullopt;
    return Vec3(sum / static_cast<double>(count));
  }

 private:
  std::span<const Vec3> points_;
  double radius_;
  dataspace::VoxelGrid grid_;
};

inline std::size_t nearest(const Vec3& p, const std::vector<Vec3>& modes, const std::vector<bool>* allowed = nullptr) {
  std::size_t best = modes.size();
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < modes.size(); ++k) {
    if (allowed && !(*allowed)[k]) continue;
    const double d = (modes[k] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

/// Flat-kernel mean-shift with every point as a seed. Each seed moves to
/// the mean of the points within `bandwidth` until it moves less than
/// `shift_tolerance` or runs out of iterations. Converged seeds are merged in
/// input order into modes at most `merge_radius` apart; points then take the
/// nearest mode, clusters below `min_cluster_size` fold into the nearest
/// large enough one, and labels are renumbered 1..K by first appearance.
inline MeanShiftResult mean_shift_cluster(std::span<const Vec3> shifted, const InstanceConfig& cfg,
                                          Parallelism par = {}) {
  cfg.validate();
  MeanShiftResult out;
  if (shifted.empty()) return out;
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    if (!shifted[i].allFinite()) {
      throw Error(ErrorKind::invalid_input, "panoptic", "non-finite point " + std::to_string(i));
    }
  }

  const detail::NeighborGrid grid(shifted, cfg.bandwidth);
  std::vector<Vec3> converged(shifted.size());
  parallel_for(shifted.size(), par, [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      Vec3 x = shifted[s];
      for (int it = 0; it < cfg.max_iterations; ++it) {
        const auto next = grid.mean_near(x);
        if (!next) break;
        const double moved = (*next - x).norm();
        x = *next;
        if (moved < cfg.shift_tolerance) break;
      }
      converged[s] = x;
    }
  });

  std::vector<Vec3> modes;
  const double merge2 = cfg.merge_radius() * cfg.merge_radius();
  for (const auto& x : converged) {
    bool merged = false;
    for (const auto& m : modes) {
      if ((m - x).squaredNorm() <= merge2) {
        merged = true;
        break;
      }
    }
    if (!merged) modes.push_back(x);
  }

  std::vector<std::size_t> assign(shifted.size());
  std::vector<std::size_t> sizes(modes.size(), 0);
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    assign[i] = detail::nearest(shifted[i], modes);
    ++sizes[assign[i]];
  }

  if (cfg.min_cluster_size > 1) {
    std::vector<bool> large(modes.size());
    bool any_large = false;
    for (std::size_t k = 0; k < modes.size(); ++k) {
      large[k] = sizes[k] >= cfg.min_cluster_size;
      any_large = any_large || large[k];
    }
    if (any_large) {
      for (std::size_t i = 0; i < shifted.size(); ++i) {
        if (!large[assign[i]]) assign[i] = detail::nearest(shifted[i], modes, &large);
      }
    }
  }

  std::vector<InstanceId> relabel(modes.size(), 0);
  out.labels.resize(shifted.size());
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    auto& id = relabel[assign[i]];
    if (id == 0) {
      id = static_cast<InstanceId>(out.modes.size() + 1);
      out.modes.push_back(modes[assign[i]]);
    }
    out.labels[i] = id;
  }
  return out;
}

/// Stuff points get instance 0; thing points get their cluster id, renumbered
/// to 1..K in order of first appearance.
inline PanopticLabels assemble_panoptic(std::span<const ClassId> semantic, std::span<const std::size_t> thing_indices,
                                        std::span<const InstanceId> cluster_ids, const std::vector<bool>& thing_mask) {
  if (thing_indices.size() != cluster_ids.size()) {
    throw Error(ErrorKind::length_mismatch, "panoptic", "one cluster id per thing point is required");
  }
  PanopticLabels out;
  out.semantic.assign(semantic.begin(), semantic.end());
  out.instance.assign(semantic.size(), 0);
  std::map<InstanceId, InstanceId> relabel;
  for (std::size_t k = 0; k < thing_indices.size(); ++k) {
    const std::size_t i = thing_indices[k];
    if (i >= semantic.size()) throw Error(ErrorKind::out_of_range, "panoptic", "thing index out of range");
    if (semantic[i] >= thing_mask.size() || !thing_mask[semantic[i]]) {
      throw Error(ErrorKind::invalid_label, "panoptic",
                  "point " + std::to_string(i) + " of stuff class " + std::to_string(semantic[i]) + " given a cluster");
    }
    if (cluster_ids[k] == 0) throw Error(ErrorKind::invalid_input, "panoptic", "cluster ids start at 1");
    auto [it, inserted] = relabel.emplace(cluster_ids[k], static_cast<InstanceId>(relabel.size() + 1));
    out.instance[i] = it->second;
  }
  return out;
}

/// Full extraction: filter things, shift by offsets, cluster, assemble.
inline PanopticLabels extract_instances(std::span<const Vec3> coords, std::span<const Vec3> offsets,
                                        std::span<const ClassId> semantic, const std::vector<bool>& thing_mask,
                                        const InstanceConfig& cfg, Parallelism par = {}) {
  if (coords.size() != semantic.size()) {
    throw Error(ErrorKind::length_mismatch, "panoptic", "coords and semantic labels differ in length");
  }
  const auto things = filter_thing_points(semantic, thing_mask);
  const auto shifted = shift_points(coords, offsets);
  std::vector<Vec3> thing_points;
  thing_points.reserve(things.size());
  for (std::size_t i : things) thing_points.push_back(shifted[i]);
  const auto clusters = mean_shift_cluster(thing_points, cfg, par);
  return assemble_panoptic(semantic, things, clusters.labels, thing_mask);
}

}  // namespace lidarmerge::panoptic
