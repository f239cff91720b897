#pragma once

// Camera-calibrated projection of LiDAR points into image pixels and the
// point-pixel pairing built on top of it.

#include "lidarmerge/core.hpp"

#include <Eigen/Dense>

#include <charconv>
#include <fstream>
#include <sstream>
#include <string_view>

namespace lidarmerge::geometry {

using Intrinsic = Eigen::Matrix<double, 3, 4>;
using Extrinsic = Eigen::Matrix4d;

/// Points with camera-frame depth at or below this are treated as behind
/// the camera.
inline constexpr double kDepthEpsilon = 1e-6;

struct CameraModel {
  Intrinsic intrinsic = Intrinsic::Zero();
  Extrinsic extrinsic = Extrinsic::Identity();
  int width = 0;
  int height = 0;

  /// Throws invalid_calibration unless the extrinsic is a rigid transform
  /// (orthonormal rotation within 1e-6, bottom row 0 0 0 1) and the image
  /// has positive size.
  void validate() const {
    if (!intrinsic.allFinite() || !extrinsic.allFinite()) {
      throw Error(ErrorKind::invalid_calibration, "geometry", "calibration contains non-finite entries");
    }
    if (width <= 0 || height <= 0) {
      throw Error(ErrorKind::invalid_calibration, "geometry", "image size must be positive");
    }
    const Eigen::Matrix3d r = extrinsic.topLeftCorner<3, 3>();
    const double ortho_err = (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho_err > 1e-6) {
      throw Error(ErrorKind::invalid_calibration, "geometry",
                  "extrinsic rotation block is not orthonormal (error " + std::to_string(ortho_err) + ")");
    }
    const Eigen::RowVector4d bottom = extrinsic.row(3);
    if ((bottom - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12) {
      throw Error(ErrorKind::invalid_calibration, "geometry", "extrinsic bottom row must be 0 0 0 1");
    }
  }
};

struct Projection {
  double u;
  double v;
  double depth;
};

/// Projects one point. Returns nullopt when the camera-frame depth is not
/// above kDepthEpsilon. Does not validate the camera.
inline std::optional<Projection> project_point(const Vec3& p, const CameraModel& cam) {
  const Eigen::Vector4d cam_frame = cam.extrinsic * p.homogeneous();
  const double depth = cam_frame.z();
  if (!(depth > kDepthEpsilon)) return std::nullopt;
  const Eigen::Vector3d img = cam.intrinsic * cam_frame;
  return Projection{img.x() / depth, img.y() / depth, depth};
}

inline std::vector<std::optional<Projection>> project_points(const PointCloud& cloud, const CameraModel& cam,
                                                             Parallelism par = {}) {
  cam.validate();
  std::vector<std::optional<Projection>> out(cloud.size());
  parallel_for(cloud.size(), par, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = project_point(cloud.coords[i], cam);
  });
  return out;
}

/// Inverse of project_point for a pixel at known camera-frame depth. Returns
/// the point in the LiDAR frame.
inline Vec3 backproject_pixel(const CameraModel& cam, double u, double v, double depth) {
  const auto& k = cam.intrinsic;
  Eigen::Matrix2d a;
  a << k(0, 0), k(0, 1), k(1, 0), k(1, 1);
  const Eigen::Vector2d rhs(u * depth - k(0, 2) * depth - k(0, 3), v * depth - k(1, 2) * depth - k(1, 3));
  const Eigen::Vector2d xy = a.partialPivLu().solve(rhs);
  const Eigen::Vector4d cam_frame(xy.x(), xy.y(), depth, 1.0);
  const Eigen::Vector4d lidar = cam.extrinsic.inverse() * cam_frame;
  return lidar.head<3>();
}

struct PixelCoord {
  int u;
  int v;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

struct PointPixelPairs {
  std::vector<std::size_t> point_indices;
  std::vector<PixelCoord> pixel_coords;
  std::vector<std::size_t> camera_index;
  std::vector<double> depth;

  std::size_t size() const noexcept { return point_indices.size(); }
};

/// Pairs each point with at most one camera pixel. Pixels are rounded half
/// away from zero and must lie in [0, W) x [0, H). A point seen by several
/// cameras keeps the smallest-depth projection (lowest camera index on ties).
/// Output is ordered by point index.
inline PointPixelPairs pair_points_pixels(const PointCloud& cloud, std::span<const CameraModel> cams,
                                          Parallelism par = {}) {
  if (cams.empty()) {
    throw Error(ErrorKind::invalid_input, "geometry", "at least one camera is required");
  }
  for (const auto& cam : cams) cam.validate();

  struct Best {
    bool found = false;
    std::size_t camera = 0;
    PixelCoord pixel{0, 0};
    double depth = 0.0;
  };
  std::vector<Best> best(cloud.size());
  parallel_for(cloud.size(), par, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t c = 0; c < cams.size(); ++c) {
        const auto proj = project_point(cloud.coords[i], cams[c]);
        if (!proj) continue;
        const double ur = std::round(proj->u);
        const double vr = std::round(proj->v);
        if (!(ur >= 0.0 && ur < cams[c].width && vr >= 0.0 && vr < cams[c].height)) continue;
        if (!best[i].found || proj->depth < best[i].depth) {
          best[i] = Best{true, c, PixelCoord{static_cast<int>(ur), static_cast<int>(vr)}, proj->depth};
        }
      }
    }
  });

  PointPixelPairs pairs;
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (!best[i].found) continue;
    pairs.point_indices.push_back(i);
    pairs.pixel_coords.push_back(best[i].pixel);
    pairs.camera_index.push_back(best[i].camera);
    pairs.depth.push_back(best[i].depth);
  }
  return pairs;
}

/// Row k of the result is features.row(indices[k]).
inline FeatureMatrix gather_rows(const FeatureMatrix& features, std::span<const std::size_t> indices) {
  FeatureMatrix out(static_cast<Eigen::Index>(indices.size()), features.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= static_cast<std::size_t>(features.rows())) {
      throw Error(ErrorKind::inconsistent_pairing, "geometry",
                  "pair " + std::to_string(k) + " selects row " + std::to_string(indices[k]) + " of a " +
                      std::to_string(features.rows()) + "-row matrix");
    }
    out.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(indices[k]));
  }
  return out;
}

/// Row index of each pair's pixel in a per-pixel feature matrix that stacks
/// every camera's image row-major (camera 0 first).
inline std::vector<std::size_t> pixel_row_indices(const PointPixelPairs& pairs, std::span<const CameraModel> cams) {
  std::vector<std::size_t> offsets(cams.size() + 1, 0);
  for (std::size_t c = 0; c < cams.size(); ++c) {
    offsets[c + 1] = offsets[c] + static_cast<std::size_t>(cams[c].width) * static_cast<std::size_t>(cams[c].height);
  }
  std::vector<std::size_t> rows(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::size_t c = pairs.camera_index[k];
    if (c >= cams.size()) {
      throw Error(ErrorKind::inconsistent_pairing, "geometry", "pair references unknown camera");
    }
    const auto& px = pairs.pixel_coords[k];
    rows[k] = offsets[c] + static_cast<std::size_t>(px.v) * static_cast<std::size_t>(cams[c].width) +
              static_cast<std::size_t>(px.u);
  }
  return rows;
}

enum class PairDomain { point, pixel };

/// Selects one feature row per pair, either per point (features has N rows)
/// or per pixel (features stacks all camera images, see pixel_row_indices).
inline FeatureMatrix gather_paired_features(const FeatureMatrix& features, const PointPixelPairs& pairs,
                                            PairDomain domain, std::span<const CameraModel> cams = {}) {
  if (domain == PairDomain::point) return gather_rows(features, pairs.point_indices);
  return gather_rows(features, pixel_row_indices(pairs, cams));
}

namespace detail {

inline std::vector<double> parse_reals(std::string_view text, const std::string& context) {
  std::vector<double> values;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
      throw Error(ErrorKind::invalid_calibration, "geometry", context + ": bad number '" + tok + "'");
    }
    values.push_back(v);
  }
  return values;
}

}  // namespace detail

/// Parses a calibration file. Each camera is described by three labeled
/// blocks, in any order:
///
///     intrinsic: 12 reals (row-major 3x4)
///     extrinsic: 16 reals (row-major 4x4)
///     size: W H
///
/// Values may wrap across lines. Repeating a label starts the next camera.
/// `#` starts a comment.
inline std::vector<CameraModel> parse_calibration(std::string_view text, const std::string& source = "<calib>") {
  std::string cleaned;
  cleaned.reserve(text.size());
  {
    bool comment = false;
    for (char ch : text) {
      if (ch == '#') comment = true;
      if (ch == '\n') comment = false;
      cleaned.push_back(comment ? ' ' : ch);
    }
  }

  struct Pending {
    std::optional<std::vector<double>> intrinsic, extrinsic, size;
  };
  std::vector<CameraModel> cams;
  Pending cur;
  auto flush = [&] {
    if (!cur.intrinsic || !cur.extrinsic || !cur.size) {
      throw Error(ErrorKind::invalid_calibration, "geometry",
                  source + ": camera " + std::to_string(cams.size()) + " is missing a block");
    }
    CameraModel cam;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) cam.intrinsic(r, c) = (*cur.intrinsic)[static_cast<std::size_t>(r * 4 + c)];
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) cam.extrinsic(r, c) = (*cur.extrinsic)[static_cast<std::size_t>(r * 4 + c)];
    const double w = (*cur.size)[0], h = (*cur.size)[1];
    if (w != std::floor(w) || h != std::floor(h)) {
      throw Error(ErrorKind::invalid_calibration, "geometry", source + ": image size must be integral");
    }
    cam.width = static_cast<int>(w);
    cam.height = static_cast<int>(h);
    cam.validate();
    cams.push_back(cam);
    cur = Pending{};
  };

  // Split into (label, payload) blocks.
  std::string label;
  std::string payload;
  auto finish_block = [&] {
    if (label.empty()) {
      if (!detail::parse_reals(payload, source).empty()) {
        throw Error(ErrorKind::invalid_calibration, "geometry", source + ": values before the first label");
      }
      return;
    }
    auto values = detail::parse_reals(payload, source + " [" + label + "]");
    std::optional<std::vector<double>>* slot = nullptr;
    std::size_t expected = 0;
    if (label == "intrinsic") {
      slot = &cur.intrinsic;
      expected = 12;
    } else if (label == "extrinsic") {
      slot = &cur.extrinsic;
      expected = 16;
    } else if (label == "size") {
      slot = &cur.size;
      expected = 2;
    } else {
      throw Error(ErrorKind::invalid_calibration, "geometry", source + ": unknown block '" + label + "'");
    }
    if (values.size() != expected) {
      throw Error(ErrorKind::invalid_calibration, "geometry",
                  source + ": block '" + label + "' expects " + std::to_string(expected) + " values, got " +
                      std::to_string(values.size()));
    }
    if (slot->has_value()) flush();
    *slot = std::move(values);
  };

  std::istringstream words(cleaned);
  std::string tok;
  while (words >> tok) {
    if (!tok.empty() && tok.back() == ':') {
      finish_block();
      label = tok.substr(0, tok.size() - 1);
      payload.clear();
    } else {
      payload += tok;
      payload += ' ';
    }
  }
  finish_block();
  if (cur.intrinsic || cur.extrinsic || cur.size) flush();
  if (cams.empty()) {
    throw Error(ErrorKind::invalid_calibration, "geometry", source + ": no cameras defined");
  }
  return cams;
}

inline std::vector<CameraModel> load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::invalid_calibration, "geometry", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_calibration(ss.str(), path);
}

}  // namespace lidarmerge::geometry
