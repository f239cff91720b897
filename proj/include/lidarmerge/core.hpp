#pragma once

// Shared types for the lidarmerge toolkit: error reporting, dense feature
// matrices, point clouds, and the small amount of threading machinery the
// batch operations use.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace lidarmerge {

enum class ErrorKind {
  invalid_calibration,
  inconsistent_pairing,
  invalid_input,
  inconsistent_input,
  schema,
  unknown_dataset,
  missing_labels,
  conflicting_synonym,
  invalid_label,
  unknown_class,
  degenerate_row,
  chain,
  parameter,
  empty_target,
  invalid_probability,
  length_mismatch,
  out_of_range,
  degenerate_baseline,
  degenerate_clean,
  malformed_file,
  format,
  config,
  non_finite,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_calibration: return "invalid-calibration";
    case ErrorKind::inconsistent_pairing: return "inconsistent-pairing";
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::inconsistent_input: return "inconsistent-input";
    case ErrorKind::schema: return "schema";
    case ErrorKind::unknown_dataset: return "unknown-dataset";
    case ErrorKind::missing_labels: return "missing-labels";
    case ErrorKind::conflicting_synonym: return "conflicting-synonym";
    case ErrorKind::invalid_label: return "invalid-label";
    case ErrorKind::unknown_class: return "unknown-class";
    case ErrorKind::degenerate_row: return "degenerate-row";
    case ErrorKind::chain: return "chain";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::empty_target: return "empty-target";
    case ErrorKind::invalid_probability: return "invalid-probability";
    case ErrorKind::length_mismatch: return "length-mismatch";
    case ErrorKind::out_of_range: return "out-of-range";
    case ErrorKind::degenerate_baseline: return "degenerate-baseline";
    case ErrorKind::degenerate_clean: return "degenerate-clean";
    case ErrorKind::malformed_file: return "malformed-file";
    case ErrorKind::format: return "format";
    case ErrorKind::config: return "config";
    case ErrorKind::non_finite: return "non-finite";
  }
  return "unknown";
}

/// Every failure raised by the library. `module()` names the component that
/// detected it so the CLI can report where a pipeline broke.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& message)
      : std::runtime_error(module + ": " + to_string(kind) + ": " + message),
        kind_(kind),
        module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

/// Error that also records the byte offset inside a file where parsing failed.
class FileError : public Error {
 public:
  FileError(ErrorKind kind, const std::string& path, std::uint64_t offset,
            const std::string& message)
      : Error(kind, "io", path + " @ byte " + std::to_string(offset) + ": " + message),
        path_(path),
        offset_(offset) {}

  const std::string& path() const noexcept { return path_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string path_;
  std::uint64_t offset_;
};

/// Dense row-major real array. Rows are items (points, pixels, classes),
/// columns are channels.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec3 = Eigen::Vector3d;
using ClassId = std::uint32_t;
using InstanceId = std::uint32_t;

inline constexpr ClassId kDefaultIgnoreId = 255;

struct PointCloud {
  std::vector<Vec3> coords;
  std::optional<std::vector<float>> intensity;
  std::optional<std::vector<ClassId>> semantic;
  std::optional<std::vector<InstanceId>> instance;

  std::size_t size() const noexcept { return coords.size(); }
  bool empty() const noexcept { return coords.empty(); }

  void validate() const {
    const std::size_t n = coords.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (!coords[i].allFinite()) {
        throw Error(ErrorKind::invalid_input, "geometry",
                    "non-finite coordinate at point " + std::to_string(i));
      }
    }
    if (intensity && intensity->size() != n) {
      throw Error(ErrorKind::length_mismatch, "geometry", "intensity length differs from point count");
    }
    if (semantic && semantic->size() != n) {
      throw Error(ErrorKind::length_mismatch, "geometry", "semantic length differs from point count");
    }
    if (instance && instance->size() != n) {
      throw Error(ErrorKind::length_mismatch, "geometry", "instance length differs from point count");
    }
  }
};

/// Worker count for batch operations. Results never depend on it.
struct Parallelism {
  unsigned threads = 1;
};

/// Runs fn(begin, end) over contiguous chunks of [0, n). Each chunk writes
/// only to its own slots, which keeps outputs independent of the split.
template <class Fn>
void parallel_for(std::size_t n, Parallelism par, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(par.threads, 1, std::max<std::size_t>(n, 1));
  if (workers <= 1 || n < 2) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> xs) {
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value();
}

inline void require_finite(const FeatureMatrix& m, const char* module, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorKind::non_finite, module, std::string(what) + " contains non-finite entries");
  }
}

}  // namespace lidarmerge
