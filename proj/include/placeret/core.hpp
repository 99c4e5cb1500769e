#pragma once

#include <Eigen/Dense>

#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace placeret {

using ImageId = std::int64_t;
using ClassId = std::int64_t;

/// Error families. Each maps to a distinct CLI exit code (see tools/placeret.cpp).
enum class ErrorKind {
  InvalidInput,
  NotFound,
  DegenerateDescriptor,
  GenerationFailure,
  InsufficientMembers,
  InsufficientClasses,
  InfeasibleScene,
  Composition,
  TrainingDivergence,
  BudgetInfeasible,
  UndefinedMetric,
  Format,
  Corruption,
  Ingestion,
  Range,
  Io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// ---------------------------------------------------------------------------
// Domain types

/// Camera position in a local metric frame. Heading is counter-clockwise from
/// the +east axis, in degrees, normalized to [0, 360).
struct PlanarPose {
  double east = 0.0;
  double north = 0.0;
  double heading = 0.0;

  PlanarPose() = default;
  PlanarPose(double east_m, double north_m, double heading_deg = 0.0);

  Eigen::Vector2d position() const { return {east, north}; }
  bool operator==(const PlanarPose&) const = default;
};

double normalize_heading(double degrees);

/// Unit-norm retrieval descriptor. Construction normalizes.
class Descriptor {
 public:
  Descriptor() = default;
  /// Throws DegenerateDescriptor for zero-norm or non-finite input.
  explicit Descriptor(Eigen::VectorXd values);

  Eigen::Index dim() const { return values_.size(); }
  const Eigen::VectorXd& values() const { return values_; }
  double dot(const Descriptor& other) const { return values_.dot(other.values_); }

 private:
  Eigen::VectorXd values_;
};

enum class Source {
  SfxlFrontal,
  SfxlLateral,
  GsvCities,
  Msls,
  MegaScenes,
  ScanNet,
};

inline constexpr std::array<Source, 6> kIterationSources = {
    Source::SfxlFrontal, Source::SfxlLateral, Source::GsvCities,
    Source::Msls,        Source::MegaScenes,  Source::ScanNet};

std::string_view to_string(Source source);
/// Accepts the names produced by to_string; "sfxl" maps to SfxlFrontal.
Source parse_source(std::string_view name);

struct ImageRecord {
  ImageId id = 0;
  PlanarPose pose;
  std::optional<ClassId> class_id;
  std::optional<std::int64_t> scene_id;
  Source source = Source::GsvCities;

  bool operator==(const ImageRecord&) const = default;
};

inline constexpr std::size_t kQuadrupletSize = 4;
inline constexpr std::size_t kClassesPerSubBatch = 32;
inline constexpr std::size_t kImagesPerSubBatch = kQuadrupletSize * kClassesPerSubBatch;
inline constexpr std::size_t kSubBatchesPerIteration = 6;

struct Quadruplet {
  std::array<ImageId, kQuadrupletSize> image_ids{};
  ClassId class_id = 0;
};

/// Throws InvalidInput unless the four ids are distinct.
Quadruplet make_quadruplet(std::array<ImageId, kQuadrupletSize> ids, ClassId class_id);

/// 32 quadruplets from one source. The factory enforces 128 distinct images
/// and 32 distinct classes.
class SubBatch {
 public:
  static SubBatch make(std::vector<Quadruplet> quadruplets, Source source);

  const std::vector<Quadruplet>& quadruplets() const { return quadruplets_; }
  Source source() const { return source_; }
  /// Flattened ids in quadruplet order, with the matching class labels.
  std::vector<ImageId> image_ids() const;
  std::vector<ClassId> labels() const;

 private:
  SubBatch(std::vector<Quadruplet> q, Source s) : quadruplets_(std::move(q)), source_(s) {}
  std::vector<Quadruplet> quadruplets_;
  Source source_ = Source::GsvCities;
};

class TrainingIteration {
 public:
  /// Throws Composition unless the source multiset is exactly one of each
  /// entry in kIterationSources.
  static TrainingIteration make(std::vector<SubBatch> sub_batches);

  const std::vector<SubBatch>& sub_batches() const { return sub_batches_; }
  std::size_t image_count() const;

 private:
  explicit TrainingIteration(std::vector<SubBatch> b) : sub_batches_(std::move(b)) {}
  std::vector<SubBatch> sub_batches_;
};

// ---------------------------------------------------------------------------
// Geometry

double planar_distance(const PlanarPose& a, const PlanarPose& b);

/// Minimal circular difference in [0, 180].
double angular_difference(double h1_deg, double h2_deg);

/// Direction from `from` to `to`, counter-clockwise from +east, in [0, 360).
double bearing_deg(const Eigen::Vector2d& from, const Eigen::Vector2d& to);

// ---------------------------------------------------------------------------
// Descriptor post-processing

/// Pre-projection dimension of a cluster-aggregated descriptor:
/// clusters * channels + global_token.
constexpr std::int64_t salad_dim_check(std::int64_t clusters, std::int64_t channels,
                                       std::int64_t global_token) {
  return clusters * channels + global_token;
}

/// out = normalize(projection^T * raw), projection is D_in x D_out.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> project_and_normalize(
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>& raw,
    const Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>& projection) {
  if (projection.rows() != raw.size()) {
    throw Error(ErrorKind::InvalidInput,
                "projection has " + std::to_string(projection.rows()) + " rows, input has dim " +
                    std::to_string(raw.size()));
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = projection.transpose() * raw;
  const Scalar norm = out.norm();
  if (!(norm > Scalar(0)) || !std::isfinite(static_cast<double>(norm))) {
    throw Error(ErrorKind::DegenerateDescriptor, "projected descriptor has zero or non-finite norm");
  }
  out /= norm;
  return out;
}

Descriptor project_and_normalize(const Eigen::VectorXd& raw, const Eigen::MatrixXd& projection);

// ---------------------------------------------------------------------------
// Byte accounting for transient buffers

/// Counts bytes of explicitly registered transient buffers and tracks the peak.
/// Thread-safe.
class ByteAccountant {
 public:
  void acquire(std::size_t bytes);
  void release(std::size_t bytes);
  std::size_t current() const { return current_.load(); }
  std::size_t peak() const { return peak_.load(); }
  void reset_peak() { peak_.store(current_.load()); }

 private:
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
};

/// RAII registration of a transient buffer with an accountant.
class TrackedBytes {
 public:
  TrackedBytes() = default;
  TrackedBytes(ByteAccountant* accountant, std::size_t bytes);
  TrackedBytes(TrackedBytes&& other) noexcept;
  TrackedBytes& operator=(TrackedBytes&& other) noexcept;
  TrackedBytes(const TrackedBytes&) = delete;
  TrackedBytes& operator=(const TrackedBytes&) = delete;
  ~TrackedBytes();

  std::size_t bytes() const { return bytes_; }

 private:
  ByteAccountant* accountant_ = nullptr;
  std::size_t bytes_ = 0;
};

/// splitmix64 finalizer, used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace placeret
