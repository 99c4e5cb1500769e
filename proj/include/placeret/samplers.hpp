#pragma once

#include "placeret/core.hpp"
#include "placeret/worldgen.hpp"

#include <functional>
#include <map>
#include <random>
#include <span>
#include <vector>

namespace placeret {

using Rng = std::mt19937_64;
using ClassMembers = std::map<ClassId, std::vector<ImageId>>;
using PoseMap = std::map<ImageId, PlanarPose>;

// ---------------------------------------------------------------------------
// Grid-cell sampling with frontal / lateral views

struct EigenPlacesOptions {
  double cell_size = 15.0;
  /// Focal points sit this far beyond the cell boundary.
  double focal_distance = 10.0;
  double facing_tolerance = 45.0;
  int max_retries = 64;
};

enum class Facing { Frontal, Lateral };

struct Cell {
  std::int64_t ix = 0;
  std::int64_t iy = 0;
  std::vector<ImageId> members;
  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  /// Dominant eigenvector of the member-position covariance. Its sign is
  /// chosen so that most members look along it.
  Eigen::Vector2d principal = Eigen::Vector2d::UnitX();
  /// Perpendicular to principal, signed the same way.
  Eigen::Vector2d lateral = Eigen::Vector2d::UnitY();
  Eigen::Vector2d frontal_focal = Eigen::Vector2d::Zero();
  Eigen::Vector2d lateral_focal = Eigen::Vector2d::Zero();
  /// All member positions coincide; principal fell back to +east.
  bool degenerate = false;

  bool usable() const { return members.size() >= kQuadrupletSize; }
};

/// Each non-empty cell is one class; its class id is its index in `cells`.
struct CellPartition {
  EigenPlacesOptions options;
  std::vector<Cell> cells;
  PoseMap poses;
};

CellPartition partition_eigenplaces(std::span<const ImageRecord> images,
                                    const EigenPlacesOptions& options = {});

/// Members of `cell` whose heading is within the facing tolerance of the
/// bearing to the requested focal point, ascending by id.
std::vector<ImageId> facing_members(const CellPartition& partition, std::size_t cell, Facing facing);

/// Throws InsufficientMembers if fewer than four members qualify.
Quadruplet select_facing_quadruplet(const CellPartition& partition, std::size_t cell, Facing facing,
                                    Rng& rng);

/// 32 usable cells, one facing quadruplet each. Cells that cannot supply a
/// quadruplet are resampled up to options.max_retries times before
/// InsufficientClasses is raised.
SubBatch sample_eigenplaces_batch(const CellPartition& partition, Facing facing, Rng& rng);

// ---------------------------------------------------------------------------
// Pre-separated classes

/// 32 classes with >= 4 images, uniformly without replacement, then 4 images
/// each. Throws InsufficientClasses when fewer than 32 classes are eligible.
SubBatch sample_gsv_batch(const ClassMembers& classes, Rng& rng, Source tag = Source::GsvCities);

// ---------------------------------------------------------------------------
// Hard-negative cliques

struct CliqueBatchPlan {
  std::vector<std::vector<ClassId>> cliques;
  double similarity_floor = 0.0;
  double geo_floor = 0.0;
};

/// Greedy clique extraction on the graph whose edges join classes with
/// similarity >= similarity_floor and distance >= geo_floor. Only cliques of
/// exactly clique_size are kept; cliques are disjoint.
CliqueBatchPlan mine_cliques(const std::map<ClassId, Descriptor>& descriptors,
                             const std::map<ClassId, PlanarPose>& positions,
                             double similarity_floor, double geo_floor, int clique_size);

/// Classes are taken clique by clique (never split), then padded with random
/// classes. Classes with fewer than four images are skipped.
SubBatch sample_clique_batch(const CliqueBatchPlan& plan, const ClassMembers& classes, Rng& rng,
                             Source tag = Source::Msls);

// ---------------------------------------------------------------------------
// Overlap-constrained quadruplets

inline constexpr double kMinCovisibility = 0.01;
inline constexpr double kScanMaxDistance = 10.0;
inline constexpr double kScanMaxAngle = 30.0;

using OverlapFn = std::function<bool(ImageId, ImageId)>;

/// overlap >= 1% (inclusive).
OverlapFn covisibility_overlap(const CovisibilityMap& covisibility);
/// distance < 10 m and heading difference < 30 degrees (both strict).
OverlapFn pose_overlap(const PoseMap& poses);

/// Four members of `scene` that pairwise satisfy `overlap`; the search is
/// exhaustive in a random order. Throws InfeasibleScene when none exist.
Quadruplet sample_overlapping_quadruplet(std::span<const ImageId> scene, const OverlapFn& overlap,
                                         ClassId class_id, Rng& rng);

Quadruplet sample_covis_quadruplet(const CovisibilityMap& covisibility, std::span<const ImageId> scene,
                                   ClassId class_id, Rng& rng);
Quadruplet sample_scan_quadruplet(const PoseMap& poses, std::span<const ImageId> scene,
                                  ClassId class_id, Rng& rng);

struct DisjointnessViolation {
  std::size_t quadruplet_a = 0;
  std::size_t quadruplet_b = 0;
  /// First overlapping pair found between the two quadruplets.
  ImageId image_a = 0;
  ImageId image_b = 0;
};

/// One entry per pair of quadruplets that share an overlapping image pair.
std::vector<DisjointnessViolation> check_cross_quadruplet_disjointness(
    std::span<const Quadruplet> quadruplets, const OverlapFn& overlap);

/// One quadruplet per scene, 32 scenes, skipping infeasible scenes and
/// quadruplets that would overlap an already chosen one.
SubBatch sample_scene_batch(const ClassMembers& scenes, const OverlapFn& overlap, Source tag, Rng& rng);

// ---------------------------------------------------------------------------

/// Throws Composition unless each argument carries its slot's source tag.
TrainingIteration assemble_iteration(SubBatch sfxl_frontal, SubBatch sfxl_lateral, SubBatch gsv,
                                     SubBatch msls, SubBatch megascenes, SubBatch scannet);

}  // namespace placeret
