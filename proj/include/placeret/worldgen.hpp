#pragma once

#include "placeret/core.hpp"

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace placeret {

/// Sparse symmetric overlap map. Missing pairs read as 0, self-overlap as 1.
class CovisibilityMap {
 public:
  /// Throws InvalidInput if fraction is outside [0, 1] or the pair already
  /// holds a different value.
  void set(ImageId a, ImageId b, double fraction);
  double overlap(ImageId a, ImageId b) const;
  std::size_t size() const { return entries_.size(); }

  /// Entries keyed by (min id, max id), ascending.
  const std::map<std::pair<ImageId, ImageId>, double>& entries() const { return entries_; }
  bool operator==(const CovisibilityMap&) const = default;

 private:
  std::map<std::pair<ImageId, ImageId>, double> entries_;
};

struct WorldConfig {
  int n_places = 64;
  int images_per_place = 8;
  double area_side = 1500.0;
  double noise_sigma = 0.3;
  int embed_dim = 64;
  std::uint64_t seed = 0;
  /// Seeds the per-image descriptor noise only, so geometry can stay fixed.
  std::uint64_t noise_seed = 1;

  double min_separation = 100.0;
  /// Half-length of the street segment cameras of one place are spread along.
  double place_radius = 4.0;
  double lateral_jitter = 1.0;
  double heading_jitter = 10.0;
  /// Place centers sit on cell centers of this grid, so each place maps to one
  /// sampler cell when the same size is used for partitioning.
  double cell_size = 15.0;

  double covis_distance_scale = 10.0;
  double covis_distance_cutoff = 30.0;
  double covis_angle_cutoff = 60.0;

  /// Bandwidth of the positional part of the descriptor process.
  double descriptor_length_scale = 20.0;

  /// Throws InvalidInput on a violated invariant.
  void validate() const;
};

struct World {
  WorldConfig config;
  std::vector<ImageRecord> images;
  CovisibilityMap covisibility;
  std::map<std::int64_t, std::vector<ImageId>> scenes;
  std::uint64_t descriptor_seed = 0;

  const ImageRecord& image(ImageId id) const;
  /// class id -> member ids, ascending.
  std::map<ClassId, std::vector<ImageId>> classes() const;
  std::map<ImageId, PlanarPose> poses() const;
};

/// Deterministic in config. Throws GenerationFailure if the places cannot be
/// packed at the required separation.
World generate_world(const WorldConfig& config);

/// Ground-truth embedding: normalized random Fourier features of
/// (east, north, heading) plus seeded noise of scale noise_sigma.
/// Throws NotFound for an unknown id.
Descriptor true_descriptor(const World& world, ImageId id);

/// Noise-free feature map at an arbitrary pose; shares the world's basis.
Eigen::VectorXd descriptor_features(const World& world, const PlanarPose& pose);

/// true_descriptor for every image, rows in world.images order.
Eigen::MatrixXd true_descriptor_matrix(const World& world);

}  // namespace placeret
