#include "placeret/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace placeret {

void CovisibilityMap::set(ImageId a, ImageId b, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::InvalidInput, "overlap fraction " + std::to_string(fraction) +
                                             " outside [0, 1] for pair (" + std::to_string(a) +
                                             ", " + std::to_string(b) + ")");
  }
  if (a == b) return;
  const auto key = std::minmax(a, b);
  const auto [it, inserted] = entries_.emplace(key, fraction);
  if (!inserted && it->second != fraction) {
    throw Error(ErrorKind::InvalidInput, "conflicting overlap values for pair (" +
                                             std::to_string(key.first) + ", " +
                                             std::to_string(key.second) + ")");
  }
}

double CovisibilityMap::overlap(ImageId a, ImageId b) const {
  if (a == b) return 1.0;
  const auto it = entries_.find(std::minmax(a, b));
  return it == entries_.end() ? 0.0 : it->second;
}

void WorldConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidInput, "world config: " + m); };
  if (n_places < static_cast<int>(kClassesPerSubBatch)) fail("n_places must be >= 32");
  if (images_per_place < static_cast<int>(kQuadrupletSize)) fail("images_per_place must be >= 4");
  if (!(area_side > 0.0)) fail("area_side must be positive");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be non-negative");
  if (embed_dim < 1) fail("embed_dim must be positive");
  if (!(cell_size > 0.0)) fail("cell_size must be positive");
  if (!(min_separation >= 0.0)) fail("min_separation must be non-negative");
  if (place_radius < 0.0 || lateral_jitter < 0.0 || heading_jitter < 0.0) {
    fail("place_radius, lateral_jitter and heading_jitter must be non-negative");
  }
  if (std::hypot(place_radius, lateral_jitter) >= cell_size / 2.0) {
    fail("place extent must fit inside half a cell");
  }
  if (!(covis_distance_scale > 0.0) || !(covis_distance_cutoff > 0.0) ||
      !(covis_angle_cutoff > 0.0 && covis_angle_cutoff <= 90.0)) {
    fail("covisibility kernel parameters out of range");
  }
  if (!(descriptor_length_scale > 0.0)) fail("descriptor_length_scale must be positive");
}

const ImageRecord& World::image(ImageId id) const {
  // ids are dense and ordered by construction, but ingested worlds may not be
  if (id >= 0 && static_cast<std::size_t>(id) < images.size() && images[id].id == id) {
    return images[id];
  }
  const auto it = std::find_if(images.begin(), images.end(),
                               [id](const ImageRecord& r) { return r.id == id; });
  if (it == images.end()) throw Error(ErrorKind::NotFound, "unknown image id " + std::to_string(id));
  return *it;
}

std::map<ClassId, std::vector<ImageId>> World::classes() const {
  std::map<ClassId, std::vector<ImageId>> out;
  for (const auto& r : images) {
    if (r.class_id) out[*r.class_id].push_back(r.id);
  }
  for (auto& [_, ids] : out) std::sort(ids.begin(), ids.end());
  return out;
}

std::map<ImageId, PlanarPose> World::poses() const {
  std::map<ImageId, PlanarPose> out;
  for (const auto& r : images) out.emplace(r.id, r.pose);
  return out;
}

namespace {

std::vector<Eigen::Vector2d> pack_places(const WorldConfig& c, std::mt19937_64& rng) {
  const auto cells_per_side = static_cast<std::int64_t>(std::floor(c.area_side / c.cell_size));
  if (cells_per_side < 1) {
    throw Error(ErrorKind::GenerationFailure, "area_side smaller than one cell");
  }
  std::uniform_int_distribution<std::int64_t> cell(0, cells_per_side - 1);
  std::vector<Eigen::Vector2d> centers;
  // image centroids drift from the center by at most the place extent
  const double spacing = c.min_separation + 2.0 * std::hypot(c.place_radius, c.lateral_jitter);
  const int max_attempts = 500 * c.n_places;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(centers.size()) < c.n_places;
       ++attempt) {
    const Eigen::Vector2d p((cell(rng) + 0.5) * c.cell_size, (cell(rng) + 0.5) * c.cell_size);
    const bool clear = std::all_of(centers.begin(), centers.end(), [&](const Eigen::Vector2d& q) {
      return (p - q).norm() >= spacing;
    });
    if (clear) centers.push_back(p);
  }
  if (static_cast<int>(centers.size()) < c.n_places) {
    throw Error(ErrorKind::GenerationFailure,
                "cannot place " + std::to_string(c.n_places) + " places at min_separation " +
                    std::to_string(c.min_separation) + " m inside a " +
                    std::to_string(c.area_side) + " m square (placed " +
                    std::to_string(centers.size()) + ")");
  }
  return centers;
}

double covisibility_kernel(const WorldConfig& c, const PlanarPose& a, const PlanarPose& b) {
  const double d = planar_distance(a, b);
  const double dh = angular_difference(a.heading, b.heading);
  if (d >= c.covis_distance_cutoff || dh >= c.covis_angle_cutoff) return 0.0;
  const double s = c.covis_distance_scale;
  return std::exp(-d * d / (2.0 * s * s)) * std::cos(dh * M_PI / 180.0);
}

struct FourierBasis {
  Eigen::MatrixXd omega;  // D x 4
  Eigen::VectorXd phase;  // D
};

FourierBasis make_basis(const World& world) {
  const int dim = world.config.embed_dim;
  std::mt19937_64 rng(world.descriptor_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * M_PI);
  FourierBasis basis{Eigen::MatrixXd(dim, 4), Eigen::VectorXd(dim)};
  for (int k = 0; k < dim; ++k) {
    for (int j = 0; j < 4; ++j) basis.omega(k, j) = normal(rng);
    basis.phase(k) = uniform(rng);
  }
  return basis;
}

Eigen::VectorXd features_with(const World& world, const FourierBasis& basis, const PlanarPose& pose) {
  const double ell = world.config.descriptor_length_scale;
  const double h = pose.heading * M_PI / 180.0;
  const Eigen::Vector4d z(pose.east / ell, pose.north / ell, std::cos(h), std::sin(h));
  Eigen::VectorXd phi = ((basis.omega * z) + basis.phase).array().cos().matrix();
  return phi / phi.norm();
}

Eigen::VectorXd noisy_descriptor(const World& world, const FourierBasis& basis, const ImageRecord& r) {
  Eigen::VectorXd v = features_with(world, basis, r.pose);
  const double sigma = world.config.noise_sigma;
  if (sigma > 0.0) {
    std::mt19937_64 rng(mix_seed(world.config.noise_seed, static_cast<std::uint64_t>(r.id)));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = sigma / std::sqrt(static_cast<double>(v.size()));
    for (Eigen::Index k = 0; k < v.size(); ++k) v(k) += scale * normal(rng);
  }
  return Descriptor(std::move(v)).values();
}

}  // namespace

World generate_world(const WorldConfig& config) {
  config.validate();
  World world;
  world.config = config;
  world.descriptor_seed = mix_seed(config.seed, 7);

  std::mt19937_64 rng(mix_seed(config.seed, 1));
  const auto centers = pack_places(config, rng);

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  // Two viewing groups per place (along the street, and across it) once there
  // are enough images for a quadruplet in each.
  const int ipp = config.images_per_place;
  const bool two_groups = ipp >= 2 * static_cast<int>(kQuadrupletSize);

  ImageId next_id = 0;
  for (int p = 0; p < config.n_places; ++p) {
    const double axis_deg = angle(rng);
    const double axis = axis_deg * M_PI / 180.0;
    const Eigen::Vector2d along(std::cos(axis), std::sin(axis));
    const Eigen::Vector2d across(-along.y(), along.x());
    auto& scene = world.scenes[p];
    for (int j = 0; j < ipp; ++j) {
      const bool lateral = two_groups && j >= ipp / 2;
      const Eigen::Vector2d pos = centers[p] + along * (config.place_radius * unit(rng)) +
                                  across * (config.lateral_jitter * unit(rng));
      const double heading = axis_deg + (lateral ? 90.0 : 0.0) + config.heading_jitter * unit(rng);
      ImageRecord r;
      r.id = next_id++;
      r.pose = PlanarPose(pos.x(), pos.y(), heading);
      r.class_id = p;
      r.scene_id = p;
      r.source = Source::GsvCities;
      world.images.push_back(r);
      scene.push_back(r.id);
    }
  }

  // Cameras farther apart than the cutoff never overlap, so a sort on east
  // bounds the pair scan.
  std::vector<std::size_t> order(world.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return world.images[a].pose.east < world.images[b].pose.east;
  });
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& a = world.images[order[i]];
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto& b = world.images[order[j]];
      if (b.pose.east - a.pose.east >= config.covis_distance_cutoff) break;
      const double o = covisibility_kernel(config, a.pose, b.pose);
      if (o > 0.0) world.covisibility.set(a.id, b.id, o);
    }
  }
  return world;
}

Eigen::VectorXd descriptor_features(const World& world, const PlanarPose& pose) {
  return features_with(world, make_basis(world), pose);
}

Descriptor true_descriptor(const World& world, ImageId id) {
  const auto& r = world.image(id);
  return Descriptor(noisy_descriptor(world, make_basis(world), r));
}

Eigen::MatrixXd true_descriptor_matrix(const World& world) {
  const auto basis = make_basis(world);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(world.images.size()), world.config.embed_dim);
  for (std::size_t i = 0; i < world.images.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = noisy_descriptor(world, basis, world.images[i]).transpose();
  }
  return out;
}

}  // namespace placeret
