#include "placeret/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace placeret {

namespace {

/// k distinct elements, uniformly, by partial Fisher-Yates.
template <typename T>
std::vector<T> choose(std::vector<T> pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  if (v.size() < 2) return;
  for (std::size_t i = v.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(v[i], v[pick(rng)]);
  }
}

Quadruplet four_of(const std::vector<ImageId>& pool, ClassId class_id, Rng& rng) {
  const auto ids = choose(pool, kQuadrupletSize, rng);
  return make_quadruplet({ids[0], ids[1], ids[2], ids[3]}, class_id);
}

Eigen::Vector2d heading_vector(double heading_deg) {
  const double h = heading_deg * M_PI / 180.0;
  return {std::cos(h), std::sin(h)};
}

const PlanarPose& pose_of(const PoseMap& poses, ImageId id) {
  const auto it = poses.find(id);
  if (it == poses.end()) throw Error(ErrorKind::NotFound, "no pose for image " + std::to_string(id));
  return it->second;
}

}  // namespace

CellPartition partition_eigenplaces(std::span<const ImageRecord> images,
                                    const EigenPlacesOptions& options) {
  if (images.empty()) throw Error(ErrorKind::InvalidInput, "partition needs at least one image");
  if (!(options.cell_size > 0.0)) throw Error(ErrorKind::InvalidInput, "cell_size must be positive");

  CellPartition partition;
  partition.options = options;
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<ImageId>> grid;
  for (const auto& r : images) {
    if (!partition.poses.emplace(r.id, r.pose).second) {
      throw Error(ErrorKind::InvalidInput, "duplicate image id " + std::to_string(r.id));
    }
    const auto ix = static_cast<std::int64_t>(std::floor(r.pose.east / options.cell_size));
    const auto iy = static_cast<std::int64_t>(std::floor(r.pose.north / options.cell_size));
    grid[{ix, iy}].push_back(r.id);
  }

  const double reach = options.cell_size / 2.0 + options.focal_distance;
  for (auto& [key, members] : grid) {
    Cell cell;
    cell.ix = key.first;
    cell.iy = key.second;
    std::sort(members.begin(), members.end());
    cell.members = members;

    const auto n = static_cast<double>(members.size());
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (ImageId id : members) mean += partition.poses.at(id).position();
    mean /= n;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    Eigen::Vector2d mean_view = Eigen::Vector2d::Zero();
    for (ImageId id : members) {
      const auto& pose = partition.poses.at(id);
      const Eigen::Vector2d d = pose.position() - mean;
      cov += d * d.transpose();
      mean_view += heading_vector(pose.heading);
    }
    cov /= n;
    cell.centroid = mean;

    if (cov.cwiseAbs().maxCoeff() == 0.0) {
      cell.degenerate = true;
      cell.principal = Eigen::Vector2d::UnitX();
    } else {
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> solver(cov);
      cell.principal = solver.eigenvectors().col(1).normalized();
      const double s = mean_view.dot(cell.principal);
      const bool canonical = cell.principal.x() > 0.0 ||
                             (cell.principal.x() == 0.0 && cell.principal.y() > 0.0);
      if (s < 0.0 || (s == 0.0 && !canonical)) cell.principal = -cell.principal;
    }
    cell.lateral = Eigen::Vector2d(-cell.principal.y(), cell.principal.x());
    if (mean_view.dot(cell.lateral) < 0.0) cell.lateral = -cell.lateral;

    cell.frontal_focal = cell.centroid + reach * cell.principal;
    cell.lateral_focal = cell.centroid + reach * cell.lateral;
    partition.cells.push_back(std::move(cell));
  }
  return partition;
}

std::vector<ImageId> facing_members(const CellPartition& partition, std::size_t cell, Facing facing) {
  if (cell >= partition.cells.size()) {
    throw Error(ErrorKind::NotFound, "cell index " + std::to_string(cell) + " out of range");
  }
  const auto& c = partition.cells[cell];
  const Eigen::Vector2d focal = facing == Facing::Frontal ? c.frontal_focal : c.lateral_focal;
  std::vector<ImageId> out;
  for (ImageId id : c.members) {
    const auto& pose = partition.poses.at(id);
    const double bearing = bearing_deg(pose.position(), focal);
    if (angular_difference(pose.heading, bearing) <= partition.options.facing_tolerance) {
      out.push_back(id);
    }
  }
  return out;
}

Quadruplet select_facing_quadruplet(const CellPartition& partition, std::size_t cell, Facing facing,
                                    Rng& rng) {
  const auto pool = facing_members(partition, cell, facing);
  if (pool.size() < kQuadrupletSize) {
    throw Error(ErrorKind::InsufficientMembers,
                "cell " + std::to_string(cell) + " has " + std::to_string(pool.size()) + " " +
                    (facing == Facing::Frontal ? "frontal" : "lateral") + "-facing members");
  }
  return four_of(pool, static_cast<ClassId>(cell), rng);
}

SubBatch sample_eigenplaces_batch(const CellPartition& partition, Facing facing, Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < partition.cells.size(); ++i) {
    if (partition.cells[i].usable()) candidates.push_back(i);
  }
  shuffle(candidates, rng);

  std::vector<Quadruplet> quads;
  int failures = 0;
  for (std::size_t cell : candidates) {
    if (quads.size() == kClassesPerSubBatch) break;
    try {
      quads.push_back(select_facing_quadruplet(partition, cell, facing, rng));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientMembers) throw;
      if (++failures > partition.options.max_retries) throw;
    }
  }
  if (quads.size() < kClassesPerSubBatch) {
    throw Error(ErrorKind::InsufficientClasses,
                "only " + std::to_string(quads.size()) + " cells can supply a quadruplet");
  }
  return SubBatch::make(std::move(quads),
                        facing == Facing::Frontal ? Source::SfxlFrontal : Source::SfxlLateral);
}

SubBatch sample_gsv_batch(const ClassMembers& classes, Rng& rng, Source tag) {
  std::vector<ClassId> eligible;
  for (const auto& [id, members] : classes) {
    if (members.size() >= kQuadrupletSize) eligible.push_back(id);
  }
  if (eligible.size() < kClassesPerSubBatch) {
    throw Error(ErrorKind::InsufficientClasses,
                std::to_string(eligible.size()) + " classes with >= 4 images, need 32");
  }
  std::vector<Quadruplet> quads;
  for (ClassId c : choose(std::move(eligible), kClassesPerSubBatch, rng)) {
    quads.push_back(four_of(classes.at(c), c, rng));
  }
  return SubBatch::make(std::move(quads), tag);
}

CliqueBatchPlan mine_cliques(const std::map<ClassId, Descriptor>& descriptors,
                             const std::map<ClassId, PlanarPose>& positions,
                             double similarity_floor, double geo_floor, int clique_size) {
  if (clique_size < 2) throw Error(ErrorKind::InvalidInput, "clique_size must be >= 2");
  CliqueBatchPlan plan{{}, similarity_floor, geo_floor};

  std::vector<ClassId> ids;
  for (const auto& [id, _] : descriptors) {
    if (!positions.count(id)) throw Error(ErrorKind::NotFound, "no position for class " + std::to_string(id));
    ids.push_back(id);
  }
  const std::size_t n = ids.size();
  Eigen::MatrixXd sim(n, n);
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> edge(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      sim(i, j) = descriptors.at(ids[i]).dot(descriptors.at(ids[j]));
      edge(i, j) = i != j && sim(i, j) >= similarity_floor &&
                   planar_distance(positions.at(ids[i]), positions.at(ids[j])) >= geo_floor;
    }
  }

  std::vector<std::size_t> seeds(n);
  std::iota(seeds.begin(), seeds.end(), 0);
  std::vector<Eigen::Index> degree(n);
  for (std::size_t i = 0; i < n; ++i) degree[i] = edge.row(i).count();
  std::stable_sort(seeds.begin(), seeds.end(),
                   [&](std::size_t a, std::size_t b) { return degree[a] > degree[b]; });

  std::vector<bool> used(n, false);
  for (std::size_t seed : seeds) {
    if (used[seed]) continue;
    std::vector<std::size_t> neighbors;
    for (std::size_t j = 0; j < n; ++j) {
      if (!used[j] && edge(seed, j)) neighbors.push_back(j);
    }
    // hardest negatives first
    std::stable_sort(neighbors.begin(), neighbors.end(),
                     [&](std::size_t a, std::size_t b) { return sim(seed, a) > sim(seed, b); });
    std::vector<std::size_t> clique{seed};
    for (std::size_t cand : neighbors) {
      if (static_cast<int>(clique.size()) == clique_size) break;
      if (std::all_of(clique.begin(), clique.end(), [&](std::size_t m) { return edge(m, cand); })) {
        clique.push_back(cand);
      }
    }
    if (static_cast<int>(clique.size()) == clique_size) {
      std::vector<ClassId> members;
      for (std::size_t m : clique) {
        used[m] = true;
        members.push_back(ids[m]);
      }
      plan.cliques.push_back(std::move(members));
    }
  }
  return plan;
}

SubBatch sample_clique_batch(const CliqueBatchPlan& plan, const ClassMembers& classes, Rng& rng,
                             Source tag) {
  auto eligible = [&](ClassId c) {
    const auto it = classes.find(c);
    return it != classes.end() && it->second.size() >= kQuadrupletSize;
  };

  std::vector<std::size_t> order(plan.cliques.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);

  std::vector<ClassId> chosen;
  std::set<ClassId> taken;
  for (std::size_t k : order) {
    std::vector<ClassId> members;
    for (ClassId c : plan.cliques[k]) {
      if (eligible(c) && !taken.count(c)) members.push_back(c);
    }
    if (members.empty() || chosen.size() + members.size() > kClassesPerSubBatch) continue;
    for (ClassId c : members) {
      chosen.push_back(c);
      taken.insert(c);
    }
  }

  std::vector<ClassId> padding;
  for (const auto& [c, _] : classes) {
    if (eligible(c) && !taken.count(c)) padding.push_back(c);
  }
  const std::size_t missing = kClassesPerSubBatch - chosen.size();
  if (padding.size() < missing) {
    throw Error(ErrorKind::InsufficientClasses,
                "clique batch short by " + std::to_string(missing - padding.size()) + " classes");
  }
  for (ClassId c : choose(std::move(padding), missing, rng)) chosen.push_back(c);

  std::vector<Quadruplet> quads;
  for (ClassId c : chosen) quads.push_back(four_of(classes.at(c), c, rng));
  return SubBatch::make(std::move(quads), tag);
}

OverlapFn covisibility_overlap(const CovisibilityMap& covisibility) {
  return [&covisibility](ImageId a, ImageId b) {
    return covisibility.overlap(a, b) >= kMinCovisibility;
  };
}

OverlapFn pose_overlap(const PoseMap& poses) {
  return [&poses](ImageId a, ImageId b) {
    const auto& pa = pose_of(poses, a);
    const auto& pb = pose_of(poses, b);
    return planar_distance(pa, pb) < kScanMaxDistance &&
           angular_difference(pa.heading, pb.heading) < kScanMaxAngle;
  };
}

namespace {

bool extend_clique(const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& adj,
                   std::vector<std::size_t>& chosen, std::size_t start) {
  if (chosen.size() == kQuadrupletSize) return true;
  const auto n = static_cast<std::size_t>(adj.rows());
  for (std::size_t j = start; j < n; ++j) {
    if (!std::all_of(chosen.begin(), chosen.end(), [&](std::size_t m) { return adj(m, j); })) continue;
    chosen.push_back(j);
    if (extend_clique(adj, chosen, j + 1)) return true;
    chosen.pop_back();
  }
  return false;
}

}  // namespace

Quadruplet sample_overlapping_quadruplet(std::span<const ImageId> scene, const OverlapFn& overlap,
                                         ClassId class_id, Rng& rng) {
  if (scene.empty()) throw Error(ErrorKind::InvalidInput, "empty scene");
  std::vector<ImageId> order(scene.begin(), scene.end());
  shuffle(order, rng);
  const auto n = static_cast<Eigen::Index>(order.size());
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> adj(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    adj(i, i) = false;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      adj(i, j) = adj(j, i) = order[i] != order[j] && overlap(order[i], order[j]);
    }
  }
  std::vector<std::size_t> chosen;
  if (!extend_clique(adj, chosen, 0)) {
    throw Error(ErrorKind::InfeasibleScene,
                "no overlapping quadruplet in scene " + std::to_string(class_id));
  }
  return make_quadruplet({order[chosen[0]], order[chosen[1]], order[chosen[2]], order[chosen[3]]},
                         class_id);
}

Quadruplet sample_covis_quadruplet(const CovisibilityMap& covisibility, std::span<const ImageId> scene,
                                   ClassId class_id, Rng& rng) {
  return sample_overlapping_quadruplet(scene, covisibility_overlap(covisibility), class_id, rng);
}

Quadruplet sample_scan_quadruplet(const PoseMap& poses, std::span<const ImageId> scene,
                                  ClassId class_id, Rng& rng) {
  return sample_overlapping_quadruplet(scene, pose_overlap(poses), class_id, rng);
}

std::vector<DisjointnessViolation> check_cross_quadruplet_disjointness(
    std::span<const Quadruplet> quadruplets, const OverlapFn& overlap) {
  std::vector<DisjointnessViolation> out;
  for (std::size_t a = 0; a < quadruplets.size(); ++a) {
    for (std::size_t b = a + 1; b < quadruplets.size(); ++b) {
      bool found = false;
      for (ImageId ia : quadruplets[a].image_ids) {
        for (ImageId ib : quadruplets[b].image_ids) {
          if (overlap(ia, ib)) {
            out.push_back({a, b, ia, ib});
            found = true;
            break;
          }
        }
        if (found) break;
      }
    }
  }
  return out;
}

SubBatch sample_scene_batch(const ClassMembers& scenes, const OverlapFn& overlap, Source tag, Rng& rng) {
  std::vector<ClassId> order;
  for (const auto& [id, members] : scenes) {
    if (members.size() >= kQuadrupletSize) order.push_back(id);
  }
  shuffle(order, rng);

  std::vector<Quadruplet> quads;
  std::vector<ImageId> taken;
  for (ClassId scene : order) {
    if (quads.size() == kClassesPerSubBatch) break;
    Quadruplet q;
    try {
      q = sample_overlapping_quadruplet(scenes.at(scene), overlap, scene, rng);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InfeasibleScene) throw;
      continue;
    }
    const bool clashes = std::any_of(q.image_ids.begin(), q.image_ids.end(), [&](ImageId a) {
      return std::any_of(taken.begin(), taken.end(), [&](ImageId b) { return overlap(a, b); });
    });
    if (clashes) continue;
    taken.insert(taken.end(), q.image_ids.begin(), q.image_ids.end());
    quads.push_back(q);
  }
  if (quads.size() < kClassesPerSubBatch) {
    throw Error(ErrorKind::InsufficientClasses,
                "only " + std::to_string(quads.size()) + " scenes yield a disjoint quadruplet");
  }
  return SubBatch::make(std::move(quads), tag);
}

TrainingIteration assemble_iteration(SubBatch sfxl_frontal, SubBatch sfxl_lateral, SubBatch gsv,
                                     SubBatch msls, SubBatch megascenes, SubBatch scannet) {
  std::vector<SubBatch> all{std::move(sfxl_frontal), std::move(sfxl_lateral), std::move(gsv),
                            std::move(msls), std::move(megascenes), std::move(scannet)};
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].source() != kIterationSources[i]) {
      throw Error(ErrorKind::Composition,
                  "slot " + std::string(to_string(kIterationSources[i])) + " holds a " +
                      std::string(to_string(all[i].source())) + " sub-batch");
    }
  }
  return TrainingIteration::make(std::move(all));
}

}  // namespace placeret
