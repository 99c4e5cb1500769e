#pragma once

// Independent brute-force reimplementations used as test oracles.

#include "placeret/knn.hpp"
#include "placeret/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using namespace placeret;

inline RowMatrixF random_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  RowMatrixF m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g(rng);
  return m;
}

/// Full score matrix, full sort by (score desc, id asc), truncate to k.
inline SearchResult naive_knn(const RowMatrixF& db, const Eigen::MatrixXd& q, std::size_t k,
                              const std::vector<ImageId>& ids = {}) {
  SearchResult out;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<Neighbor> all;
    for (Eigen::Index r = 0; r < db.rows(); ++r) {
      double s = 0;
      for (Eigen::Index d = 0; d < db.cols(); ++d) s += q(i, d) * static_cast<double>(db(r, d));
      all.push_back({ids.empty() ? r : ids[r], s});
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.score != b.score ? a.score > b.score : a.id < b.id;
    });
    all.resize(std::min<std::size_t>(k, all.size()));
    out.neighbors.push_back(all);
  }
  return out;
}

/// Rescans the full query-database distance matrix for every query and k.
inline std::map<std::size_t, double> recall(const SearchResult& results, const VprGroundTruth& gt,
                                            const std::vector<std::size_t>& ks) {
  const std::size_t nq = gt.query_poses.size();
  std::vector<std::vector<double>> dist(nq);
  std::vector<ImageId> db_ids;
  for (const auto& [id, _] : gt.database_poses) db_ids.push_back(id);
  for (std::size_t q = 0; q < nq; ++q) {
    for (ImageId id : db_ids) {
      const auto& a = gt.query_poses[q];
      const auto& b = gt.database_poses.at(id);
      dist[q].push_back(std::sqrt((a.east - b.east) * (a.east - b.east) + (a.north - b.north) * (a.north - b.north)));
    }
  }
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    std::size_t hit = 0, counted = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      std::set<ImageId> positives;
      for (std::size_t j = 0; j < db_ids.size(); ++j) {
        if (dist[q][j] <= gt.positive_threshold) positives.insert(db_ids[j]);
      }
      if (positives.empty()) continue;
      ++counted;
      const auto& list = results.neighbors[q];
      bool found = false;
      for (std::size_t r = 0; r < std::min(k, list.size()); ++r) found = found || positives.count(list[r].id);
      hit += found;
    }
    out[k] = static_cast<double>(hit) / static_cast<double>(counted);
  }
  return out;
}

/// Rebuilds the split's sets from scratch, filters the ranking, and sums
/// precision at each positive position.
inline double map_split(const std::vector<std::vector<ImageId>>& rankings, const std::vector<LandmarkQuery>& gt,
                        char split) {
  double total = 0;
  int used = 0;
  for (std::size_t q = 0; q < gt.size(); ++q) {
    std::set<ImageId> pos, ignore;
    for (ImageId id : gt[q].junk) ignore.insert(id);
    if (split == 'E') {
      pos = gt[q].easy;
      for (ImageId id : gt[q].hard) ignore.insert(id);
    } else if (split == 'M') {
      pos = gt[q].easy;
      for (ImageId id : gt[q].hard) pos.insert(id);
    } else {
      pos = gt[q].hard;
      for (ImageId id : gt[q].easy) ignore.insert(id);
    }
    if (pos.empty()) continue;
    std::vector<ImageId> kept;
    for (ImageId id : rankings[q]) {
      if (!ignore.count(id)) kept.push_back(id);
    }
    double ap = 0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (!pos.count(kept[i])) continue;
      std::size_t before = 0;
      for (std::size_t j = 0; j <= i; ++j) before += pos.count(kept[j]);
      ap += static_cast<double>(before) / static_cast<double>(i + 1);
    }
    total += ap / static_cast<double>(pos.size());
    ++used;
  }
  return total / used;
}

/// Random landmark ground truth: each database id lands in easy, hard, junk or
/// nothing for every query; rankings are random permutations, sometimes cut.
inline void random_landmark(std::uint64_t seed, std::size_t queries, std::size_t db,
                            std::vector<LandmarkQuery>& gt, std::vector<std::vector<ImageId>>& rankings) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> role(0, 9);
  gt.assign(queries, {});
  rankings.assign(queries, {});
  for (std::size_t q = 0; q < queries; ++q) {
    for (ImageId id = 0; id < static_cast<ImageId>(db); ++id) {
      const int r = role(rng);
      if (r == 0) gt[q].easy.insert(id);
      else if (r == 1) gt[q].hard.insert(id);
      else if (r == 2) gt[q].junk.insert(id);
    }
    // every split needs at least one query with positives
    if (q == 0) {
      gt[q].easy.insert(static_cast<ImageId>(db));
      gt[q].hard.insert(static_cast<ImageId>(db) + 1);
    }
    for (ImageId id = 0; id < static_cast<ImageId>(db) + 2; ++id) rankings[q].push_back(id);
    std::shuffle(rankings[q].begin(), rankings[q].end(), rng);
    if (role(rng) < 3) rankings[q].resize(rankings[q].size() / 2);
  }
}

}  // namespace oracle
