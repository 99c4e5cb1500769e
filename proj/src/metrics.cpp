#include "placeret/metrics.hpp"

#include "placeret/io.hpp"

#include <algorithm>

namespace placeret {

RecallReport recall_at_k(const SearchResult& results, const VprGroundTruth& gt,
                         std::span<const std::size_t> ks) {
  if (!(gt.positive_threshold > 0.0)) throw Error(ErrorKind::InvalidInput, "positive threshold must be > 0");
  if (results.neighbors.size() != gt.query_poses.size()) {
    throw Error(ErrorKind::InvalidInput, "results cover " + std::to_string(results.neighbors.size()) +
                                             " queries, ground truth has " +
                                             std::to_string(gt.query_poses.size()));
  }
  if (ks.empty()) throw Error(ErrorKind::InvalidInput, "no k values requested");
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  if (*std::min_element(ks.begin(), ks.end()) < 1) throw Error(ErrorKind::InvalidInput, "k must be >= 1");

  RecallReport report;
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : ks) hits[k] = 0;

  for (std::size_t q = 0; q < gt.query_poses.size(); ++q) {
    const auto& pose = gt.query_poses[q];
    const bool has_positive =
        std::any_of(gt.database_poses.begin(), gt.database_poses.end(), [&](const auto& entry) {
          return planar_distance(pose, entry.second) <= gt.positive_threshold;
        });
    if (!has_positive) {
      ++report.queries_without_positive;
      continue;
    }
    const auto& list = results.neighbors[q];
    if (list.size() < max_k && list.size() < gt.database_poses.size()) {
      throw Error(ErrorKind::InvalidInput, "query " + std::to_string(q) + " retrieved " +
                                               std::to_string(list.size()) + " items, recall@" +
                                               std::to_string(max_k) + " requested");
    }
    ++report.evaluated_queries;
    // rank of the first positive, 1-based
    std::size_t first = 0;
    for (std::size_t r = 0; r < list.size(); ++r) {
      const auto it = gt.database_poses.find(list[r].id);
      if (it == gt.database_poses.end()) {
        throw Error(ErrorKind::NotFound, "retrieved id " + std::to_string(list[r].id) + " not in database");
      }
      if (planar_distance(pose, it->second) <= gt.positive_threshold) {
        first = r + 1;
        break;
      }
    }
    for (auto& [k, h] : hits) {
      if (first != 0 && first <= k) ++h;
    }
  }
  if (report.evaluated_queries == 0) {
    throw Error(ErrorKind::UndefinedMetric, "no query has a positive within " +
                                                format_double(gt.positive_threshold) + " m");
  }
  for (const auto& [k, h] : hits) {
    report.recall[k] = static_cast<double>(h) / static_cast<double>(report.evaluated_queries);
  }
  return report;
}

double average_precision_revisited(std::span<const ImageId> ranking, const std::set<ImageId>& positives,
                                   const std::set<ImageId>& junk) {
  if (positives.empty()) throw Error(ErrorKind::InvalidInput, "average precision needs a positive");
  std::set<ImageId> seen;
  for (ImageId id : ranking) {
    if (!seen.insert(id).second) {
      throw Error(ErrorKind::InvalidInput, "ranking lists id " + std::to_string(id) + " twice");
    }
  }
  double sum = 0.0;
  std::size_t rank = 0;
  std::size_t found = 0;
  for (ImageId id : ranking) {
    if (junk.count(id)) continue;
    ++rank;
    if (positives.count(id)) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(rank);
    }
  }
  return sum / static_cast<double>(positives.size());
}

void validate(const LandmarkQuery& q) {
  auto disjoint = [](const std::set<ImageId>& a, const std::set<ImageId>& b) {
    return std::none_of(a.begin(), a.end(), [&](ImageId id) { return b.count(id) != 0; });
  };
  if (!disjoint(q.easy, q.hard) || !disjoint(q.easy, q.junk) || !disjoint(q.hard, q.junk)) {
    throw Error(ErrorKind::InvalidInput, "easy, hard and junk sets must be disjoint");
  }
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Easy: return "E";
    case Split::Medium: return "M";
    case Split::Hard: return "H";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "E" || name == "easy") return Split::Easy;
  if (name == "M" || name == "medium") return Split::Medium;
  if (name == "H" || name == "hard") return Split::Hard;
  throw Error(ErrorKind::InvalidInput, "unknown split '" + std::string(name) + "' (expected E, M or H)");
}

MapReport map_evaluate(const std::vector<std::vector<ImageId>>& rankings,
                       const std::vector<LandmarkQuery>& gt, Split split) {
  if (rankings.size() != gt.size()) {
    throw Error(ErrorKind::InvalidInput, "rankings and ground truth differ in query count");
  }
  MapReport report;
  double sum = 0.0;
  for (std::size_t q = 0; q < gt.size(); ++q) {
    const auto& g = gt[q];
    validate(g);
    std::set<ImageId> positives;
    std::set<ImageId> junk = g.junk;
    switch (split) {
      case Split::Easy:
        positives = g.easy;
        junk.insert(g.hard.begin(), g.hard.end());
        break;
      case Split::Medium:
        positives = g.easy;
        positives.insert(g.hard.begin(), g.hard.end());
        break;
      case Split::Hard:
        positives = g.hard;
        junk.insert(g.easy.begin(), g.easy.end());
        break;
    }
    if (positives.empty()) {
      ++report.skipped_queries;
      continue;
    }
    sum += average_precision_revisited(rankings[q], positives, junk);
    ++report.evaluated_queries;
  }
  if (report.evaluated_queries == 0) {
    throw Error(ErrorKind::UndefinedMetric,
                "no query has positives for split " + std::string(to_string(split)));
  }
  report.mean_ap = sum / static_cast<double>(report.evaluated_queries);
  return report;
}

std::vector<std::vector<ImageId>> rankings_of(const SearchResult& results) {
  std::vector<std::vector<ImageId>> out;
  out.reserve(results.neighbors.size());
  for (const auto& list : results.neighbors) {
    std::vector<ImageId> ids;
    ids.reserve(list.size());
    for (const auto& n : list) ids.push_back(n.id);
    out.push_back(std::move(ids));
  }
  return out;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = "method,dataset,metric,key,value\n";
  for (const auto& r : rows) {
    out += r.method + ',' + r.dataset + ',' + r.metric + ',' + r.key + ',' + format_double(r.value) + '\n';
  }
  return out;
}

void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  write_file_atomic(path, results_csv(rows));
}

}  // namespace placeret
