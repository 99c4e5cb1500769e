#pragma once

#include "placeret/core.hpp"
#include "placeret/knn.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace placeret {

inline constexpr double kVprPositiveThreshold = 25.0;

/// Query i is matched against database ids by planar distance.
struct VprGroundTruth {
  std::vector<PlanarPose> query_poses;
  std::map<ImageId, PlanarPose> database_poses;
  double positive_threshold = kVprPositiveThreshold;
};

struct RecallReport {
  std::map<std::size_t, double> recall;
  std::size_t evaluated_queries = 0;
  /// Queries with no database item within the threshold; left out of the
  /// denominator.
  std::size_t queries_without_positive = 0;
};

/// Fraction of queries whose top-k holds a database item within the threshold
/// (inclusive). Throws UndefinedMetric if no query has a positive.
RecallReport recall_at_k(const SearchResult& results, const VprGroundTruth& gt,
                         std::span<const std::size_t> ks);

/// Precision averaged over the ranks of positives after junk ids are removed
/// from the ranking; unretrieved positives contribute zero.
double average_precision_revisited(std::span<const ImageId> ranking, const std::set<ImageId>& positives,
                                   const std::set<ImageId>& junk);

struct LandmarkQuery {
  std::set<ImageId> easy;
  std::set<ImageId> hard;
  std::set<ImageId> junk;
};

/// Throws InvalidInput if the three sets of a query intersect.
void validate(const LandmarkQuery& q);

enum class Split { Easy, Medium, Hard };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct MapReport {
  double mean_ap = 0.0;
  std::size_t evaluated_queries = 0;
  std::size_t skipped_queries = 0;
};

/// Easy: positives easy, junk junk+hard. Medium: positives easy+hard, junk
/// junk. Hard: positives hard, junk junk+easy. Queries with no positive are
/// skipped; UndefinedMetric if all are.
MapReport map_evaluate(const std::vector<std::vector<ImageId>>& rankings,
                       const std::vector<LandmarkQuery>& gt, Split split);

std::vector<std::vector<ImageId>> rankings_of(const SearchResult& results);

/// One row of a results table: method, dataset, metric, k or split, value.
struct ResultRow {
  std::string method;
  std::string dataset;
  std::string metric;
  std::string key;
  double value = 0.0;
};

std::string results_csv(const std::vector<ResultRow>& rows);
void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);

}  // namespace placeret
