#pragma once

#include "placeret/core.hpp"
#include "placeret/embedding_table.hpp"
#include "placeret/msloss.hpp"
#include "placeret/samplers.hpp"
#include "placeret/worldgen.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace placeret {

enum class AccumulationMode {
  /// All sub-batch buffers alive together, gradients summed at the end.
  Fused,
  /// One sub-batch at a time; its buffers are released before the next.
  PerSubBatch,
};

std::string_view to_string(AccumulationMode mode);
AccumulationMode parse_accumulation_mode(std::string_view name);

struct TrainConfig {
  int iterations = 500;
  double learning_rate = 1e-2;
  double weight_decay = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  MsParams ms_params;
  std::uint64_t seed = 0;
  AccumulationMode accumulation_mode = AccumulationMode::PerSubBatch;

  /// Sources sampled each iteration; the default is the full six.
  std::vector<Source> sources{kIterationSources.begin(), kIterationSources.end()};
  /// Reuse iteration 0's sampler seed every iteration.
  bool freeze_sampler_seed = false;

  /// Recall@1 is evaluated before training, every eval_every steps and at the end.
  int eval_every = 50;

  EigenPlacesOptions eigenplaces;
  /// Hard-negative mining: class-level graph rebuilt every clique_refresh steps.
  int clique_refresh = 2000;
  int clique_size = 4;
  double clique_similarity_floor = 0.0;
  double clique_geo_floor = 100.0;

  void validate() const;
};

/// Stable FNV-1a hash of every field, stored in checkpoints.
std::uint64_t config_fingerprint(const TrainConfig& config);

/// Bytes of the intermediate buffers one sub-batch of `rows` embeddings of
/// width `dim` needs: gathered embeddings, similarity, dL/dS, and dL/dX.
std::size_t sub_batch_transient_bytes(std::size_t rows, std::size_t dim);

struct AccumulatedGradient {
  /// Same shape as the table; rows of untouched images stay zero.
  Eigen::MatrixXd gradient;
  std::vector<double> losses;
  double total_loss = 0.0;
  std::size_t peak_transient_bytes = 0;
};

/// Gradient of the summed sub-batch losses. Both modes add contributions in
/// sub-batch order, row order, so their results agree exactly.
AccumulatedGradient accumulate_gradients(std::span<const SubBatch> sub_batches, const EmbeddingTable& table,
                                         const MsParams& params, AccumulationMode mode);

inline AccumulatedGradient accumulate_gradients(const TrainingIteration& iteration,
                                                const EmbeddingTable& table, const MsParams& params,
                                                AccumulationMode mode) {
  return accumulate_gradients(std::span<const SubBatch>(iteration.sub_batches()), table, params, mode);
}

/// AdamW with bias correction and decoupled weight decay, then clears
/// `gradient`. Throws TrainingDivergence (naming `iteration`) on a non-finite
/// gradient or result.
void optimizer_step(EmbeddingTable& table, Eigen::MatrixXd& gradient, const TrainConfig& config,
                    int iteration = 0);

struct HistoryRow {
  int iteration = 0;
  double total = 0.0;
  /// Indexed like kIterationSources; NaN for sources that were not sampled.
  std::array<double, kSubBatchesPerIteration> per_source{};
};

struct EvalPoint {
  int iteration = 0;
  double recall_at_1 = 0.0;
};

struct TrainResult {
  EmbeddingTable initial_table;
  EmbeddingTable table;
  std::vector<HistoryRow> history;
  std::vector<EvalPoint> evaluations;
};

/// One query image per place (seeded choice); all other images form the
/// database.
struct QuerySplit {
  std::vector<ImageId> queries;
  std::vector<ImageId> database;
};
QuerySplit make_query_split(const World& world, std::uint64_t seed);

/// Recall@1 of the table's embeddings under the 25 m rule.
double evaluate_recall_at_1(const World& world, const EmbeddingTable& table, const QuerySplit& split);

/// Builds the sub-batches for one iteration from the world and current table.
class IterationSampler {
 public:
  IterationSampler(const World& world, const TrainConfig& config);

  /// Throws on sampler failure.
  std::vector<SubBatch> sample(int iteration, const EmbeddingTable& table);

  const CellPartition& partition() const { return partition_; }
  const CliqueBatchPlan& clique_plan() const { return plan_; }
  void refresh_cliques(const EmbeddingTable& table);

 private:
  const World& world_;
  const TrainConfig& config_;
  CellPartition partition_;
  ClassMembers classes_;
  ClassMembers scenes_;
  PoseMap poses_;
  std::map<ClassId, PlanarPose> class_centroids_;
  CliqueBatchPlan plan_;
};

/// Runs the whole loop. Errors are rethrown with the iteration index prefixed.
TrainResult train(const World& world, const TrainConfig& config);

}  // namespace placeret
