#pragma once

#include "placeret/core.hpp"
#include "placeret/embedding_table.hpp"

#include <array>
#include <span>
#include <vector>

namespace placeret {

/// Multi-similarity loss parameters. The defaults are the usual values for
/// this loss family.
struct MsParams {
  double alpha = 1.0;
  double beta = 50.0;
  double lambda = 0.5;
  double epsilon = 0.1;

  void validate() const;
};

/// Mined pairs, one entry per anchor (batch row).
struct PairSets {
  std::vector<std::vector<Eigen::Index>> positives;
  std::vector<std::vector<Eigen::Index>> negatives;

  std::size_t anchors() const { return positives.size(); }
  bool empty() const;
};

inline constexpr double kUnitNormTolerance = 1e-6;

/// S = X X^T for unit-norm rows. Throws InvalidInput if a row is not unit norm.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> pairwise_similarity(
    const Eigen::MatrixBase<Derived>& embeddings) {
  using Scalar = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    const double norm = static_cast<double>(embeddings.row(i).norm());
    if (!(std::abs(norm - 1.0) <= kUnitNormTolerance)) {
      throw Error(ErrorKind::InvalidInput,
                  "embedding row " + std::to_string(i) + " has norm " + std::to_string(norm));
    }
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> s = embeddings * embeddings.transpose();
  return s;
}

/// Anchor i keeps negatives with S(i,n) > min_p S(i,p) - epsilon and positives
/// with S(i,p) < max_n S(i,n) + epsilon. Anchors lacking either a positive or
/// a negative get two empty sets.
PairSets mine_pairs(const Eigen::MatrixXd& similarity, std::span<const ClassId> labels,
                    const MsParams& params);

/// Mean over anchors with at least one mined pair of
///   1/alpha log(1 + sum_p exp(-alpha (S_ip - lambda)))
/// + 1/beta  log(1 + sum_n exp( beta (S_in - lambda))).
double ms_loss(const Eigen::MatrixXd& similarity, const PairSets& pairs, const MsParams& params);

/// dL/dS for fixed pairs (not symmetrized).
Eigen::MatrixXd ms_loss_similarity_grad(const Eigen::MatrixXd& similarity, const PairSets& pairs,
                                        const MsParams& params);

/// Loss of X with S = X X^T, no normalization check. Used by gradient checks.
double ms_loss_at(const Eigen::MatrixXd& embeddings, const PairSets& pairs, const MsParams& params);

/// d ms_loss_at / dX = (G + G^T) X with G = dL/dS.
Eigen::MatrixXd ms_loss_grad_at(const Eigen::MatrixXd& embeddings, const PairSets& pairs,
                                const MsParams& params);

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;
  PairSets pairs;
};

/// Mines pairs on unit-norm embeddings, then returns loss and gradient with
/// those pairs held fixed.
LossAndGrad ms_loss_and_grad(const Eigen::MatrixXd& embeddings, std::span<const ClassId> labels,
                             const MsParams& params);

Eigen::MatrixXd ms_loss_grad(const Eigen::MatrixXd& embeddings, std::span<const ClassId> labels,
                             const MsParams& params);

/// Loss of one sub-batch against the table.
double sub_batch_loss(const SubBatch& batch, const EmbeddingTable& table, const MsParams& params);

struct IterationLoss {
  double total = 0.0;
  std::array<double, kSubBatchesPerIteration> per_sub_batch{};
};

/// total = sum of the six sub-batch losses, added in sub-batch order.
IterationLoss iteration_loss(const TrainingIteration& iteration, const EmbeddingTable& table,
                             const MsParams& params);

}  // namespace placeret
