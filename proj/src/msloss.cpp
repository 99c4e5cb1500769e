#include "placeret/msloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace placeret {

void MsParams::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw Error(ErrorKind::InvalidInput, "multi-similarity alpha and beta must be positive");
  }
  if (!(lambda > -1.0 && lambda < 1.0)) {
    throw Error(ErrorKind::InvalidInput, "multi-similarity lambda must lie in (-1, 1)");
  }
  if (!(epsilon >= 0.0)) throw Error(ErrorKind::InvalidInput, "mining epsilon must be >= 0");
}

bool PairSets::empty() const {
  auto none = [](const auto& sets) {
    return std::all_of(sets.begin(), sets.end(), [](const auto& s) { return s.empty(); });
  };
  return none(positives) && none(negatives);
}

PairSets mine_pairs(const Eigen::MatrixXd& similarity, std::span<const ClassId> labels,
                    const MsParams& params) {
  const Eigen::Index n = similarity.rows();
  if (similarity.cols() != n || static_cast<Eigen::Index>(labels.size()) != n) {
    throw Error(ErrorKind::InvalidInput, "similarity must be square and aligned with labels");
  }
  PairSets pairs;
  pairs.positives.resize(n);
  pairs.negatives.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double min_pos = std::numeric_limits<double>::infinity();
    double max_neg = -std::numeric_limits<double>::infinity();
    bool has_pos = false;
    bool has_neg = false;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        has_pos = true;
        min_pos = std::min(min_pos, similarity(i, j));
      } else {
        has_neg = true;
        max_neg = std::max(max_neg, similarity(i, j));
      }
    }
    if (!has_pos || !has_neg) continue;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (similarity(i, j) < max_neg + params.epsilon) pairs.positives[i].push_back(j);
      } else if (similarity(i, j) > min_pos - params.epsilon) {
        pairs.negatives[i].push_back(j);
      }
    }
  }
  return pairs;
}

namespace {

void check_pairs(const Eigen::MatrixXd& s, const PairSets& pairs) {
  if (s.rows() != s.cols() || static_cast<Eigen::Index>(pairs.anchors()) != s.rows() ||
      pairs.negatives.size() != pairs.positives.size()) {
    throw Error(ErrorKind::InvalidInput, "pair sets do not match the similarity matrix");
  }
  if (s.hasNaN()) throw Error(ErrorKind::InvalidInput, "similarity matrix contains NaN");
}

/// log(1 + sum_k exp(a_k)) and the weights exp(a_k) / (1 + sum exp(a)).
struct SoftPlusSum {
  double value = 0.0;
  std::vector<double> weights;
};

SoftPlusSum soft_plus_sum(const std::vector<double>& exponents) {
  SoftPlusSum out;
  if (exponents.empty()) return out;
  double m = 0.0;
  for (double a : exponents) m = std::max(m, a);
  double total = std::exp(-m);
  out.weights.reserve(exponents.size());
  for (double a : exponents) {
    out.weights.push_back(std::exp(a - m));
    total += out.weights.back();
  }
  out.value = m + std::log(total);
  for (double& w : out.weights) w /= total;
  return out;
}

/// Anchors with at least one mined pair; the loss averages over these.
std::size_t active_anchors(const PairSets& pairs) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < pairs.anchors(); ++i) {
    if (!pairs.positives[i].empty() || !pairs.negatives[i].empty()) ++n;
  }
  return n;
}

struct AnchorTerms {
  SoftPlusSum pos;
  SoftPlusSum neg;
};

AnchorTerms anchor_terms(const Eigen::MatrixXd& s, const PairSets& pairs, Eigen::Index i,
                         const MsParams& p) {
  std::vector<double> pos_exp;
  std::vector<double> neg_exp;
  for (Eigen::Index j : pairs.positives[i]) pos_exp.push_back(-p.alpha * (s(i, j) - p.lambda));
  for (Eigen::Index j : pairs.negatives[i]) neg_exp.push_back(p.beta * (s(i, j) - p.lambda));
  return {soft_plus_sum(pos_exp), soft_plus_sum(neg_exp)};
}

}  // namespace

double ms_loss(const Eigen::MatrixXd& similarity, const PairSets& pairs, const MsParams& params) {
  check_pairs(similarity, pairs);
  const Eigen::Index n = similarity.rows();
  const std::size_t active = active_anchors(pairs);
  if (active == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto t = anchor_terms(similarity, pairs, i, params);
    sum += t.pos.value / params.alpha + t.neg.value / params.beta;
  }
  return sum / static_cast<double>(active);
}

Eigen::MatrixXd ms_loss_similarity_grad(const Eigen::MatrixXd& similarity, const PairSets& pairs,
                                        const MsParams& params) {
  check_pairs(similarity, pairs);
  const Eigen::Index n = similarity.rows();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  const std::size_t active = active_anchors(pairs);
  if (active == 0) return g;
  const double inv_n = 1.0 / static_cast<double>(active);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto t = anchor_terms(similarity, pairs, i, params);
    // d/dS of (1/alpha) log(1 + sum exp(-alpha (S - lambda))) is -weight
    for (std::size_t k = 0; k < pairs.positives[i].size(); ++k) {
      g(i, pairs.positives[i][k]) -= t.pos.weights[k] * inv_n;
    }
    for (std::size_t k = 0; k < pairs.negatives[i].size(); ++k) {
      g(i, pairs.negatives[i][k]) += t.neg.weights[k] * inv_n;
    }
  }
  return g;
}

double ms_loss_at(const Eigen::MatrixXd& embeddings, const PairSets& pairs, const MsParams& params) {
  const Eigen::MatrixXd s = embeddings * embeddings.transpose();
  return ms_loss(s, pairs, params);
}

Eigen::MatrixXd ms_loss_grad_at(const Eigen::MatrixXd& embeddings, const PairSets& pairs,
                                const MsParams& params) {
  const Eigen::MatrixXd s = embeddings * embeddings.transpose();
  const Eigen::MatrixXd g = ms_loss_similarity_grad(s, pairs, params);
  return (g + g.transpose()) * embeddings;
}

LossAndGrad ms_loss_and_grad(const Eigen::MatrixXd& embeddings, std::span<const ClassId> labels,
                             const MsParams& params) {
  const Eigen::MatrixXd s = pairwise_similarity(embeddings);
  LossAndGrad out;
  out.pairs = mine_pairs(s, labels, params);
  out.loss = ms_loss(s, out.pairs, params);
  const Eigen::MatrixXd g = ms_loss_similarity_grad(s, out.pairs, params);
  out.grad = (g + g.transpose()) * embeddings;
  return out;
}

Eigen::MatrixXd ms_loss_grad(const Eigen::MatrixXd& embeddings, std::span<const ClassId> labels,
                             const MsParams& params) {
  return ms_loss_and_grad(embeddings, labels, params).grad;
}

double sub_batch_loss(const SubBatch& batch, const EmbeddingTable& table, const MsParams& params) {
  const auto ids = batch.image_ids();
  const auto labels = batch.labels();
  const Eigen::MatrixXd x = table.gather(ids);
  const Eigen::MatrixXd s = pairwise_similarity(x);
  return ms_loss(s, mine_pairs(s, labels, params), params);
}

IterationLoss iteration_loss(const TrainingIteration& iteration, const EmbeddingTable& table,
                             const MsParams& params) {
  IterationLoss out;
  const auto& batches = iteration.sub_batches();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    out.per_sub_batch[b] = sub_batch_loss(batches[b], table, params);
    out.total += out.per_sub_batch[b];
  }
  return out;
}

}  // namespace placeret
