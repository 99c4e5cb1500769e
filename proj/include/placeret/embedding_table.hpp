#pragma once

#include "placeret/core.hpp"

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace placeret {

/// Learnable per-image vectors plus AdamW state. Row r holds ids()[r].
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<ImageId> ids, Eigen::MatrixXd values);

  /// Unit-norm Gaussian rows drawn from `seed`.
  static EmbeddingTable random(std::vector<ImageId> ids, int dim, std::uint64_t seed);

  Eigen::Index size() const { return values_.rows(); }
  Eigen::Index dim() const { return values_.cols(); }
  const std::vector<ImageId>& ids() const { return ids_; }

  /// Throws NotFound for an unknown id.
  Eigen::Index row(ImageId id) const;
  bool contains(ImageId id) const { return index_.count(id) != 0; }

  const Eigen::MatrixXd& values() const { return values_; }
  Eigen::MatrixXd& values() { return values_; }

  Eigen::MatrixXd gather(std::span<const ImageId> ids) const;
  void normalize_rows();

  // AdamW state
  Eigen::MatrixXd first_moment;
  Eigen::MatrixXd second_moment;
  std::uint64_t step = 0;

 private:
  std::vector<ImageId> ids_;
  std::unordered_map<ImageId, Eigen::Index> index_;
  Eigen::MatrixXd values_;
};

}  // namespace placeret
