#include "placeret/embedding_table.hpp"

#include <random>

namespace placeret {

EmbeddingTable::EmbeddingTable(std::vector<ImageId> ids, Eigen::MatrixXd values)
    : ids_(std::move(ids)), values_(std::move(values)) {
  if (static_cast<Eigen::Index>(ids_.size()) != values_.rows()) {
    throw Error(ErrorKind::InvalidInput, "embedding table: id count does not match row count");
  }
  if (!values_.allFinite()) throw Error(ErrorKind::InvalidInput, "embedding table: non-finite values");
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    if (!index_.emplace(ids_[r], static_cast<Eigen::Index>(r)).second) {
      throw Error(ErrorKind::InvalidInput, "embedding table: duplicate id " + std::to_string(ids_[r]));
    }
  }
  first_moment = Eigen::MatrixXd::Zero(values_.rows(), values_.cols());
  second_moment = Eigen::MatrixXd::Zero(values_.rows(), values_.cols());
}

EmbeddingTable EmbeddingTable::random(std::vector<ImageId> ids, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd v(static_cast<Eigen::Index>(ids.size()), dim);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) = normal(rng);
  }
  v.rowwise().normalize();
  return EmbeddingTable(std::move(ids), std::move(v));
}

Eigen::Index EmbeddingTable::row(ImageId id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) {
    throw Error(ErrorKind::NotFound, "image " + std::to_string(id) + " not in embedding table");
  }
  return it->second;
}

Eigen::MatrixXd EmbeddingTable::gather(std::span<const ImageId> ids) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), values_.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = values_.row(row(ids[i]));
  }
  return out;
}

void EmbeddingTable::normalize_rows() { values_.rowwise().normalize(); }

}  // namespace placeret
