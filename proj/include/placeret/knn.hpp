#pragma once

#include "placeret/core.hpp"

#include <filesystem>
#include <memory>
#include <vector>

namespace placeret {

class DescriptorReader;

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Neighbor {
  ImageId id = 0;
  double score = 0.0;
  bool operator==(const Neighbor&) const = default;
};

/// Per query, up to k neighbors by non-increasing score; ties by ascending id.
struct SearchResult {
  std::vector<std::vector<Neighbor>> neighbors;
  bool operator==(const SearchResult&) const = default;
};

/// Build-once collection of f32 descriptors, in memory or backed by a
/// descriptor file that is read one block at a time.
class DescriptorStore {
 public:
  /// Row r gets id ids[r]; an empty ids vector means ids 0..count-1.
  static DescriptorStore in_memory(RowMatrixF rows, std::vector<ImageId> ids = {});
  static DescriptorStore open_file(const std::filesystem::path& path, std::vector<ImageId> ids = {});

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  ImageId id(std::size_t row) const { return ids_.empty() ? static_cast<ImageId>(row) : ids_[row]; }
  bool file_backed() const { return reader_ != nullptr; }

  /// Copies rows [begin, begin + rows) into `out`, row-major.
  void read_block(std::size_t begin, std::size_t rows, float* out) const;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<ImageId> ids_;
  std::shared_ptr<const RowMatrixF> memory_;
  std::shared_ptr<DescriptorReader> reader_;
};

/// Largest row count whose payload fits in the budget, capped at `count`.
/// Throws BudgetInfeasible when not even one row fits.
std::size_t plan_blocks(std::size_t count, std::size_t dim, std::size_t bytes_per_scalar,
                        std::size_t memory_budget);

/// Bytes needed to hold count x dim scalars at once.
double descriptor_matrix_bytes(double count, double dim, double bytes_per_scalar);

struct SearchOptions {
  std::size_t k = 10;
  std::size_t memory_budget = 256u << 20;
  unsigned threads = 1;
  /// Optional; receives the block buffer and heap allocations.
  ByteAccountant* accountant = nullptr;
};

/// Bytes of the per-query heaps, which must fit in the budget next to a block.
std::size_t heap_bytes(std::size_t queries, std::size_t k);

/// Exact top-k by inner product, one database block at a time. Dot products
/// accumulate in double, sequentially over dimensions.
/// Queries are rows of `queries` (dim must match the store).
SearchResult search(const DescriptorStore& store, const Eigen::MatrixXd& queries,
                    const SearchOptions& options);

SearchResult search(const DescriptorStore& store, const std::vector<Descriptor>& queries,
                    const SearchOptions& options);

/// Sequential double-precision dot product of a double query and a float row.
inline double dot64(const double* query, const float* row, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t d = 0; d < dim; ++d) acc += query[d] * static_cast<double>(row[d]);
  return acc;
}

}  // namespace placeret
