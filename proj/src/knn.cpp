#include "placeret/knn.hpp"

#include "placeret/io.hpp"

#include <algorithm>
#include <thread>

namespace placeret {

DescriptorStore DescriptorStore::in_memory(RowMatrixF rows, std::vector<ImageId> ids) {
  if (!ids.empty() && static_cast<Eigen::Index>(ids.size()) != rows.rows()) {
    throw Error(ErrorKind::InvalidInput, "store ids do not match row count");
  }
  DescriptorStore s;
  s.count_ = static_cast<std::size_t>(rows.rows());
  s.dim_ = static_cast<std::size_t>(rows.cols());
  s.ids_ = std::move(ids);
  s.memory_ = std::make_shared<const RowMatrixF>(std::move(rows));
  return s;
}

DescriptorStore DescriptorStore::open_file(const std::filesystem::path& path, std::vector<ImageId> ids) {
  DescriptorStore s;
  s.reader_ = std::make_shared<DescriptorReader>(path);
  s.count_ = s.reader_->header().count;
  s.dim_ = s.reader_->header().dim;
  if (!ids.empty() && ids.size() != s.count_) {
    throw Error(ErrorKind::InvalidInput, "store ids do not match descriptor count in " + path.string());
  }
  s.ids_ = std::move(ids);
  return s;
}

void DescriptorStore::read_block(std::size_t begin, std::size_t rows, float* out) const {
  if (begin + rows > count_) throw Error(ErrorKind::InvalidInput, "block range past end of store");
  if (reader_) {
    reader_->read_rows(begin, rows, out);
    return;
  }
  const float* src = memory_->data() + begin * dim_;
  std::copy(src, src + rows * dim_, out);
}

std::size_t plan_blocks(std::size_t count, std::size_t dim, std::size_t bytes_per_scalar,
                        std::size_t memory_budget) {
  if (count == 0 || dim == 0 || bytes_per_scalar == 0 || memory_budget == 0) {
    throw Error(ErrorKind::InvalidInput, "plan_blocks arguments must be positive");
  }
  const std::size_t row_bytes = dim * bytes_per_scalar;
  if (memory_budget < row_bytes) {
    throw Error(ErrorKind::BudgetInfeasible, "memory budget " + std::to_string(memory_budget) +
                                                 " bytes is below one row; minimum is " +
                                                 std::to_string(row_bytes) + " bytes");
  }
  return std::min(count, memory_budget / row_bytes);
}

double descriptor_matrix_bytes(double count, double dim, double bytes_per_scalar) {
  return count * dim * bytes_per_scalar;
}

std::size_t heap_bytes(std::size_t queries, std::size_t k) { return queries * k * sizeof(Neighbor); }

namespace {

/// True when a ranks strictly before b.
bool better(const Neighbor& a, const Neighbor& b) {
  return a.score > b.score || (a.score == b.score && a.id < b.id);
}

/// Bounded heap whose front is the worst kept neighbor.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { items_.reserve(k); }

  void offer(const Neighbor& n) {
    if (items_.size() < k_) {
      items_.push_back(n);
      std::push_heap(items_.begin(), items_.end(), better);
    } else if (better(n, items_.front())) {
      std::pop_heap(items_.begin(), items_.end(), better);
      items_.back() = n;
      std::push_heap(items_.begin(), items_.end(), better);
    }
  }

  std::vector<Neighbor> sorted() && {
    std::sort(items_.begin(), items_.end(), better);
    return std::move(items_);
  }

 private:
  std::size_t k_;
  std::vector<Neighbor> items_;
};

}  // namespace

SearchResult search(const DescriptorStore& store, const Eigen::MatrixXd& queries,
                    const SearchOptions& options) {
  if (options.k < 1) throw Error(ErrorKind::InvalidInput, "k must be >= 1");
  const std::size_t nq = static_cast<std::size_t>(queries.rows());
  if (nq > 0 && static_cast<std::size_t>(queries.cols()) != store.dim()) {
    throw Error(ErrorKind::InvalidInput, "query dim " + std::to_string(queries.cols()) +
                                             " does not match store dim " + std::to_string(store.dim()));
  }
  const std::size_t dim = store.dim();
  const std::size_t k = std::min(options.k, std::max<std::size_t>(store.count(), 1));
  const std::size_t heaps = heap_bytes(nq, k);
  const std::size_t row_bytes = dim * sizeof(float);
  if (options.memory_budget < heaps + row_bytes) {
    throw Error(ErrorKind::BudgetInfeasible,
                "memory budget " + std::to_string(options.memory_budget) +
                    " bytes cannot hold the query heaps plus one block row; minimum is " +
                    std::to_string(heaps + row_bytes) + " bytes");
  }

  SearchResult result;
  result.neighbors.resize(nq);
  if (nq == 0 || store.count() == 0) return result;

  const std::size_t block_rows = plan_blocks(store.count(), dim, sizeof(float),
                                             options.memory_budget - heaps);

  TrackedBytes heap_tracking(options.accountant, heaps);
  std::vector<TopK> tops(nq, TopK(k));

  // Queries as contiguous row-major doubles.
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> q = queries;

  const unsigned workers = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(nq)));
  TrackedBytes block_tracking(options.accountant, block_rows * row_bytes);
  std::vector<float> block(block_rows * dim);

  for (std::size_t begin = 0; begin < store.count(); begin += block_rows) {
    const std::size_t rows = std::min(block_rows, store.count() - begin);
    store.read_block(begin, rows, block.data());

    auto scan = [&](std::size_t q_begin, std::size_t q_end) {
      for (std::size_t qi = q_begin; qi < q_end; ++qi) {
        const double* qrow = q.data() + qi * dim;
        for (std::size_t r = 0; r < rows; ++r) {
          tops[qi].offer({store.id(begin + r), dot64(qrow, block.data() + r * dim, dim)});
        }
      }
    };

    if (workers == 1) {
      scan(0, nq);
    } else {
      std::vector<std::jthread> pool;
      const std::size_t chunk = (nq + workers - 1) / workers;
      for (std::size_t start = 0; start < nq; start += chunk) {
        pool.emplace_back(scan, start, std::min(nq, start + chunk));
      }
    }
  }

  for (std::size_t qi = 0; qi < nq; ++qi) result.neighbors[qi] = std::move(tops[qi]).sorted();
  return result;
}

SearchResult search(const DescriptorStore& store, const std::vector<Descriptor>& queries,
                    const SearchOptions& options) {
  Eigen::MatrixXd q(static_cast<Eigen::Index>(queries.size()), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (static_cast<std::size_t>(queries[i].dim()) != store.dim()) {
      throw Error(ErrorKind::InvalidInput, "query " + std::to_string(i) + " has dim " +
                                               std::to_string(queries[i].dim()) + ", store has " +
                                               std::to_string(store.dim()));
    }
    q.row(static_cast<Eigen::Index>(i)) = queries[i].values().transpose();
  }
  return search(store, q, options);
}

}  // namespace placeret
