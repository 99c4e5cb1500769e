#include "placeret/msloss.hpp"

#include "placeret/embedding_table.hpp"
#include "placeret/samplers.hpp"
#include "placeret/worldgen.hpp"

#include "test_util.hpp"

#include <cmath>

using namespace placeret;
using testutil::random_unit_rows;

namespace {

std::vector<ClassId> labels_of(int n, int classes) {
  std::vector<ClassId> l;
  for (int i = 0; i < n; ++i) l.push_back(i % classes);
  return l;
}

// Straight transcription of both mining rules.
PairSets brute_force_mining(const Eigen::MatrixXd& s, const std::vector<ClassId>& labels, double eps) {
  const int n = static_cast<int>(labels.size());
  PairSets out;
  out.positives.resize(n);
  out.negatives.resize(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> pos, neg;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pos : neg).push_back(s(i, j));
    }
    if (pos.empty() || neg.empty()) continue;
    const double min_pos = *std::min_element(pos.begin(), pos.end());
    const double max_neg = *std::max_element(neg.begin(), neg.end());
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i] && s(i, j) < max_neg + eps) out.positives[i].push_back(j);
      if (labels[j] != labels[i] && s(i, j) > min_pos - eps) out.negatives[i].push_back(j);
    }
  }
  return out;
}

// Direct formula in extended precision, without stabilization.
long double scalar_loss(const Eigen::MatrixXd& s, const PairSets& pairs, const MsParams& p) {
  long double total = 0;
  int active = 0;
  for (std::size_t i = 0; i < pairs.anchors(); ++i) {
    if (pairs.positives[i].empty() && pairs.negatives[i].empty()) continue;
    ++active;
    long double sp = 0, sn = 0;
    for (auto j : pairs.positives[i]) sp += std::exp(-(long double)p.alpha * ((long double)s(i, j) - p.lambda));
    for (auto j : pairs.negatives[i]) sn += std::exp((long double)p.beta * ((long double)s(i, j) - p.lambda));
    total += std::log1p(sp) / p.alpha + std::log1p(sn) / p.beta;
  }
  return active ? total / active : 0;
}

}  // namespace

TEST_CASE("pairwise similarity") {
  SUBCASE("orthonormal rows") {
    const Eigen::MatrixXd s = pairwise_similarity(Eigen::MatrixXd::Identity(5, 5));
    CHECK(s == Eigen::MatrixXd::Identity(5, 5));
  }
  SUBCASE("opposite vectors") {
    Eigen::MatrixXd x(2, 3);
    x << 0.6, 0.8, 0, -0.6, -0.8, 0;
    CHECK(pairwise_similarity(x)(0, 1) == doctest::Approx(-1.0));
  }
  SUBCASE("matches a per-pair loop") {
    const Eigen::MatrixXd x = random_unit_rows(8, 16, 1);
    const Eigen::MatrixXd s = pairwise_similarity(x);
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        double dot = 0;
        for (int k = 0; k < 16; ++k) dot += x(i, k) * x(j, k);
        CHECK(s(i, j) == doctest::Approx(dot).epsilon(1e-14));
      }
      CHECK(s(i, i) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(s.isApprox(s.transpose(), 0.0));
  }
  SUBCASE("float rows") {
    const Eigen::MatrixXf x = random_unit_rows(4, 6, 3).cast<float>();
    CHECK(pairwise_similarity(x).rows() == 4);
  }
  SUBCASE("unnormalized input") {
    CHECK_THROWS_KIND(pairwise_similarity(Eigen::MatrixXd::Constant(2, 2, 1.0)), ErrorKind::InvalidInput);
  }
}

TEST_CASE("pair mining") {
  const MsParams params;
  SUBCASE("single class has no negatives") {
    const Eigen::MatrixXd x = random_unit_rows(6, 4, 2);
    const auto pairs = mine_pairs(pairwise_similarity(x), std::vector<ClassId>(6, 3), params);
    for (const auto& n : pairs.negatives) CHECK(n.empty());
    CHECK(pairs.empty());
  }
  SUBCASE("margin satisfied") {
    Eigen::MatrixXd s(4, 4);
    s << 1, 0.9, 0.1, 0.1,
         0.9, 1, 0.1, 0.1,
         0.1, 0.1, 1, 0.9,
         0.1, 0.1, 0.9, 1;
    const std::vector<ClassId> labels{0, 0, 1, 1};
    CHECK(mine_pairs(s, labels, params).empty());
  }
  SUBCASE("brute force rule transcription") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const Eigen::MatrixXd s = pairwise_similarity(random_unit_rows(16, 3, seed));
      const auto labels = labels_of(16, 4);
      const auto got = mine_pairs(s, labels, params);
      const auto want = brute_force_mining(s, labels, params.epsilon);
      CHECK(got.positives == want.positives);
      CHECK(got.negatives == want.negatives);
    }
  }
}

TEST_CASE("loss values") {
  const MsParams params;
  SUBCASE("empty pairs") {
    PairSets pairs;
    pairs.positives.resize(3);
    pairs.negatives.resize(3);
    CHECK(ms_loss(Eigen::MatrixXd::Identity(3, 3), pairs, params) == 0.0);
  }
  SUBCASE("one negative at the margin") {
    Eigen::MatrixXd s(2, 2);
    s << 1, 0.5, 0.5, 1;
    PairSets pairs;
    pairs.positives.resize(2);
    pairs.negatives = {{1}, {}};
    CHECK(ms_loss(s, pairs, params) == doctest::Approx(std::log(2.0) / 50.0).epsilon(1e-15));
    CHECK(ms_loss(s, pairs, params) == doctest::Approx(0.013863).epsilon(1e-5));
  }
  SUBCASE("extended precision transcription") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Eigen::MatrixXd s = pairwise_similarity(random_unit_rows(8, 4, seed));
      const auto labels = labels_of(8, 3);
      const auto pairs = mine_pairs(s, labels, params);
      const double got = ms_loss(s, pairs, params);
      CHECK(std::abs(got - static_cast<double>(scalar_loss(s, pairs, params))) <= 1e-13 * std::max(1.0, got));
      CHECK(got >= 0.0);
    }
  }
  SUBCASE("large exponents stay finite") {
    MsParams steep = params;
    steep.beta = 5000;
    Eigen::MatrixXd s(2, 2);
    s << 1, 0.99, 0.99, 1;
    PairSets pairs;
    pairs.positives.resize(2);
    pairs.negatives = {{1}, {0}};
    const double l = ms_loss(s, pairs, steep);
    CHECK(std::isfinite(l));
    CHECK(l == doctest::Approx(0.49).epsilon(1e-6));
  }
  SUBCASE("NaN similarity") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
    s(0, 1) = std::nan("");
    PairSets pairs;
    pairs.positives.resize(2);
    pairs.negatives.resize(2);
    CHECK_THROWS_KIND(ms_loss(s, pairs, params), ErrorKind::InvalidInput);
  }
  SUBCASE("permutation invariance") {
    const Eigen::MatrixXd x = random_unit_rows(12, 5, 9);
    const auto labels = labels_of(12, 3);
    const double base = ms_loss_and_grad(x, labels, params).loss;
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(12);
    perm.setIdentity();
    std::mt19937_64 rng(1);
    std::shuffle(perm.indices().data(), perm.indices().data() + 12, rng);
    const Eigen::MatrixXd px = perm * x;
    std::vector<ClassId> pl(12);
    for (int i = 0; i < 12; ++i) pl[perm.indices()[i]] = labels[i];
    CHECK(ms_loss_and_grad(px, pl, params).loss == doctest::Approx(base).epsilon(1e-13));
  }
}

TEST_CASE("gradients") {
  const MsParams params;
  SUBCASE("empty pairs give zero gradient") {
    const Eigen::MatrixXd x = random_unit_rows(4, 3, 1);
    CHECK(ms_loss_grad(x, std::vector<ClassId>(4, 0), params).isZero(0.0));
  }
  SUBCASE("positive pair is pulled together") {
    Eigen::MatrixXd x(3, 2);
    x << 1, 0, 0, 1, 0.6, -0.8;
    PairSets pairs;
    pairs.positives = {{1}, {0}, {}};
    pairs.negatives = {{}, {}, {}};
    const Eigen::MatrixXd g = ms_loss_grad_at(x, pairs, params);
    // descending the gradient moves row 0 towards row 1
    CHECK(g.row(0).dot(x.row(1)) < 0.0);
    CHECK(g.row(1).dot(x.row(0)) < 0.0);
  }
  SUBCASE("central finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Eigen::MatrixXd x = random_unit_rows(16, 8, seed + 40);
      const auto labels = labels_of(16, 4);
      const auto lg = ms_loss_and_grad(x, labels, params);
      const double h = 1e-5;
      Eigen::MatrixXd fd(16, 8);
      for (int i = 0; i < 16; ++i) {
        for (int k = 0; k < 8; ++k) {
          Eigen::MatrixXd xp = x, xm = x;
          xp(i, k) += h;
          xm(i, k) -= h;
          fd(i, k) = (ms_loss_at(xp, lg.pairs, params) - ms_loss_at(xm, lg.pairs, params)) / (2 * h);
        }
      }
      const double scale = std::max(lg.grad.cwiseAbs().maxCoeff(), 1e-12);
      CHECK((fd - lg.grad).cwiseAbs().maxCoeff() / scale < 1e-4);
    }
  }
}

TEST_CASE("iteration loss") {
  const MsParams params;
  const World w = generate_world(WorldConfig{});
  std::vector<ImageId> ids;
  for (const auto& r : w.images) ids.push_back(r.id);
  const auto table = EmbeddingTable::random(ids, 16, 5);
  const auto classes = w.classes();
  Rng rng(1);

  SUBCASE("six identical sub-batches") {
    const auto b = sample_gsv_batch(classes, rng);
    std::vector<SubBatch> six;
    for (Source s : kIterationSources) six.push_back(SubBatch::make(b.quadruplets(), s));
    const auto loss = iteration_loss(TrainingIteration::make(six), table, params);
    const double single = sub_batch_loss(b, table, params);
    CHECK(loss.total == doctest::Approx(6 * single).epsilon(1e-14));
  }
  SUBCASE("total is the ordered sum of independently computed losses") {
    std::vector<SubBatch> six;
    for (Source s : kIterationSources) six.push_back(sample_gsv_batch(classes, rng, s));
    const auto loss = iteration_loss(TrainingIteration::make(six), table, params);
    double sum = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      const Eigen::MatrixXd x = table.gather(six[b].image_ids());
      Eigen::MatrixXd s(128, 128);
      for (int i = 0; i < 128; ++i)
        for (int j = 0; j < 128; ++j) s(i, j) = x.row(i).dot(x.row(j));
      const auto labels = six[b].labels();
      const double l = ms_loss(s, mine_pairs(s, labels, params), params);
      CHECK(loss.per_sub_batch[b] == doctest::Approx(l).epsilon(1e-12));
      sum += loss.per_sub_batch[b];
    }
    CHECK(loss.total - sum == 0.0);
  }
  SUBCASE("missing id") {
    const auto other = EmbeddingTable::random({0, 1, 2}, 16, 5);
    const auto b = sample_gsv_batch(classes, rng);
    CHECK_THROWS_KIND(sub_batch_loss(b, other, params), ErrorKind::NotFound);
  }
}

TEST_CASE("parameter validation") {
  MsParams p;
  p.alpha = 0;
  CHECK_THROWS_KIND(p.validate(), ErrorKind::InvalidInput);
  p = MsParams{};
  p.lambda = 1.0;
  CHECK_THROWS_KIND(p.validate(), ErrorKind::InvalidInput);
  MsParams{}.validate();
}
