#include "placeret/worldgen.hpp"

#include "test_util.hpp"

using namespace placeret;

namespace {

std::map<ClassId, Eigen::Vector2d> class_centroids(const World& w) {
  std::map<ClassId, Eigen::Vector2d> sum;
  std::map<ClassId, int> n;
  for (const auto& r : w.images) {
    sum[*r.class_id] = sum.count(*r.class_id) ? sum[*r.class_id] + r.pose.position() : r.pose.position();
    ++n[*r.class_id];
  }
  for (auto& [c, s] : sum) s /= n[c];
  return sum;
}

}  // namespace

TEST_CASE("smallest legal world") {
  WorldConfig c;
  c.n_places = 32;
  c.images_per_place = 4;
  const World w = generate_world(c);
  CHECK(w.images.size() == 128);
  CHECK(w.classes().size() == 32);
  for (const auto& [_, ids] : w.classes()) CHECK(ids.size() == 4);
}

TEST_CASE("classes are at least the separation apart") {
  const World w = generate_world(WorldConfig{});
  const auto centroids = class_centroids(w);
  double min_d = 1e300;
  for (auto a = centroids.begin(); a != centroids.end(); ++a) {
    for (auto b = std::next(a); b != centroids.end(); ++b) {
      min_d = std::min(min_d, (a->second - b->second).norm());
    }
  }
  CHECK(min_d >= 100.0);
  // images of different places are far apart too
  double min_image_d = 1e300;
  for (const auto& a : w.images) {
    for (const auto& b : w.images) {
      if (*a.class_id != *b.class_id) min_image_d = std::min(min_image_d, planar_distance(a.pose, b.pose));
    }
  }
  CHECK(min_image_d > 80.0);
}

TEST_CASE("generation is deterministic") {
  WorldConfig c;
  c.seed = 11;
  const World a = generate_world(c);
  const World b = generate_world(c);
  CHECK(a.images == b.images);
  CHECK(a.covisibility == b.covisibility);
  CHECK(true_descriptor_matrix(a) == true_descriptor_matrix(b));

  c.seed = 12;
  CHECK(generate_world(c).images != a.images);
}

TEST_CASE("noise seed leaves the layout fixed") {
  WorldConfig c;
  const World a = generate_world(c);
  c.noise_seed = 99;
  const World b = generate_world(c);
  CHECK(a.images == b.images);
  CHECK(true_descriptor_matrix(a) != true_descriptor_matrix(b));
}

TEST_CASE("infeasible packing") {
  WorldConfig c;
  c.n_places = 400;
  c.area_side = 500;
  try {
    generate_world(c);
    FAIL("expected generation failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::GenerationFailure);
    CHECK(std::string(e.what()).find("min_separation") != std::string::npos);
  }
}

TEST_CASE("descriptors") {
  WorldConfig c;
  c.noise_sigma = 0.0;
  const World w = generate_world(c);
  SUBCASE("noise free descriptors depend only on pose") {
    const auto& r = w.images[3];
    const Eigen::VectorXd f = descriptor_features(w, r.pose);
    CHECK((true_descriptor(w, 3).values() - f).norm() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(descriptor_features(w, r.pose) == f);
  }
  SUBCASE("unit norm") {
    const auto d = true_descriptor(w, 10);
    CHECK(d.dot(d) == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("unknown id") { CHECK_THROWS_KIND(true_descriptor(w, 1'000'000), ErrorKind::NotFound); }
}

TEST_CASE("same-place descriptors are more similar than cross-place ones") {
  const World w = generate_world(WorldConfig{});
  const Eigen::MatrixXd d = true_descriptor_matrix(w);
  const Eigen::MatrixXd s = d * d.transpose();
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (std::size_t i = 0; i < w.images.size(); ++i) {
    for (std::size_t j = i + 1; j < w.images.size(); ++j) {
      if (*w.images[i].class_id == *w.images[j].class_id) {
        within += s(i, j), ++nw;
      } else {
        across += s(i, j), ++na;
      }
    }
  }
  CHECK(within / nw > across / na + 0.2);
}

TEST_CASE("covisibility") {
  const World w = generate_world(WorldConfig{});
  CHECK(w.covisibility.size() > 0);
  for (const auto& [key, v] : w.covisibility.entries()) {
    const auto& a = w.image(key.first).pose;
    const auto& b = w.image(key.second).pose;
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
    CHECK(planar_distance(a, b) < 30.0);
    CHECK(angular_difference(a.heading, b.heading) < 60.0);
    CHECK(w.covisibility.overlap(key.second, key.first) == v);
  }
  // brute force: every pair inside both cutoffs is present
  std::size_t expected = 0;
  for (std::size_t i = 0; i < w.images.size(); ++i) {
    for (std::size_t j = i + 1; j < w.images.size(); ++j) {
      const auto& a = w.images[i].pose;
      const auto& b = w.images[j].pose;
      if (planar_distance(a, b) < 30.0 && angular_difference(a.heading, b.heading) < 60.0) ++expected;
    }
  }
  CHECK(w.covisibility.size() == expected);
  CHECK(w.covisibility.overlap(5, 5) == 1.0);
}

TEST_CASE("covisibility map validation") {
  CovisibilityMap m;
  m.set(1, 2, 0.05);
  CHECK(m.overlap(2, 1) == 0.05);
  m.set(2, 1, 0.05);
  CHECK_THROWS_KIND(m.set(2, 1, 0.07), ErrorKind::InvalidInput);
  CHECK_THROWS_KIND(m.set(3, 4, 1.5), ErrorKind::InvalidInput);
}

TEST_CASE("config validation") {
  WorldConfig c;
  c.n_places = 31;
  CHECK_THROWS_KIND(generate_world(c), ErrorKind::InvalidInput);
  c = WorldConfig{};
  c.images_per_place = 3;
  CHECK_THROWS_KIND(generate_world(c), ErrorKind::InvalidInput);
}
