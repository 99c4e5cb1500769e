#include "placeret/core.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace placeret {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::DegenerateDescriptor: return "degenerate-descriptor";
    case ErrorKind::GenerationFailure: return "generation-failure";
    case ErrorKind::InsufficientMembers: return "insufficient-members";
    case ErrorKind::InsufficientClasses: return "insufficient-classes";
    case ErrorKind::InfeasibleScene: return "infeasible-scene";
    case ErrorKind::Composition: return "composition";
    case ErrorKind::TrainingDivergence: return "training-divergence";
    case ErrorKind::BudgetInfeasible: return "budget-infeasible";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Ingestion: return "ingestion";
    case ErrorKind::Range: return "range";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw Error(ErrorKind::InvalidInput, std::string("non-finite ") + what);
  }
}

}  // namespace

double normalize_heading(double degrees) {
  require_finite(degrees, "heading");
  double h = std::fmod(degrees, 360.0);
  if (h < 0.0) h += 360.0;
  // fmod of a tiny negative value can round up to exactly 360
  if (h >= 360.0) h = 0.0;
  return h;
}

PlanarPose::PlanarPose(double east_m, double north_m, double heading_deg)
    : east(east_m), north(north_m), heading(normalize_heading(heading_deg)) {
  require_finite(east, "east coordinate");
  require_finite(north, "north coordinate");
}

Descriptor::Descriptor(Eigen::VectorXd values) : values_(std::move(values)) {
  if (!values_.allFinite()) {
    throw Error(ErrorKind::DegenerateDescriptor, "descriptor has non-finite entries");
  }
  const double norm = values_.norm();
  if (!(norm > 0.0)) {
    throw Error(ErrorKind::DegenerateDescriptor, "descriptor has zero norm");
  }
  values_ /= norm;
}

std::string_view to_string(Source source) {
  switch (source) {
    case Source::SfxlFrontal: return "sfxl-frontal";
    case Source::SfxlLateral: return "sfxl-lateral";
    case Source::GsvCities: return "gsv";
    case Source::Msls: return "msls";
    case Source::MegaScenes: return "megascenes";
    case Source::ScanNet: return "scannet";
  }
  return "unknown";
}

Source parse_source(std::string_view name) {
  static const std::map<std::string_view, Source> table = {
      {"sfxl", Source::SfxlFrontal},   {"sfxl-frontal", Source::SfxlFrontal},
      {"sfxl-lateral", Source::SfxlLateral}, {"gsv", Source::GsvCities},
      {"msls", Source::Msls},          {"megascenes", Source::MegaScenes},
      {"scannet", Source::ScanNet}};
  const auto it = table.find(name);
  if (it == table.end()) {
    throw Error(ErrorKind::InvalidInput, "unknown source tag '" + std::string(name) + "'");
  }
  return it->second;
}

Quadruplet make_quadruplet(std::array<ImageId, kQuadrupletSize> ids, ClassId class_id) {
  auto sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorKind::InvalidInput, "quadruplet ids must be distinct");
  }
  return Quadruplet{ids, class_id};
}

SubBatch SubBatch::make(std::vector<Quadruplet> quadruplets, Source source) {
  if (quadruplets.size() != kClassesPerSubBatch) {
    throw Error(ErrorKind::InvalidInput, "sub-batch needs " + std::to_string(kClassesPerSubBatch) +
                                             " quadruplets, got " +
                                             std::to_string(quadruplets.size()));
  }
  std::set<ImageId> ids;
  std::set<ClassId> classes;
  for (const auto& q : quadruplets) {
    classes.insert(q.class_id);
    ids.insert(q.image_ids.begin(), q.image_ids.end());
  }
  if (ids.size() != kImagesPerSubBatch) {
    throw Error(ErrorKind::InvalidInput, "sub-batch image ids are not all distinct");
  }
  if (classes.size() != kClassesPerSubBatch) {
    throw Error(ErrorKind::InvalidInput, "sub-batch class ids are not all distinct");
  }
  return SubBatch(std::move(quadruplets), source);
}

std::vector<ImageId> SubBatch::image_ids() const {
  std::vector<ImageId> out;
  out.reserve(kImagesPerSubBatch);
  for (const auto& q : quadruplets_) out.insert(out.end(), q.image_ids.begin(), q.image_ids.end());
  return out;
}

std::vector<ClassId> SubBatch::labels() const {
  std::vector<ClassId> out;
  out.reserve(kImagesPerSubBatch);
  for (const auto& q : quadruplets_) out.insert(out.end(), kQuadrupletSize, q.class_id);
  return out;
}

TrainingIteration TrainingIteration::make(std::vector<SubBatch> sub_batches) {
  std::multiset<Source> got;
  for (const auto& b : sub_batches) got.insert(b.source());
  const std::multiset<Source> want(kIterationSources.begin(), kIterationSources.end());
  if (got != want) {
    std::string msg = "iteration must hold one sub-batch per source "
                      "(sfxl-frontal, sfxl-lateral, gsv, msls, megascenes, scannet); got:";
    for (const auto s : got) msg += " " + std::string(to_string(s));
    throw Error(ErrorKind::Composition, msg);
  }
  return TrainingIteration(std::move(sub_batches));
}

std::size_t TrainingIteration::image_count() const {
  std::size_t n = 0;
  for (const auto& b : sub_batches_) n += b.quadruplets().size() * kQuadrupletSize;
  return n;
}

double planar_distance(const PlanarPose& a, const PlanarPose& b) {
  for (double v : {a.east, a.north, b.east, b.north}) require_finite(v, "coordinate");
  return std::hypot(a.east - b.east, a.north - b.north);
}

double angular_difference(double h1_deg, double h2_deg) {
  require_finite(h1_deg, "heading");
  require_finite(h2_deg, "heading");
  const double d = std::fabs(normalize_heading(h1_deg) - normalize_heading(h2_deg));
  return d > 180.0 ? 360.0 - d : d;
}

double bearing_deg(const Eigen::Vector2d& from, const Eigen::Vector2d& to) {
  const Eigen::Vector2d d = to - from;
  return normalize_heading(std::atan2(d.y(), d.x()) * 180.0 / M_PI);
}

Descriptor project_and_normalize(const Eigen::VectorXd& raw, const Eigen::MatrixXd& projection) {
  return Descriptor(project_and_normalize<double>(raw, projection));
}

void ByteAccountant::acquire(std::size_t bytes) {
  const std::size_t now = current_.fetch_add(bytes) + bytes;
  std::size_t prev = peak_.load();
  while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
  }
}

void ByteAccountant::release(std::size_t bytes) { current_.fetch_sub(bytes); }

TrackedBytes::TrackedBytes(ByteAccountant* accountant, std::size_t bytes)
    : accountant_(accountant), bytes_(bytes) {
  if (accountant_) accountant_->acquire(bytes_);
}

TrackedBytes::TrackedBytes(TrackedBytes&& other) noexcept
    : accountant_(other.accountant_), bytes_(other.bytes_) {
  other.accountant_ = nullptr;
  other.bytes_ = 0;
}

TrackedBytes& TrackedBytes::operator=(TrackedBytes&& other) noexcept {
  if (this != &other) {
    if (accountant_) accountant_->release(bytes_);
    accountant_ = other.accountant_;
    bytes_ = other.bytes_;
    other.accountant_ = nullptr;
    other.bytes_ = 0;
  }
  return *this;
}

TrackedBytes::~TrackedBytes() {
  if (accountant_) accountant_->release(bytes_);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace placeret
