#include "placeret/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace placeret {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Little-endian helpers

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <typename T>
void put(std::string& out, T v) {
  const T le = to_little(v);
  char buf[sizeof(T)];
  std::memcpy(buf, &le, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return to_little(v);
}

template <typename T>
void append_array(std::string& out, const T* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(data), n * sizeof(T));
  } else {
    for (std::size_t i = 0; i < n; ++i) put(out, data[i]);
  }
}

template <typename T>
void decode_array(const unsigned char* src, T* out, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out, src, n * sizeof(T));
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = get<T>(src + i * sizeof(T));
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Descriptor files

void write_descriptors(const fs::path& path, const RowMatrixF& descriptors) {
  std::string out;
  out.reserve(kDescriptorHeaderBytes + descriptors.size() * sizeof(float));
  out.append(kDescriptorMagic, sizeof(kDescriptorMagic));
  put<std::uint32_t>(out, kDescriptorVersion);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(descriptors.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(descriptors.cols()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ScalarType::F32));
  put<std::uint32_t>(out, 0);
  append_array(out, descriptors.data(), static_cast<std::size_t>(descriptors.size()));
  write_file_atomic(path, out);
}

DescriptorReader::DescriptorReader(const fs::path& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY);
  if (fd_ < 0) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    unsigned char h[kDescriptorHeaderBytes];
    const ssize_t got = ::pread(fd_, h, sizeof(h), 0);
    if (got != static_cast<ssize_t>(sizeof(h))) {
      throw Error(ErrorKind::Format, path.string() + ": header is " + std::to_string(std::max<ssize_t>(got, 0)) +
                                         " bytes, expected " + std::to_string(kDescriptorHeaderBytes));
    }
    if (std::memcmp(h, kDescriptorMagic, sizeof(kDescriptorMagic)) != 0) {
      throw Error(ErrorKind::Format, path.string() + ": bad magic, not a descriptor file");
    }
    header_.version = get<std::uint32_t>(h + 8);
    header_.count = get<std::uint64_t>(h + 12);
    header_.dim = get<std::uint32_t>(h + 20);
    const auto scalar = get<std::uint32_t>(h + 24);
    if (header_.version != kDescriptorVersion) {
      throw Error(ErrorKind::Format, path.string() + ": unsupported version " + std::to_string(header_.version));
    }
    if (scalar != static_cast<std::uint32_t>(ScalarType::F32)) {
      throw Error(ErrorKind::Format, path.string() + ": unsupported scalar type " + std::to_string(scalar));
    }
    if (header_.dim == 0 && header_.count > 0) {
      throw Error(ErrorKind::Format, path.string() + ": zero dimension with non-empty payload");
    }
    const std::uint64_t row_bytes = std::uint64_t{header_.dim} * sizeof(float);
    const std::uint64_t expected = kDescriptorHeaderBytes + header_.count * row_bytes;
    const auto actual = static_cast<std::uint64_t>(fs::file_size(path));
    if (actual != expected) {
      std::string msg = path.string() + ": payload corrupted, expected " + std::to_string(expected) +
                        " bytes, found " + std::to_string(actual);
      if (actual < expected && row_bytes > 0) {
        const std::uint64_t payload = actual - std::min<std::uint64_t>(actual, kDescriptorHeaderBytes);
        msg += "; truncated at byte offset " + std::to_string(actual) + " (row " +
               std::to_string(payload / row_bytes) + ", byte " + std::to_string(payload % row_bytes) +
               " within the row)";
      }
      throw Error(ErrorKind::Corruption, msg);
    }
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

DescriptorReader::~DescriptorReader() {
  if (fd_ >= 0) ::close(fd_);
}

void DescriptorReader::read_rows(std::uint64_t begin, std::uint64_t rows, float* out) const {
  if (begin + rows > header_.count) {
    throw Error(ErrorKind::InvalidInput, "read of rows [" + std::to_string(begin) + ", " +
                                             std::to_string(begin + rows) + ") past count " +
                                             std::to_string(header_.count));
  }
  const std::uint64_t row_bytes = std::uint64_t{header_.dim} * sizeof(float);
  const std::uint64_t bytes = rows * row_bytes;
  auto offset = static_cast<off_t>(kDescriptorHeaderBytes + begin * row_bytes);
  if constexpr (std::endian::native == std::endian::little) {
    auto* dst = reinterpret_cast<unsigned char*>(out);
    std::uint64_t done = 0;
    while (done < bytes) {
      const ssize_t got = ::pread(fd_, dst + done, bytes - done, offset + static_cast<off_t>(done));
      if (got <= 0) {
        throw Error(ErrorKind::Corruption, path_.string() + ": short read at byte offset " +
                                               std::to_string(offset + static_cast<off_t>(done)));
      }
      done += static_cast<std::uint64_t>(got);
    }
  } else {
    std::vector<unsigned char> raw(bytes);
    if (::pread(fd_, raw.data(), bytes, offset) != static_cast<ssize_t>(bytes)) {
      throw Error(ErrorKind::Corruption, path_.string() + ": short read at byte offset " + std::to_string(offset));
    }
    decode_array(raw.data(), out, rows * header_.dim);
  }
}

RowMatrixF read_descriptors(const fs::path& path, std::uint64_t begin, std::int64_t rows) {
  DescriptorReader reader(path);
  const std::uint64_t count = reader.header().count;
  if (begin > count) throw Error(ErrorKind::InvalidInput, "read begins past the end of " + path.string());
  const std::uint64_t n = rows < 0 ? count - begin : static_cast<std::uint64_t>(rows);
  RowMatrixF out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(reader.header().dim));
  if (n > 0) reader.read_rows(begin, n, out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Text formats

namespace {

constexpr std::string_view kMetadataVersion = "# placeret-metadata v1";
constexpr std::string_view kMetadataHeader = "id,east,north,heading,class_id,scene_id,source";
constexpr std::string_view kCovisVersion = "# placeret-covisibility v1";
constexpr std::string_view kCovisHeader = "id_a,id_b,fraction";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void expect_preamble(const fs::path& path, const std::vector<std::string>& lines,
                     std::string_view version, std::string_view header) {
  if (lines.empty() || lines[0] != version) {
    throw Error(ErrorKind::Format, path.string() + ": first line must be '" + std::string(version) + "'");
  }
  if (lines.size() < 2 || lines[1] != header) {
    throw Error(ErrorKind::Format, path.string() + ": second line must be '" + std::string(header) + "'");
  }
}

std::string join_errors(const fs::path& path, const std::vector<std::string>& errors) {
  std::string msg = path.string() + ": " + std::to_string(errors.size()) + " invalid record(s)";
  for (const auto& e : errors) msg += "\n  " + e;
  return msg;
}

}  // namespace

void write_metadata(const fs::path& path, const std::vector<ImageRecord>& records) {
  std::string out;
  out += kMetadataVersion;
  out += '\n';
  out += kMetadataHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.id) + ',' + format_double(r.pose.east) + ',' + format_double(r.pose.north) +
           ',' + format_double(r.pose.heading) + ',' + (r.class_id ? std::to_string(*r.class_id) : "") +
           ',' + (r.scene_id ? std::to_string(*r.scene_id) : "") + ',' + std::string(to_string(r.source)) +
           '\n';
  }
  write_file_atomic(path, out);
}

std::vector<std::string> gsv_separation_violations(const std::vector<ImageRecord>& records) {
  std::map<ClassId, std::pair<Eigen::Vector2d, int>> sums;
  for (const auto& r : records) {
    if (r.source != Source::GsvCities || !r.class_id) continue;
    auto& [sum, n] = sums.try_emplace(*r.class_id, Eigen::Vector2d::Zero(), 0).first->second;
    sum += r.pose.position();
    ++n;
  }
  std::vector<std::pair<ClassId, Eigen::Vector2d>> centroids;
  for (const auto& [c, s] : sums) centroids.emplace_back(c, s.first / s.second);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    for (std::size_t j = i + 1; j < centroids.size(); ++j) {
      const double d = (centroids[i].second - centroids[j].second).norm();
      if (d < kGsvClassSeparation) {
        out.push_back("gsv classes " + std::to_string(centroids[i].first) + " and " +
                      std::to_string(centroids[j].first) + " are " + format_double(d) +
                      " m apart (minimum 100 m)");
      }
    }
  }
  return out;
}

std::vector<ImageRecord> read_metadata(const fs::path& path) {
  const auto lines = read_lines(path);
  expect_preamble(path, lines, kMetadataVersion, kMetadataHeader);

  std::vector<ImageRecord> records;
  std::vector<std::string> errors;
  std::map<ImageId, std::size_t> first_line;
  for (std::size_t ln = 2; ln < lines.size(); ++ln) {
    const std::string& line = lines[ln];
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(ln + 1) + ": ";
    const auto f = split_csv(line);
    if (f.size() != 7) {
      errors.push_back(where + "expected 7 fields, found " + std::to_string(f.size()));
      continue;
    }
    ImageRecord r;
    double east = 0, north = 0, heading = 0;
    if (!parse_number(f[0], r.id)) {
      errors.push_back(where + "missing or malformed id");
      continue;
    }
    if (!parse_number(f[1], east) || !parse_number(f[2], north) || !parse_number(f[3], heading)) {
      errors.push_back(where + "missing or malformed east/north/heading");
      continue;
    }
    try {
      r.pose = PlanarPose(east, north, heading);
    } catch (const Error& e) {
      errors.push_back(where + e.what());
      continue;
    }
    if (!f[4].empty()) {
      ClassId c;
      if (!parse_number(f[4], c)) {
        errors.push_back(where + "malformed class_id");
        continue;
      }
      r.class_id = c;
    }
    if (!f[5].empty()) {
      std::int64_t s;
      if (!parse_number(f[5], s)) {
        errors.push_back(where + "malformed scene_id");
        continue;
      }
      r.scene_id = s;
    }
    if (f[6].empty()) {
      errors.push_back(where + "missing source");
      continue;
    }
    try {
      r.source = parse_source(f[6]);
    } catch (const Error& e) {
      errors.push_back(where + e.what());
      continue;
    }
    if (r.source == Source::GsvCities && !r.class_id) {
      errors.push_back(where + "gsv records require a class_id");
      continue;
    }
    const auto [it, fresh] = first_line.emplace(r.id, ln + 1);
    if (!fresh) {
      errors.push_back(where + "duplicate id " + std::to_string(r.id) + " (first seen on line " +
                       std::to_string(it->second) + ")");
      continue;
    }
    records.push_back(r);
  }
  if (errors.empty()) {
    for (auto& v : gsv_separation_violations(records)) errors.push_back(std::move(v));
  }
  if (!errors.empty()) throw Error(ErrorKind::Ingestion, join_errors(path, errors));
  return records;
}

void write_covisibility(const fs::path& path, const CovisibilityMap& covisibility) {
  std::string out;
  out += kCovisVersion;
  out += '\n';
  out += kCovisHeader;
  out += '\n';
  for (const auto& [key, value] : covisibility.entries()) {
    out += std::to_string(key.first) + ',' + std::to_string(key.second) + ',' + format_double(value) + '\n';
  }
  write_file_atomic(path, out);
}

CovisibilityMap read_covisibility(const fs::path& path) {
  const auto lines = read_lines(path);
  expect_preamble(path, lines, kCovisVersion, kCovisHeader);
  CovisibilityMap map;
  std::vector<std::string> errors;
  bool range_error = false;
  for (std::size_t ln = 2; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const std::string where = "line " + std::to_string(ln + 1) + ": ";
    const auto f = split_csv(lines[ln]);
    ImageId a = 0, b = 0;
    double frac = 0;
    if (f.size() != 3 || !parse_number(f[0], a) || !parse_number(f[1], b) || !parse_number(f[2], frac)) {
      errors.push_back(where + "expected id_a,id_b,fraction");
      continue;
    }
    if (!(frac >= 0.0 && frac <= 1.0)) {
      errors.push_back(where + "fraction " + f[2] + " outside [0, 1]");
      range_error = true;
      continue;
    }
    if (a != b) {
      const double prior = map.overlap(a, b);
      const bool present = map.entries().count(std::minmax(a, b)) != 0;
      if (present && prior != frac) {
        errors.push_back(where + "pair (" + std::to_string(a) + ", " + std::to_string(b) +
                         ") conflicts with earlier value " + format_double(prior));
        continue;
      }
    } else if (frac != 1.0) {
      errors.push_back(where + "self-overlap of image " + std::to_string(a) + " must be 1");
      continue;
    }
    map.set(a, b, frac);
  }
  if (!errors.empty()) {
    throw Error(range_error ? ErrorKind::Range : ErrorKind::Ingestion, join_errors(path, errors));
  }
  return map;
}

// ---------------------------------------------------------------------------
// World directories

std::string world_config_json(const WorldConfig& c) {
  nlohmann::ordered_json j;
  j["n_places"] = c.n_places;
  j["images_per_place"] = c.images_per_place;
  j["area_side"] = c.area_side;
  j["noise_sigma"] = c.noise_sigma;
  j["embed_dim"] = c.embed_dim;
  j["seed"] = c.seed;
  j["noise_seed"] = c.noise_seed;
  j["min_separation"] = c.min_separation;
  j["place_radius"] = c.place_radius;
  j["lateral_jitter"] = c.lateral_jitter;
  j["heading_jitter"] = c.heading_jitter;
  j["cell_size"] = c.cell_size;
  j["covis_distance_scale"] = c.covis_distance_scale;
  j["covis_distance_cutoff"] = c.covis_distance_cutoff;
  j["covis_angle_cutoff"] = c.covis_angle_cutoff;
  j["descriptor_length_scale"] = c.descriptor_length_scale;
  return j.dump(2);
}

WorldConfig parse_world_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("world config: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Format, "world config must be a JSON object");
  static const std::set<std::string> known = {
      "n_places",       "images_per_place", "area_side",      "noise_sigma",
      "embed_dim",      "seed",             "noise_seed",     "min_separation",
      "place_radius",   "lateral_jitter",   "heading_jitter", "cell_size",
      "covis_distance_scale", "covis_distance_cutoff", "covis_angle_cutoff",
      "descriptor_length_scale"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error(ErrorKind::Format, "world config: unknown key '" + key + "'");
  }
  WorldConfig c;
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    read("n_places", c.n_places);
    read("images_per_place", c.images_per_place);
    read("area_side", c.area_side);
    read("noise_sigma", c.noise_sigma);
    read("embed_dim", c.embed_dim);
    read("seed", c.seed);
    read("noise_seed", c.noise_seed);
    read("min_separation", c.min_separation);
    read("place_radius", c.place_radius);
    read("lateral_jitter", c.lateral_jitter);
    read("heading_jitter", c.heading_jitter);
    read("cell_size", c.cell_size);
    read("covis_distance_scale", c.covis_distance_scale);
    read("covis_distance_cutoff", c.covis_distance_cutoff);
    read("covis_angle_cutoff", c.covis_angle_cutoff);
    read("descriptor_length_scale", c.descriptor_length_scale);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("world config: ") + e.what());
  }
  return c;
}

void write_world(const fs::path& dir, const World& world) {
  fs::create_directories(dir);
  write_file_atomic(dir / "world.json", world_config_json(world.config) + "\n");
  write_metadata(dir / "metadata.csv", world.images);
  write_covisibility(dir / "covisibility.csv", world.covisibility);
  write_descriptors(dir / "descriptors.bin", true_descriptor_matrix(world).cast<float>());
}

World read_world(const fs::path& dir) {
  World world;
  world.config = parse_world_config(read_file(dir / "world.json"));
  world.config.validate();
  world.descriptor_seed = mix_seed(world.config.seed, 7);
  world.images = read_metadata(dir / "metadata.csv");
  world.covisibility = read_covisibility(dir / "covisibility.csv");
  std::set<ImageId> ids;
  for (const auto& r : world.images) {
    ids.insert(r.id);
    if (r.scene_id) world.scenes[*r.scene_id].push_back(r.id);
  }
  for (auto& [_, members] : world.scenes) std::sort(members.begin(), members.end());
  for (const auto& [key, _] : world.covisibility.entries()) {
    if (!ids.count(key.first) || !ids.count(key.second)) {
      throw Error(ErrorKind::Ingestion, "covisibility references unknown image in pair (" +
                                            std::to_string(key.first) + ", " + std::to_string(key.second) + ")");
    }
  }
  return world;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCheckpointMagic[8] = {'M', 'L', 'O', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kCheckpointHeaderBytes = 40;
}  // namespace

void write_checkpoint(const fs::path& path, const EmbeddingTable& table, std::uint64_t config_hash) {
  using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(table.size()));
  put<std::uint64_t>(out, table.step);
  put<std::uint64_t>(out, config_hash);
  append_array(out, table.ids().data(), table.ids().size());
  for (const Eigen::MatrixXd* m : {&table.values(), &table.first_moment, &table.second_moment}) {
    const RowMatrixD rows = *m;
    append_array(out, rows.data(), static_cast<std::size_t>(rows.size()));
  }
  write_file_atomic(path, out);
}

Checkpoint read_checkpoint(const fs::path& path) {
  using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::string data = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  if (data.size() < kCheckpointHeaderBytes || std::memcmp(p, kCheckpointMagic, 8) != 0) {
    throw Error(ErrorKind::Format, path.string() + ": not a checkpoint file");
  }
  if (get<std::uint32_t>(p + 8) != kCheckpointVersion) {
    throw Error(ErrorKind::Format, path.string() + ": unsupported checkpoint version");
  }
  const std::uint64_t dim = get<std::uint32_t>(p + 12);
  const std::uint64_t count = get<std::uint64_t>(p + 16);
  const std::uint64_t step = get<std::uint64_t>(p + 24);
  const std::uint64_t hash = get<std::uint64_t>(p + 32);
  const std::uint64_t expected = kCheckpointHeaderBytes + count * 8 + 3 * count * dim * 8;
  if (data.size() != expected) {
    throw Error(ErrorKind::Corruption, path.string() + ": expected " + std::to_string(expected) +
                                           " bytes, found " + std::to_string(data.size()));
  }
  std::vector<ImageId> ids(count);
  const unsigned char* cursor = p + kCheckpointHeaderBytes;
  decode_array(cursor, ids.data(), count);
  cursor += count * 8;
  std::array<Eigen::MatrixXd, 3> mats;
  for (auto& m : mats) {
    RowMatrixD rows(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
    decode_array(cursor, rows.data(), count * dim);
    cursor += count * dim * 8;
    m = rows;
  }
  Checkpoint ck{EmbeddingTable(std::move(ids), std::move(mats[0])), hash};
  ck.table.first_moment = std::move(mats[1]);
  ck.table.second_moment = std::move(mats[2]);
  ck.table.step = step;
  return ck;
}

std::string loss_history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "iteration,total";
  for (Source src : kIterationSources) out += "," + std::string(to_string(src));
  out += '\n';
  for (const auto& row : history) {
    out += std::to_string(row.iteration) + ',' + format_double(row.total);
    for (double v : row.per_source) out += ',' + (std::isnan(v) ? std::string() : format_double(v));
    out += '\n';
  }
  return out;
}

void write_loss_history(const fs::path& path, const std::vector<HistoryRow>& history) {
  write_file_atomic(path, loss_history_csv(history));
}

}  // namespace placeret
