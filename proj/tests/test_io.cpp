#include "placeret/io.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <cstring>
#include <unistd.h>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace placeret;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("placeret_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::string expect_error(const std::function<void()>& f, ErrorKind kind) {
  try {
    f();
  } catch (const Error& e) {
    CHECK(e.kind() == kind);
    return e.what();
  }
  FAIL("no error thrown");
  return {};
}

const std::string kMetaHead = "# placeret-metadata v1\nid,east,north,heading,class_id,scene_id,source\n";

}  // namespace

TEST_CASE("descriptor files") {
  TempDir dir;
  const auto file = dir.path / "d.bin";
  SUBCASE("round trip is bit identical") {
    const RowMatrixF m = oracle::random_rows(3, 4, 1);
    write_descriptors(file, m);
    const RowMatrixF back = read_descriptors(file);
    REQUIRE(back.rows() == 3);
    CHECK(std::memcmp(back.data(), m.data(), 12 * sizeof(float)) == 0);
    CHECK(fs::file_size(file) == 32 + 48);
    const std::string bytes = slurp(file);
    CHECK(bytes.substr(0, 8) == "MLOCDESC");
    CHECK(static_cast<unsigned char>(bytes[12]) == 3);  // little-endian count
    CHECK(static_cast<unsigned char>(bytes[20]) == 4);  // dim
    const RowMatrixF middle = read_descriptors(file, 1, 1);
    CHECK(middle.row(0) == m.row(1));
  }
  SUBCASE("header-only file") {
    write_descriptors(file, RowMatrixF(0, 8));
    const auto store = DescriptorStore::open_file(file);
    CHECK(store.count() == 0);
    CHECK(store.dim() == 8);
    SearchOptions o;
    o.k = 3;
    CHECK(search(store, Eigen::MatrixXd::Ones(2, 8), o).neighbors[0].empty());
  }
  SUBCASE("truncated mid-row") {
    write_descriptors(file, oracle::random_rows(5, 4, 2));
    fs::resize_file(file, 32 + 2 * 16 + 6);
    const auto msg = expect_error([&] { DescriptorReader r(file); }, ErrorKind::Corruption);
    CHECK(msg.find("expected 112 bytes, found 70") != std::string::npos);
    CHECK(msg.find("byte offset 70") != std::string::npos);
  }
  SUBCASE("bad magic and version") {
    write_descriptors(file, oracle::random_rows(1, 2, 2));
    std::string bytes = slurp(file);
    bytes[0] = 'X';
    spit(file, bytes);
    expect_error([&] { DescriptorReader r(file); }, ErrorKind::Format);
    bytes[0] = 'M';
    bytes[8] = 2;
    spit(file, bytes);
    expect_error([&] { DescriptorReader r(file); }, ErrorKind::Format);
  }
}

TEST_CASE("metadata") {
  TempDir dir;
  const auto file = dir.path / "m.csv";
  SUBCASE("128 records keep their order") {
    WorldConfig c;
    c.n_places = 32;
    c.images_per_place = 4;
    World w = generate_world(c);
    std::reverse(w.images.begin(), w.images.end());
    write_metadata(file, w.images);
    CHECK(read_metadata(file) == w.images);
  }
  SUBCASE("duplicate id") {
    spit(file, kMetaHead + "1,0,0,0,1,,gsv\n1,500,0,0,2,,gsv\n");
    const auto msg = expect_error([&] { read_metadata(file); }, ErrorKind::Ingestion);
    CHECK(msg.find("line 4") != std::string::npos);
    CHECK(msg.find("duplicate id 1") != std::string::npos);
  }
  SUBCASE("missing fields") {
    spit(file, kMetaHead + "1,0,,0,1,,gsv\n2,0,0,0,2,,\n3,0,0\n");
    const auto msg = expect_error([&] { read_metadata(file); }, ErrorKind::Ingestion);
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("line 4") != std::string::npos);
    CHECK(msg.find("line 5") != std::string::npos);
  }
  SUBCASE("gsv classes 99.5 m apart") {
    spit(file, kMetaHead + "1,0,0,0,1,,gsv\n2,99.5,0,0,2,,gsv\n");
    const auto msg = expect_error([&] { read_metadata(file); }, ErrorKind::Ingestion);
    CHECK(msg.find("99.5 m apart") != std::string::npos);
    spit(file, kMetaHead + "1,0,0,0,1,,gsv\n2,100,0,0,2,,gsv\n3,0,0,0,3,,msls\n");
    CHECK(read_metadata(file).size() == 3);
  }
  SUBCASE("gsv without class") {
    spit(file, kMetaHead + "1,0,0,0,,,gsv\n");
    expect_error([&] { read_metadata(file); }, ErrorKind::Ingestion);
  }
  SUBCASE("wrong preamble") {
    spit(file, "id,east\n");
    expect_error([&] { read_metadata(file); }, ErrorKind::Format);
  }
}

TEST_CASE("covisibility files") {
  TempDir dir;
  const auto file = dir.path / "c.csv";
  const std::string head = "# placeret-covisibility v1\nid_a,id_b,fraction\n";
  SUBCASE("symmetric") {
    spit(file, head + "1,2,0.05\n");
    CHECK(read_covisibility(file).overlap(2, 1) == 0.05);
  }
  SUBCASE("conflict") {
    spit(file, head + "1,2,0.05\n2,1,0.07\n");
    expect_error([&] { read_covisibility(file); }, ErrorKind::Ingestion);
  }
  SUBCASE("out of range") {
    spit(file, head + "1,2,1.5\n");
    expect_error([&] { read_covisibility(file); }, ErrorKind::Range);
  }
}

TEST_CASE("world round trip") {
  TempDir dir;
  const World w = generate_world(WorldConfig{});
  write_world(dir.path / "w", w);
  const World back = read_world(dir.path / "w");
  CHECK(back.images == w.images);
  CHECK(back.covisibility == w.covisibility);
  CHECK(back.scenes == w.scenes);
  CHECK(back.descriptor_seed == w.descriptor_seed);
  CHECK(world_config_json(back.config) == world_config_json(w.config));
  CHECK(read_descriptors(dir.path / "w" / "descriptors.bin") == true_descriptor_matrix(w).cast<float>());

  // writing the same world again produces the same bytes
  write_world(dir.path / "w2", w);
  for (const char* f : {"world.json", "metadata.csv", "covisibility.csv", "descriptors.bin"}) {
    CHECK(slurp(dir.path / "w" / f) == slurp(dir.path / "w2" / f));
  }
}

TEST_CASE("world config json") {
  const auto c = parse_world_config(R"({"n_places": 40, "noise_sigma": 0.1})");
  CHECK(c.n_places == 40);
  CHECK(c.noise_sigma == 0.1);
  CHECK(c.images_per_place == WorldConfig{}.images_per_place);
  CHECK_THROWS_KIND(parse_world_config(R"({"n_place": 40})"), ErrorKind::Format);
  CHECK_THROWS_KIND(parse_world_config("{"), ErrorKind::Format);
  CHECK(parse_world_config(world_config_json(c)).n_places == 40);
}

TEST_CASE("checkpoints") {
  TempDir dir;
  auto t = EmbeddingTable::random({4, 9, 2}, 5, 3);
  t.first_moment.setConstant(0.25);
  t.second_moment.setConstant(0.5);
  t.step = 42;
  write_checkpoint(dir.path / "c.bin", t, 0xabcdef);
  const auto back = read_checkpoint(dir.path / "c.bin");
  CHECK(back.config_hash == 0xabcdef);
  CHECK(back.table.ids() == t.ids());
  CHECK(back.table.values() == t.values());
  CHECK(back.table.first_moment == t.first_moment);
  CHECK(back.table.second_moment == t.second_moment);
  CHECK(back.table.step == 42);
  CHECK(fs::file_size(dir.path / "c.bin") == 40 + 3 * 8 + 3 * 3 * 5 * 8);

  fs::resize_file(dir.path / "c.bin", 100);
  expect_error([&] { read_checkpoint(dir.path / "c.bin"); }, ErrorKind::Corruption);
}

TEST_CASE("loss history csv") {
  HistoryRow a;
  a.iteration = 0;
  a.total = 1.5;
  a.per_source = {0.25, 0.25, 0.25, 0.25, 0.25, 0.25};
  HistoryRow b = a;
  b.iteration = 1;
  b.per_source[3] = std::nan("");
  const std::string csv = loss_history_csv({a, b});
  CHECK(csv ==
        "iteration,total,sfxl-frontal,sfxl-lateral,gsv,msls,megascenes,scannet\n"
        "0,1.5,0.25,0.25,0.25,0.25,0.25,0.25\n"
        "1,1.5,0.25,0.25,0.25,,0.25,0.25\n");
}

TEST_CASE("shortest round-trip formatting") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, -0.0}) CHECK(std::stod(format_double(v)) == v);
  CHECK(format_double(0.5) == "0.5");
}
