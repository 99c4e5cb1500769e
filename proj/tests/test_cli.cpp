#include "placeret/io.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace placeret;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / ("placeret_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

Run run(const std::string& args) {
  const auto out = scratch() / "stdout.txt";
  const auto err = scratch() / "stderr.txt";
  const std::string cmd = std::string(PLACERET_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

int code_of(ErrorKind k) { return 10 + static_cast<int>(k); }

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const fs::path& minimal_world() {
  static const fs::path dir = [] {
    const auto cfg = scratch() / "minimal.json";
    spit(cfg, R"({"n_places": 32, "images_per_place": 4})");
    const auto d = scratch() / "minimal";
    REQUIRE(run("gen-world --config " + cfg.string() + " --out " + d.string()).code == 0);
    return d;
  }();
  return dir;
}

const fs::path& default_world() {
  static const fs::path dir = [] {
    const auto d = scratch() / "default";
    REQUIRE(run("gen-world --out " + d.string()).code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-world") {
  const auto& dir = minimal_world();
  CHECK(read_metadata(dir / "metadata.csv").size() == 128);
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["subcommand"] == "gen-world");
  CHECK(manifest["config"]["n_places"] == 32);

  SUBCASE("same seed, same bytes") {
    const auto again = scratch() / "minimal_again";
    REQUIRE(run("gen-world --config " + (scratch() / "minimal.json").string() + " --out " + again.string()).code == 0);
    for (const char* f : {"world.json", "metadata.csv", "covisibility.csv", "descriptors.bin"}) {
      CHECK(slurp(dir / f) == slurp(again / f));
    }
  }
  SUBCASE("infeasible packing") {
    const auto cfg = scratch() / "dense.json";
    spit(cfg, R"({"n_places": 400, "area_side": 500})");
    const auto r = run("gen-world --config " + cfg.string() + " --out " + (scratch() / "dense").string());
    CHECK(r.code == code_of(ErrorKind::GenerationFailure));
    CHECK(r.err.find("min_separation") != std::string::npos);
  }
  SUBCASE("usage error") { CHECK(run("gen-world").code == 2); }
}

TEST_CASE("train") {
  const auto& world = default_world();
  SUBCASE("zero learning rate keeps the initialization") {
    const auto out = scratch() / "train_lr0";
    REQUIRE(run("train --world " + world.string() + " --out " + out.string() + " --lr 0 --iterations 10").code == 0);
    const auto ckpt = read_checkpoint(out / "checkpoint.bin");
    const auto init = read_checkpoint(out / "initial.bin");
    CHECK(ckpt.table.values() == init.table.values());
  }
  SUBCASE("default config history and replay") {
    const auto out = scratch() / "train_default";
    const auto r = run("train --world " + world.string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    const std::string history = slurp(out / "history.csv");
    CHECK(line_count(history) == 501);
    const std::string header = history.substr(0, history.find('\n'));
    CHECK(header == "iteration,total,sfxl-frontal,sfxl-lateral,gsv,msls,megascenes,scannet");
    CHECK(std::count(header.begin(), header.end(), ',') == 7);

    const auto replay = scratch() / "train_replay";
    REQUIRE(run("train --manifest " + (out / "manifest.json").string() + " --out " + replay.string()).code == 0);
    CHECK(slurp(replay / "history.csv") == history);
    CHECK(slurp(replay / "checkpoint.bin") == slurp(out / "checkpoint.bin"));
  }
  SUBCASE("config file with flag override") {
    const auto cfg = scratch() / "train.json";
    spit(cfg, R"({"iterations": 50, "accumulation_mode": "fused", "sources": ["gsv", "scannet"]})");
    const auto out = scratch() / "train_cfg";
    REQUIRE(run("train --world " + world.string() + " --config " + cfg.string() + " --iterations 7 --out " + out.string()).code == 0);
    CHECK(line_count(slurp(out / "history.csv")) == 8);
    const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
    CHECK(manifest["config"]["iterations"] == 7);
    CHECK(manifest["config"]["accumulation_mode"] == "fused");
  }
  SUBCASE("bad config key") {
    const auto cfg = scratch() / "bad.json";
    spit(cfg, R"({"iteratons": 5})");
    CHECK(run("train --world " + world.string() + " --config " + cfg.string() + " --out " + (scratch() / "x").string()).code ==
          code_of(ErrorKind::Format));
  }
}

namespace {

// Database = the world's descriptors; queries = the same rows (co-located twins).
struct EvalFiles {
  fs::path db, meta, queries, qmeta;
};

EvalFiles twin_files() {
  const auto& w = minimal_world();
  EvalFiles f{w / "descriptors.bin", w / "metadata.csv", w / "descriptors.bin", w / "metadata.csv"};
  return f;
}

}  // namespace

TEST_CASE("eval") {
  const auto f = twin_files();
  const std::string base = "eval --descriptors " + f.db.string() + " --metadata " + f.meta.string() +
                           " --queries " + f.queries.string() + " --query-metadata " + f.qmeta.string();
  SUBCASE("twins give perfect recall") {
    const auto r = run(base + " --k 1,10");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("placeret,synthetic,recall,1,1\n") != std::string::npos);
  }
  SUBCASE("blocked and unlimited runs write identical csv") {
    const auto a = scratch() / "blocked.csv";
    const auto b = scratch() / "unlimited.csv";
    REQUIRE(run(base + " --memory-budget 30000 --out " + a.string()).code == 0);
    REQUIRE(run(base + " --memory-budget 4000000000 --out " + b.string()).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(fs::exists(a.string() + ".manifest.json"));
    const auto m = nlohmann::json::parse(slurp(a.string() + ".manifest.json"));
    CHECK(m["config"]["threshold_m"] == 25.0);
  }
  SUBCASE("budget too small") {
    CHECK(run(base + " --memory-budget 100").code == code_of(ErrorKind::BudgetInfeasible));
  }
  SUBCASE("landmark protocol") {
    nlohmann::json gt;
    auto meta = read_metadata(f.meta);
    for (std::size_t q = 0; q < meta.size(); ++q) {
      nlohmann::json e;
      std::vector<ImageId> easy, hard;
      for (const auto& r : meta) {
        if (r.class_id != meta[q].class_id) continue;
        (r.id == meta[q].id ? easy : hard).push_back(r.id);
      }
      e["easy"] = easy;
      e["hard"] = hard;
      gt["queries"].push_back(e);
    }
    spit(scratch() / "gt.json", gt.dump());
    const auto r = run("eval --protocol landmark --descriptors " + f.db.string() + " --metadata " + f.meta.string() +
                       " --queries " + f.queries.string() + " --ground-truth " + (scratch() / "gt.json").string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("placeret,synthetic,mAP,E,1\n") != std::string::npos);
    CHECK(r.out.find(",mAP,M,") != std::string::npos);
    CHECK(r.out.find(",mAP,H,") != std::string::npos);
  }
}

TEST_CASE("bench-knn") {
  const auto file = scratch() / "bench.bin";
  write_descriptors(file, oracle::random_rows(5000, 64, 3));
  const std::string base = "bench-knn --descriptors " + file.string() + " --queries 50 --k 10";
  SUBCASE("budget below one row") {
    CHECK(run(base + " --memory-budget 100").code == code_of(ErrorKind::BudgetInfeasible));
  }
  SUBCASE("halving the block keeps results and lowers the peak") {
    const auto a = run(base + " --memory-budget 200000");
    const auto b = run(base + " --memory-budget 100000");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    const auto ja = nlohmann::json::parse(a.out);
    const auto jb = nlohmann::json::parse(b.out);
    CHECK(ja["result_digest"] == jb["result_digest"]);
    CHECK(jb["peak_bytes"].get<std::size_t>() < ja["peak_bytes"].get<std::size_t>());
    CHECK(ja["peak_bytes"].get<std::size_t>() <= 200000);
    CHECK(jb["peak_bytes"].get<std::size_t>() <= 100000);
    CHECK(ja["queries_per_sec"].get<double>() > 0.0);
  }
  SUBCASE("threads keep results") {
    const auto a = run(base + " --threads 1");
    const auto b = run(base + " --threads 4");
    CHECK(nlohmann::json::parse(a.out)["result_digest"] == nlohmann::json::parse(b.out)["result_digest"]);
  }
}

TEST_CASE("sample-batches") {
  const auto out = scratch() / "batches.json";
  REQUIRE(run("sample-batches --world " + default_world().string() + " --iterations 2 --out " + out.string()).code == 0);
  const auto j = nlohmann::json::parse(slurp(out));
  REQUIRE(j.size() == 2);
  CHECK(j[0]["sub_batches"].size() == 6);
  CHECK(j[0]["sub_batches"][0]["source"] == "sfxl-frontal");
  CHECK(j[0]["sub_batches"][5]["quadruplets"].size() == 32);
}

TEST_CASE("cleanup") { fs::remove_all(scratch()); }
