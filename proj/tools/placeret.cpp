// placeret command-line tool.
//
// Exit codes: 0 success, 2 usage error, 10 + ErrorKind for library errors
// (see README.md for the table), 1 anything else.

#include "placeret/core.hpp"
#include "placeret/io.hpp"
#include "placeret/knn.hpp"
#include "placeret/metrics.hpp"
#include "placeret/samplers.hpp"
#include "placeret/trainer.hpp"
#include "placeret/worldgen.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace placeret;

namespace {

constexpr const char* kToolVersion = "1.0.0";

int exit_code(ErrorKind kind) { return 10 + static_cast<int>(kind); }

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& path, const std::string& subcommand, const json& config,
                    std::uint64_t seed, const json& inputs, const json& outputs) {
  json m;
  m["subcommand"] = subcommand;
  m["tool_version"] = kToolVersion;
  m["seed"] = seed;
  m["config"] = config;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  write_file_atomic(path, m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Train config <-> JSON

json train_config_json(const TrainConfig& c) {
  json j;
  j["iterations"] = c.iterations;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["ms_alpha"] = c.ms_params.alpha;
  j["ms_beta"] = c.ms_params.beta;
  j["ms_lambda"] = c.ms_params.lambda;
  j["ms_epsilon"] = c.ms_params.epsilon;
  j["seed"] = c.seed;
  j["accumulation_mode"] = std::string(to_string(c.accumulation_mode));
  json sources = json::array();
  for (Source s : c.sources) sources.push_back(std::string(to_string(s)));
  j["sources"] = sources;
  j["freeze_sampler_seed"] = c.freeze_sampler_seed;
  j["eval_every"] = c.eval_every;
  j["focal_distance"] = c.eigenplaces.focal_distance;
  j["facing_tolerance"] = c.eigenplaces.facing_tolerance;
  j["max_retries"] = c.eigenplaces.max_retries;
  j["clique_refresh"] = c.clique_refresh;
  j["clique_size"] = c.clique_size;
  j["clique_similarity_floor"] = c.clique_similarity_floor;
  j["clique_geo_floor"] = c.clique_geo_floor;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  const json defaults = train_config_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw Error(ErrorKind::Format, "train config: unknown key '" + key + "'");
  }
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    read("iterations", c.iterations);
    read("learning_rate", c.learning_rate);
    read("weight_decay", c.weight_decay);
    read("adam_beta1", c.adam_beta1);
    read("adam_beta2", c.adam_beta2);
    read("adam_epsilon", c.adam_epsilon);
    read("ms_alpha", c.ms_params.alpha);
    read("ms_beta", c.ms_params.beta);
    read("ms_lambda", c.ms_params.lambda);
    read("ms_epsilon", c.ms_params.epsilon);
    read("seed", c.seed);
    if (j.contains("accumulation_mode")) {
      c.accumulation_mode = parse_accumulation_mode(j.at("accumulation_mode").get<std::string>());
    }
    if (j.contains("sources")) {
      c.sources.clear();
      for (const auto& s : j.at("sources")) c.sources.push_back(parse_source(s.get<std::string>()));
    }
    read("freeze_sampler_seed", c.freeze_sampler_seed);
    read("eval_every", c.eval_every);
    read("focal_distance", c.eigenplaces.focal_distance);
    read("facing_tolerance", c.eigenplaces.facing_tolerance);
    read("max_retries", c.eigenplaces.max_retries);
    read("clique_refresh", c.clique_refresh);
    read("clique_size", c.clique_size);
    read("clique_similarity_floor", c.clique_similarity_floor);
    read("clique_geo_floor", c.clique_geo_floor);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("train config: ") + e.what());
  }
  return c;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const long v = std::stol(item);
      if (v < 1) throw std::invalid_argument("k");
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidInput, "bad --k list '" + text + "'");
    }
  }
  if (ks.empty()) throw Error(ErrorKind::InvalidInput, "empty --k list");
  return ks;
}

std::vector<ImageId> ids_of(const std::vector<ImageRecord>& records) {
  std::vector<ImageId> ids;
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

Eigen::MatrixXd as_double(const RowMatrixF& m) { return m.cast<double>(); }

// ---------------------------------------------------------------------------
// Subcommands

struct GenWorldArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_gen_world(const GenWorldArgs& a) {
  WorldConfig config = a.config.empty() ? WorldConfig{} : parse_world_config(slurp(a.config));
  if (a.seed) config.seed = *a.seed;
  const World world = generate_world(config);
  write_world(a.out, world);
  write_manifest(fs::path(a.out) / "manifest.json", "gen-world", json::parse(world_config_json(config)),
                 config.seed, {{"config", a.config}},
                 {{"world_json", "world.json"},
                  {"metadata", "metadata.csv"},
                  {"covisibility", "covisibility.csv"},
                  {"descriptors", "descriptors.bin"}});
  std::cout << "wrote " << world.images.size() << " images, " << world.covisibility.size()
            << " covisible pairs to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string world;
  std::string config;
  std::string out;
  std::optional<int> iterations;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> seed;
  std::string mode;
};

int run_train(TrainArgs a) {
  TrainConfig config;
  if (!a.manifest.empty()) {
    // replay: the recorded merged config, then any flags on top
    const json m = parse_json_file(a.manifest);
    if (m.value("subcommand", "") != "train") {
      throw Error(ErrorKind::Format, a.manifest + ": not a train manifest");
    }
    config = train_config_from_json(m.at("config"));
    if (a.world.empty()) a.world = m.at("inputs").value("world", "");
  } else if (!a.config.empty()) {
    config = train_config_from_json(parse_json_file(a.config));
  }
  if (a.world.empty()) throw Error(ErrorKind::InvalidInput, "train needs --world or --manifest");
  if (a.iterations) config.iterations = *a.iterations;
  if (a.learning_rate) config.learning_rate = *a.learning_rate;
  if (a.seed) config.seed = *a.seed;
  if (!a.mode.empty()) config.accumulation_mode = parse_accumulation_mode(a.mode);
  config.validate();

  const World world = read_world(a.world);
  const TrainResult result = train(world, config);

  const fs::path out(a.out);
  fs::create_directories(out);
  const std::uint64_t hash = config_fingerprint(config);
  write_checkpoint(out / "checkpoint.bin", result.table, hash);
  write_checkpoint(out / "initial.bin", result.initial_table, hash);
  write_loss_history(out / "history.csv", result.history);
  std::string evals = "iteration,recall@1\n";
  for (const auto& e : result.evaluations) {
    evals += std::to_string(e.iteration) + "," + format_double(e.recall_at_1) + "\n";
  }
  write_file_atomic(out / "evaluations.csv", evals);
  write_manifest(out / "manifest.json", "train", train_config_json(config), config.seed,
                 {{"world", a.world}, {"config", a.config}, {"manifest", a.manifest}},
                 {{"checkpoint", "checkpoint.bin"},
                  {"initial", "initial.bin"},
                  {"history", "history.csv"},
                  {"evaluations", "evaluations.csv"}});
  std::cout << "recall@1 " << format_double(result.evaluations.front().recall_at_1) << " -> "
            << format_double(result.evaluations.back().recall_at_1) << " after " << config.iterations
            << " iterations\n";
  return 0;
}

struct EvalArgs {
  std::string descriptors;
  std::string metadata;
  std::string queries;
  std::string query_metadata;
  std::string ground_truth;
  std::string protocol = "vpr";
  std::string ks = "1,5,10";
  double threshold_m = kVprPositiveThreshold;
  std::string split = "all";
  std::size_t memory_budget = 256u << 20;
  unsigned threads = 1;
  std::string method = "placeret";
  std::string dataset = "synthetic";
  std::string out;
};

int run_eval(const EvalArgs& a) {
  const auto db_meta = read_metadata(a.metadata);
  const auto store = DescriptorStore::open_file(a.descriptors, ids_of(db_meta));
  const RowMatrixF queries = read_descriptors(a.queries);

  SearchOptions opts;
  opts.memory_budget = a.memory_budget;
  opts.threads = a.threads;
  std::vector<ResultRow> rows;

  if (a.protocol == "vpr") {
    if (a.query_metadata.empty()) throw Error(ErrorKind::InvalidInput, "vpr protocol needs --query-metadata");
    const auto q_meta = read_metadata(a.query_metadata);
    if (static_cast<Eigen::Index>(q_meta.size()) != queries.rows()) {
      throw Error(ErrorKind::InvalidInput, "query metadata and query descriptors differ in count");
    }
    const auto ks = parse_ks(a.ks);
    opts.k = *std::max_element(ks.begin(), ks.end());
    const auto results = search(store, as_double(queries), opts);
    VprGroundTruth gt;
    gt.positive_threshold = a.threshold_m;
    for (const auto& r : q_meta) gt.query_poses.push_back(r.pose);
    for (const auto& r : db_meta) gt.database_poses.emplace(r.id, r.pose);
    const auto report = recall_at_k(results, gt, ks);
    for (const auto& [k, v] : report.recall) {
      rows.push_back({a.method, a.dataset, "recall", std::to_string(k), v});
    }
    if (report.queries_without_positive > 0) {
      std::cerr << report.queries_without_positive << " queries have no positive within "
                << format_double(a.threshold_m) << " m and were excluded\n";
    }
  } else if (a.protocol == "landmark") {
    if (a.ground_truth.empty()) throw Error(ErrorKind::InvalidInput, "landmark protocol needs --ground-truth");
    const json g = parse_json_file(a.ground_truth);
    std::vector<LandmarkQuery> gt;
    try {
      for (const auto& q : g.at("queries")) {
        LandmarkQuery lq;
        for (ImageId id : q.value("easy", std::vector<ImageId>{})) lq.easy.insert(id);
        for (ImageId id : q.value("hard", std::vector<ImageId>{})) lq.hard.insert(id);
        for (ImageId id : q.value("junk", std::vector<ImageId>{})) lq.junk.insert(id);
        gt.push_back(std::move(lq));
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Format, a.ground_truth + ": " + e.what());
    }
    if (static_cast<Eigen::Index>(gt.size()) != queries.rows()) {
      throw Error(ErrorKind::InvalidInput, "ground truth and query descriptors differ in count");
    }
    opts.k = std::max<std::size_t>(store.count(), 1);
    const auto rankings = rankings_of(search(store, as_double(queries), opts));
    std::vector<Split> splits;
    if (a.split == "all") {
      splits = {Split::Easy, Split::Medium, Split::Hard};
    } else {
      splits = {parse_split(a.split)};
    }
    for (Split s : splits) {
      rows.push_back({a.method, a.dataset, "mAP", std::string(to_string(s)),
                      map_evaluate(rankings, gt, s).mean_ap});
    }
  } else {
    throw Error(ErrorKind::InvalidInput, "unknown protocol '" + a.protocol + "' (vpr or landmark)");
  }

  if (a.out.empty()) {
    std::cout << results_csv(rows);
  } else {
    write_results_csv(a.out, rows);
    json cfg{{"protocol", a.protocol}, {"k", a.ks},          {"threshold_m", a.threshold_m},
             {"split", a.split},       {"memory_budget", a.memory_budget}, {"threads", a.threads},
             {"method", a.method},     {"dataset", a.dataset}};
    write_manifest(a.out + ".manifest.json", "eval", cfg, 0,
                   {{"descriptors", a.descriptors},
                    {"metadata", a.metadata},
                    {"queries", a.queries},
                    {"query_metadata", a.query_metadata},
                    {"ground_truth", a.ground_truth}},
                   {{"results", a.out}});
  }
  return 0;
}

struct BenchArgs {
  std::string descriptors;
  std::size_t queries = 100;
  std::string query_file;
  std::size_t k = 10;
  std::size_t memory_budget = 256u << 20;
  unsigned threads = 1;
};

int run_bench_knn(const BenchArgs& a) {
  const auto store = DescriptorStore::open_file(a.descriptors);
  Eigen::MatrixXd q;
  if (!a.query_file.empty()) {
    q = as_double(read_descriptors(a.query_file));
  } else {
    const auto n = std::min<std::uint64_t>(a.queries, store.count());
    q = as_double(read_descriptors(a.descriptors, 0, static_cast<std::int64_t>(n)));
  }
  ByteAccountant accountant;
  SearchOptions opts;
  opts.k = a.k;
  opts.memory_budget = a.memory_budget;
  opts.threads = a.threads;
  opts.accountant = &accountant;
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = search(store, q, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // FNV-1a over (id, score bits) so paired runs can be compared
  std::uint64_t digest = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      digest ^= (v >> (8 * b)) & 0xff;
      digest *= 1099511628211ULL;
    }
  };
  for (const auto& list : result.neighbors) {
    for (const auto& n : list) {
      mix(static_cast<std::uint64_t>(n.id));
      mix(std::bit_cast<std::uint64_t>(n.score));
    }
  }
  const std::size_t heaps = heap_bytes(static_cast<std::size_t>(q.rows()), std::min(a.k, store.count()));
  json report;
  report["queries"] = q.rows();
  report["count"] = store.count();
  report["dim"] = store.dim();
  report["k"] = a.k;
  report["memory_budget"] = a.memory_budget;
  report["block_rows"] = plan_blocks(store.count(), store.dim(), sizeof(float), a.memory_budget - heaps);
  report["peak_bytes"] = accountant.peak();
  report["seconds"] = secs;
  report["queries_per_sec"] = secs > 0 ? static_cast<double>(q.rows()) / secs : 0.0;
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(digest));
  report["result_digest"] = hex;
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct SampleArgs {
  std::string world;
  std::string config;
  int iterations = 1;
  std::string out;
};

int run_sample_batches(const SampleArgs& a) {
  TrainConfig config = a.config.empty() ? TrainConfig{} : train_config_from_json(parse_json_file(a.config));
  config.validate();
  const World world = read_world(a.world);
  const auto table = EmbeddingTable::random(ids_of(world.images), world.config.embed_dim,
                                            mix_seed(config.seed, 0x7ab1e));
  IterationSampler sampler(world, config);
  json dump = json::array();
  for (int it = 0; it < a.iterations; ++it) {
    json iteration;
    iteration["iteration"] = it;
    json batches = json::array();
    for (const auto& b : sampler.sample(it, table)) {
      json quads = json::array();
      for (const auto& q : b.quadruplets()) {
        quads.push_back({{"class_id", q.class_id}, {"image_ids", q.image_ids}});
      }
      batches.push_back({{"source", std::string(to_string(b.source()))}, {"quadruplets", quads}});
    }
    iteration["sub_batches"] = batches;
    dump.push_back(iteration);
  }
  if (a.out.empty()) {
    std::cout << dump.dump(2) << "\n";
  } else {
    write_file_atomic(a.out, dump.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"placeret: batch sampling, multi-similarity training and retrieval evaluation"};
  app.require_subcommand(1);

  GenWorldArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-world", "Generate a synthetic world");
  gen_cmd->add_option("--config", gen.config, "World config JSON (defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Override the config seed");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train an embedding table on a world");
  train_cmd->add_option("--world", tr.world, "World directory");
  auto* train_config_opt = train_cmd->add_option("--config", tr.config, "Train config JSON");
  train_cmd->add_option("--manifest", tr.manifest, "Replay the config of an earlier train manifest")
      ->excludes(train_config_opt);
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--iterations", tr.iterations);
  train_cmd->add_option("--lr", tr.learning_rate);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--mode", tr.mode, "fused | per-sub-batch");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval (vpr recall or landmark mAP)");
  eval_cmd->add_option("--descriptors", ev.descriptors, "Database descriptor file")->required();
  eval_cmd->add_option("--metadata", ev.metadata, "Database metadata")->required();
  eval_cmd->add_option("--queries", ev.queries, "Query descriptor file")->required();
  eval_cmd->add_option("--query-metadata", ev.query_metadata, "Query metadata (vpr)");
  eval_cmd->add_option("--ground-truth", ev.ground_truth, "Landmark ground truth JSON");
  eval_cmd->add_option("--protocol", ev.protocol, "vpr | landmark");
  eval_cmd->add_option("--k", ev.ks, "Comma-separated recall cutoffs");
  eval_cmd->add_option("--threshold-m", ev.threshold_m, "Positive radius in meters");
  eval_cmd->add_option("--split", ev.split, "E | M | H | all");
  eval_cmd->add_option("--memory-budget", ev.memory_budget, "Bytes for search buffers");
  eval_cmd->add_option("--threads", ev.threads);
  eval_cmd->add_option("--method", ev.method);
  eval_cmd->add_option("--dataset", ev.dataset);
  eval_cmd->add_option("--out", ev.out, "Results CSV (stdout when omitted)");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench-knn", "Time blocked exact search");
  bench_cmd->add_option("--descriptors", bench.descriptors)->required();
  bench_cmd->add_option("--queries", bench.queries, "Use the first N rows as queries");
  bench_cmd->add_option("--query-file", bench.query_file, "Query descriptor file");
  bench_cmd->add_option("--k", bench.k);
  bench_cmd->add_option("--memory-budget", bench.memory_budget);
  bench_cmd->add_option("--threads", bench.threads);

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample-batches", "Dump sampled sub-batches as id lists");
  sample_cmd->add_option("--world", sample.world)->required();
  sample_cmd->add_option("--config", sample.config);
  sample_cmd->add_option("--iterations", sample.iterations);
  sample_cmd->add_option("--out", sample.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return run_gen_world(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*bench_cmd) return run_bench_knn(bench);
    if (*sample_cmd) return run_sample_batches(sample);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
