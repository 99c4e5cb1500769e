#include "placeret/trainer.hpp"

#include "placeret/knn.hpp"
#include "placeret/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

namespace placeret {

std::string_view to_string(AccumulationMode mode) {
  return mode == AccumulationMode::Fused ? "fused" : "per-sub-batch";
}

AccumulationMode parse_accumulation_mode(std::string_view name) {
  if (name == "fused") return AccumulationMode::Fused;
  if (name == "per-sub-batch") return AccumulationMode::PerSubBatch;
  throw Error(ErrorKind::InvalidInput, "unknown accumulation mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidInput, "train config: " + m); };
  if (iterations < 1) fail("iterations must be >= 1");
  // zero is accepted as a frozen-table control run
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be > 0");
  if (sources.empty()) fail("at least one source is required");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (clique_refresh < 1) fail("clique_refresh must be >= 1");
  if (clique_size < 2) fail("clique_size must be >= 2");
  ms_params.validate();
}

std::uint64_t config_fingerprint(const TrainConfig& c) {
  std::ostringstream s;
  s.precision(17);
  s << c.iterations << '|' << c.learning_rate << '|' << c.weight_decay << '|' << c.adam_beta1 << '|'
    << c.adam_beta2 << '|' << c.adam_epsilon << '|' << c.ms_params.alpha << '|' << c.ms_params.beta << '|'
    << c.ms_params.lambda << '|' << c.ms_params.epsilon << '|' << c.seed << '|'
    << to_string(c.accumulation_mode) << '|' << c.freeze_sampler_seed << '|' << c.eval_every << '|'
    << c.eigenplaces.cell_size << '|' << c.eigenplaces.focal_distance << '|'
    << c.eigenplaces.facing_tolerance << '|' << c.eigenplaces.max_retries << '|' << c.clique_refresh << '|'
    << c.clique_size << '|' << c.clique_similarity_floor << '|' << c.clique_geo_floor;
  for (Source src : c.sources) s << '|' << to_string(src);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s.str()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::size_t sub_batch_transient_bytes(std::size_t rows, std::size_t dim) {
  return (2 * rows * dim + 2 * rows * rows) * sizeof(double);
}

namespace {

/// Intermediate buffers of one sub-batch's forward/backward pass.
struct Workspace {
  Eigen::MatrixXd embeddings;
  Eigen::MatrixXd similarity;
  Eigen::MatrixXd similarity_grad;
  Eigen::MatrixXd grad;
  std::vector<ImageId> ids;
  double loss = 0.0;
  TrackedBytes tracked;

  Workspace(const SubBatch& batch, const EmbeddingTable& table, ByteAccountant& accountant)
      : ids(batch.image_ids()) {
    const auto n = static_cast<Eigen::Index>(ids.size());
    const Eigen::Index d = table.dim();
    tracked = TrackedBytes(&accountant, sub_batch_transient_bytes(ids.size(), static_cast<std::size_t>(d)));
    embeddings.resize(n, d);
    similarity.resize(n, n);
    similarity_grad.resize(n, n);
    grad.resize(n, d);
  }

  void run(const SubBatch& batch, const EmbeddingTable& table, const MsParams& params) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      embeddings.row(static_cast<Eigen::Index>(i)) = table.values().row(table.row(ids[i]));
    }
    similarity.noalias() = pairwise_similarity(embeddings);
    const auto labels = batch.labels();
    const PairSets pairs = mine_pairs(similarity, labels, params);
    loss = ms_loss(similarity, pairs, params);
    similarity_grad.noalias() = ms_loss_similarity_grad(similarity, pairs, params);
    grad.noalias() = (similarity_grad + similarity_grad.transpose()) * embeddings;
  }

  void scatter_into(Eigen::MatrixXd& accumulator, const EmbeddingTable& table) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      accumulator.row(table.row(ids[i])) += grad.row(static_cast<Eigen::Index>(i));
    }
  }
};

}  // namespace

AccumulatedGradient accumulate_gradients(std::span<const SubBatch> sub_batches, const EmbeddingTable& table,
                                         const MsParams& params, AccumulationMode mode) {
  for (const auto& b : sub_batches) {
    for (ImageId id : b.image_ids()) (void)table.row(id);
  }
  AccumulatedGradient out;
  out.gradient = Eigen::MatrixXd::Zero(table.size(), table.dim());
  ByteAccountant accountant;

  if (mode == AccumulationMode::PerSubBatch) {
    for (const auto& batch : sub_batches) {
      Workspace ws(batch, table, accountant);
      ws.run(batch, table, params);
      ws.scatter_into(out.gradient, table);
      out.losses.push_back(ws.loss);
    }
  } else {
    std::vector<Workspace> all;
    all.reserve(sub_batches.size());
    for (const auto& batch : sub_batches) all.emplace_back(batch, table, accountant);
    for (std::size_t b = 0; b < sub_batches.size(); ++b) all[b].run(sub_batches[b], table, params);
    for (const auto& ws : all) {
      ws.scatter_into(out.gradient, table);
      out.losses.push_back(ws.loss);
    }
  }
  for (double l : out.losses) out.total_loss += l;
  out.peak_transient_bytes = accountant.peak();
  return out;
}

void optimizer_step(EmbeddingTable& table, Eigen::MatrixXd& gradient, const TrainConfig& config,
                    int iteration) {
  if (gradient.rows() != table.size() || gradient.cols() != table.dim()) {
    throw Error(ErrorKind::InvalidInput, "gradient shape does not match the embedding table");
  }
  if (!gradient.allFinite()) {
    throw Error(ErrorKind::TrainingDivergence,
                "non-finite gradient at iteration " + std::to_string(iteration));
  }
  table.step += 1;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double t = static_cast<double>(table.step);
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);

  table.first_moment = b1 * table.first_moment + (1.0 - b1) * gradient;
  table.second_moment = b2 * table.second_moment + (1.0 - b2) * gradient.cwiseProduct(gradient);

  Eigen::MatrixXd& p = table.values();
  p *= 1.0 - config.learning_rate * config.weight_decay;
  const Eigen::ArrayXXd m_hat = table.first_moment.array() / correction1;
  const Eigen::ArrayXXd v_hat = table.second_moment.array() / correction2;
  p.array() -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);

  if (!p.allFinite()) {
    throw Error(ErrorKind::TrainingDivergence,
                "non-finite parameters after iteration " + std::to_string(iteration));
  }
  gradient.setZero();
}

QuerySplit make_query_split(const World& world, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5eed));
  QuerySplit split;
  std::set<ImageId> queries;
  for (const auto& [_, members] : world.classes()) {
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    queries.insert(members[pick(rng)]);
  }
  for (const auto& r : world.images) {
    (queries.count(r.id) ? split.queries : split.database).push_back(r.id);
  }
  return split;
}

double evaluate_recall_at_1(const World& world, const EmbeddingTable& table, const QuerySplit& split) {
  RowMatrixF db(static_cast<Eigen::Index>(split.database.size()), table.dim());
  VprGroundTruth gt;
  for (std::size_t i = 0; i < split.database.size(); ++i) {
    db.row(static_cast<Eigen::Index>(i)) = table.values().row(table.row(split.database[i])).cast<float>();
    gt.database_poses.emplace(split.database[i], world.image(split.database[i]).pose);
  }
  Eigen::MatrixXd q(static_cast<Eigen::Index>(split.queries.size()), table.dim());
  for (std::size_t i = 0; i < split.queries.size(); ++i) {
    q.row(static_cast<Eigen::Index>(i)) = table.values().row(table.row(split.queries[i]));
    gt.query_poses.push_back(world.image(split.queries[i]).pose);
  }
  const auto store = DescriptorStore::in_memory(std::move(db), split.database);
  SearchOptions opts;
  opts.k = 1;
  const auto results = search(store, q, opts);
  const std::size_t ks[] = {1};
  return recall_at_k(results, gt, ks).recall.at(1);
}

IterationSampler::IterationSampler(const World& world, const TrainConfig& config)
    : world_(world), config_(config) {
  EigenPlacesOptions eo = config.eigenplaces;
  // cells must follow the world's own grid so that one place is one cell
  eo.cell_size = world.config.cell_size;
  partition_ = partition_eigenplaces(world.images, eo);
  classes_ = world.classes();
  for (const auto& [scene, members] : world.scenes) scenes_[scene] = members;
  poses_ = world.poses();
  for (const auto& [c, members] : classes_) {
    Eigen::Vector2d sum = Eigen::Vector2d::Zero();
    for (ImageId id : members) sum += poses_.at(id).position();
    sum /= static_cast<double>(members.size());
    class_centroids_.emplace(c, PlanarPose(sum.x(), sum.y()));
  }
}

void IterationSampler::refresh_cliques(const EmbeddingTable& table) {
  std::map<ClassId, Descriptor> descriptors;
  for (const auto& [c, members] : classes_) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(table.dim());
    for (ImageId id : members) mean += table.values().row(table.row(id)).transpose();
    descriptors.emplace(c, Descriptor(std::move(mean)));
  }
  plan_ = mine_cliques(descriptors, class_centroids_, config_.clique_similarity_floor,
                       config_.clique_geo_floor, config_.clique_size);
}

std::vector<SubBatch> IterationSampler::sample(int iteration, const EmbeddingTable& table) {
  const bool wants_cliques = std::find(config_.sources.begin(), config_.sources.end(), Source::Msls) !=
                             config_.sources.end();
  if (wants_cliques && iteration % config_.clique_refresh == 0) refresh_cliques(table);

  const std::uint64_t base = config_.freeze_sampler_seed ? 0 : static_cast<std::uint64_t>(iteration) + 1;
  std::vector<SubBatch> out;
  for (std::size_t slot = 0; slot < kIterationSources.size(); ++slot) {
    const Source src = kIterationSources[slot];
    if (std::find(config_.sources.begin(), config_.sources.end(), src) == config_.sources.end()) continue;
    Rng rng(mix_seed(config_.seed, base * 16 + slot));
    switch (src) {
      case Source::SfxlFrontal:
        out.push_back(sample_eigenplaces_batch(partition_, Facing::Frontal, rng));
        break;
      case Source::SfxlLateral:
        out.push_back(sample_eigenplaces_batch(partition_, Facing::Lateral, rng));
        break;
      case Source::GsvCities:
        out.push_back(sample_gsv_batch(classes_, rng));
        break;
      case Source::Msls:
        out.push_back(sample_clique_batch(plan_, classes_, rng));
        break;
      case Source::MegaScenes:
        out.push_back(sample_scene_batch(scenes_, covisibility_overlap(world_.covisibility),
                                         Source::MegaScenes, rng));
        break;
      case Source::ScanNet:
        out.push_back(sample_scene_batch(scenes_, pose_overlap(poses_), Source::ScanNet, rng));
        break;
    }
  }
  return out;
}

TrainResult train(const World& world, const TrainConfig& config) {
  config.validate();
  std::vector<ImageId> ids;
  for (const auto& r : world.images) ids.push_back(r.id);

  TrainResult result;
  result.table = EmbeddingTable::random(ids, world.config.embed_dim, mix_seed(config.seed, 0x7ab1e));
  result.initial_table = result.table;

  IterationSampler sampler(world, config);
  const QuerySplit split = make_query_split(world, config.seed);
  result.evaluations.push_back({0, evaluate_recall_at_1(world, result.table, split)});

  Eigen::MatrixXd before;
  for (int it = 0; it < config.iterations; ++it) {
    try {
      const auto batches = sampler.sample(it, result.table);
      auto acc = accumulate_gradients(batches, result.table, config.ms_params, config.accumulation_mode);

      HistoryRow row;
      row.iteration = it;
      row.per_source.fill(std::numeric_limits<double>::quiet_NaN());
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto slot = static_cast<std::size_t>(
            std::find(kIterationSources.begin(), kIterationSources.end(), batches[b].source()) -
            kIterationSources.begin());
        row.per_source[slot] = acc.losses[b];
      }
      row.total = acc.total_loss;
      result.history.push_back(row);

      before = result.table.values();
      optimizer_step(result.table, acc.gradient, config, it);
      // project moved rows back onto the unit sphere
      for (Eigen::Index r = 0; r < result.table.size(); ++r) {
        if (result.table.values().row(r) != before.row(r)) {
          const double norm = result.table.values().row(r).norm();
          if (!(norm > 0.0)) {
            throw Error(ErrorKind::TrainingDivergence, "embedding row collapsed to zero");
          }
          result.table.values().row(r) /= norm;
        }
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "iteration " + std::to_string(it) + ": " + e.what());
    }
    const int done = it + 1;
    if (done % config.eval_every == 0 || done == config.iterations) {
      result.evaluations.push_back({done, evaluate_recall_at_1(world, result.table, split)});
    }
  }
  return result;
}

}  // namespace placeret
