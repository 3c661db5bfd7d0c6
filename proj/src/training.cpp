// Copyright 2026 The MIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mim/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

namespace mim {

const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kImageOnly: return "image_only";
    case TrainMode::kThreeTower: return "three_tower";
    case TrainMode::kFourTower: return "four_tower";
  }
  return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
  for (TrainMode m : {TrainMode::kImageOnly, TrainMode::kThreeTower, TrainMode::kFourTower}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("mode must be image_only, three_tower or four_tower, got '" + name + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (steps < 1) fail("steps must be at least 1");
  if (batch < 1) fail("batch must be at least 1");
  if (shards < 1) fail("shards must be at least 1");
  if (batch * shards < 2) fail("batch * shards must be at least 2 for in-pool negatives");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(finetune_lr_scale > 0.0)) fail("finetune_lr_scale must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  towers.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"batch", c.batch},
                     {"shards", c.shards},
                     {"steps", c.steps},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"finetune_lr_scale", c.finetune_lr_scale},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"corpus", c.corpus.string()},
                     {"out_dir", c.out_dir.string()},
                     {"towers", c.towers}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  if (j.contains("mode")) d.mode = parse_train_mode(j.at("mode").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch", d.batch);
  get("shards", d.shards);
  get("steps", d.steps);
  get("lr", d.lr);
  get("weight_decay", d.weight_decay);
  get("finetune_lr_scale", d.finetune_lr_scale);
  get("seed", d.seed);
  get("checkpoint_every", d.checkpoint_every);
  if (j.contains("corpus")) d.corpus = j.at("corpus").get<std::string>();
  if (j.contains("out_dir")) d.out_dir = j.at("out_dir").get<std::string>();
  get("towers", d.towers);
  c = d;
}

void to_json(nlohmann::json& j, const TrainRecord& r) {
  nlohmann::json pairs = nlohmann::json::object();
  for (const auto& [k, v] : r.pairs) pairs[k] = v;
  j = nlohmann::json{{"step", r.step},
                     {"total", r.total},
                     {"pairs", pairs},
                     {"temperature", r.temperature},
                     {"wall_time", r.wall_time}};
}

void TrainLog::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open train log for writing: " + path.string());
  for (const TrainRecord& r : records) out << nlohmann::json(r).dump() << '\n';
  if (!out) throw IoError("failed writing train log: " + path.string());
}

// ---------------------------------------------------------------------------
// Sampling

TrainingSet::TrainingSet(const Corpus& corpus) {
  std::unordered_map<ProductId, std::size_t> slot;
  for (const ProductRecord& p : corpus.train_products) {
    slot.emplace(p.product_id, products_.size());
    products_.push_back(&p);
  }
  queries_.resize(products_.size());
  for (const QueryRecord& q : corpus.train_queries) {
    auto it = slot.find(q.product_id);
    if (it == slot.end()) {
      throw DataError("training query " + std::to_string(q.query_id) +
                      " refers to unknown product " + std::to_string(q.product_id));
    }
    queries_[it->second].push_back(&q);
  }
  for (std::size_t i = 0; i < products_.size(); ++i) {
    if (queries_[i].empty()) {
      throw DataError("training product " + std::to_string(products_[i]->product_id) +
                      " has no query images");
    }
    if (products_[i]->query_texts.empty()) {
      throw DataError("training product " + std::to_string(products_[i]->product_id) +
                      " has no query strings");
    }
  }
}

std::vector<RawBatch> TrainingSet::sample_batch(Index batch, Index shards,
                                                std::mt19937_64& rng) const {
  const Index pool = batch * shards;
  if (pool > size()) {
    throw ConfigError("batch * shards = " + std::to_string(pool) + " exceeds the " +
                      std::to_string(size()) + " distinct training products");
  }
  // Partial Fisher-Yates keeps the picks distinct.
  std::vector<std::size_t> order(products_.size());
  std::iota(order.begin(), order.end(), 0);
  for (Index i = 0; i < pool; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i),
                                                    order.size() - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[pick(rng)]);
  }

  const Index features = static_cast<Index>(products_.front()->catalog_image.size());
  std::vector<RawBatch> out(static_cast<std::size_t>(shards));
  for (Index s = 0; s < shards; ++s) {
    RawBatch& b = out[static_cast<std::size_t>(s)];
    b.query_images.resize(batch, features);
    b.catalog_images.resize(batch, features);
    for (Index r = 0; r < batch; ++r) {
      const std::size_t k = order[static_cast<std::size_t>(s * batch + r)];
      const ProductRecord& p = *products_[k];
      const auto& qs = queries_[k];
      std::uniform_int_distribution<std::size_t> qpick(0, qs.size() - 1);
      const QueryRecord& q = *qs[qpick(rng)];
      std::uniform_int_distribution<std::size_t> tpick(0, p.query_texts.size() - 1);
      const TokenSeq& qt = p.query_texts[tpick(rng)];
      for (Index c = 0; c < features; ++c) {
        b.catalog_images(r, c) = p.catalog_image[static_cast<std::size_t>(c)];
        b.query_images(r, c) = q.query_image[static_cast<std::size_t>(c)];
      }
      b.product_texts.push_back(p.product_text);
      b.query_texts.push_back(qt);
      b.product_ids.push_back(p.product_id);
    }
  }
  return out;
}

AlignedBatch encode_batch(TowerGraph& graph, const RawBatch& batch, TrainMode mode) {
  AlignedBatch a;
  a.product_ids = batch.product_ids;
  a.local_batch = static_cast<Index>(batch.product_ids.size());
  a.query_image = graph.encode_images(batch.query_images, ImageRole::kQuery);
  a.catalog_image = graph.encode_images(batch.catalog_images, ImageRole::kCatalog);
  if (mode != TrainMode::kImageOnly) {
    a.product_text = graph.encode_texts(batch.product_texts, TextRole::kProduct);
  }
  if (mode == TrainMode::kFourTower) {
    a.query_text = graph.encode_texts(batch.query_texts, TextRole::kQuery);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

// Training draws from its own stream so that model init and batch order do
// not interfere.
std::mt19937_64 batch_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x7472u};
  return std::mt19937_64(seq);
}

LossTerms mode_loss(const AlignedBatch& pool, const Var& tau, TrainMode mode) {
  switch (mode) {
    case TrainMode::kImageOnly: return loss_image_only(pool, tau);
    case TrainMode::kThreeTower: return loss_3tower(pool, tau);
    case TrainMode::kFourTower: return loss_4tower(pool, tau);
  }
  throw ContractError("unknown train mode");
}

std::filesystem::path write_dump(const std::filesystem::path& dir, Index step,
                                 const std::vector<RawBatch>& shards,
                                 const TowerParams& model, const std::string& what) {
  nlohmann::json j;
  j["step"] = step;
  j["error"] = what;
  j["temperature"] = temperature(model);
  nlohmann::json batches = nlohmann::json::array();
  for (const RawBatch& b : shards) {
    nlohmann::json s;
    s["product_ids"] = b.product_ids;
    s["product_texts"] = b.product_texts;
    s["query_texts"] = b.query_texts;
    auto rows = [](const Tensor& t) {
      nlohmann::json out = nlohmann::json::array();
      for (Index r = 0; r < t.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Index c = 0; c < t.cols(); ++c) {
          const double v = t(r, c);
          row.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v)));
        }
        out.push_back(row);
      }
      return out;
    };
    s["query_images"] = rows(b.query_images);
    s["catalog_images"] = rows(b.catalog_images);
    batches.push_back(s);
  }
  j["shards"] = batches;
  std::filesystem::path p = dir.empty() ? std::filesystem::temp_directory_path() : dir;
  p /= "nonfinite_step_" + std::to_string(step) + ".json";
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << j.dump(1) << '\n';
  return p;
}

}  // namespace

TrainResult train_from(TowerParams model, const TrainConfig& config, TrainMode mode,
                       double lr, const Corpus& corpus, std::ostream* progress) {
  config.validate();
  if (mode == TrainMode::kFourTower && !model.has_query_text_projection()) {
    throw ConfigError("four_tower mode needs a four-tower model");
  }
  const TrainingSet data(corpus);
  if (data.size() == 0) throw ConfigError("corpus has no training split");
  if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir);

  TrainResult result;
  result.optimizer.learning_rate = lr;
  result.optimizer.weight_decay = config.weight_decay;
  std::mt19937_64 rng = batch_rng(config.seed);
  const auto start = std::chrono::steady_clock::now();

  for (Index step = 1; step <= config.steps; ++step) {
    const std::vector<RawBatch> raw = data.sample_batch(config.batch, config.shards, rng);
    TrainRecord rec;
    rec.step = step;
    try {
      Tape tape;
      TowerGraph graph(tape, model);
      std::vector<AlignedBatch> shards;
      shards.reserve(raw.size());
      for (const RawBatch& b : raw) shards.push_back(encode_batch(graph, b, mode));
      const AlignedBatch pool = gather_shards(shards);
      const Var tau = graph.temperature();
      const LossTerms terms = mode_loss(pool, tau, mode);
      rec.total = terms.total.scalar();
      for (const PairLoss& p : terms.pairs) rec.pairs.emplace_back(p.key(), p.loss.scalar());
      if (!std::isfinite(rec.total)) throw NumericError("loss is not finite");
      rec.temperature = tau.scalar();
      tape.backward(terms.total);
    } catch (const NumericError& e) {
      const auto dump = write_dump(config.out_dir, step, raw, model, e.what());
      throw NumericError("non-finite value at step " + std::to_string(step) + " (" +
                         e.what() + "); batch dumped to " + dump.string());
    }
    adam_step(result.optimizer, model.params);
    clamp_temperature(model);
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (progress != nullptr && (step == 1 || step % 50 == 0 || step == config.steps)) {
      *progress << to_string(mode) << " step " << step << "/" << config.steps
                << " loss " << rec.total << " tau " << rec.temperature << '\n';
    }
    result.log.records.push_back(std::move(rec));
    if (!config.out_dir.empty() && config.checkpoint_every > 0 &&
        step % config.checkpoint_every == 0 && step != config.steps) {
      save_checkpoint(model, config.out_dir / ("checkpoint_" + std::to_string(step) + ".mimc"));
    }
  }

  if (!config.out_dir.empty()) {
    save_checkpoint(model, config.out_dir / "model.mimc");
    result.log.write(config.out_dir / "train_log.jsonl");
  }
  result.model = std::move(model);
  return result;
}

TrainResult train(const TrainConfig& config, const Corpus& corpus, std::ostream* progress) {
  config.validate();
  TowerConfig towers = config.towers;
  if (config.mode == TrainMode::kFourTower) towers.towers = 4;
  return train_from(init_towers(towers, config.seed), config, config.mode, config.lr, corpus,
                    progress);
}

TrainResult finetune(const TowerParams& base, const TrainConfig& config, const Corpus& corpus,
                     std::ostream* progress) {
  TowerParams model = base;
  if (!model.config.same_shapes(config.towers)) {
    throw CheckpointError("base model shapes do not match the tower config");
  }
  adapt_to_four_towers(model);
  TrainConfig c = config;
  c.mode = TrainMode::kFourTower;
  c.towers = model.config;
  return train_from(std::move(model), c, TrainMode::kFourTower, c.lr * c.finetune_lr_scale,
                    corpus, progress);
}

TrainResult finetune(const std::filesystem::path& base_checkpoint, const TrainConfig& config,
                     const Corpus& corpus, std::ostream* progress) {
  TowerConfig expected = config.towers;
  expected.towers = 4;
  return finetune(load_checkpoint(base_checkpoint, expected), config, corpus, progress);
}

}  // namespace mim
