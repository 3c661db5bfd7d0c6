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

// Training loop: sample distinct products, encode per shard, gather the
// pool, apply the mode's loss, step Adam and clamp the temperature.

#ifndef MIM_TRAINING_HPP
#define MIM_TRAINING_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "mim/losses.hpp"
#include "mim/synthdata.hpp"
#include "mim/towers.hpp"

namespace mim {

enum class TrainMode { kImageOnly, kThreeTower, kFourTower };

const char* to_string(TrainMode mode);
/// "image_only", "three_tower" or "four_tower"; ConfigError otherwise.
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  TrainMode mode = TrainMode::kThreeTower;
  Index batch = 64;
  Index shards = 4;
  Index steps = 1000;
  double lr = 1e-3;
  double weight_decay = 0.2;
  /// Multiplies lr when fine-tuning a three-tower checkpoint.
  double finetune_lr_scale = 1.0;
  std::uint64_t seed = 0;
  /// 0 writes only the final checkpoint.
  Index checkpoint_every = 0;
  std::filesystem::path corpus;
  /// Checkpoints, train_log.jsonl and failure dumps go here; empty keeps
  /// everything in memory.
  std::filesystem::path out_dir;
  TowerConfig towers;

  /// Throws ConfigError naming the field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainRecord {
  Index step = 0;
  double total = 0.0;
  std::vector<std::pair<std::string, double>> pairs;
  double temperature = 0.0;
  double wall_time = 0.0;
};

void to_json(nlohmann::json& j, const TrainRecord& r);

struct TrainLog {
  std::vector<TrainRecord> records;

  /// One JSON object per line.
  void write(const std::filesystem::path& path) const;
};

/// Raw inputs of one shard, index-aligned.
struct RawBatch {
  Tensor query_images;
  Tensor catalog_images;
  std::vector<TokenSeq> product_texts;
  std::vector<TokenSeq> query_texts;
  std::vector<ProductId> product_ids;
};

/// The training split with per-product query lookup.
class TrainingSet {
 public:
  explicit TrainingSet(const Corpus& corpus);

  Index size() const { return static_cast<Index>(products_.size()); }

  /// B * N_g samples with pairwise-distinct product ids, split into N_g
  /// shards of B. Each sample takes one of its product's query images and
  /// one of its query strings, uniformly. Throws ConfigError when the split
  /// has fewer than B * N_g products.
  std::vector<RawBatch> sample_batch(Index batch, Index shards,
                                     std::mt19937_64& rng) const;

 private:
  std::vector<const ProductRecord*> products_;
  std::vector<std::vector<const QueryRecord*>> queries_;
};

struct TrainResult {
  TowerParams model;
  TrainLog log;
  OptimizerState optimizer;
};

/// Trains from init_towers(config.towers, config.seed).
TrainResult train(const TrainConfig& config, const Corpus& corpus,
                  std::ostream* progress = nullptr);

/// Continues from `base` in four-tower mode with lr scaled by
/// finetune_lr_scale. A three-tower base gets its query-text head copied
/// from the product-text head.
TrainResult finetune(const TowerParams& base, const TrainConfig& config,
                     const Corpus& corpus, std::ostream* progress = nullptr);
TrainResult finetune(const std::filesystem::path& base_checkpoint,
                     const TrainConfig& config, const Corpus& corpus,
                     std::ostream* progress = nullptr);

/// Runs training steps on an existing model; train and finetune delegate
/// here. `mode` overrides config.mode.
TrainResult train_from(TowerParams model, const TrainConfig& config,
                       TrainMode mode, double lr, const Corpus& corpus,
                       std::ostream* progress);

/// Encodes one shard into aligned embeddings for `mode`.
AlignedBatch encode_batch(TowerGraph& graph, const RawBatch& batch, TrainMode mode);

}  // namespace mim

#endif  // MIM_TRAINING_HPP
