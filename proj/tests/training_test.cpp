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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mim/training.hpp"
#include "test_util.hpp"

using namespace mim;

namespace {

CorpusConfig small_corpus(std::uint64_t seed = 1) {
  CorpusConfig c;
  c.n_products = 20;
  c.n_distractors = 0;
  c.n_train_products = 64;
  c.seed = seed;
  return c;
}

TrainConfig small_train(TrainMode mode, std::uint64_t seed = 1) {
  TrainConfig t;
  t.mode = mode;
  t.batch = 8;
  t.shards = 2;
  t.steps = 6;
  t.seed = seed;
  t.towers.hidden_dims = {16, 16};
  t.towers.embed_dim = 8;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mim_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

void check_same_params(const TowerParams& a, const TowerParams& b) {
  REQUIRE(a.params.names() == b.params.names());
  for (const auto& [name, p] : a.params) {
    INFO(name);
    CHECK(mim::testing::bitwise_equal(p.value, b.params.at(name).value));
  }
}

void check_same_log(const TrainLog& a, const TrainLog& b) {
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].step == b.records[i].step);
    CHECK(a.records[i].total == b.records[i].total);
    CHECK(a.records[i].pairs == b.records[i].pairs);
    CHECK(a.records[i].temperature == b.records[i].temperature);
  }
}

}  // namespace

TEST_CASE("sample_batch: distinct products per pool") {
  const Corpus corpus = generate_corpus(small_corpus());
  const TrainingSet data(corpus);
  std::mt19937_64 rng(4);
  const auto shards = data.sample_batch(4, 2, rng);
  REQUIRE(shards.size() == 2);
  std::set<ProductId> ids;
  for (const RawBatch& b : shards) {
    CHECK(b.query_images.rows() == 4);
    CHECK(b.catalog_images.rows() == 4);
    CHECK(b.product_texts.size() == 4);
    CHECK(b.query_texts.size() == 4);
    for (ProductId id : b.product_ids) ids.insert(id);
  }
  CHECK(ids.size() == 8);

  // Sampled views belong to their product.
  const ProductRecord& first = corpus.train_products.front();
  const ProductId base = first.product_id;
  for (const RawBatch& b : shards) {
    for (std::size_t r = 0; r < b.product_ids.size(); ++r) {
      const ProductRecord& p = corpus.train_products[b.product_ids[r] - base];
      CHECK(b.product_texts[r] == p.product_text);
      CHECK(std::find(p.query_texts.begin(), p.query_texts.end(), b.query_texts[r]) !=
            p.query_texts.end());
      CHECK(b.catalog_images(static_cast<Index>(r), 0) == p.catalog_image[0]);
    }
  }
}

TEST_CASE("sample_batch: too few products and determinism") {
  CorpusConfig c = small_corpus();
  c.n_train_products = 4;
  const Corpus corpus = generate_corpus(c);
  const TrainingSet data(corpus);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(data.sample_batch(8, 1, rng), ConfigError);

  const Corpus big = generate_corpus(small_corpus());
  const TrainingSet full(big);
  std::mt19937_64 a(11), b(11);
  const auto x = full.sample_batch(5, 3, a);
  const auto y = full.sample_batch(5, 3, b);
  for (std::size_t s = 0; s < x.size(); ++s) {
    CHECK(x[s].product_ids == y[s].product_ids);
    CHECK(mim::testing::bitwise_equal(x[s].query_images, y[s].query_images));
    CHECK(x[s].query_texts == y[s].query_texts);
  }
}

TEST_CASE("property: every sampled pool has distinct products") {
  const Corpus corpus = generate_corpus(small_corpus());
  const TrainingSet data(corpus);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto shards = data.sample_batch(16, 4, rng);
    std::vector<ProductId> all;
    for (const RawBatch& b : shards) all.insert(all.end(), b.product_ids.begin(), b.product_ids.end());
    CHECK_NOTHROW(require_distinct_products(all));
  }
}

TEST_CASE("train: config validation names the field") {
  const Corpus corpus = generate_corpus(small_corpus());
  TrainConfig t = small_train(TrainMode::kThreeTower);
  t.steps = 0;
  CHECK_THROWS_WITH_AS(train(t, corpus), doctest::Contains("steps"), ConfigError);
  t = small_train(TrainMode::kThreeTower);
  t.batch = 64;
  t.shards = 2;
  CHECK_THROWS_WITH_AS(train(t, corpus), doctest::Contains("distinct"), ConfigError);
  CHECK_THROWS_AS(parse_train_mode("two_tower"), ConfigError);
  CHECK(parse_train_mode("image_only") == TrainMode::kImageOnly);
}

TEST_CASE("train: mode decides the logged pair losses") {
  const Corpus corpus = generate_corpus(small_corpus());
  const std::pair<TrainMode, std::size_t> cases[] = {
      {TrainMode::kImageOnly, 1}, {TrainMode::kThreeTower, 3}, {TrainMode::kFourTower, 6}};
  for (const auto& [mode, pairs] : cases) {
    const TrainResult r = train(small_train(mode), corpus);
    REQUIRE(r.log.records.size() == 6);
    for (std::size_t i = 0; i < r.log.records.size(); ++i) {
      const TrainRecord& rec = r.log.records[i];
      CHECK(rec.step == static_cast<Index>(i + 1));
      CHECK(rec.pairs.size() == pairs);
      CHECK(std::isfinite(rec.total));
      CHECK(rec.temperature >= 0.01);
      CHECK(rec.temperature <= 1.0);
    }
    CHECK(r.model.has_query_text_projection() == (mode == TrainMode::kFourTower));
  }
}

TEST_CASE("train: loss descends over 50 steps on the default training split") {
  CorpusConfig c;
  c.n_products = 10;
  c.n_distractors = 0;
  const Corpus corpus = generate_corpus(c);
  for (std::uint64_t seed : {0, 1, 2}) {
    TrainConfig t;
    t.mode = TrainMode::kThreeTower;
    t.steps = 50;
    t.seed = seed;
    const TrainResult r = train(t, corpus);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 10; ++i) {
      early += r.log.records[static_cast<std::size_t>(i)].total;
      late += r.log.records[static_cast<std::size_t>(40 + i)].total;
    }
    CHECK(late < early);
  }
}

TEST_CASE("train: temperature stays inside its bounds") {
  const Corpus corpus = generate_corpus(small_corpus());
  TrainConfig t = small_train(TrainMode::kThreeTower);
  t.lr = 0.05;
  t.steps = 30;
  t.towers.temperature_lo = 0.05;
  t.towers.temperature_hi = 0.08;
  const TrainResult r = train(t, corpus);
  for (const TrainRecord& rec : r.log.records) {
    CHECK(rec.temperature >= 0.05 - 1e-15);
    CHECK(rec.temperature <= 0.08 + 1e-15);
  }
  CHECK(temperature(r.model) >= 0.05 - 1e-15);
}

TEST_CASE("train: same config and seed give identical checkpoints and logs") {
  const Corpus corpus = generate_corpus(small_corpus());
  const auto d1 = temp_dir("det1");
  const auto d2 = temp_dir("det2");
  TrainConfig t = small_train(TrainMode::kFourTower, 3);
  t.checkpoint_every = 2;
  t.out_dir = d1;
  const TrainResult a = train(t, corpus);
  t.out_dir = d2;
  const TrainResult b = train(t, corpus);
  check_same_params(a.model, b.model);
  check_same_log(a.log, b.log);
  CHECK(slurp(d1 / "model.mimc") == slurp(d2 / "model.mimc"));
  CHECK(std::filesystem::exists(d1 / "checkpoint_2.mimc"));
  CHECK(std::filesystem::exists(d1 / "checkpoint_4.mimc"));
  CHECK(std::filesystem::exists(d1 / "train_log.jsonl"));
  check_same_params(load_checkpoint(d1 / "model.mimc"), a.model);

  // A different seed moves the weights.
  t.seed = 4;
  t.out_dir.clear();
  const TrainResult c = train(t, corpus);
  CHECK(!mim::testing::bitwise_equal(c.model.params.at("image.l0.weight").value,
                                     a.model.params.at("image.l0.weight").value));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("train log lines are JSON with the documented fields") {
  const Corpus corpus = generate_corpus(small_corpus());
  const auto dir = temp_dir("log");
  TrainConfig t = small_train(TrainMode::kThreeTower);
  t.out_dir = dir;
  train(t, corpus);
  std::ifstream in(dir / "train_log.jsonl");
  std::string line;
  Index last = 0;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<Index>() > last);
    last = j.at("step").get<Index>();
    CHECK(j.at("pairs").size() == 3);
    CHECK(j.at("pairs").contains("query_image/product_text"));
    CHECK(j.contains("temperature"));
    CHECK(j.contains("wall_time"));
    CHECK(std::isfinite(j.at("total").get<double>()));
    ++n;
  }
  CHECK(n == 6);
  std::filesystem::remove_all(dir);
}

TEST_CASE("finetune: from a three-tower model logs six pair losses") {
  const Corpus corpus = generate_corpus(small_corpus());
  const TrainResult base = train(small_train(TrainMode::kThreeTower), corpus);
  TrainConfig t = small_train(TrainMode::kThreeTower);
  t.finetune_lr_scale = 0.5;
  const TrainResult ft = finetune(base.model, t, corpus);
  CHECK(ft.model.has_query_text_projection());
  CHECK(ft.model.config.towers == 4);
  for (const TrainRecord& rec : ft.log.records) CHECK(rec.pairs.size() == 6);
  CHECK(ft.optimizer.learning_rate == doctest::Approx(t.lr * t.finetune_lr_scale));
  CHECK(ft.optimizer.learning_rate < t.lr);
}

TEST_CASE("finetune: from a random-init checkpoint equals fresh four-tower training") {
  const Corpus corpus = generate_corpus(small_corpus());
  TrainConfig t = small_train(TrainMode::kFourTower, 8);
  t.finetune_lr_scale = 1.0;
  TowerConfig four = t.towers;
  four.towers = 4;
  const auto dir = temp_dir("ftinit");
  std::filesystem::create_directories(dir);
  save_checkpoint(init_towers(four, t.seed), dir / "init.mimc");
  const TrainResult fresh = train(t, corpus);
  const TrainResult ft = finetune(dir / "init.mimc", t, corpus);
  check_same_log(fresh.log, ft.log);
  check_same_params(fresh.model, ft.model);
  std::filesystem::remove_all(dir);
}

TEST_CASE("finetune: incompatible checkpoint dims") {
  const Corpus corpus = generate_corpus(small_corpus());
  const auto dir = temp_dir("ftbad");
  std::filesystem::create_directories(dir);
  TowerConfig other = small_train(TrainMode::kThreeTower).towers;
  other.embed_dim = 5;
  save_checkpoint(init_towers(other, 0), dir / "base.mimc");
  CHECK_THROWS_AS(finetune(dir / "base.mimc", small_train(TrainMode::kThreeTower), corpus),
                  CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train: non-finite input aborts with a batch dump") {
  CorpusConfig c = small_corpus();
  c.n_train_products = 16;
  Corpus corpus = generate_corpus(c);
  for (QueryRecord& q : corpus.train_queries) q.query_image[0] = std::numeric_limits<float>::quiet_NaN();
  const auto dir = temp_dir("nan");
  TrainConfig t = small_train(TrainMode::kThreeTower);
  t.out_dir = dir;
  CHECK_THROWS_WITH_AS(train(t, corpus), doctest::Contains("step 1"), NumericError);
  CHECK(std::filesystem::exists(dir / "nonfinite_step_1.json"));
  const auto dump = nlohmann::json::parse(slurp(dir / "nonfinite_step_1.json"));
  CHECK(dump.at("shards").size() == 2);
  CHECK(dump.at("shards")[0].at("product_ids").size() == 8);
  std::filesystem::remove_all(dir);
}
