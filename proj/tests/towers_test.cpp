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

#include "doctest.h"
#include "mim/losses.hpp"
#include "mim/towers.hpp"
#include "test_util.hpp"

using namespace mim;
using mim::testing::bitwise_equal;
using mim::testing::random_tensor;

namespace {

TowerConfig small_config(int towers = 3) {
  TowerConfig c;
  c.image_feature_dim = 6;
  c.vocab_size = 20;
  c.max_tokens = 5;
  c.hidden_dims = {8, 7};
  c.embed_dim = 4;
  c.towers = towers;
  return c;
}

std::vector<TokenSeq> some_tokens() {
  return {{1, 2, 3}, {4, 0, 5, 6}, {7}, {8, 9, 10, 11, 12, 13, 14}};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mim_towers_" + name);
}

}  // namespace

TEST_CASE("init_towers: shapes, sharing and temperature") {
  const TowerParams m = init_towers(small_config(), 1);
  CHECK(m.params.at("image.l0.weight").value.rows() == 6);
  CHECK(m.params.at("image.l0.weight").value.cols() == 8);
  CHECK(m.params.at("image.l1.weight").value.cols() == 7);
  CHECK(m.params.at("text.embedding").value.rows() == 20);
  CHECK(m.params.at("text.embedding").value.row(kPadToken).isZero(0.0));
  CHECK(m.params.at("proj.query_image.weight").value.rows() == 7);
  CHECK(!m.has_query_text_projection());
  CHECK(!m.params.at("log_temperature").decay);
  CHECK(!m.params.at("image.l0.bias").decay);
  CHECK(m.params.at("image.l0.weight").decay);
  CHECK(std::abs(temperature(m) - 0.07) < 1e-12);
  CHECK(init_towers(small_config(4), 1).has_query_text_projection());
}

TEST_CASE("init_towers: deterministic per seed") {
  const TowerParams a = init_towers(small_config(), 5);
  const TowerParams b = init_towers(small_config(), 5);
  const TowerParams c = init_towers(small_config(), 6);
  bool any_diff = false;
  for (const auto& [name, p] : a.params) {
    CHECK(bitwise_equal(p.value, b.params.at(name).value));
    if (!bitwise_equal(p.value, c.params.at(name).value)) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("TowerConfig: validation names the field") {
  TowerConfig c = small_config();
  c.embed_dim = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("embed_dim"), ConfigError);
  c = small_config();
  c.towers = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("towers"), ConfigError);
  c = small_config();
  c.temperature_init = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("TowerConfig: json round trip") {
  TowerConfig c = small_config(4);
  c.temperature_lo = 0.02;
  nlohmann::json j = c;
  CHECK(j.at("temperature_bounds")[0].get<double>() == 0.02);
  CHECK(j.get<TowerConfig>() == c);
}

TEST_CASE("encoders: unit-norm rows for every role") {
  const TowerParams m = init_towers(small_config(4), 2);
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor(5, 6, rng);
  for (ImageRole role : {ImageRole::kQuery, ImageRole::kCatalog}) {
    const RowMatrix<float> e = encode_images(m, x, role);
    REQUIRE(e.rows() == 5);
    REQUIRE(e.cols() == 4);
    for (Index i = 0; i < 5; ++i) CHECK(std::abs(e.row(i).norm() - 1.0f) < 1e-6f);
  }
  const auto tokens = some_tokens();
  for (TextRole role : {TextRole::kProduct, TextRole::kQuery}) {
    const RowMatrix<float> e = encode_texts(m, tokens, role);
    REQUIRE(e.rows() == 4);
    for (Index i = 0; i < 4; ++i) CHECK(std::abs(e.row(i).norm() - 1.0f) < 1e-6f);
  }
}

TEST_CASE("encoders: image roles share the trunk but not the projection") {
  TowerParams m = init_towers(small_config(), 3);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(3, 6, rng);
  const Tensor trunk = image_trunk_activations(m, x);
  Tape tape;
  TowerGraph g(tape, m, false);
  const Tensor q = g.encode_images(x, ImageRole::kQuery).value();
  const Tensor c = g.encode_images(x, ImageRole::kCatalog).value();
  CHECK(!bitwise_equal(q, c));
  CHECK(bitwise_equal(g.image_trunk(x).value(), trunk));

  // Changing one projection leaves the other role untouched.
  m.params.at("proj.query_image.weight").value.array() += 0.5;
  CHECK(bitwise_equal(encode_images(m, x, ImageRole::kCatalog).cast<double>(),
                      c.cast<float>().cast<double>()));
  CHECK(!bitwise_equal(encode_images(m, x, ImageRole::kQuery).cast<double>(),
                       q.cast<float>().cast<double>()));
}

TEST_CASE("encoders: three-tower query text uses the product head") {
  const TowerParams m = init_towers(small_config(3), 4);
  const auto tokens = some_tokens();
  CHECK(encode_texts(m, tokens, TextRole::kQuery) ==
        encode_texts(m, tokens, TextRole::kProduct));
}

TEST_CASE("encoders: padding and truncation") {
  const TowerParams m = init_towers(small_config(), 5);
  const Vector<float> plain = encode_text(m, {3, 4}, TextRole::kProduct);
  const Vector<float> padded = encode_text(m, {3, 0, 4, 0}, TextRole::kProduct);
  CHECK((plain - padded).norm() < 1e-6f);
  // max_tokens is 5: the sixth token onward is dropped.
  CHECK(encode_text(m, {1, 2, 3, 4, 5, 6}, TextRole::kProduct) ==
        encode_text(m, {1, 2, 3, 4, 5, 19}, TextRole::kProduct));
  CHECK(prepare_tokens({1, 2, 3, 4, 5, 6, 7}, m.config).size() == 5);
}

TEST_CASE("encoders: invalid input") {
  const TowerParams m = init_towers(small_config(), 6);
  CHECK_THROWS_WITH_AS(encode_text(m, {1, 25}, TextRole::kProduct),
                       doctest::Contains("position 1"), ValidationError);
  CHECK_THROWS_AS(encode_text(m, {-3}, TextRole::kProduct), ValidationError);
  std::mt19937_64 rng(6);
  CHECK_THROWS_AS(encode_images(m, random_tensor(2, 5, rng), ImageRole::kQuery),
                  DimensionError);
  // An all-padding sequence pools to zero and projects to the bias; with a
  // zero bias the row has no direction.
  TowerParams z = m;
  z.params.at("text.l0.bias").value.setZero();
  z.params.at("proj.product_text.bias").value.setZero();
  CHECK_THROWS_AS(encode_text(z, {0, 0}, TextRole::kProduct), DegenerateInputError);
}

TEST_CASE("adapt_to_four_towers copies the product head") {
  TowerParams m = init_towers(small_config(3), 7);
  const auto tokens = some_tokens();
  const RowMatrix<float> before = encode_texts(m, tokens, TextRole::kProduct);
  adapt_to_four_towers(m);
  CHECK(m.config.towers == 4);
  CHECK(m.has_query_text_projection());
  CHECK(encode_texts(m, tokens, TextRole::kQuery) == before);
  CHECK(m.params.at("proj.query_text.weight").decay);
  CHECK(!m.params.at("proj.query_text.bias").decay);
}

TEST_CASE("gradient check through the towers and the four-tower loss") {
  TowerParams m = init_towers(small_config(4), 8);
  std::mt19937_64 rng(8);
  const Tensor qi = random_tensor(4, 6, rng);
  const Tensor ci = random_tensor(4, 6, rng);
  const auto tokens = some_tokens();
  const std::vector<TokenSeq> queries = {{2, 5}, {9}, {3, 3, 4}, {17, 18}};
  // Bring the temperature off its lower clamp so its gradient is active.
  m.params.at("log_temperature").value(0, 0) = std::log(0.3);
  LossFunction fn = [&](Tape& tape, ParamSet& ps) {
    (void)ps;
    TowerGraph g(tape, m);
    AlignedBatch b;
    b.query_image = g.encode_images(qi, ImageRole::kQuery);
    b.catalog_image = g.encode_images(ci, ImageRole::kCatalog);
    b.product_text = g.encode_texts(tokens, TextRole::kProduct);
    b.query_text = g.encode_texts(queries, TextRole::kQuery);
    b.product_ids = {0, 1, 2, 3};
    b.local_batch = 4;
    return loss_4tower(b, g.temperature()).total;
  };
  const GradCheckReport report = grad_check(fn, m.params, 1e-4);
  CHECK(report.entries.size() == m.params.size());
  for (const auto& f : report.failures()) {
    INFO(f);
    CHECK(false);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const TowerParams m = init_towers(small_config(4), 9);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path);
  const TowerParams back = load_checkpoint(path, m.config);
  CHECK(back.config == m.config);
  CHECK(back.params.names() == m.params.names());
  for (const auto& [name, p] : m.params) {
    CHECK(bitwise_equal(p.value, back.params.at(name).value));
    CHECK(p.decay == back.params.at(name).decay);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: three-tower into a four-tower config") {
  const TowerParams m = init_towers(small_config(3), 10);
  const auto path = temp_path("three.ckpt");
  save_checkpoint(m, path);
  const TowerParams four = load_checkpoint(path, small_config(4));
  CHECK(four.has_query_text_projection());
  CHECK(bitwise_equal(four.params.at("proj.query_text.weight").value,
                      m.params.at("proj.product_text.weight").value));
  std::filesystem::remove(path);

  const TowerParams m4 = init_towers(small_config(4), 10);
  save_checkpoint(m4, path);
  CHECK_THROWS_AS(load_checkpoint(path, small_config(3)), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: mismatches and corruption") {
  const TowerParams m = init_towers(small_config(), 11);
  const auto path = temp_path("bad.ckpt");
  save_checkpoint(m, path);

  TowerConfig other = small_config();
  other.embed_dim = 5;
  CHECK_THROWS_WITH_AS(load_checkpoint(path, other),
                       doctest::Contains("expected 5, found 4"), CheckpointError);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
  };
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       CheckpointError);
  write(bytes + "xx");
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"),
                       CheckpointError);
  write("NOPE" + bytes.substr(4));
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("MIMC"),
                       CheckpointError);
  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  write(wrong_version);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("found 7"),
                       CheckpointError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("temperature clamp") {
  TowerParams m = init_towers(small_config(), 12);
  m.params.at("log_temperature").value(0, 0) = std::log(5.0);
  clamp_temperature(m);
  CHECK(std::abs(temperature(m) - 1.0) < 1e-12);
  m.params.at("log_temperature").value(0, 0) = -20.0;
  clamp_temperature(m);
  CHECK(std::abs(temperature(m) - 0.01) < 1e-12);
}
