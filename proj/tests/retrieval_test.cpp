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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mim/retrieval.hpp"

using namespace mim;

namespace {

RowMatrix<float> random_unit(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  RowMatrix<float> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  for (Index r = 0; r < rows; ++r) m.row(r).normalize();
  return m;
}

Vector<float> unit(std::initializer_list<float> v) {
  Vector<float> x(static_cast<Index>(v.size()));
  Index i = 0;
  for (float f : v) x(i++) = f;
  return x.normalized();
}

std::vector<ProductId> iota_ids(std::size_t n, ProductId start = 0) {
  std::vector<ProductId> ids(n);
  std::iota(ids.begin(), ids.end(), start);
  return ids;
}

// Brute force: score everything, full sort, truncate.
SearchResult oracle(const RetrievalIndex& index, const Vector<float>& q, Index k) {
  SearchResult all;
  for (Index r = 0; r < index.size(); ++r) {
    all.push_back({index.product_ids()[static_cast<std::size_t>(r)],
                   score(index.fused().row(r).data(), q.data(), index.dim())});
  }
  std::stable_sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.product_id < b.product_id;
  });
  if (static_cast<Index>(all.size()) > k) all.resize(static_cast<std::size_t>(k));
  return all;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mim_retrieval_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("fuse: identities at the ends") {
  std::mt19937_64 rng(1);
  const RowMatrix<float> a = random_unit(5, 8, rng);
  const RowMatrix<float> b = random_unit(5, 8, rng);
  CHECK(fuse(a, b, 1.0) == a);
  CHECK(fuse(a, b, 0.0) == b);
}

TEST_CASE("fuse: orthogonal inputs at one half") {
  const Vector<double> u = Vector<double>::Unit(3, 0);
  const Vector<double> v = Vector<double>::Unit(3, 1);
  const Vector<double> f = fuse(u, v, 0.5);
  CHECK(std::abs(f.dot(u) - 1.0 / std::sqrt(2.0)) < 1e-12);
  CHECK(std::abs(f.dot(v) - 0.707107) < 1e-6);
  CHECK(std::abs(f.norm() - 1.0) < 1e-12);
}

TEST_CASE("fuse: errors") {
  const Vector<float> u = unit({1, 0, 0});
  CHECK_THROWS_AS(fuse(u, u, 1.5), ValidationError);
  CHECK_THROWS_AS(fuse(u, u, -0.1), ValidationError);
  CHECK_THROWS_AS(fuse(Vector<float>(-u), u, 0.5), DegenerateInputError);
  Vector<float> big = u * 3.0f;
  CHECK_THROWS_AS(fuse(big, u, 0.5), ValidationError);
}

TEST_CASE("property: fused rows are unit norm") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> w(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const RowMatrix<float> a = random_unit(20, 16, rng);
    const RowMatrix<float> b = random_unit(20, 16, rng);
    const RowMatrix<float> f = fuse(a, b, w(rng));
    for (Index r = 0; r < f.rows(); ++r) CHECK(std::abs(f.row(r).norm() - 1.0f) < 1e-6f);
  }
}

TEST_CASE("build_index: hand-made products at w_c = 0.5") {
  RowMatrix<float> image(3, 2), text(3, 2);
  image << 1, 0, 0, 1, 1, 0;
  text << 0, 1, 0, 1, -1, 0;
  text.row(2) = Eigen::RowVector2f(0.6f, 0.8f);
  const RetrievalIndex index = build_index(iota_ids(3, 10), image, text, 0.5);
  const float h = 1.0f / std::sqrt(2.0f);
  CHECK((index.fused().row(0) - Eigen::RowVector2f(h, h)).norm() < 1e-6f);
  CHECK((index.fused().row(1) - Eigen::RowVector2f(0, 1)).norm() < 1e-6f);
  const Eigen::RowVector2f expect = Eigen::RowVector2f(1.6f, 0.8f).normalized();
  CHECK((index.fused().row(2) - expect).norm() < 1e-6f);
  CHECK(build_index(iota_ids(3), image, text, 1.0).fused() == image);
}

TEST_CASE("build_index: duplicates and empty") {
  std::mt19937_64 rng(3);
  const RowMatrix<float> a = random_unit(2, 4, rng);
  CHECK_THROWS_AS(build_index({5, 5}, a, a), DataError);
  const RetrievalIndex empty = build_index({}, RowMatrix<float>(0, 4), RowMatrix<float>(0, 4));
  CHECK(empty.size() == 0);
  CHECK(search(empty, unit({1, 0, 0, 0}), 5).empty());
}

TEST_CASE("search: ranked order, self-match and tie-break") {
  // Similarities 0.9, 0.5, 0.1 against the query e0.
  RowMatrix<float> img(3, 2);
  auto at = [](float c) { return Eigen::RowVector2f(c, std::sqrt(1 - c * c)); };
  img.row(0) = at(0.5f);
  img.row(1) = at(0.1f);
  img.row(2) = at(0.9f);
  const RetrievalIndex index = build_index({1, 2, 3}, img, img, 1.0);
  const SearchResult top2 = search(index, unit({1, 0}), 2);
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].product_id == 3);
  CHECK(top2[1].product_id == 1);
  CHECK(std::abs(top2[0].score - 0.9) < 1e-6);
  CHECK(std::abs(top2[1].score - 0.5) < 1e-6);

  const SearchResult self = search(index, img.row(1).transpose(), 1);
  CHECK(self[0].product_id == 2);
  CHECK(std::abs(self[0].score - 1.0) < 1e-6);

  RowMatrix<float> twin(3, 2);
  twin << 1, 0, 1, 0, 0, 1;
  const RetrievalIndex tied = build_index({7, 3, 5}, twin, twin, 1.0);
  const SearchResult r = search(tied, unit({1, 0}), 3);
  CHECK(r[0].product_id == 3);
  CHECK(r[1].product_id == 7);
  CHECK(r[0].score == r[1].score);
  CHECK(r[2].product_id == 5);
  CHECK_THROWS_AS(search(tied, unit({1, 0}), 0), ValidationError);
}

TEST_CASE("property: search equals the brute-force oracle") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<Index> size(1, 600), kk(1, 50), dim(2, 12);
  for (int trial = 0; trial < 60; ++trial) {
    const Index n = size(rng), d = dim(rng), k = kk(rng);
    RowMatrix<float> img = random_unit(n, d, rng);
    // Plant exact duplicates so ties occur.
    for (Index r = 1; r < n; r += 7) img.row(r) = img.row(r - 1);
    std::vector<ProductId> ids = iota_ids(static_cast<std::size_t>(n), 100);
    std::shuffle(ids.begin(), ids.end(), rng);
    const RetrievalIndex index = build_index(ids, img, random_unit(n, d, rng), 0.7);
    const Vector<float> q = random_unit(1, d, rng).row(0).transpose();
    CHECK(search(index, q, k) == oracle(index, q, k));
  }
}

TEST_CASE("evaluate: hand-counted recall") {
  const RowMatrix<float> basis = RowMatrix<float>::Identity(12, 12);
  EvalInputs in;
  in.index_ids = iota_ids(12);
  in.index_image = basis;
  in.index_text = basis;
  in.query_truth = {0, 1, 2, 3};
  in.query_image = RowMatrix<float>::Zero(4, 12);
  in.query_image(0, 0) = 1;
  in.query_image(1, 1) = 1;
  in.query_image.row(2) << 3, 3, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0;  // rank 3
  in.query_image.row(3) << 2, 2, 2, 1, 2, 2, 2, 2, 2, 0, 0, 0;  // rank 8
  for (Index r = 0; r < 4; ++r) in.query_image.row(r).normalize();
  in.query_text = in.query_image;
  const EvalReport rep = evaluate(in, Task::kImageToImage);
  REQUIRE(rep.cells.size() == 1);
  CHECK(rep.best.recall_at_1 == 0.5);
  CHECK(rep.best.recall_at_5 == 0.75);
  CHECK(rep.best.recall_at_10 == 1.0);
  CHECK(rep.query_count == 4);
  CHECK(rep.index_size == 12);
  CHECK_THROWS_AS(evaluate(in, Task::kImageToImage, {{1.0, 1.0}}), ConfigError);
}

TEST_CASE("evaluate: oracle weights give perfect recall") {
  std::mt19937_64 rng(5);
  EvalInputs in;
  in.index_ids = iota_ids(50);
  in.index_image = random_unit(50, 8, rng);
  in.index_text = random_unit(50, 8, rng);
  in.query_truth = iota_ids(50);
  in.query_image = in.index_image;
  in.query_text = in.index_text;
  const EvalReport rep = evaluate(in, Task::kMultimodal, default_grid(Task::kMultimodal, true));
  CHECK(rep.cells.size() == 441);
  bool found = false;
  for (const RecallCell& c : rep.cells) {
    CHECK(c.recall_at_1 <= c.recall_at_5);
    CHECK(c.recall_at_5 <= c.recall_at_10);
    CHECK(c.recall_at_10 <= 1.0);
    if (c.weights.w_q == c.weights.w_c) {
      CHECK(c.recall_at_1 == 1.0);
      found = true;
    }
  }
  CHECK(found);
  CHECK(rep.best.recall_at_1 == 1.0);
  // Ties resolve to the smallest weights.
  CHECK(rep.best.weights == WeightCell{0.0, 0.0});
}

TEST_CASE("evaluate: task reductions and determinism") {
  std::mt19937_64 rng(6);
  EvalInputs in;
  in.index_ids = iota_ids(300, 1000);
  in.index_image = random_unit(300, 6, rng);
  in.index_text = random_unit(300, 6, rng);
  for (int i = 0; i < 200; ++i) in.query_truth.push_back(1000 + static_cast<ProductId>(i));
  in.query_image = (in.index_image.topRows(200) + 0.8f * random_unit(200, 6, rng)).rowwise().normalized();
  in.query_text = (in.index_text.topRows(200) + 0.8f * random_unit(200, 6, rng)).rowwise().normalized();

  const EvalReport i2m = evaluate(in, Task::kImageToMultimodal, {{0.2, 0.5}, {0.7, 0.5}});
  REQUIRE(i2m.cells.size() == 1);
  CHECK(i2m.cells[0].weights == WeightCell{1.0, 0.5});
  const EvalReport mm = evaluate(in, Task::kMultimodal);
  CHECK(mm.cells.size() == 21);
  const RecallCell& last = mm.cells.back();
  CHECK(last.weights == WeightCell{1.0, 0.5});
  CHECK(last.recall_at_1 == i2m.best.recall_at_1);
  CHECK(last.recall_at_5 == i2m.best.recall_at_5);
  CHECK(last.recall_at_10 == i2m.best.recall_at_10);
  for (const RecallCell& c : mm.cells) {
    CHECK(c.recall_at_1 <= mm.best.recall_at_1);
  }
  CHECK(nlohmann::json(evaluate(in, Task::kMultimodal)).dump() == nlohmann::json(mm).dump());

  const EvalReport back = nlohmann::json(mm).get<EvalReport>();
  CHECK(nlohmann::json(back).dump() == nlohmann::json(mm).dump());

  const EvalReport i2i = evaluate(in, Task::kImageToImage);
  CHECK(i2i.best.weights == WeightCell{1.0, 1.0});
  CHECK_THROWS_AS(evaluate(in, Task::kMultimodal, {{1.2, 0.5}}), ConfigError);
  CHECK_THROWS_AS(parse_task("text_to_image"), ConfigError);
}

TEST_CASE("evaluate: recall agrees with search top-k") {
  std::mt19937_64 rng(7);
  EvalInputs in;
  in.index_ids = iota_ids(150);
  std::shuffle(in.index_ids.begin(), in.index_ids.end(), rng);
  in.index_image = random_unit(150, 5, rng);
  in.index_text = random_unit(150, 5, rng);
  for (int i = 0; i < 80; ++i) in.query_truth.push_back(in.index_ids[static_cast<std::size_t>(i)]);
  in.query_image = (in.index_image.topRows(80) + random_unit(80, 5, rng)).rowwise().normalized();
  in.query_text = (in.index_text.topRows(80) + random_unit(80, 5, rng)).rowwise().normalized();
  const EvalReport rep = evaluate(in, Task::kMultimodal, {{0.5, 0.5}});
  const RetrievalIndex index = build_index(in.index_ids, in.index_image, in.index_text, 0.5);
  const RowMatrix<float> q = fuse(in.query_image, in.query_text, 0.5);
  int h1 = 0, h5 = 0, h10 = 0;
  for (Index i = 0; i < q.rows(); ++i) {
    const SearchResult r = search(index, q.row(i).transpose(), 10);
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k].product_id == in.query_truth[static_cast<std::size_t>(i)]) {
        h1 += k < 1;
        h5 += k < 5;
        h10 += k < 10;
      }
    }
  }
  CHECK(rep.best.recall_at_1 == doctest::Approx(h1 / 80.0));
  CHECK(rep.best.recall_at_5 == doctest::Approx(h5 / 80.0));
  CHECK(rep.best.recall_at_10 == doctest::Approx(h10 / 80.0));
}

TEST_CASE("embedding files: round trip, dim check and empty") {
  std::mt19937_64 rng(8);
  EmbeddingTable t{{4, 9, 2}, random_unit(3, 6, rng)};
  const auto path = temp_path("emb.mime");
  write_embeddings(t, 6, path);
  const EmbeddingTable back = read_embeddings(path, 6);
  CHECK(back.ids == t.ids);
  CHECK(back.vectors == t.vectors);
  CHECK_THROWS_WITH_AS(read_embeddings(path, 8), doctest::Contains("expected dim 8, found 6"),
                       FormatError);

  std::string bytes = slurp(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 2);
  }
  CHECK_THROWS_AS(read_embeddings(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE" << bytes.substr(4);
  }
  CHECK_THROWS_AS(read_embeddings(path), FormatError);

  write_embeddings({{}, RowMatrix<float>(0, 6)}, 6, path);
  const EmbeddingTable empty = read_embeddings(path, 6);
  CHECK(empty.ids.empty());
  CHECK(slurp(path).size() == 4 + 2 + 4 + 8);
  std::filesystem::remove(path);
}

TEST_CASE("export_embeddings: equals direct encoding and is reproducible") {
  CorpusConfig cc;
  cc.n_products = 12;
  cc.n_queries_per_product = 2;
  cc.n_distractors = 5;
  cc.n_train_products = 0;
  const Corpus corpus = generate_corpus(cc);
  TowerConfig tc;
  tc.hidden_dims = {16, 16};
  tc.embed_dim = 8;
  tc.towers = 4;
  const TowerParams model = init_towers(tc, 2);
  const auto d1 = temp_path("export1");
  const auto d2 = temp_path("export2");
  export_embeddings(model, corpus, d1);
  export_embeddings(model, corpus, d2);
  for (const char* f : {"catalog_image.mime", "product_text.mime", "query_image.mime",
                        "query_text.mime"}) {
    CHECK(slurp(d1 / f) == slurp(d2 / f));
  }
  const EmbeddingTable img = read_embeddings(d1 / "catalog_image.mime", 8);
  REQUIRE(img.ids.size() == 17);
  CHECK(img.ids[12] == corpus.distractors.front().product_id);
  const Vector<double> x = Eigen::Map<const Eigen::VectorXf>(
      corpus.distractors.front().catalog_image.data(), 64).cast<double>();
  CHECK(img.vectors.row(12).transpose() == encode_image(model, x, ImageRole::kCatalog));
  const EmbeddingTable qt = read_embeddings(d1 / "query_text.mime", 8);
  CHECK(qt.vectors.row(3).transpose() == encode_text(model, corpus.queries[3].query_text,
                                                     TextRole::kQuery));

  const RetrievalIndex index = index_from_embeddings(d1, 0.5);
  CHECK(index.size() == 17);
  const auto ipath = temp_path("index.mimx");
  save_index(index, ipath);
  const RetrievalIndex loaded = load_index(ipath);
  CHECK(loaded.product_ids() == index.product_ids());
  CHECK(loaded.fused() == index.fused());
  CHECK(loaded.w_c() == 0.5);
  std::filesystem::remove(ipath);
  CHECK_THROWS_WITH_AS(load_index(ipath), doctest::Contains("index.mimx"), IoError);
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}
