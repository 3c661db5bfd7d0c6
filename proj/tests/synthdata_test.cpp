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
#include <set>
#include <sstream>

#include "doctest.h"
#include "mim/synthdata.hpp"

using namespace mim;

namespace {

CorpusConfig tiny(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.n_products = 40;
  c.n_queries_per_product = 3;
  c.n_distractors = 25;
  c.n_train_products = 30;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mim_synth_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generate_corpus: counts and ids") {
  CorpusConfig c = tiny();
  c.n_products = 100;
  c.n_queries_per_product = 5;
  const Corpus corpus = generate_corpus(c);
  CHECK(corpus.products.size() == 100);
  CHECK(corpus.queries.size() == 500);
  CHECK(corpus.distractors.size() == 25);
  CHECK(corpus.train_products.size() == 30);
  CHECK(corpus.train_queries.size() == 150);

  std::set<ProductId> ids;
  for (const auto* group : {&corpus.products, &corpus.distractors, &corpus.train_products}) {
    for (const ProductRecord& p : *group) CHECK(ids.insert(p.product_id).second);
  }
  std::set<QueryId> qids;
  for (const auto* group : {&corpus.queries, &corpus.train_queries}) {
    for (const QueryRecord& q : *group) CHECK(qids.insert(q.query_id).second);
  }
}

TEST_CASE("generate_corpus: same seed is bitwise identical") {
  const Corpus a = generate_corpus(tiny(9));
  const Corpus b = generate_corpus(tiny(9));
  CHECK(a == b);
  CHECK(!(a == generate_corpus(tiny(10))));
}

TEST_CASE("generate_corpus: noiseless degenerate case") {
  CorpusConfig c = tiny();
  c.noise_catalog = 0.0;
  c.noise_query = 0.0;
  c.background_strength = 0.0;
  c.product_text_density = 1.0;
  c.query_text_density = 1.0;
  const Corpus corpus = generate_corpus(c);
  for (const QueryRecord& q : corpus.queries) {
    CHECK(q.query_image == corpus.products[q.product_id].catalog_image);
  }
}

TEST_CASE("generate_corpus: features follow the projected concept") {
  CorpusConfig c = tiny();
  c.noise_catalog = 0.0;
  const World w = make_world(c);
  const Corpus corpus = generate_corpus(c);
  for (const ProductRecord& p : corpus.products) {
    Vector<double> z(c.concept_dim);
    for (Index i = 0; i < z.size(); ++i) z(i) = p.latent[static_cast<std::size_t>(i)];
    const Vector<double> x = w.projection * z;
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(std::abs(x(i) - p.catalog_image[static_cast<std::size_t>(i)]) < 1e-5);
    }
  }
}

TEST_CASE("generate_corpus: distractors change nothing else") {
  CorpusConfig c = tiny();
  c.n_distractors = 0;
  const Corpus without = generate_corpus(c);
  const Corpus with = generate_corpus(tiny());
  CHECK(without.distractors.empty());
  CHECK(without.products == with.products);
  CHECK(without.queries == with.queries);
}

TEST_CASE("text: attribute tokens, filler range and densities") {
  CorpusConfig c = tiny();
  c.product_text_density = 0.5;
  c.query_text_density = 0.75;
  c.n_filler_tokens = 6;
  const Corpus corpus = generate_corpus(c);
  const TokenScheme scheme(c);
  for (const ProductRecord& p : corpus.products) {
    CHECK(p.product_text.size() == 8 + 6);
    Index filler = 0;
    for (std::int32_t t : p.product_text) {
      CHECK(t > 1);
      CHECK(t < c.vocab_size);
      if (scheme.is_filler(t)) {
        ++filler;
        continue;
      }
      const std::string w = scheme.word(t);
      REQUIRE(w.front() == 'a');
      const auto us = w.find('_');
      const Index coord = std::stol(w.substr(1, us - 1));
      const int lvl = std::stoi(w.substr(us + 1));
      CHECK(lvl == scheme.level(p.latent[static_cast<std::size_t>(coord)]));
    }
    CHECK(filler == 6);
    CHECK(p.query_texts.size() == 9);
    for (const TokenSeq& q : p.query_texts) {
      CHECK(q.size() == 12);
      CHECK(q.size() <= p.product_text.size());
      for (std::int32_t t : q) CHECK(!scheme.is_filler(t));
    }
  }
}

TEST_CASE("text: query density at least product density") {
  CorpusConfig c = tiny();
  c.product_text_density = 0.8;
  c.query_text_density = 0.5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("query_text_density"), ConfigError);
  c = tiny();
  c.product_text_density = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.noise_query = -1.0;
  CHECK_THROWS_AS(generate_corpus(c), ConfigError);
  c = tiny();
  c.text_levels = 20;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vocab_size"), ConfigError);
}

TEST_CASE("text: query perception noise moves query levels only") {
  CorpusConfig c = tiny();
  c.synonym_rate = 0.0;
  c.query_text_noise = 0.0;
  const TokenScheme scheme(c);
  // Mean absolute level error of eval query words against the concept.
  auto level_error = [&](const Corpus& corpus) {
    double err = 0.0;
    Index n = 0;
    for (const QueryRecord& q : corpus.queries) {
      const ProductRecord& p = corpus.products[q.product_id];
      for (std::int32_t t : q.query_text) {
        const std::string w = scheme.word(t);
        const auto us = w.find('_');
        const auto coord = static_cast<std::size_t>(std::stol(w.substr(1, us - 1)));
        err += std::abs(std::stoi(w.substr(us + 1)) - scheme.level(p.latent[coord]));
        ++n;
      }
    }
    return err / static_cast<double>(n);
  };
  const Corpus exact = generate_corpus(c);
  CHECK(level_error(exact) == 0.0);
  c.query_text_noise = 0.5;
  const Corpus blurred = generate_corpus(c);
  const double e = level_error(blurred);
  // 0.5 is 1.5 bins at 12 levels.
  CHECK(e > 0.5);
  CHECK(e < 2.0);
  for (std::size_t i = 0; i < exact.products.size(); ++i) {
    CHECK(exact.products[i].catalog_image == blurred.products[i].catalog_image);
  }
  c.query_text_noise = -0.1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("query_text_noise"), ConfigError);
}

TEST_CASE("TokenScheme: word round trip and unknown words") {
  const CorpusConfig c = tiny();
  const TokenScheme s(c);
  for (std::int32_t id = 2; id < c.vocab_size; ++id) CHECK(s.id(s.word(id)) == id);
  CHECK(s.word(s.attribute(3, 5)) == "a3_5");
  CHECK(s.word(s.synonym(0, 1)) == "q0_1");
  CHECK(s.id("hello") == TokenScheme::kUnknown);
  CHECK(s.id("a99_1") == TokenScheme::kUnknown);
  CHECK(s.id("a1_") == TokenScheme::kUnknown);
  CHECK(s.encode("  a3_5 red  q0_1 ") ==
        TokenSeq{s.attribute(3, 5), TokenScheme::kUnknown, s.synonym(0, 1)});
  CHECK(s.level(-10.0) == 0);
  CHECK(s.level(10.0) == c.text_levels - 1);
  CHECK(s.level(0.0) == c.text_levels / 2);
}

TEST_CASE("distractors never appear as ground truth") {
  const Corpus corpus = generate_corpus(tiny());
  std::set<ProductId> distractors;
  for (const ProductRecord& p : corpus.distractors) distractors.insert(p.product_id);
  for (const QueryRecord& q : corpus.queries) CHECK(!distractors.contains(q.product_id));
  const ProductCatalog catalog(corpus);
  CHECK(catalog.is_distractor(corpus.distractors.front().product_id));
  CHECK(!catalog.is_distractor(corpus.products.front().product_id));
  CHECK(catalog.find(corpus.train_products.front().product_id) == nullptr);
}

TEST_CASE("property: strong backgrounds confuse raw-feature matching") {
  // With a large background and text unused, the catalog entry closest to
  // the query's background outranks the true product for a measurable
  // fraction of raw-feature nearest-neighbour queries.
  CorpusConfig c = tiny();
  c.n_products = 200;
  c.n_distractors = 0;
  c.noise_query = 0.3;
  c.noise_catalog = 0.3;
  auto confused_fraction = [](const CorpusConfig& cfg) {
    const Corpus corpus = generate_corpus(cfg);
    const World w = make_world(cfg);
    const Tensor cat = catalog_features(corpus.products).rowwise().normalized();
    const Tensor q = query_features(corpus.queries).rowwise().normalized();
    const Tensor sim = q * cat.transpose();
    const Tensor bg_sim = w.backgrounds.rowwise().normalized() * cat.transpose();
    Index confused = 0;
    for (Index i = 0; i < q.rows(); ++i) {
      const QueryRecord& rec = corpus.queries[static_cast<std::size_t>(i)];
      Index lure = 0;
      bg_sim.row(rec.background).maxCoeff(&lure);
      const auto gt = static_cast<Index>(rec.product_id);
      if (lure != gt && sim(i, lure) > sim(i, gt)) ++confused;
    }
    return static_cast<double>(confused) / static_cast<double>(q.rows());
  };
  CorpusConfig calm = c;
  calm.background_strength = 0.0;
  CorpusConfig loud = c;
  loud.background_strength = 3.0;
  const double calm_rate = confused_fraction(calm);
  const double loud_rate = confused_fraction(loud);
  CHECK(calm_rate < 0.01);
  CHECK(loud_rate > 0.2);
}

TEST_CASE("write_corpus / read_corpus round trip") {
  const Corpus corpus = generate_corpus(tiny());
  const auto dir = temp_dir("roundtrip");
  write_corpus(corpus, dir);
  CHECK(read_corpus(dir) == corpus);
  CHECK(read_manifest(dir) == corpus.config);

  // Writing again yields identical bytes.
  const auto dir2 = temp_dir("roundtrip2");
  write_corpus(read_corpus(dir), dir2);
  for (const char* f : {"manifest.json", "products.jsonl", "queries.jsonl",
                        "distractors.jsonl", "train_products.jsonl", "train_queries.jsonl"}) {
    CHECK(slurp(dir / f) == slurp(dir2 / f));
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("read_corpus: zero distractors is valid") {
  CorpusConfig c = tiny();
  c.n_distractors = 0;
  const auto dir = temp_dir("nodistract");
  write_corpus(generate_corpus(c), dir);
  CHECK(read_corpus(dir).distractors.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("read_corpus: missing and malformed files") {
  const auto dir = temp_dir("broken");
  write_corpus(generate_corpus(tiny()), dir);
  std::filesystem::remove(dir / "queries.jsonl");
  CHECK_THROWS_WITH_AS(read_corpus(dir), doctest::Contains("queries.jsonl"), IoError);

  write_corpus(generate_corpus(tiny()), dir);
  std::string text = slurp(dir / "products.jsonl");
  const auto second_line = text.find('\n') + 1;
  text.insert(second_line + 10, "}{");
  {
    std::ofstream out(dir / "products.jsonl", std::ios::binary | std::ios::trunc);
    out << text;
  }
  CHECK_THROWS_WITH_AS(read_corpus(dir), doctest::Contains("products.jsonl:2:"), ParseError);

  write_corpus(generate_corpus(tiny()), dir);
  {
    std::ofstream out(dir / "distractors.jsonl", std::ios::app);
    out << R"({"product_id": 999, "concept": [1.0]})" << '\n';
  }
  CHECK_THROWS_WITH_AS(read_corpus(dir), doctest::Contains("distractors.jsonl:26"),
                       ParseError);
  std::filesystem::remove_all(dir);
}
