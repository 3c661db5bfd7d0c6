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

// Synthetic street-to-shop corpus.
//
// Every product draws a latent concept c ~ N(0, I_D). Images are views of
// the concept through one fixed random projection P (features x D, entries
// N(0, 1/D)):
//
//   catalog = P c + sigma_c n
//   query   = P c + beta b + sigma_q n      b drawn from a shared pool
//
// The training split stands in for seller listings: each training product
// has a backdrop s from the same pool, its catalog image carries
// beta_l beta s, and each of its query images uses s instead of a random
// background with probability train_backdrop_rate. Evaluation products and
// queries carry no backdrop.
//
// Text is a bag of quantized concept coordinates. Product text covers a
// rho_p fraction of coordinates plus filler ids; query text covers a rho_q
// fraction, no filler, and phrases some coordinates with shopper synonyms.
//
// Token scheme, with L quantization levels:
//
//   0                      padding
//   1                      unknown word
//   2 + i L + l            "a<i>_<l>"   attribute i at level l
//   2 + D L + i L + l      "q<i>_<l>"   shopper synonym of the same attribute
//   2 + 2 D L + k          "f<k>"       filler
//
// level(x) = clamp(floor((x + 2) / 4 * L), 0, L - 1). Query words quantize
// a perturbed coordinate, c_i + sigma_t * N(0, 1).

#ifndef MIM_SYNTHDATA_HPP
#define MIM_SYNTHDATA_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mim/numerics.hpp"
#include "mim/towers.hpp"

namespace mim {

using ProductId = std::uint64_t;
using QueryId = std::uint64_t;

struct CorpusConfig {
  Index n_products = 2000;
  Index n_queries_per_product = 5;
  Index concept_dim = 16;
  Index image_feature_dim = 64;
  Index vocab_size = 512;
  Index background_pool_size = 32;
  double noise_catalog = 0.5;
  double noise_query = 1.0;
  double background_strength = 0.7;
  double product_text_density = 1.0;
  double query_text_density = 1.0;
  Index n_distractors = 8000;
  std::uint64_t seed = 0;

  Index text_levels = 12;
  Index n_filler_tokens = 4;
  double synonym_rate = 0.5;
  /// Shoppers misjudge attributes: query text quantizes c + sigma_t * N(0, 1).
  double query_text_noise = 0.5;
  /// Query strings attached to every product for four-tower training.
  Index n_query_texts_per_product = 9;
  /// Products of the disjoint training split.
  Index n_train_products = 800;
  /// beta_l above.
  double train_backdrop_strength = 1.0;
  double train_backdrop_rate = 1.0;

  void validate() const;

  friend bool operator==(const CorpusConfig&, const CorpusConfig&) = default;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct ProductRecord {
  ProductId product_id = 0;
  /// Latent concept, kept for test oracles only.
  std::vector<float> latent;
  std::vector<float> catalog_image;
  TokenSeq product_text;
  std::vector<TokenSeq> query_texts;
  /// Listing backdrop index for training products, -1 otherwise.
  Index backdrop = -1;

  friend bool operator==(const ProductRecord&, const ProductRecord&) = default;
};

struct QueryRecord {
  QueryId query_id = 0;
  ProductId product_id = 0;
  std::vector<float> query_image;
  TokenSeq query_text;
  /// Index into the background pool, kept for test oracles only.
  Index background = 0;

  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

struct Corpus {
  CorpusConfig config;
  std::vector<ProductRecord> products;
  std::vector<QueryRecord> queries;
  std::vector<ProductRecord> distractors;
  std::vector<ProductRecord> train_products;
  std::vector<QueryRecord> train_queries;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Shared generative structure of a corpus, reproducible from the config.
struct World {
  Tensor projection;   // image_feature_dim x concept_dim
  Tensor backgrounds;  // background_pool_size x image_feature_dim
};

World make_world(const CorpusConfig& config);

Corpus generate_corpus(const CorpusConfig& config);

/// Lookup over the indexable products (queried plus distractors).
class ProductCatalog {
 public:
  explicit ProductCatalog(const Corpus& corpus);

  const ProductRecord* find(ProductId id) const;
  bool is_distractor(ProductId id) const;
  const QueryRecord* find_query(QueryId id) const;

 private:
  const Corpus& corpus_;
  std::unordered_map<ProductId, std::pair<bool, std::size_t>> products_;
  std::unordered_map<QueryId, std::size_t> queries_;
};

class TokenScheme {
 public:
  explicit TokenScheme(const CorpusConfig& config);

  std::int32_t level(double x) const;
  std::int32_t attribute(Index coord, std::int32_t level) const;
  std::int32_t synonym(Index coord, std::int32_t level) const;
  std::int32_t filler(Index k) const;
  std::int32_t filler_begin() const { return filler_begin_; }
  Index filler_count() const { return vocab_ - filler_begin_; }
  bool is_filler(std::int32_t id) const { return id >= filler_begin_; }

  std::string word(std::int32_t id) const;
  /// Unknown or malformed words map to the unknown id.
  std::int32_t id(std::string_view word) const;
  /// Whitespace-separated words to ids.
  TokenSeq encode(std::string_view text) const;
  std::string decode(const TokenSeq& tokens) const;

  static constexpr std::int32_t kUnknown = 1;

 private:
  Index dims_;
  Index levels_;
  Index vocab_;
  std::int32_t synonym_begin_;
  std::int32_t filler_begin_;
};

// On disk: manifest.json plus one record per line in products.jsonl,
// queries.jsonl, distractors.jsonl, train_products.jsonl and
// train_queries.jsonl. Floats are written as shortest 32-bit decimals.

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Throws IoError naming a missing file and ParseError with file, line and
/// offset for malformed content.
Corpus read_corpus(const std::filesystem::path& dir);

/// Config recorded in dir/manifest.json.
CorpusConfig read_manifest(const std::filesystem::path& dir);

/// Stacks records into row matrices of features.
Tensor catalog_features(std::span<const ProductRecord> products);
Tensor query_features(std::span<const QueryRecord> queries);

}  // namespace mim

#endif  // MIM_SYNTHDATA_HPP
