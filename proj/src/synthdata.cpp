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

#include "mim/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace mim {

namespace {

// Feature payloads round-trip through 32-bit decimals.
using FloatJson = nlohmann::basic_json<std::map, std::vector, std::string, bool,
                                       std::int64_t, std::uint64_t, float>;

Index text_tokens(double density, Index dims) {
  return std::max<Index>(1, static_cast<Index>(std::lround(density * dims)));
}

}  // namespace

void CorpusConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw ConfigError("corpus config: " + what);
  };
  if (n_products < 1) fail("n_products must be at least 1");
  if (n_queries_per_product < 1) fail("n_queries_per_product must be at least 1");
  if (concept_dim < 1) fail("concept_dim must be positive");
  if (image_feature_dim < 1) fail("image_feature_dim must be positive");
  if (background_pool_size < 1) fail("background_pool_size must be positive");
  if (n_distractors < 0) fail("n_distractors must be non-negative");
  if (n_train_products < 0) fail("n_train_products must be non-negative");
  if (n_query_texts_per_product < 1) {
    fail("n_query_texts_per_product must be at least 1");
  }
  if (!(noise_catalog >= 0.0)) fail("noise_catalog must be non-negative");
  if (!(noise_query >= 0.0)) fail("noise_query must be non-negative");
  if (!(background_strength >= 0.0)) fail("background_strength must be non-negative");
  if (!(product_text_density > 0.0 && product_text_density <= 1.0)) {
    fail("product_text_density must be in (0, 1]");
  }
  if (!(query_text_density > 0.0 && query_text_density <= 1.0)) {
    fail("query_text_density must be in (0, 1]");
  }
  if (query_text_density < product_text_density) {
    fail("query_text_density must be at least product_text_density");
  }
  if (!(synonym_rate >= 0.0 && synonym_rate <= 1.0)) {
    fail("synonym_rate must be in [0, 1]");
  }
  if (!(query_text_noise >= 0.0)) fail("query_text_noise must be non-negative");
  if (text_levels < 1) fail("text_levels must be positive");
  if (n_filler_tokens < 0) fail("n_filler_tokens must be non-negative");
  if (!(train_backdrop_strength >= 0.0)) fail("train_backdrop_strength must be non-negative");
  if (!(train_backdrop_rate >= 0.0 && train_backdrop_rate <= 1.0)) {
    fail("train_backdrop_rate must be in [0, 1]");
  }
  const Index needed = 2 + 2 * concept_dim * text_levels + (n_filler_tokens > 0 ? 1 : 0);
  if (vocab_size < needed) {
    fail("vocab_size " + std::to_string(vocab_size) + " too small, token scheme needs " +
         std::to_string(needed));
  }
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = nlohmann::json{{"n_products", c.n_products},
                     {"n_queries_per_product", c.n_queries_per_product},
                     {"concept_dim", c.concept_dim},
                     {"image_feature_dim", c.image_feature_dim},
                     {"vocab_size", c.vocab_size},
                     {"background_pool_size", c.background_pool_size},
                     {"noise_catalog", c.noise_catalog},
                     {"noise_query", c.noise_query},
                     {"background_strength", c.background_strength},
                     {"product_text_density", c.product_text_density},
                     {"query_text_density", c.query_text_density},
                     {"n_distractors", c.n_distractors},
                     {"seed", c.seed},
                     {"text_levels", c.text_levels},
                     {"n_filler_tokens", c.n_filler_tokens},
                     {"synonym_rate", c.synonym_rate},
                     {"query_text_noise", c.query_text_noise},
                     {"n_query_texts_per_product", c.n_query_texts_per_product},
                     {"n_train_products", c.n_train_products},
                     {"train_backdrop_strength", c.train_backdrop_strength},
                     {"train_backdrop_rate", c.train_backdrop_rate}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_products", d.n_products);
  get("n_queries_per_product", d.n_queries_per_product);
  get("concept_dim", d.concept_dim);
  get("image_feature_dim", d.image_feature_dim);
  get("vocab_size", d.vocab_size);
  get("background_pool_size", d.background_pool_size);
  get("noise_catalog", d.noise_catalog);
  get("noise_query", d.noise_query);
  get("background_strength", d.background_strength);
  get("product_text_density", d.product_text_density);
  get("query_text_density", d.query_text_density);
  get("n_distractors", d.n_distractors);
  get("seed", d.seed);
  get("text_levels", d.text_levels);
  get("n_filler_tokens", d.n_filler_tokens);
  get("synonym_rate", d.synonym_rate);
  get("query_text_noise", d.query_text_noise);
  get("n_query_texts_per_product", d.n_query_texts_per_product);
  get("n_train_products", d.n_train_products);
  get("train_backdrop_strength", d.train_backdrop_strength);
  get("train_backdrop_rate", d.train_backdrop_rate);
  c = d;
}

// ---------------------------------------------------------------------------
// Tokens

TokenScheme::TokenScheme(const CorpusConfig& config)
    : dims_(config.concept_dim),
      levels_(config.text_levels),
      vocab_(config.vocab_size),
      synonym_begin_(static_cast<std::int32_t>(2 + dims_ * levels_)),
      filler_begin_(static_cast<std::int32_t>(2 + 2 * dims_ * levels_)) {}

std::int32_t TokenScheme::level(double x) const {
  const double l = std::floor((x + 2.0) / 4.0 * static_cast<double>(levels_));
  return static_cast<std::int32_t>(
      std::clamp(l, 0.0, static_cast<double>(levels_ - 1)));
}

std::int32_t TokenScheme::attribute(Index coord, std::int32_t level) const {
  return static_cast<std::int32_t>(2 + coord * levels_ + level);
}

std::int32_t TokenScheme::synonym(Index coord, std::int32_t level) const {
  return static_cast<std::int32_t>(synonym_begin_ + coord * levels_ + level);
}

std::int32_t TokenScheme::filler(Index k) const {
  return static_cast<std::int32_t>(filler_begin_ + k);
}

std::string TokenScheme::word(std::int32_t id) const {
  if (id == kPadToken) return "<pad>";
  if (id < 2 || id >= vocab_) return "<unk>";
  if (id >= filler_begin_) return "f" + std::to_string(id - filler_begin_);
  const bool syn = id >= synonym_begin_;
  const Index off = id - (syn ? synonym_begin_ : 2);
  return std::string(syn ? "q" : "a") + std::to_string(off / levels_) + "_" +
         std::to_string(off % levels_);
}

std::int32_t TokenScheme::id(std::string_view w) const {
  auto number = [](std::string_view s, Index& out) {
    if (s.empty()) return false;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
  };
  if (w.size() < 2) return kUnknown;
  const char head = w.front();
  const std::string_view rest = w.substr(1);
  if (head == 'f') {
    Index k = 0;
    if (!number(rest, k) || k < 0 || k >= filler_count()) return kUnknown;
    return filler(k);
  }
  if (head != 'a' && head != 'q') return kUnknown;
  const auto sep = rest.find('_');
  if (sep == std::string_view::npos) return kUnknown;
  Index coord = 0, lvl = 0;
  if (!number(rest.substr(0, sep), coord) || !number(rest.substr(sep + 1), lvl)) {
    return kUnknown;
  }
  if (coord < 0 || coord >= dims_ || lvl < 0 || lvl >= levels_) return kUnknown;
  const auto l = static_cast<std::int32_t>(lvl);
  return head == 'a' ? attribute(coord, l) : synonym(coord, l);
}

TokenSeq TokenScheme::encode(std::string_view text) const {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string TokenScheme::decode(const TokenSeq& tokens) const {
  std::string out;
  for (std::int32_t t : tokens) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

enum Stream : std::uint64_t { kWorld = 0, kProducts = 1, kDistractors = 2, kTrain = 3 };
// Query-text perception noise draws from stream + kBlurOffset, so it leaves
// every other draw untouched.
constexpr std::uint64_t kBlurOffset = 16;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

class Generator {
 public:
  Generator(const CorpusConfig& config, const World& world, Stream stream,
            bool listings = false)
      : config_(config), world_(world), scheme_(config),
        rng_(stream_rng(config.seed, stream)),
        blur_rng_(stream_rng(config.seed, stream + kBlurOffset)),
        listings_(listings) {}

  ProductRecord product(ProductId id) {
    const Index d = config_.concept_dim;
    Vector<double> c(d);
    // Rounded once so every view derives from the stored concept.
    for (Index i = 0; i < d; ++i) c(i) = static_cast<float>(normal_(rng_));
    Vector<double> x = world_.projection * c;
    for (Index i = 0; i < x.size(); ++i) x(i) += config_.noise_catalog * normal_(rng_);

    ProductRecord p;
    if (listings_) {
      std::uniform_int_distribution<Index> pick(0, config_.background_pool_size - 1);
      p.backdrop = pick(rng_);
      x += config_.train_backdrop_strength * config_.background_strength *
           world_.backgrounds.row(p.backdrop).transpose();
    }
    p.product_id = id;
    p.latent = to_floats(c);
    p.catalog_image = to_floats(x);
    p.product_text = product_text(c);
    for (Index k = 0; k < config_.n_query_texts_per_product; ++k) {
      p.query_texts.push_back(query_text(c));
    }
    return p;
  }

  QueryRecord query(QueryId id, const ProductRecord& p) {
    const Index d = config_.concept_dim;
    Vector<double> c(d);
    for (Index i = 0; i < d; ++i) c(i) = p.latent[static_cast<std::size_t>(i)];
    std::uniform_int_distribution<Index> pick(0, config_.background_pool_size - 1);
    QueryRecord q;
    q.query_id = id;
    q.product_id = p.product_id;
    q.background = pick(rng_);
    if (listings_) {
      std::bernoulli_distribution own(config_.train_backdrop_rate);
      if (own(rng_)) q.background = p.backdrop;
    }
    Vector<double> x = world_.projection * c +
                       config_.background_strength *
                           world_.backgrounds.row(q.background).transpose();
    for (Index i = 0; i < x.size(); ++i) x(i) += config_.noise_query * normal_(rng_);
    q.query_image = to_floats(x);
    q.query_text = query_text(c);
    return q;
  }

 private:
  static std::vector<float> to_floats(const Vector<double>& v) {
    std::vector<float> out(static_cast<std::size_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
    return out;
  }

  std::vector<Index> coords(double density) {
    std::vector<Index> idx(static_cast<std::size_t>(config_.concept_dim));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng_);
    idx.resize(static_cast<std::size_t>(text_tokens(density, config_.concept_dim)));
    return idx;
  }

  TokenSeq product_text(const Vector<double>& c) {
    TokenSeq t;
    for (Index i : coords(config_.product_text_density)) {
      t.push_back(scheme_.attribute(i, scheme_.level(c(i))));
    }
    if (config_.n_filler_tokens > 0) {
      std::uniform_int_distribution<Index> f(0, scheme_.filler_count() - 1);
      for (Index k = 0; k < config_.n_filler_tokens; ++k) t.push_back(scheme_.filler(f(rng_)));
    }
    std::shuffle(t.begin(), t.end(), rng_);
    return t;
  }

  TokenSeq query_text(const Vector<double>& c) {
    std::bernoulli_distribution syn(config_.synonym_rate);
    std::normal_distribution<double> blur(0.0, 1.0);
    const double sigma = config_.query_text_noise;
    TokenSeq t;
    for (Index i : coords(config_.query_text_density)) {
      const double x = sigma > 0.0 ? c(i) + sigma * blur(blur_rng_) : c(i);
      const std::int32_t l = scheme_.level(x);
      t.push_back(syn(rng_) ? scheme_.synonym(i, l) : scheme_.attribute(i, l));
    }
    return t;
  }

  const CorpusConfig& config_;
  const World& world_;
  TokenScheme scheme_;
  std::mt19937_64 rng_;
  std::mt19937_64 blur_rng_;
  bool listings_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace

World make_world(const CorpusConfig& config) {
  config.validate();
  std::mt19937_64 rng = stream_rng(config.seed, kWorld);
  std::normal_distribution<double> normal(0.0, 1.0);
  World w;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.concept_dim));
  w.projection.resize(config.image_feature_dim, config.concept_dim);
  for (Index i = 0; i < w.projection.size(); ++i) {
    w.projection.data()[i] = scale * normal(rng);
  }
  w.backgrounds.resize(config.background_pool_size, config.image_feature_dim);
  for (Index i = 0; i < w.backgrounds.size(); ++i) w.backgrounds.data()[i] = normal(rng);
  return w;
}

Corpus generate_corpus(const CorpusConfig& config) {
  const World world = make_world(config);
  Corpus corpus;
  corpus.config = config;

  // Ids: queried products, then distractors, then the training split.
  const auto n = static_cast<ProductId>(config.n_products);
  const auto nd = static_cast<ProductId>(config.n_distractors);

  Generator eval(config, world, kProducts);
  corpus.products.reserve(static_cast<std::size_t>(config.n_products));
  for (ProductId id = 0; id < n; ++id) corpus.products.push_back(eval.product(id));
  QueryId qid = 0;
  for (const ProductRecord& p : corpus.products) {
    for (Index k = 0; k < config.n_queries_per_product; ++k) {
      corpus.queries.push_back(eval.query(qid++, p));
    }
  }

  Generator distract(config, world, kDistractors);
  for (ProductId id = n; id < n + nd; ++id) {
    corpus.distractors.push_back(distract.product(id));
  }

  Generator train(config, world, kTrain, true);
  const auto nt = static_cast<ProductId>(config.n_train_products);
  for (ProductId id = n + nd; id < n + nd + nt; ++id) {
    corpus.train_products.push_back(train.product(id));
  }
  for (const ProductRecord& p : corpus.train_products) {
    for (Index k = 0; k < config.n_queries_per_product; ++k) {
      corpus.train_queries.push_back(train.query(qid++, p));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Catalog lookup

ProductCatalog::ProductCatalog(const Corpus& corpus) : corpus_(corpus) {
  for (std::size_t i = 0; i < corpus.products.size(); ++i) {
    products_.emplace(corpus.products[i].product_id, std::pair{false, i});
  }
  for (std::size_t i = 0; i < corpus.distractors.size(); ++i) {
    if (!products_.emplace(corpus.distractors[i].product_id, std::pair{true, i}).second) {
      throw DataError("product id " + std::to_string(corpus.distractors[i].product_id) +
                      " is both a product and a distractor");
    }
  }
  for (std::size_t i = 0; i < corpus.queries.size(); ++i) {
    queries_.emplace(corpus.queries[i].query_id, i);
  }
}

const ProductRecord* ProductCatalog::find(ProductId id) const {
  auto it = products_.find(id);
  if (it == products_.end()) return nullptr;
  const auto [distractor, i] = it->second;
  return distractor ? &corpus_.distractors[i] : &corpus_.products[i];
}

bool ProductCatalog::is_distractor(ProductId id) const {
  auto it = products_.find(id);
  return it != products_.end() && it->second.first;
}

const QueryRecord* ProductCatalog::find_query(QueryId id) const {
  auto it = queries_.find(id);
  return it == queries_.end() ? nullptr : &corpus_.queries[it->second];
}

Tensor catalog_features(std::span<const ProductRecord> products) {
  if (products.empty()) return Tensor(0, 0);
  Tensor out(static_cast<Index>(products.size()),
             static_cast<Index>(products.front().catalog_image.size()));
  for (Index r = 0; r < out.rows(); ++r) {
    const auto& x = products[static_cast<std::size_t>(r)].catalog_image;
    for (Index c = 0; c < out.cols(); ++c) out(r, c) = x[static_cast<std::size_t>(c)];
  }
  return out;
}

Tensor query_features(std::span<const QueryRecord> queries) {
  if (queries.empty()) return Tensor(0, 0);
  Tensor out(static_cast<Index>(queries.size()),
             static_cast<Index>(queries.front().query_image.size()));
  for (Index r = 0; r < out.rows(); ++r) {
    const auto& x = queries[static_cast<std::size_t>(r)].query_image;
    for (Index c = 0; c < out.cols(); ++c) out(r, c) = x[static_cast<std::size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kProductsFile = "products.jsonl";
constexpr const char* kQueriesFile = "queries.jsonl";
constexpr const char* kDistractorsFile = "distractors.jsonl";
constexpr const char* kTrainProductsFile = "train_products.jsonl";
constexpr const char* kTrainQueriesFile = "train_queries.jsonl";

FloatJson product_json(const ProductRecord& p) {
  FloatJson j;
  j["product_id"] = p.product_id;
  j["concept"] = p.latent;
  j["catalog_image"] = p.catalog_image;
  j["product_text"] = p.product_text;
  j["query_texts"] = p.query_texts;
  if (p.backdrop >= 0) j["backdrop"] = p.backdrop;
  return j;
}

FloatJson query_json(const QueryRecord& q) {
  FloatJson j;
  j["query_id"] = q.query_id;
  j["product_id"] = q.product_id;
  j["query_image"] = q.query_image;
  j["query_text"] = q.query_text;
  j["background"] = q.background;
  return j;
}

template <typename Record, typename ToJson>
void write_lines(const std::filesystem::path& path, const std::vector<Record>& records,
                 ToJson to_json_fn) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const Record& r : records) out << to_json_fn(r).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::ifstream open_existing(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("missing corpus file: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

struct LineContext {
  const std::filesystem::path& path;
  std::size_t line;
  const CorpusConfig& config;

  [[noreturn]] void fail(const std::string& what, std::size_t offset = 0) const {
    throw ParseError(path.string() + ":" + std::to_string(line) +
                     (offset ? ":" + std::to_string(offset) : "") + ": " + what);
  }

  template <typename T>
  T field(const FloatJson& j, const char* key) const {
    if (!j.is_object() || !j.contains(key)) fail(std::string("missing field '") + key + "'");
    try {
      return j.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(std::string("field '") + key + "' has the wrong type");
    }
  }

  std::vector<float> features(const FloatJson& j, const char* key, Index dim) const {
    auto v = field<std::vector<float>>(j, key);
    if (static_cast<Index>(v.size()) != dim) {
      fail(std::string("field '") + key + "' has " + std::to_string(v.size()) +
           " values, expected " + std::to_string(dim));
    }
    return v;
  }

  TokenSeq tokens(const FloatJson& j, const char* key) const {
    return check_tokens(field<TokenSeq>(j, key), key);
  }

  TokenSeq check_tokens(TokenSeq t, const char* key) const {
    for (std::size_t pos = 0; pos < t.size(); ++pos) {
      if (t[pos] < 0 || t[pos] >= config.vocab_size) {
        fail(std::string("field '") + key + "' token " + std::to_string(t[pos]) +
             " at position " + std::to_string(pos) + " outside vocabulary");
      }
    }
    return t;
  }
};

template <typename Record, typename FromJson>
std::vector<Record> read_lines(const std::filesystem::path& path, const CorpusConfig& config,
                               FromJson from) {
  std::ifstream in = open_existing(path);
  std::vector<Record> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    LineContext ctx{path, line, config};
    FloatJson j;
    try {
      j = FloatJson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      ctx.fail(std::string("malformed JSON: ") + e.what(), e.byte);
    }
    out.push_back(from(j, ctx));
  }
  return out;
}

ProductRecord product_from(const FloatJson& j, const LineContext& ctx) {
  ProductRecord p;
  p.product_id = ctx.field<ProductId>(j, "product_id");
  p.latent = ctx.features(j, "concept", ctx.config.concept_dim);
  p.catalog_image = ctx.features(j, "catalog_image", ctx.config.image_feature_dim);
  p.product_text = ctx.tokens(j, "product_text");
  for (TokenSeq t : ctx.field<std::vector<TokenSeq>>(j, "query_texts")) {
    p.query_texts.push_back(ctx.check_tokens(std::move(t), "query_texts"));
  }
  if (j.contains("backdrop")) p.backdrop = ctx.field<Index>(j, "backdrop");
  return p;
}

QueryRecord query_from(const FloatJson& j, const LineContext& ctx) {
  QueryRecord q;
  q.query_id = ctx.field<QueryId>(j, "query_id");
  q.product_id = ctx.field<ProductId>(j, "product_id");
  q.query_image = ctx.features(j, "query_image", ctx.config.image_feature_dim);
  q.query_text = ctx.tokens(j, "query_text");
  q.background = ctx.field<Index>(j, "background");
  return q;
}

void check_ground_truth(const std::vector<QueryRecord>& queries,
                        const std::vector<ProductRecord>& products,
                        const std::filesystem::path& path) {
  std::unordered_map<ProductId, bool> known;
  for (const ProductRecord& p : products) known.emplace(p.product_id, true);
  for (const QueryRecord& q : queries) {
    if (!known.contains(q.product_id)) {
      throw DataError(path.string() + ": query " + std::to_string(q.query_id) +
                      " refers to unknown product " + std::to_string(q.product_id));
    }
  }
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  nlohmann::json manifest{{"format", "mim-corpus"},
                          {"version", 1},
                          {"seed", corpus.config.seed},
                          {"config", corpus.config},
                          {"counts",
                           {{"products", corpus.products.size()},
                            {"queries", corpus.queries.size()},
                            {"distractors", corpus.distractors.size()},
                            {"train_products", corpus.train_products.size()},
                            {"train_queries", corpus.train_queries.size()}}}};
  {
    std::ofstream out(dir / kManifest, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + (dir / kManifest).string());
    out << manifest.dump(2) << '\n';
  }
  write_lines(dir / kProductsFile, corpus.products, product_json);
  write_lines(dir / kQueriesFile, corpus.queries, query_json);
  write_lines(dir / kDistractorsFile, corpus.distractors, product_json);
  write_lines(dir / kTrainProductsFile, corpus.train_products, product_json);
  write_lines(dir / kTrainQueriesFile, corpus.train_queries, query_json);
}

CorpusConfig read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifest;
  std::ifstream in = open_existing(path);
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != "mim-corpus") {
      throw ParseError(path.string() + ": not a corpus manifest");
    }
    CorpusConfig c = j.at("config").get<CorpusConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ":" + std::to_string(e.byte) + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.config = read_manifest(dir);
  c.products = read_lines<ProductRecord>(dir / kProductsFile, c.config, product_from);
  c.queries = read_lines<QueryRecord>(dir / kQueriesFile, c.config, query_from);
  c.distractors = read_lines<ProductRecord>(dir / kDistractorsFile, c.config, product_from);
  c.train_products = read_lines<ProductRecord>(dir / kTrainProductsFile, c.config, product_from);
  c.train_queries = read_lines<QueryRecord>(dir / kTrainQueriesFile, c.config, query_from);
  check_ground_truth(c.queries, c.products, dir / kQueriesFile);
  check_ground_truth(c.train_queries, c.train_products, dir / kTrainQueriesFile);
  return c;
}

}  // namespace mim
