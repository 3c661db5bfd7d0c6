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

#include "mim/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "mim/binary_io.hpp"

namespace mim {

RetrievalIndex build_index(std::vector<ProductId> ids, RowMatrix<float> image,
                           RowMatrix<float> text, double w_c) {
  check_fusion_weight(w_c);
  const auto n = static_cast<Index>(ids.size());
  if (image.rows() != n || text.rows() != n || image.cols() != text.cols()) {
    throw DimensionError("build_index: " + std::to_string(n) + " ids with image " +
                         shape_string(image.rows(), image.cols()) + " and text " +
                         shape_string(text.rows(), text.cols()));
  }
  std::unordered_set<ProductId> seen;
  for (ProductId id : ids) {
    if (!seen.insert(id).second) {
      throw DataError("build_index: duplicate product id " + std::to_string(id));
    }
  }
  RetrievalIndex index;
  index.fused_ = fuse(image, text, w_c);
  index.ids_ = std::move(ids);
  index.image_ = std::move(image);
  index.text_ = std::move(text);
  index.w_c_ = w_c;
  return index;
}

double score(const float* a, const float* b, Index dim) {
  double s = 0.0;
  for (Index i = 0; i < dim; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

SearchResult search(const RetrievalIndex& index, const Vector<float>& query, Index k) {
  if (k < 1) throw ValidationError("k must be at least 1, got " + std::to_string(k));
  if (index.size() == 0) return {};
  if (query.size() != index.dim()) {
    throw DimensionError("query of dim " + std::to_string(query.size()) +
                         " against index of dim " + std::to_string(index.dim()));
  }
  const RowMatrix<float>& fused = index.fused();
  std::vector<Hit> all(static_cast<std::size_t>(index.size()));
  for (Index r = 0; r < index.size(); ++r) {
    all[static_cast<std::size_t>(r)] = Hit{index.product_ids()[static_cast<std::size_t>(r)],
                                           score(fused.row(r).data(), query.data(), index.dim())};
  }
  const auto take = static_cast<std::ptrdiff_t>(std::min<Index>(k, index.size()));
  std::partial_sort(all.begin(), all.begin() + take, all.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.product_id < b.product_id;
  });
  all.resize(static_cast<std::size_t>(take));
  return all;
}

// ---------------------------------------------------------------------------
// Evaluation

const char* to_string(Task task) {
  switch (task) {
    case Task::kImageToImage: return "image_to_image";
    case Task::kImageToMultimodal: return "image_to_multimodal";
    case Task::kMultimodal: return "multimodal";
  }
  return "unknown";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::kImageToImage, Task::kImageToMultimodal, Task::kMultimodal}) {
    if (name == to_string(t)) return t;
  }
  throw ConfigError("task must be image_to_image, image_to_multimodal or multimodal, got '" +
                    name + "'");
}

std::vector<double> default_weight_steps() {
  std::vector<double> w;
  for (int i = 0; i <= 20; ++i) w.push_back(i / 20.0);
  return w;
}

std::vector<WeightCell> default_grid(Task task, bool full_2d) {
  switch (task) {
    case Task::kImageToImage: return {{1.0, 1.0}};
    case Task::kImageToMultimodal: return {{1.0, 0.5}};
    case Task::kMultimodal: break;
  }
  std::vector<WeightCell> grid;
  for (double wq : default_weight_steps()) {
    if (full_2d) {
      for (double wc : default_weight_steps()) grid.push_back({wq, wc});
    } else {
      grid.push_back({wq, 0.5});
    }
  }
  return grid;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto cell = [](const RecallCell& c) {
    return nlohmann::json{{"w_q", c.weights.w_q},
                          {"w_c", c.weights.w_c},
                          {"recall_at_1", c.recall_at_1},
                          {"recall_at_5", c.recall_at_5},
                          {"recall_at_10", c.recall_at_10}};
  };
  nlohmann::json cells = nlohmann::json::array();
  for (const RecallCell& c : r.cells) cells.push_back(cell(c));
  j = nlohmann::json{{"task", to_string(r.task)},
                     {"query_count", r.query_count},
                     {"index_size", r.index_size},
                     {"cells", cells},
                     {"best", cell(r.best)}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  auto cell = [](const nlohmann::json& c) {
    RecallCell out;
    out.weights = {c.at("w_q").get<double>(), c.at("w_c").get<double>()};
    out.recall_at_1 = c.at("recall_at_1").get<double>();
    out.recall_at_5 = c.at("recall_at_5").get<double>();
    out.recall_at_10 = c.at("recall_at_10").get<double>();
    return out;
  };
  r.task = parse_task(j.at("task").get<std::string>());
  r.query_count = j.at("query_count").get<Index>();
  r.index_size = j.at("index_size").get<Index>();
  r.cells.clear();
  for (const auto& c : j.at("cells")) r.cells.push_back(cell(c));
  r.best = cell(j.at("best"));
}

namespace {

constexpr Index kEncodeChunk = 1024;
constexpr Index kQueryBlock = 512;

RowMatrix<float> encode_image_rows(const TowerParams& model, const Tensor& x, ImageRole role) {
  RowMatrix<float> out(x.rows(), model.config.embed_dim);
  for (Index r = 0; r < x.rows(); r += kEncodeChunk) {
    const Index n = std::min(kEncodeChunk, x.rows() - r);
    out.middleRows(r, n) = encode_images(model, x.middleRows(r, n), role);
  }
  return out;
}

RowMatrix<float> encode_text_rows(const TowerParams& model, std::span<const TokenSeq> t,
                                  TextRole role) {
  const auto rows = static_cast<Index>(t.size());
  RowMatrix<float> out(rows, model.config.embed_dim);
  for (Index r = 0; r < rows; r += kEncodeChunk) {
    const Index n = std::min(kEncodeChunk, rows - r);
    out.middleRows(r, n) = encode_texts(model, t.subspan(static_cast<std::size_t>(r),
                                                         static_cast<std::size_t>(n)), role);
  }
  return out;
}

// Recall of one grid cell. The ground-truth rank counts entries that would
// be listed before it: higher score, or equal score and lower id.
RecallCell recall_cell(const RowMatrix<float>& fused_index, const std::vector<ProductId>& ids,
                       const std::vector<Index>& truth_row, const RowMatrix<float>& queries,
                       WeightCell weights) {
  RecallCell cell;
  cell.weights = weights;
  const Index nq = queries.rows();
  if (nq == 0) return cell;
  Index hits1 = 0, hits5 = 0, hits10 = 0;
  for (Index q0 = 0; q0 < nq; q0 += kQueryBlock) {
    const Index nb = std::min(kQueryBlock, nq - q0);
    const RowMatrix<float> s = queries.middleRows(q0, nb) * fused_index.transpose();
    for (Index i = 0; i < nb; ++i) {
      const Index t = truth_row[static_cast<std::size_t>(q0 + i)];
      if (t < 0) continue;
      const float st = s(i, t);
      const ProductId gt = ids[static_cast<std::size_t>(t)];
      Index rank = 0;
      for (Index j = 0; j < s.cols() && rank < 10; ++j) {
        const float v = s(i, j);
        if (v > st || (v == st && ids[static_cast<std::size_t>(j)] < gt)) ++rank;
      }
      hits1 += rank < 1;
      hits5 += rank < 5;
      hits10 += rank < 10;
    }
  }
  const double n = static_cast<double>(nq);
  cell.recall_at_1 = static_cast<double>(hits1) / n;
  cell.recall_at_5 = static_cast<double>(hits5) / n;
  cell.recall_at_10 = static_cast<double>(hits10) / n;
  return cell;
}

bool better(const RecallCell& a, const RecallCell& b) {
  if (a.recall_at_1 != b.recall_at_1) return a.recall_at_1 > b.recall_at_1;
  if (a.recall_at_5 != b.recall_at_5) return a.recall_at_5 > b.recall_at_5;
  if (a.recall_at_10 != b.recall_at_10) return a.recall_at_10 > b.recall_at_10;
  if (a.weights.w_q != b.weights.w_q) return a.weights.w_q < b.weights.w_q;
  return a.weights.w_c < b.weights.w_c;
}

}  // namespace

EvalInputs embed_for_eval(const TowerParams& model, const Corpus& corpus) {
  EvalInputs in;
  std::vector<ProductRecord> index_products = corpus.products;
  index_products.insert(index_products.end(), corpus.distractors.begin(),
                        corpus.distractors.end());
  std::vector<TokenSeq> texts;
  for (const ProductRecord& p : index_products) {
    in.index_ids.push_back(p.product_id);
    texts.push_back(p.product_text);
  }
  in.index_image = encode_image_rows(model, catalog_features(index_products), ImageRole::kCatalog);
  in.index_text = encode_text_rows(model, texts, TextRole::kProduct);
  std::vector<TokenSeq> qtexts;
  for (const QueryRecord& q : corpus.queries) {
    in.query_truth.push_back(q.product_id);
    qtexts.push_back(q.query_text);
  }
  in.query_image = encode_image_rows(model, query_features(corpus.queries), ImageRole::kQuery);
  in.query_text = encode_text_rows(model, qtexts, TextRole::kQuery);
  return in;
}

EvalReport evaluate(const EvalInputs& in, Task task, std::vector<WeightCell> grid) {
  if (task == Task::kImageToImage && !grid.empty()) {
    throw ConfigError("image_to_image takes no weight grid");
  }
  if (grid.empty()) grid = default_grid(task);
  for (WeightCell& c : grid) {
    if (!(c.w_q >= 0.0 && c.w_q <= 1.0 && c.w_c >= 0.0 && c.w_c <= 1.0)) {
      throw ConfigError("grid cell (" + std::to_string(c.w_q) + ", " + std::to_string(c.w_c) +
                        ") outside [0, 1]^2");
    }
    if (task == Task::kImageToMultimodal) c.w_q = 1.0;
    if (task == Task::kImageToImage) c = {1.0, 1.0};
  }
  std::sort(grid.begin(), grid.end(), [](const WeightCell& a, const WeightCell& b) {
    return a.w_q != b.w_q ? a.w_q < b.w_q : a.w_c < b.w_c;
  });
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  const auto nq = static_cast<Index>(in.query_truth.size());
  if (in.query_image.rows() != nq || in.query_text.rows() != nq) {
    throw DimensionError("evaluate: query embeddings do not match the query count");
  }
  std::unordered_map<ProductId, Index> row_of;
  for (std::size_t i = 0; i < in.index_ids.size(); ++i) {
    if (!row_of.emplace(in.index_ids[i], static_cast<Index>(i)).second) {
      throw DataError("evaluate: duplicate product id " + std::to_string(in.index_ids[i]));
    }
  }
  std::vector<Index> truth_row;
  truth_row.reserve(in.query_truth.size());
  for (ProductId id : in.query_truth) {
    auto it = row_of.find(id);
    truth_row.push_back(it == row_of.end() ? -1 : it->second);
  }

  EvalReport report;
  report.task = task;
  report.query_count = nq;
  report.index_size = static_cast<Index>(in.index_ids.size());
  // Fused sides are cached per distinct weight.
  std::map<double, RowMatrix<float>> index_cache, query_cache;
  auto fused_index = [&](double w) -> const RowMatrix<float>& {
    auto it = index_cache.find(w);
    if (it == index_cache.end()) it = index_cache.emplace(w, fuse(in.index_image, in.index_text, w)).first;
    return it->second;
  };
  auto fused_query = [&](double w) -> const RowMatrix<float>& {
    auto it = query_cache.find(w);
    if (it == query_cache.end()) it = query_cache.emplace(w, fuse(in.query_image, in.query_text, w)).first;
    return it->second;
  };
  for (const WeightCell& c : grid) {
    report.cells.push_back(
        recall_cell(fused_index(c.w_c), in.index_ids, truth_row, fused_query(c.w_q), c));
  }
  report.best = report.cells.front();
  for (const RecallCell& c : report.cells) {
    if (better(c, report.best)) report.best = c;
  }
  return report;
}

EvalReport evaluate(const TowerParams& model, const Corpus& corpus, Task task,
                    std::vector<WeightCell> grid) {
  return evaluate(embed_for_eval(model, corpus), task, std::move(grid));
}

// ---------------------------------------------------------------------------
// Files

namespace {

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void expect_magic(binary::Reader& r, const char* magic, const std::filesystem::path& path) {
  std::string m;
  if (!r.get_bytes(4, m) || m != magic) {
    throw FormatError(path.string() + ": expected magic " + magic);
  }
}

}  // namespace

void write_embeddings(const EmbeddingTable& table, Index dim, const std::filesystem::path& path) {
  const auto n = static_cast<Index>(table.ids.size());
  if (table.vectors.rows() != n || (n > 0 && table.vectors.cols() != dim)) {
    throw DimensionError("write_embeddings: " + std::to_string(n) + " ids with vectors " +
                         shape_string(table.vectors.rows(), table.vectors.cols()));
  }
  binary::Writer w;
  w.put_bytes("MIME");
  w.put<std::uint16_t>(kEmbeddingVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(n));
  for (Index r = 0; r < n; ++r) {
    w.put<std::uint64_t>(table.ids[static_cast<std::size_t>(r)]);
    for (Index c = 0; c < dim; ++c) w.put<float>(table.vectors(r, c));
  }
  write_file(path, w.bytes());
}

EmbeddingTable read_embeddings(const std::filesystem::path& path, Index expected_dim) {
  const std::string bytes = read_file(path);
  binary::Reader r(bytes);
  expect_magic(r, "MIME", path);
  std::uint16_t version = 0;
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  if (!r.get(version) || !r.get(dim) || !r.get(count)) {
    throw FormatError(path.string() + ": truncated header");
  }
  if (version != kEmbeddingVersion) {
    throw FormatError(path.string() + ": expected version " + std::to_string(kEmbeddingVersion) +
                      ", found " + std::to_string(version));
  }
  if (expected_dim > 0 && static_cast<Index>(dim) != expected_dim) {
    throw FormatError(path.string() + ": expected dim " + std::to_string(expected_dim) +
                      ", found " + std::to_string(dim));
  }
  if (r.remaining() != count * (8 + 4 * static_cast<std::uint64_t>(dim))) {
    throw FormatError(path.string() + ": payload size does not match " + std::to_string(count) +
                      " records of dim " + std::to_string(dim));
  }
  EmbeddingTable t;
  t.ids.resize(count);
  t.vectors.resize(static_cast<Index>(count), dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    r.get(t.ids[i]);
    for (Index c = 0; c < static_cast<Index>(dim); ++c) r.get(t.vectors(static_cast<Index>(i), c));
  }
  return t;
}

void export_embeddings(const TowerParams& model, const Corpus& corpus,
                       const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const EvalInputs in = embed_for_eval(model, corpus);
  const Index dim = model.config.embed_dim;
  std::vector<std::uint64_t> qids;
  for (const QueryRecord& q : corpus.queries) qids.push_back(q.query_id);
  write_embeddings({in.index_ids, in.index_image}, dim, dir / "catalog_image.mime");
  write_embeddings({in.index_ids, in.index_text}, dim, dir / "product_text.mime");
  write_embeddings({qids, in.query_image}, dim, dir / "query_image.mime");
  write_embeddings({qids, in.query_text}, dim, dir / "query_text.mime");
}

void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes("MIMX");
  w.put<std::uint16_t>(kIndexVersion);
  w.put<double>(index.w_c());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.dim()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(index.size()));
  for (Index r = 0; r < index.size(); ++r) {
    w.put<std::uint64_t>(index.product_ids()[static_cast<std::size_t>(r)]);
    for (Index c = 0; c < index.dim(); ++c) w.put<float>(index.image()(r, c));
    for (Index c = 0; c < index.dim(); ++c) w.put<float>(index.text()(r, c));
  }
  write_file(path, w.bytes());
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing index file: " + path.string());
  const std::string bytes = read_file(path);
  binary::Reader r(bytes);
  expect_magic(r, "MIMX", path);
  std::uint16_t version = 0;
  double w_c = 0.0;
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  if (!r.get(version) || !r.get(w_c) || !r.get(dim) || !r.get(count)) {
    throw FormatError(path.string() + ": truncated header");
  }
  if (version != kIndexVersion) {
    throw FormatError(path.string() + ": expected version " + std::to_string(kIndexVersion) +
                      ", found " + std::to_string(version));
  }
  if (r.remaining() != count * (8 + 8 * static_cast<std::uint64_t>(dim))) {
    throw FormatError(path.string() + ": payload size does not match " + std::to_string(count) +
                      " records of dim " + std::to_string(dim));
  }
  std::vector<ProductId> ids(count);
  RowMatrix<float> image(static_cast<Index>(count), dim), text(static_cast<Index>(count), dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto row = static_cast<Index>(i);
    r.get(ids[i]);
    for (Index c = 0; c < static_cast<Index>(dim); ++c) r.get(image(row, c));
    for (Index c = 0; c < static_cast<Index>(dim); ++c) r.get(text(row, c));
  }
  try {
    return build_index(std::move(ids), std::move(image), std::move(text), w_c);
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

RetrievalIndex index_from_embeddings(const std::filesystem::path& dir, double w_c) {
  EmbeddingTable image = read_embeddings(dir / "catalog_image.mime");
  EmbeddingTable text = read_embeddings(dir / "product_text.mime", image.dim());
  if (image.ids != text.ids) {
    throw FormatError(dir.string() + ": catalog_image.mime and product_text.mime list different ids");
  }
  return build_index(std::move(image.ids), std::move(image.vectors), std::move(text.vectors), w_c);
}

}  // namespace mim
