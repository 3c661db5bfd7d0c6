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

#include "mim/service.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>
#include <unordered_map>

// After Eigen: resolv.h defines _res.
#include "httplib.h"

namespace mim {

using nlohmann::json;

void ServiceConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("service config: " + m); };
  if (port < 0 || port > 65535) fail("port must be in [0, 65535]");
  if (!(default_w_q >= 0.0 && default_w_q <= 1.0)) fail("default_w_q must be in [0, 1]");
  if (!(w_c >= 0.0 && w_c <= 1.0)) fail("w_c must be in [0, 1]");
  if (default_k < 1) fail("default_k must be at least 1");
  if (checkpoint.empty()) fail("checkpoint is required");
  if (corpus_dir.empty()) fail("corpus_dir is required");
}

void to_json(json& j, const ServiceConfig& c) {
  j = json{{"host", c.host},
           {"port", c.port},
           {"checkpoint", c.checkpoint.string()},
           {"corpus_dir", c.corpus_dir.string()},
           {"index_path", c.index_path.string()},
           {"embeddings_dir", c.embeddings_dir.string()},
           {"default_w_q", c.default_w_q},
           {"w_c", c.w_c},
           {"default_k", c.default_k},
           {"evaluation_mode", c.evaluation_mode}};
}

std::shared_ptr<const Snapshot> load_snapshot(const ServiceConfig& config) {
  config.validate();
  auto snap = std::make_shared<Snapshot>();
  if (!std::filesystem::exists(config.checkpoint)) {
    throw IoError("missing checkpoint file: " + config.checkpoint.string());
  }
  snap->model = load_checkpoint(config.checkpoint);
  snap->corpus = read_corpus(config.corpus_dir);
  const TowerConfig& tc = snap->model.config;
  if (tc.image_feature_dim != snap->corpus.config.image_feature_dim ||
      tc.vocab_size != snap->corpus.config.vocab_size) {
    throw DataError("checkpoint expects " + std::to_string(tc.image_feature_dim) +
                    " image features and vocabulary " + std::to_string(tc.vocab_size) +
                    ", corpus has " + std::to_string(snap->corpus.config.image_feature_dim) +
                    " and " + std::to_string(snap->corpus.config.vocab_size));
  }

  if (!config.index_path.empty()) {
    snap->index = load_index(config.index_path);
    if (snap->index.w_c() != config.w_c) {
      throw ConfigError("index " + config.index_path.string() + " was built with w_c " +
                        std::to_string(snap->index.w_c()) + ", config asks for " +
                        std::to_string(config.w_c));
    }
  } else if (!config.embeddings_dir.empty()) {
    snap->index = index_from_embeddings(config.embeddings_dir, config.w_c);
  } else {
    EvalInputs in = embed_for_eval(snap->model, snap->corpus);
    snap->index = build_index(std::move(in.index_ids), std::move(in.index_image),
                              std::move(in.index_text), config.w_c);
  }
  if (snap->index.size() > 0 && snap->index.dim() != tc.embed_dim) {
    throw DataError("index embed_dim " + std::to_string(snap->index.dim()) +
                    " does not match checkpoint embed_dim " + std::to_string(tc.embed_dim));
  }
  const ProductCatalog catalog(snap->corpus);
  for (ProductId id : snap->index.product_ids()) {
    if (!catalog.find(id)) {
      throw DataError("index product " + std::to_string(id) + " is not in the corpus");
    }
  }
  return snap;
}

namespace {

/// Validation failure tied to one request field.
class FieldError : public ValidationError {
 public:
  FieldError(std::string field, const std::string& message)
      : ValidationError(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

std::string error_code(const std::exception& e, int& status) {
  const auto* err = dynamic_cast<const Error*>(&e);
  if (dynamic_cast<const json::exception*>(&e)) {
    status = 400;
    return "parse_error";
  }
  if (!err) {
    status = 500;
    return "internal_error";
  }
  switch (err->kind()) {
    case ErrorKind::kNotFound: status = 404; return "not_found";
    case ErrorKind::kParse: status = 400; return "parse_error";
    case ErrorKind::kValidation:
    case ErrorKind::kDimension:
    case ErrorKind::kDegenerate: status = 400; return "validation_error";
    default: status = 500; return "internal_error";
  }
}

Response json_response(const json& j, int status = 200) { return {status, j.dump()}; }

Response error_with(int status, const std::string& code, const std::string& message) {
  return json_response({{"error", {{"code", code}, {"message", message}}}}, status);
}

json feature_summary(const std::vector<float>& x) {
  double sum = 0.0, sq = 0.0;
  float lo = x.empty() ? 0.0f : x.front(), hi = lo;
  for (float v : x) {
    sum += v;
    sq += static_cast<double>(v) * v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {{"dim", x.size()},
          {"mean", x.empty() ? 0.0 : sum / static_cast<double>(x.size())},
          {"norm", std::sqrt(sq)},
          {"min", lo},
          {"max", hi}};
}

// Parses "a=1&b=2" into integer parameters. Unknown keys are ignored.
std::optional<Index> int_param(const std::string& query, const std::string& key) {
  std::size_t pos = 0;
  while (pos <= query.size()) {
    const std::size_t amp = std::min(query.find('&', pos), query.size());
    const std::string item = query.substr(pos, amp - pos);
    const std::size_t eq = item.find('=');
    if (eq != std::string::npos && item.substr(0, eq) == key) {
      const std::string v = item.substr(eq + 1);
      Index out = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) {
        throw FieldError(key, "expected an integer, got '" + v + "'");
      }
      return out;
    }
    pos = amp + 1;
  }
  return std::nullopt;
}

ProductId parse_id(const std::string& s, const char* what) {
  ProductId out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw NotFoundError(std::string("no ") + what + " '" + s + "'");
  }
  return out;
}

}  // namespace

Response error_response(const std::exception& e) {
  int status = 500;
  const std::string code = error_code(e, status);
  json err = {{"code", code}, {"message", e.what()}};
  if (const auto* f = dynamic_cast<const FieldError*>(&e)) err["field"] = f->field();
  return json_response({{"error", err}}, status);
}

SearchService::SearchService(std::shared_ptr<const Snapshot> snapshot, ServiceConfig config)
    : snapshot_(std::move(snapshot)),
      config_(std::move(config)),
      catalog_(snapshot_->corpus),
      tokens_(snapshot_->corpus.config) {
  config_.validate();
}

json SearchService::health() const {
  return {{"status", "ok"},
          {"index_size", snapshot_->index.size()},
          {"embed_dim", snapshot_->model.config.embed_dim}};
}

json SearchService::config() const {
  const TowerConfig& tc = snapshot_->model.config;
  return {{"w_c", snapshot_->index.w_c()},
          {"default_w_q", config_.default_w_q},
          {"default_k", config_.default_k},
          {"weight_step", 0.05},
          {"embed_dim", tc.embed_dim},
          {"towers", tc.towers},
          {"image_feature_dim", tc.image_feature_dim},
          {"vocab_size", tc.vocab_size},
          {"max_tokens", tc.max_tokens},
          {"index_size", snapshot_->index.size()},
          {"query_count", snapshot_->corpus.queries.size()},
          {"evaluation_mode", config_.evaluation_mode}};
}

json SearchService::product(ProductId id) const {
  const ProductRecord* p = catalog_.find(id);
  if (!p) throw NotFoundError("no product " + std::to_string(id));
  json j = {{"product_id", p->product_id},
            {"is_distractor", catalog_.is_distractor(id)},
            {"product_text", p->product_text},
            {"product_words", tokens_.decode(p->product_text)},
            {"catalog_image", feature_summary(p->catalog_image)}};
  if (config_.evaluation_mode) {
    json ids = json::array();
    for (const QueryRecord& q : snapshot_->corpus.queries) {
      if (q.product_id == id) ids.push_back(q.query_id);
    }
    j["query_ids"] = ids;
  }
  return j;
}

json SearchService::queries(Index offset, Index limit) const {
  if (offset < 0) throw FieldError("offset", "must be non-negative");
  if (limit < 1 || limit > 1000) throw FieldError("limit", "must be in [1, 1000]");
  const auto& qs = snapshot_->corpus.queries;
  const Index total = static_cast<Index>(qs.size());
  json items = json::array();
  for (Index i = offset; i < std::min(total, offset + limit); ++i) {
    const QueryRecord& q = qs[static_cast<std::size_t>(i)];
    json item = {{"query_id", q.query_id},
                 {"query_text", q.query_text},
                 {"query_words", tokens_.decode(q.query_text)}};
    if (config_.evaluation_mode) item["product_id"] = q.product_id;
    items.push_back(std::move(item));
  }
  return {{"total", total}, {"offset", offset}, {"limit", limit}, {"queries", items}};
}

json SearchService::search(const json& req) const {
  if (!req.is_object()) throw ParseError("search request must be a JSON object");
  static const char* kFields[] = {"query_image_id", "query_image_features",
                                  "query_image_embedding", "query_text", "w_q", "k"};
  for (const auto& [key, value] : req.items()) {
    if (std::find_if(std::begin(kFields), std::end(kFields),
                     [&](const char* f) { return key == f; }) == std::end(kFields)) {
      throw FieldError(key, "unknown field");
    }
  }
  const TowerParams& model = snapshot_->model;
  const TowerConfig& tc = model.config;

  int sources = 0;
  for (const char* f : {"query_image_id", "query_image_features", "query_image_embedding"}) {
    sources += req.contains(f) ? 1 : 0;
  }
  if (sources != 1) {
    throw FieldError("query_image_id", "exactly one of query_image_id, query_image_features "
                                       "and query_image_embedding is required");
  }

  auto float_array = [&](const char* field, Index want) {
    const json& a = req.at(field);
    if (!a.is_array() || static_cast<Index>(a.size()) != want) {
      throw FieldError(field, "expected an array of " + std::to_string(want) + " numbers");
    }
    Vector<double> v(want);
    for (Index i = 0; i < want; ++i) {
      const json& x = a[static_cast<std::size_t>(i)];
      if (!x.is_number() || !std::isfinite(x.get<double>())) {
        throw FieldError(field, "entry " + std::to_string(i) + " is not a finite number");
      }
      v(i) = x.get<double>();
    }
    return v;
  };

  json echo = json::object();
  Vector<float> qi;
  std::optional<ProductId> truth;
  if (req.contains("query_image_id")) {
    const json& id = req["query_image_id"];
    if (!id.is_number_unsigned()) {
      throw FieldError("query_image_id", "expected a non-negative integer");
    }
    const QueryRecord* q = catalog_.find_query(id.get<QueryId>());
    if (!q) throw NotFoundError("no query image " + std::to_string(id.get<QueryId>()));
    const Vector<double> x =
        Eigen::Map<const Eigen::VectorXf>(q->query_image.data(),
                                          static_cast<Index>(q->query_image.size()))
            .cast<double>();
    qi = encode_image(model, x, ImageRole::kQuery);
    echo["query_image_id"] = q->query_id;
    truth = q->product_id;
  } else if (req.contains("query_image_features")) {
    qi = encode_image(model, float_array("query_image_features", tc.image_feature_dim),
                      ImageRole::kQuery);
  } else {
    const Vector<double> e = float_array("query_image_embedding", tc.embed_dim);
    if (!(std::abs(e.norm() - 1.0) <= kUnitNormTolerance)) {
      throw FieldError("query_image_embedding", "must be unit norm");
    }
    qi = e.cast<float>();
  }

  TokenSeq text;
  if (req.contains("query_text")) {
    const json& t = req["query_text"];
    if (t.is_string()) {
      text = tokens_.encode(t.get<std::string>());
    } else if (t.is_array()) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (!t[i].is_number_integer()) {
          throw FieldError("query_text", "token " + std::to_string(i) + " is not an integer");
        }
        const auto v = t[i].get<std::int64_t>();
        if (v < 0 || v >= tc.vocab_size) {
          throw FieldError("query_text", "token id " + std::to_string(v) + " at position " +
                                             std::to_string(i) + " outside [0, " +
                                             std::to_string(tc.vocab_size) + ")");
        }
        text.push_back(static_cast<std::int32_t>(v));
      }
    } else if (!t.is_null()) {
      throw FieldError("query_text", "expected a string or an array of token ids");
    }
    text = prepare_tokens(text, tc);
    std::erase(text, kPadToken);
  }
  const bool use_text = !text.empty();

  double w_q = config_.default_w_q;
  if (req.contains("w_q")) {
    const json& w = req["w_q"];
    if (!w.is_number() || !(w.get<double>() >= 0.0 && w.get<double>() <= 1.0)) {
      throw FieldError("w_q", "must be a number in [0, 1]");
    }
    w_q = w.get<double>();
  }
  if (!use_text) w_q = 1.0;

  Index k = config_.default_k;
  if (req.contains("k")) {
    const json& kj = req["k"];
    if (!kj.is_number_integer() || kj.get<std::int64_t>() < 1) {
      throw FieldError("k", "must be an integer of at least 1");
    }
    k = kj.get<Index>();
  }

  Vector<float> query = qi;
  if (use_text) query = fuse(qi, encode_text(model, text, TextRole::kQuery), w_q);
  const SearchResult hits = mim::search(snapshot_->index, query, k);

  json results = json::array();
  for (std::size_t r = 0; r < hits.size(); ++r) {
    const ProductRecord* p = catalog_.find(hits[r].product_id);
    json item = {{"rank", r + 1},
                 {"product_id", hits[r].product_id},
                 {"score", hits[r].score},
                 {"is_distractor", catalog_.is_distractor(hits[r].product_id)},
                 {"product_words", tokens_.decode(p->product_text)}};
    if (config_.evaluation_mode && truth) item["is_ground_truth"] = *truth == hits[r].product_id;
    results.push_back(std::move(item));
  }
  json out = {{"w_q", w_q},
              {"w_c", snapshot_->index.w_c()},
              {"k", k},
              {"text_used", use_text},
              {"query_text", text},
              {"query", echo},
              {"results", results}};
  if (config_.evaluation_mode && truth) out["ground_truth_product_id"] = *truth;
  return out;
}

Response SearchService::handle(const std::string& method, const std::string& path,
                               const std::string& query, const std::string& body) const {
  try {
    auto only = [&](const char* m) {
      if (method != m) {
        throw std::pair<int, std::string>(405, method + " not allowed on " + path);
      }
    };
    try {
      if (path == "/health") {
        only("GET");
        return json_response(health());
      }
      if (path == "/config") {
        only("GET");
        return json_response(config());
      }
      if (path == "/queries") {
        only("GET");
        return json_response(queries(int_param(query, "offset").value_or(0),
                                     int_param(query, "limit").value_or(50)));
      }
      if (path.starts_with("/products/")) {
        only("GET");
        return json_response(product(parse_id(path.substr(10), "product")));
      }
      if (path == "/search") {
        only("POST");
        json req;
        try {
          req = json::parse(body);
        } catch (const json::parse_error& e) {
          throw ParseError(std::string("malformed JSON body: ") + e.what());
        }
        return json_response(search(req));
      }
    } catch (const std::pair<int, std::string>& m) {
      return error_with(m.first, "method_not_allowed", m.second);
    }
    return error_with(404, "not_found", "no route " + method + " " + path);
  } catch (const std::exception& e) {
    return error_response(e);
  }
}

// ---------------------------------------------------------------------------
// HTTP

struct HttpServer::Impl {
  const SearchService& service;
  httplib::Server server;
};

HttpServer::HttpServer(const SearchService& service)
    : impl_(new Impl{service, {}}) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::string query;
    for (const auto& [k, v] : req.params) {
      if (!query.empty()) query += '&';
      query += k + "=" + v;
    }
    const Response r = impl_->service.handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body, "application/json");
  };
  auto& s = impl_->server;
  s.Get(".*", route);
  s.Post(".*", route);
  s.Put(".*", route);
  s.Delete(".*", route);
  s.Patch(".*", route);
  s.Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::serve() {
  if (!impl_->server.listen_after_bind()) throw IoError("server stopped with an error");
}

void HttpServer::listen(const std::string& host, int port) {
  bind(host, port);
  serve();
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

bool HttpServer::running() const { return impl_->server.is_running(); }

void serve(const ServiceConfig& config, std::ostream& log) {
  auto snap = load_snapshot(config);
  SearchService service(snap, config);
  HttpServer server(service);
  const int port = server.bind(config.host, config.port);
  log << "serving " << snap->index.size() << " products (embed_dim "
      << snap->model.config.embed_dim << ", w_c " << snap->index.w_c() << ") on http://"
      << config.host << ":" << port << std::endl;
  server.serve();
}

}  // namespace mim
