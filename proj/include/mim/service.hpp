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

// Search service over an immutable snapshot: checkpoint, corpus and a
// prebuilt index with one fixed w_c. Request handling is transport free
// (SearchService::handle) so the HTTP layer is a thin shim.

#ifndef MIM_SERVICE_HPP
#define MIM_SERVICE_HPP

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "mim/retrieval.hpp"
#include "mim/synthdata.hpp"
#include "mim/towers.hpp"

namespace mim {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  std::filesystem::path corpus_dir;
  /// MIMX index file. When empty the index is built from `embeddings_dir`,
  /// or by encoding the corpus when that is empty too.
  std::filesystem::path index_path;
  std::filesystem::path embeddings_dir;
  double default_w_q = 0.5;
  /// Used when the index is built at startup; a loaded index must agree.
  double w_c = 0.5;
  Index default_k = 10;
  /// Exposes ground-truth links in /products, /queries and /search.
  bool evaluation_mode = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);

struct Snapshot {
  TowerParams model;
  Corpus corpus;
  RetrievalIndex index;
};

/// Loads and cross-checks every artifact. Any problem surfaces here, before
/// a socket is opened.
std::shared_ptr<const Snapshot> load_snapshot(const ServiceConfig& config);

struct Response {
  int status = 200;
  std::string body;
};

class SearchService {
 public:
  SearchService(std::shared_ptr<const Snapshot> snapshot, ServiceConfig config);

  /// Routes one request. `query` is the raw query string without '?'.
  Response handle(const std::string& method, const std::string& path,
                  const std::string& query, const std::string& body) const;

  nlohmann::json health() const;
  nlohmann::json config() const;
  nlohmann::json product(ProductId id) const;
  nlohmann::json queries(Index offset, Index limit) const;
  nlohmann::json search(const nlohmann::json& request) const;

  const Snapshot& snapshot() const { return *snapshot_; }

 private:
  std::shared_ptr<const Snapshot> snapshot_;
  ServiceConfig config_;
  ProductCatalog catalog_;
  TokenScheme tokens_;
};

/// Error body {"error": {"code", "message"}} and its HTTP status.
Response error_response(const std::exception& e);

/// Blocking HTTP server. `stop` may be called from another thread.
class HttpServer {
 public:
  explicit HttpServer(const SearchService& service);
  ~HttpServer();

  /// Binds and serves until stop(). port 0 picks a free port.
  void listen(const std::string& host, int port);
  /// Binds only; returns the bound port. Then call serve().
  int bind(const std::string& host, int port);
  void serve();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// load_snapshot + listen. Returns only after stop or on error.
void serve(const ServiceConfig& config, std::ostream& log);

}  // namespace mim

#endif  // MIM_SERVICE_HPP
