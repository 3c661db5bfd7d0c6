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

// Contrastive objectives over aligned batches of unit-norm embeddings.
//
// For two towers A and B over a pool of M samples with positives on
// matching indices, the symmetric InfoNCE term is
//
//   S = A B^T / tau
//   L(A, B) = 1/2 * ( mean_i CE(softmax(S_i.), i) + mean_j CE(softmax(S_.j), j) )
//
// where the softmax denominator runs over all M pool members, positive
// included.

#ifndef MIM_LOSSES_HPP
#define MIM_LOSSES_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mim/numerics.hpp"

namespace mim {

enum class Tower { kQueryImage, kCatalogImage, kProductText, kQueryText };

const char* to_string(Tower tower);

using ProductId = std::uint64_t;

/// Per-sample embeddings of the active towers, index-aligned.
struct AlignedBatch {
  std::optional<Var> query_image;
  std::optional<Var> catalog_image;
  std::optional<Var> product_text;
  std::optional<Var> query_text;
  std::vector<ProductId> product_ids;
  /// Local batch size B and shard count N_g; the pool holds B * N_g rows.
  Index local_batch = 0;
  Index shards = 1;

  const std::optional<Var>& tower(Tower t) const;
  std::optional<Var>& tower(Tower t);
  Index pool_size() const { return static_cast<Index>(product_ids.size()); }
};

struct PairLoss {
  Tower a;
  Tower b;
  Var loss;

  /// "query_image/catalog_image" style key.
  std::string key() const;
};

/// Differentiable per-pair terms and their sum.
struct LossTerms {
  std::vector<PairLoss> pairs;
  Var total;
};

struct LossBreakdown {
  std::vector<std::pair<std::string, double>> pairs;
  double total = 0.0;

  double at(const std::string& key) const;
};

LossBreakdown breakdown(const LossTerms& terms);

/// Symmetric InfoNCE between two index-aligned embedding pools.
/// Requires M >= 2 and tau > 0.
Var pair_infonce(const Var& a, const Var& b, const Var& tau);

/// Concatenates shard batches into one pool of M = B * N_g samples.
/// Shards must share B, carry the same towers, and have disjoint ids.
AlignedBatch gather_shards(std::span<const AlignedBatch> shards);

/// IIC only: query image against catalog image.
LossTerms loss_image_only(const AlignedBatch& batch, const Var& tau);

/// IIC + ITC(query image, product text) + ITC(catalog image, product text).
LossTerms loss_3tower(const AlignedBatch& batch, const Var& tau);

/// Unweighted sum over the six unordered pairs of the four towers. The
/// first three pairs coincide with loss_3tower.
LossTerms loss_4tower(const AlignedBatch& batch, const Var& tau);

/// Throws DataError when two pool members share a product id.
void require_distinct_products(std::span<const ProductId> ids);

}  // namespace mim

#endif  // MIM_LOSSES_HPP
