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

#include "mim/losses.hpp"

#include <algorithm>
#include <array>
#include <unordered_set>

namespace mim {

const char* to_string(Tower tower) {
  switch (tower) {
    case Tower::kQueryImage: return "query_image";
    case Tower::kCatalogImage: return "catalog_image";
    case Tower::kProductText: return "product_text";
    case Tower::kQueryText: return "query_text";
  }
  return "unknown";
}

const std::optional<Var>& AlignedBatch::tower(Tower t) const {
  switch (t) {
    case Tower::kQueryImage: return query_image;
    case Tower::kCatalogImage: return catalog_image;
    case Tower::kProductText: return product_text;
    case Tower::kQueryText: return query_text;
  }
  return query_image;
}

std::optional<Var>& AlignedBatch::tower(Tower t) {
  return const_cast<std::optional<Var>&>(std::as_const(*this).tower(t));
}

std::string PairLoss::key() const {
  return std::string(to_string(a)) + "/" + to_string(b);
}

double LossBreakdown::at(const std::string& key) const {
  for (const auto& [k, v] : pairs) {
    if (k == key) return v;
  }
  throw ContractError("no loss term '" + key + "'");
}

LossBreakdown breakdown(const LossTerms& terms) {
  LossBreakdown out;
  for (const auto& p : terms.pairs) out.pairs.emplace_back(p.key(), p.loss.scalar());
  out.total = terms.total.scalar();
  return out;
}

Var pair_infonce(const Var& a, const Var& b, const Var& tau) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("pair_infonce: pools " + shape_string(a.value()) +
                         " and " + shape_string(b.value()) + " differ");
  }
  if (a.rows() < 2) {
    throw ContractError("pair_infonce: need at least 2 samples for negatives, got " +
                        std::to_string(a.rows()));
  }
  if (!(tau.scalar() > 0.0)) {
    throw ContractError("pair_infonce: temperature must be positive");
  }
  Var logits = divide_by_scalar(matmul_nt(a, b), tau);
  Var a2b = diagonal_cross_entropy(logits);
  Var b2a = diagonal_cross_entropy(transpose(logits));
  return scale(add(a2b, b2a), 0.5);
}

void require_distinct_products(std::span<const ProductId> ids) {
  std::unordered_set<ProductId> seen;
  seen.reserve(ids.size());
  for (ProductId id : ids) {
    if (!seen.insert(id).second) {
      throw DataError("product id " + std::to_string(id) +
                      " appears twice in the gathered pool");
    }
  }
}

AlignedBatch gather_shards(std::span<const AlignedBatch> shards) {
  if (shards.empty()) throw ContractError("gather_shards: no shards");
  constexpr std::array<Tower, 4> kTowers = {
      Tower::kQueryImage, Tower::kCatalogImage, Tower::kProductText,
      Tower::kQueryText};
  const AlignedBatch& first = shards.front();
  AlignedBatch out;
  out.local_batch = first.local_batch;
  out.shards = static_cast<Index>(shards.size());
  for (const AlignedBatch& s : shards) {
    if (s.local_batch != first.local_batch ||
        s.pool_size() != first.local_batch) {
      throw ContractError("gather_shards: shards must share local batch size " +
                          std::to_string(first.local_batch));
    }
    for (Tower t : kTowers) {
      if (s.tower(t).has_value() != first.tower(t).has_value()) {
        throw ContractError(std::string("gather_shards: tower ") + to_string(t) +
                            " present in some shards only");
      }
    }
    out.product_ids.insert(out.product_ids.end(), s.product_ids.begin(),
                           s.product_ids.end());
  }
  require_distinct_products(out.product_ids);
  for (Tower t : kTowers) {
    if (!first.tower(t)) continue;
    if (shards.size() == 1) {
      out.tower(t) = first.tower(t);
      continue;
    }
    std::vector<Var> parts;
    parts.reserve(shards.size());
    for (const AlignedBatch& s : shards) parts.push_back(*s.tower(t));
    out.tower(t) = concat_rows(parts);
  }
  return out;
}

namespace {

LossTerms sum_pairs(const AlignedBatch& batch, const Var& tau,
                    std::span<const std::pair<Tower, Tower>> pairs,
                    const char* what) {
  for (const auto& [a, b] : pairs) {
    for (Tower t : {a, b}) {
      if (!batch.tower(t)) {
        throw ContractError(std::string(what) + ": batch is missing tower " +
                            to_string(t));
      }
    }
  }
  LossTerms terms;
  for (const auto& [a, b] : pairs) {
    Var l = pair_infonce(*batch.tower(a), *batch.tower(b), tau);
    terms.pairs.push_back(PairLoss{a, b, l});
    terms.total = terms.total.valid() ? add(terms.total, l) : l;
  }
  return terms;
}

constexpr std::pair<Tower, Tower> kImageOnlyPairs[] = {
    {Tower::kQueryImage, Tower::kCatalogImage}};

constexpr std::pair<Tower, Tower> kThreeTowerPairs[] = {
    {Tower::kQueryImage, Tower::kCatalogImage},
    {Tower::kQueryImage, Tower::kProductText},
    {Tower::kCatalogImage, Tower::kProductText}};

constexpr std::pair<Tower, Tower> kFourTowerPairs[] = {
    {Tower::kQueryImage, Tower::kCatalogImage},
    {Tower::kQueryImage, Tower::kProductText},
    {Tower::kCatalogImage, Tower::kProductText},
    {Tower::kQueryText, Tower::kQueryImage},
    {Tower::kQueryText, Tower::kCatalogImage},
    {Tower::kQueryText, Tower::kProductText}};

}  // namespace

LossTerms loss_image_only(const AlignedBatch& batch, const Var& tau) {
  return sum_pairs(batch, tau, kImageOnlyPairs, "loss_image_only");
}

LossTerms loss_3tower(const AlignedBatch& batch, const Var& tau) {
  return sum_pairs(batch, tau, kThreeTowerPairs, "loss_3tower");
}

LossTerms loss_4tower(const AlignedBatch& batch, const Var& tau) {
  return sum_pairs(batch, tau, kFourTowerPairs, "loss_4tower");
}

}  // namespace mim
