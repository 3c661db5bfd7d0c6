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

// Fusion, exact search and recall evaluation.
//
//   fuse(x_img, x_txt, w) = normalize(w x_img + (1 - w) x_txt)
//
// with w = 1 and w = 0 returning the respective input untouched. Search is
// exact top-k by dot product of unit vectors; equal scores rank the lower
// product id first.

#ifndef MIM_RETRIEVAL_HPP
#define MIM_RETRIEVAL_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mim/errors.hpp"
#include "mim/numerics.hpp"
#include "mim/synthdata.hpp"
#include "mim/towers.hpp"

namespace mim {

inline constexpr double kUnitNormTolerance = 1e-4;

inline void check_fusion_weight(double w) {
  if (!(w >= 0.0 && w <= 1.0)) {
    throw ValidationError("fusion weight " + std::to_string(w) + " outside [0, 1]");
  }
}

template <typename Derived>
void check_unit_rows(const Eigen::MatrixBase<Derived>& x, const char* what) {
  for (Index r = 0; r < x.rows(); ++r) {
    const double n = static_cast<double>(x.row(r).norm());
    if (!(std::abs(n - 1.0) <= kUnitNormTolerance)) {
      throw ValidationError(std::string(what) + " row " + std::to_string(r) +
                            " is not unit norm (norm " + std::to_string(n) + ")");
    }
  }
}

/// Row-wise fusion of two matrices of unit rows.
template <typename DerivedA, typename DerivedB>
RowMatrix<typename DerivedA::Scalar> fuse(const Eigen::MatrixBase<DerivedA>& image,
                                          const Eigen::MatrixBase<DerivedB>& text,
                                          double w) {
  using Scalar = typename DerivedA::Scalar;
  check_fusion_weight(w);
  if (image.rows() != text.rows() || image.cols() != text.cols()) {
    throw DimensionError("fuse: image " + shape_string(image.rows(), image.cols()) +
                         " and text " + shape_string(text.rows(), text.cols()) + " differ");
  }
  check_unit_rows(image, "fuse image input");
  check_unit_rows(text, "fuse text input");
  if (w == 1.0) return image;
  if (w == 0.0) return text.template cast<Scalar>();
  const Scalar a = static_cast<Scalar>(w);
  const Scalar b = static_cast<Scalar>(1.0 - w);
  RowMatrix<Scalar> out = a * image + b * text.template cast<Scalar>();
  for (Index r = 0; r < out.rows(); ++r) {
    const Scalar n = out.row(r).norm();
    if (!(n > std::numeric_limits<Scalar>::epsilon())) {
      throw DegenerateInputError("degenerate fusion: row " + std::to_string(r) +
                                 " sums to zero at w = " + std::to_string(w));
    }
    out.row(r) /= n;
  }
  return out;
}

/// Single-vector fusion.
template <typename Scalar>
Vector<Scalar> fuse(const Vector<Scalar>& image, const Vector<Scalar>& text, double w) {
  return fuse(image.transpose(), text.transpose(), w).row(0).transpose();
}

struct Hit {
  ProductId product_id = 0;
  double score = 0.0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

using SearchResult = std::vector<Hit>;

/// Immutable product index with separate image and text embeddings and the
/// fused cache for one w_c.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;

  const std::vector<ProductId>& product_ids() const { return ids_; }
  const RowMatrix<float>& image() const { return image_; }
  const RowMatrix<float>& text() const { return text_; }
  const RowMatrix<float>& fused() const { return fused_; }
  double w_c() const { return w_c_; }
  Index size() const { return static_cast<Index>(ids_.size()); }
  Index dim() const { return image_.cols(); }

  friend RetrievalIndex build_index(std::vector<ProductId> ids, RowMatrix<float> image,
                                    RowMatrix<float> text, double w_c);

 private:
  std::vector<ProductId> ids_;
  RowMatrix<float> image_;
  RowMatrix<float> text_;
  RowMatrix<float> fused_;
  double w_c_ = 0.5;
};

/// Throws DataError on duplicate ids.
RetrievalIndex build_index(std::vector<ProductId> ids, RowMatrix<float> image,
                           RowMatrix<float> text, double w_c = 0.5);

/// Dot product accumulated in double in index order. Shared by search and
/// its tests so both see the same arithmetic.
double score(const float* a, const float* b, Index dim);

/// Exact top-k. Empty index gives an empty result; k < 1 is a
/// ValidationError.
SearchResult search(const RetrievalIndex& index, const Vector<float>& query, Index k);

// Evaluation.

enum class Task { kImageToImage, kImageToMultimodal, kMultimodal };

const char* to_string(Task task);
Task parse_task(const std::string& name);

struct WeightCell {
  double w_q = 1.0;
  double w_c = 1.0;

  friend bool operator==(const WeightCell&, const WeightCell&) = default;
};

/// {0, 0.05, ..., 1}.
std::vector<double> default_weight_steps();

/// Grid used when none is given: image_to_image (1, 1); image_to_multimodal
/// (1, 0.5); multimodal w_q over the steps at w_c = 0.5, or the full 2-D
/// grid with `full_2d`.
std::vector<WeightCell> default_grid(Task task, bool full_2d = false);

struct RecallCell {
  WeightCell weights;
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
};

struct EvalReport {
  Task task = Task::kImageToImage;
  std::vector<RecallCell> cells;
  RecallCell best;
  Index query_count = 0;
  Index index_size = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Precomputed embeddings for evaluation.
struct EvalInputs {
  std::vector<ProductId> index_ids;
  RowMatrix<float> index_image;
  RowMatrix<float> index_text;
  std::vector<ProductId> query_truth;
  RowMatrix<float> query_image;
  RowMatrix<float> query_text;
};

/// Index = queried products plus distractors; queries = the evaluation
/// queries with their paired text.
EvalInputs embed_for_eval(const TowerParams& model, const Corpus& corpus);

/// Empty grid selects default_grid(task). image_to_image rejects a
/// non-empty grid; image_to_multimodal forces w_q = 1 in every cell.
EvalReport evaluate(const EvalInputs& inputs, Task task, std::vector<WeightCell> grid = {});
EvalReport evaluate(const TowerParams& model, const Corpus& corpus, Task task,
                    std::vector<WeightCell> grid = {});

// Embedding files: "MIME", u16 version, u32 dim, u64 count, then count
// records of u64 id and dim little-endian f32.

inline constexpr std::uint16_t kEmbeddingVersion = 1;

struct EmbeddingTable {
  std::vector<std::uint64_t> ids;
  RowMatrix<float> vectors;

  Index dim() const { return vectors.cols(); }
};

void write_embeddings(const EmbeddingTable& table, Index dim, const std::filesystem::path& path);
/// Throws FormatError on bad magic, version, truncation or, when
/// `expected_dim` is positive, a header dim that differs from it.
EmbeddingTable read_embeddings(const std::filesystem::path& path, Index expected_dim = 0);

/// Writes catalog_image.mime, product_text.mime, query_image.mime and
/// query_text.mime under `dir`.
void export_embeddings(const TowerParams& model, const Corpus& corpus,
                       const std::filesystem::path& dir);

// Index files: "MIMX", u16 version, f64 w_c, u32 dim, u64 count, then count
// records of u64 id, dim f32 image and dim f32 text values. The fused
// cache is rebuilt on load.

inline constexpr std::uint16_t kIndexVersion = 1;

void save_index(const RetrievalIndex& index, const std::filesystem::path& path);
RetrievalIndex load_index(const std::filesystem::path& path);

/// Builds the index from exported catalog_image.mime and product_text.mime.
RetrievalIndex index_from_embeddings(const std::filesystem::path& dir, double w_c);

}  // namespace mim

#endif  // MIM_RETRIEVAL_HPP
