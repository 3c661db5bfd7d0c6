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

// Encoder towers. One image trunk serves both the query-image and the
// catalog-image roles and one text trunk serves both text roles; each role
// owns only its linear projection into the shared embedding space.
//
//   image:  features -> [tanh(x W_i + b_i)]* -> proj_role -> L2 normalize
//   text:   tokens -> masked mean of token embeddings -> tanh(x W + b)
//                  -> proj_role -> L2 normalize
//
// A three-tower model has no query-text projection; query text is then
// projected with the product-text head.

#ifndef MIM_TOWERS_HPP
#define MIM_TOWERS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mim/numerics.hpp"

namespace mim {

using TokenSeq = std::vector<std::int32_t>;

inline constexpr std::int32_t kPadToken = 0;

enum class ImageRole { kQuery, kCatalog };
enum class TextRole { kProduct, kQuery };

const char* to_string(ImageRole role);
const char* to_string(TextRole role);

struct TowerConfig {
  Index image_feature_dim = 64;
  Index vocab_size = 512;
  Index max_tokens = 32;
  std::vector<Index> hidden_dims = {128, 128};
  Index embed_dim = 64;
  double temperature_init = 0.07;
  double temperature_lo = 0.01;
  double temperature_hi = 1.0;
  double token_init_scale = 0.1;
  /// 3 or 4.
  int towers = 3;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// True when two configs describe the same parameter shapes apart from
  /// the tower count.
  bool same_shapes(const TowerConfig& other) const;

  friend bool operator==(const TowerConfig&, const TowerConfig&) = default;
};

void to_json(nlohmann::json& j, const TowerConfig& c);
void from_json(const nlohmann::json& j, TowerConfig& c);

namespace param_names {
inline constexpr const char* kTextEmbedding = "text.embedding";
inline constexpr const char* kLogTemperature = "log_temperature";
inline constexpr const char* kProjQueryImage = "proj.query_image";
inline constexpr const char* kProjCatalogImage = "proj.catalog_image";
inline constexpr const char* kProjProductText = "proj.product_text";
inline constexpr const char* kProjQueryText = "proj.query_text";
std::string image_layer(std::size_t i, bool bias);
std::string text_layer(bool bias);
std::string projection(const char* head, bool bias);
}  // namespace param_names

/// All trainable state of one model.
struct TowerParams {
  TowerConfig config;
  ParamSet params;

  bool has_query_text_projection() const;
};

TowerParams init_towers(const TowerConfig& config, std::uint64_t seed);

/// Adds the query-text head to a three-tower model as a copy of the
/// product-text head. No-op for four-tower models.
void adapt_to_four_towers(TowerParams& model);

/// Clamps log_temperature into the configured bounds.
void clamp_temperature(TowerParams& model);

double temperature(const TowerParams& model);

/// Truncates to max_tokens and validates ids. Throws ValidationError with
/// the offending position for ids outside [0, vocab_size).
TokenSeq prepare_tokens(const TokenSeq& tokens, const TowerConfig& config);

/// Records the tower computations on a tape. Parameters are bound lazily,
/// once per tape. With `trainable` false they enter as constants so no
/// gradients are produced.
class TowerGraph {
 public:
  TowerGraph(Tape& tape, TowerParams& model, bool trainable = true);
  TowerGraph(Tape& tape, const TowerParams& model);

  Var image_trunk(const Tensor& features);
  Var encode_images(const Tensor& features, ImageRole role);
  Var text_trunk(std::span<const TokenSeq> tokens);
  Var encode_texts(std::span<const TokenSeq> tokens, TextRole role);
  Var temperature();

  Tape& tape() { return tape_; }

 private:
  Var param(const std::string& name);
  Var project(const Var& trunk, const char* head);

  Tape& tape_;
  TowerParams* mutable_model_;
  const TowerParams& model_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

// Inference. Output rows are unit-norm 32-bit embeddings.

RowMatrix<float> encode_images(const TowerParams& model, const Tensor& features,
                               ImageRole role);
RowMatrix<float> encode_texts(const TowerParams& model,
                              std::span<const TokenSeq> tokens, TextRole role);
Vector<float> encode_image(const TowerParams& model,
                           const Vector<double>& features, ImageRole role);
Vector<float> encode_text(const TowerParams& model, const TokenSeq& tokens,
                          TextRole role);

/// Pre-projection activations, for checking weight sharing across roles.
Tensor image_trunk_activations(const TowerParams& model, const Tensor& features);
Tensor text_trunk_activations(const TowerParams& model,
                              std::span<const TokenSeq> tokens);

// Checkpoints: "MIMC", u16 version, u32-length JSON config, u32 parameter
// count, then per parameter u16-length name, u32 rows, u32 cols and
// rows*cols little-endian f64 values.

inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const TowerParams& model,
                     const std::filesystem::path& path);
TowerParams load_checkpoint(const std::filesystem::path& path);
/// Loads and reconciles with `expected`: shapes must match, and a
/// three-tower checkpoint is adapted when `expected.towers` is 4.
TowerParams load_checkpoint(const std::filesystem::path& path,
                            const TowerConfig& expected);

}  // namespace mim

#endif  // MIM_TOWERS_HPP
