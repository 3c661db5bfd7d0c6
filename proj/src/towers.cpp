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

#include "mim/towers.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "mim/binary_io.hpp"

namespace mim {

const char* to_string(ImageRole role) {
  return role == ImageRole::kQuery ? "query_image" : "catalog_image";
}

const char* to_string(TextRole role) {
  return role == TextRole::kProduct ? "product_text" : "query_text";
}

void TowerConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw ConfigError("tower config: " + what);
  };
  if (image_feature_dim < 1) fail("image_feature_dim must be positive");
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (max_tokens < 1) fail("max_tokens must be at least 1");
  if (hidden_dims.empty()) fail("hidden_dims must not be empty");
  for (Index h : hidden_dims) {
    if (h < 1) fail("hidden_dims entries must be positive");
  }
  if (embed_dim < 2) fail("embed_dim must be at least 2");
  if (!(temperature_lo > 0.0)) fail("temperature_lo must be positive");
  if (!(temperature_lo < temperature_hi)) {
    fail("temperature_lo must be below temperature_hi");
  }
  if (!(temperature_init > 0.0)) fail("temperature_init must be positive");
  if (!(token_init_scale > 0.0)) fail("token_init_scale must be positive");
  if (towers != 3 && towers != 4) fail("towers must be 3 or 4");
}

bool TowerConfig::same_shapes(const TowerConfig& other) const {
  return image_feature_dim == other.image_feature_dim &&
         vocab_size == other.vocab_size && hidden_dims == other.hidden_dims &&
         embed_dim == other.embed_dim;
}

void to_json(nlohmann::json& j, const TowerConfig& c) {
  j = nlohmann::json{
      {"image_feature_dim", c.image_feature_dim},
      {"vocab_size", c.vocab_size},
      {"max_tokens", c.max_tokens},
      {"hidden_dims", c.hidden_dims},
      {"embed_dim", c.embed_dim},
      {"temperature_init", c.temperature_init},
      {"temperature_bounds", {c.temperature_lo, c.temperature_hi}},
      {"token_init_scale", c.token_init_scale},
      {"towers", c.towers},
  };
}

void from_json(const nlohmann::json& j, TowerConfig& c) {
  c.image_feature_dim = j.at("image_feature_dim").get<Index>();
  c.vocab_size = j.at("vocab_size").get<Index>();
  c.max_tokens = j.at("max_tokens").get<Index>();
  c.hidden_dims = j.at("hidden_dims").get<std::vector<Index>>();
  c.embed_dim = j.at("embed_dim").get<Index>();
  c.temperature_init = j.at("temperature_init").get<double>();
  const auto& bounds = j.at("temperature_bounds");
  c.temperature_lo = bounds.at(0).get<double>();
  c.temperature_hi = bounds.at(1).get<double>();
  c.token_init_scale = j.at("token_init_scale").get<double>();
  c.towers = j.at("towers").get<int>();
}

namespace param_names {

std::string image_layer(std::size_t i, bool bias) {
  return "image.l" + std::to_string(i) + (bias ? ".bias" : ".weight");
}

std::string text_layer(bool bias) {
  return bias ? "text.l0.bias" : "text.l0.weight";
}

std::string projection(const char* head, bool bias) {
  return std::string(head) + (bias ? ".bias" : ".weight");
}

}  // namespace param_names

bool TowerParams::has_query_text_projection() const {
  return params.contains(
      param_names::projection(param_names::kProjQueryText, false));
}

namespace {

// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void add_linear(ParamSet& ps, const std::string& weight,
                const std::string& bias, Index in, Index out,
                std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  Tensor b(1, out);
  for (Index i = 0; i < b.size(); ++i) b.data()[i] = u(rng);
  ps.add(weight, std::move(w), true);
  ps.add(bias, std::move(b), false);
}

const char* image_head(ImageRole role) {
  return role == ImageRole::kQuery ? param_names::kProjQueryImage
                                   : param_names::kProjCatalogImage;
}

}  // namespace

TowerParams init_towers(const TowerConfig& config, std::uint64_t seed) {
  config.validate();
  namespace pn = param_names;
  TowerParams model;
  model.config = config;
  std::mt19937_64 rng(seed);
  ParamSet& ps = model.params;

  const auto& hidden = config.hidden_dims;
  Index in = config.image_feature_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    add_linear(ps, pn::image_layer(i, false), pn::image_layer(i, true), in,
               hidden[i], rng);
    in = hidden[i];
  }

  std::normal_distribution<double> normal(0.0, config.token_init_scale);
  Tensor table(config.vocab_size, hidden.front());
  for (Index i = 0; i < table.size(); ++i) table.data()[i] = normal(rng);
  table.row(kPadToken).setZero();
  ps.add(pn::kTextEmbedding, std::move(table), true);
  add_linear(ps, pn::text_layer(false), pn::text_layer(true), hidden.front(),
             hidden.back(), rng);

  const Index trunk = hidden.back();
  for (const char* head : {pn::kProjQueryImage, pn::kProjCatalogImage,
                           pn::kProjProductText}) {
    add_linear(ps, pn::projection(head, false), pn::projection(head, true),
               trunk, config.embed_dim, rng);
  }
  if (config.towers == 4) {
    add_linear(ps, pn::projection(pn::kProjQueryText, false),
               pn::projection(pn::kProjQueryText, true), trunk,
               config.embed_dim, rng);
  }

  Tensor log_t(1, 1);
  log_t(0, 0) = std::log(config.temperature_init);
  ps.add(pn::kLogTemperature, std::move(log_t), false);
  clamp_temperature(model);
  return model;
}

void adapt_to_four_towers(TowerParams& model) {
  namespace pn = param_names;
  model.config.towers = 4;
  if (model.has_query_text_projection()) return;
  for (bool bias : {false, true}) {
    const Parameter& src =
        model.params.at(pn::projection(pn::kProjProductText, bias));
    model.params.add(pn::projection(pn::kProjQueryText, bias), src.value,
                     src.decay);
  }
}

void clamp_temperature(TowerParams& model) {
  double& lt = model.params.at(param_names::kLogTemperature).value(0, 0);
  lt = std::clamp(lt, std::log(model.config.temperature_lo),
                  std::log(model.config.temperature_hi));
}

double temperature(const TowerParams& model) {
  const double lt = model.params.at(param_names::kLogTemperature).value(0, 0);
  return std::clamp(std::exp(lt), model.config.temperature_lo,
                    model.config.temperature_hi);
}

TokenSeq prepare_tokens(const TokenSeq& tokens, const TowerConfig& config) {
  const std::size_t n =
      std::min(tokens.size(), static_cast<std::size_t>(config.max_tokens));
  TokenSeq out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t pos = 0; pos < out.size(); ++pos) {
    if (out[pos] < 0 || out[pos] >= config.vocab_size) {
      throw ValidationError("token id " + std::to_string(out[pos]) +
                            " at position " + std::to_string(pos) +
                            " outside vocabulary of " +
                            std::to_string(config.vocab_size));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TowerGraph

TowerGraph::TowerGraph(Tape& tape, TowerParams& model, bool trainable)
    : tape_(tape), mutable_model_(&model), model_(model), trainable_(trainable) {}

TowerGraph::TowerGraph(Tape& tape, const TowerParams& model)
    : tape_(tape), mutable_model_(nullptr), model_(model), trainable_(false) {}

Var TowerGraph::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = trainable_ ? tape_.param(mutable_model_->params, name)
                     : tape_.constant(model_.params.at(name).value);
  bound_.emplace(name, v);
  return v;
}

Var TowerGraph::project(const Var& trunk, const char* head) {
  namespace pn = param_names;
  Var projected = linear(trunk, param(pn::projection(head, false)),
                         param(pn::projection(head, true)));
  return normalize_rows(projected);
}

Var TowerGraph::image_trunk(const Tensor& features) {
  if (features.cols() != model_.config.image_feature_dim) {
    throw DimensionError("image features " + shape_string(features) +
                         " do not match image_feature_dim " +
                         std::to_string(model_.config.image_feature_dim));
  }
  Var h = tape_.constant(features);
  for (std::size_t i = 0; i < model_.config.hidden_dims.size(); ++i) {
    h = tanh(linear(h, param(param_names::image_layer(i, false)),
                    param(param_names::image_layer(i, true))));
  }
  return h;
}

Var TowerGraph::encode_images(const Tensor& features, ImageRole role) {
  return project(image_trunk(features), image_head(role));
}

Var TowerGraph::text_trunk(std::span<const TokenSeq> tokens) {
  std::vector<TokenSeq> prepared;
  prepared.reserve(tokens.size());
  for (const TokenSeq& t : tokens) {
    prepared.push_back(prepare_tokens(t, model_.config));
  }
  Var pooled =
      embedding_mean(param(param_names::kTextEmbedding), prepared, kPadToken);
  return tanh(linear(pooled, param(param_names::text_layer(false)),
                     param(param_names::text_layer(true))));
}

Var TowerGraph::encode_texts(std::span<const TokenSeq> tokens, TextRole role) {
  const char* head = param_names::kProjProductText;
  if (role == TextRole::kQuery && model_.has_query_text_projection()) {
    head = param_names::kProjQueryText;
  }
  return project(text_trunk(tokens), head);
}

Var TowerGraph::temperature() {
  return exp_clamped(param(param_names::kLogTemperature),
                     model_.config.temperature_lo,
                     model_.config.temperature_hi);
}

// ---------------------------------------------------------------------------
// Inference

RowMatrix<float> encode_images(const TowerParams& model, const Tensor& features,
                               ImageRole role) {
  Tape tape;
  TowerGraph graph(tape, model);
  return graph.encode_images(features, role).value().cast<float>();
}

RowMatrix<float> encode_texts(const TowerParams& model,
                              std::span<const TokenSeq> tokens, TextRole role) {
  Tape tape;
  TowerGraph graph(tape, model);
  return graph.encode_texts(tokens, role).value().cast<float>();
}

Vector<float> encode_image(const TowerParams& model,
                           const Vector<double>& features, ImageRole role) {
  Tensor row = features.transpose();
  return encode_images(model, row, role).row(0).transpose();
}

Vector<float> encode_text(const TowerParams& model, const TokenSeq& tokens,
                          TextRole role) {
  std::vector<TokenSeq> one{tokens};
  return encode_texts(model, one, role).row(0).transpose();
}

Tensor image_trunk_activations(const TowerParams& model,
                               const Tensor& features) {
  Tape tape;
  TowerGraph graph(tape, model);
  return graph.image_trunk(features).value();
}

Tensor text_trunk_activations(const TowerParams& model,
                              std::span<const TokenSeq> tokens) {
  Tape tape;
  TowerGraph graph(tape, model);
  return graph.text_trunk(tokens).value();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'I', 'M', 'C'};

bool decays(const std::string& name) {
  return name != param_names::kLogTemperature &&
         !(name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0);
}

}  // namespace

void save_checkpoint(const TowerParams& model,
                     const std::filesystem::path& path) {
  binary::Writer w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  const std::string config = nlohmann::json(model.config).dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.put_bytes(config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, p] : model.params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.cols()));
    for (Index i = 0; i < p.value.size(); ++i) w.put<double>(p.value.data()[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

TowerParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  binary::Reader r(bytes);
  auto truncated = [&](const std::string& what) {
    return CheckpointError("checkpoint " + path.string() + " truncated while reading " +
                           what + " at offset " + std::to_string(r.offset()));
  };

  std::string magic;
  if (!r.get_bytes(4, magic)) throw truncated("magic");
  if (magic != std::string_view(kCheckpointMagic, 4)) {
    throw CheckpointError("checkpoint " + path.string() +
                          ": expected magic MIMC, found '" + magic + "'");
  }
  std::uint16_t version = 0;
  if (!r.get(version)) throw truncated("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + path.string() + ": expected version " +
                          std::to_string(kCheckpointVersion) + ", found " +
                          std::to_string(version));
  }
  std::uint32_t config_len = 0;
  std::string config_text;
  if (!r.get(config_len) || !r.get_bytes(config_len, config_text)) {
    throw truncated("config");
  }

  TowerParams model;
  try {
    model.config = nlohmann::json::parse(config_text).get<TowerConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() +
                          ": malformed config: " + e.what());
  }

  std::uint32_t count = 0;
  if (!r.get(count)) throw truncated("parameter count");
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint16_t name_len = 0;
    std::string name;
    std::uint32_t rows = 0, cols = 0;
    if (!r.get(name_len) || !r.get_bytes(name_len, name) || !r.get(rows) ||
        !r.get(cols)) {
      throw truncated("parameter header");
    }
    Tensor value(rows, cols);
    for (Index i = 0; i < value.size(); ++i) {
      if (!r.get(value.data()[i])) throw truncated("parameter '" + name + "'");
    }
    if (model.params.contains(name)) {
      throw CheckpointError("checkpoint " + path.string() +
                            ": duplicate parameter '" + name + "'");
    }
    model.params.add(name, std::move(value), decays(name));
  }
  if (r.remaining() != 0) {
    throw CheckpointError("checkpoint " + path.string() + ": " +
                          std::to_string(r.remaining()) + " trailing bytes");
  }

  // Every parameter the config implies must be present with its shape.
  const TowerParams reference = init_towers(model.config, 0);
  for (const auto& [name, p] : reference.params) {
    if (!model.params.contains(name)) {
      throw CheckpointError("checkpoint " + path.string() +
                            ": missing parameter '" + name + "'");
    }
    const Tensor& found = model.params.at(name).value;
    if (found.rows() != p.value.rows() || found.cols() != p.value.cols()) {
      throw CheckpointError("checkpoint " + path.string() + ": parameter '" +
                            name + "' expected " + shape_string(p.value) +
                            ", found " + shape_string(found));
    }
  }
  if (model.params.size() != reference.params.size()) {
    throw CheckpointError("checkpoint " + path.string() +
                          ": unexpected extra parameters");
  }
  return model;
}

TowerParams load_checkpoint(const std::filesystem::path& path,
                            const TowerConfig& expected) {
  TowerParams model = load_checkpoint(path);
  const TowerConfig& found = model.config;
  auto mismatch = [&](const std::string& field, const std::string& e,
                      const std::string& f) {
    return CheckpointError("checkpoint " + path.string() + ": " + field +
                           " expected " + e + ", found " + f);
  };
  if (found.image_feature_dim != expected.image_feature_dim) {
    throw mismatch("image_feature_dim", std::to_string(expected.image_feature_dim),
                   std::to_string(found.image_feature_dim));
  }
  if (found.vocab_size != expected.vocab_size) {
    throw mismatch("vocab_size", std::to_string(expected.vocab_size),
                   std::to_string(found.vocab_size));
  }
  if (found.embed_dim != expected.embed_dim) {
    throw mismatch("embed_dim", std::to_string(expected.embed_dim),
                   std::to_string(found.embed_dim));
  }
  if (found.hidden_dims != expected.hidden_dims) {
    throw mismatch("hidden_dims", nlohmann::json(expected.hidden_dims).dump(),
                   nlohmann::json(found.hidden_dims).dump());
  }
  if (found.towers == 4 && expected.towers == 3) {
    throw mismatch("towers", "3", "4");
  }
  if (expected.towers == 4) adapt_to_four_towers(model);
  return model;
}

}  // namespace mim
