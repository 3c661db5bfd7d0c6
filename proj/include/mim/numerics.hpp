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

// Dense tensors, a per-step reverse-mode tape, finite-difference gradient
// checking and a decoupled-weight-decay Adam optimizer.
//
// Tensors are rank <= 2 row-major Eigen matrices: a vector of length n is a
// 1 x n row and a scalar is 1 x 1. Training math runs in double precision.

#ifndef MIM_NUMERICS_HPP
#define MIM_NUMERICS_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mim/errors.hpp"

namespace mim {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Tensor = RowMatrix<double>;

/// "[rows x cols]", used in dimension error messages.
std::string shape_string(const Tensor& t);
std::string shape_string(Index rows, Index cols);

struct Parameter {
  Tensor value;
  Tensor grad;
  /// Whether decoupled weight decay applies (off for biases and temperature).
  bool decay = true;
};

/// Named trainable parameters with paired gradient accumulators. Iteration
/// order is lexicographic by name, which keeps every consumer deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Parameter>;

  Parameter& add(const std::string& name, Tensor value, bool decay = true);
  void remove(const std::string& name);

  bool contains(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  Index scalar_count() const;

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  void zero_grad();
  /// True once a backward pass has written gradients since the last zero_grad.
  bool has_gradients() const { return has_gradients_; }
  void mark_gradients() { has_gradients_ = true; }

 private:
  Map params_;
  bool has_gradients_ = false;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Value of a 1 x 1 var.
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Access passed to an op's backward function.
class BackwardContext {
 public:
  const Tensor& out_value() const;
  const Tensor& out_grad() const;
  std::size_t input_count() const;
  const Tensor& input_value(std::size_t i) const;
  bool input_requires_grad(std::size_t i) const;
  /// Gradient accumulator for input i, zero-initialized on first access.
  Tensor& input_grad(std::size_t i);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  Tape& tape_;
  std::size_t node_;
};

/// Reverse-mode gradient tape. A fresh tape is built for every evaluation;
/// nothing persists between steps.
class Tape {
 public:
  using Backward = std::function<void(BackwardContext&)>;

  /// In checked mode every recorded value must be finite.
  explicit Tape(bool checked = true) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into its gradient.
  Var param(ParamSet& params, const std::string& name);

  /// Records an op. `backward` reads the output gradient and accumulates
  /// into input gradients through the context.
  Var record(Tensor value, std::vector<Var> inputs, Backward backward,
             const char* op_name);

  /// Propagates d(loss)/d(node) for a scalar loss and adds the result into
  /// the gradients of every bound parameter.
  void backward(const Var& loss);

  const Tensor& value(const Var& v) const;
  /// Gradient with respect to `v` after backward(); zero if unreachable.
  Tensor grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }
  bool checked() const { return checked_; }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Backward backward;
    Parameter* param = nullptr;
    ParamSet* owner = nullptr;
  };

  void check_owned(const Var& v) const;

  std::vector<Node> nodes_;
  bool checked_;
};

// Differentiable ops. All inputs must live on the same tape.

/// input . weight + bias, with bias broadcast over rows.
Var linear(const Var& input, const Var& weight, const Var& bias);
Var matmul(const Var& a, const Var& b);
/// a . b^T
Var matmul_nt(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& bias);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// a / s for a 1 x 1 var s.
Var divide_by_scalar(const Var& a, const Var& s);
Var tanh(const Var& x);
Var exp(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var transpose(const Var& x);
Var concat_rows(std::span<const Var> parts);
/// exp(x) clamped into [lo, hi]; zero gradient while clamped.
Var exp_clamped(const Var& x, double lo, double hi);
/// Row-wise L2 normalization. Rows with norm below `min_norm` raise
/// DegenerateInputError.
Var normalize_rows(const Var& x, double min_norm = 1e-12);
/// Mean of table rows selected by each sequence, skipping `pad_id`. A
/// sequence of only padding pools to the zero vector.
Var embedding_mean(const Var& table,
                   std::span<const std::vector<std::int32_t>> sequences,
                   std::int32_t pad_id = 0);
/// mean_i [ logsumexp(logits_i) - logits_ii ] for a square logit matrix:
/// the cross-entropy against one-hot targets on the diagonal.
Var diagonal_cross_entropy(const Var& logits);

// Gradient checking.

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double rtol = 0.0;

  bool passed() const;
  std::vector<std::string> failures() const;
  const GradCheckEntry& at(const std::string& name) const;
};

struct GradCheckOptions {
  double step = 1e-4;
  /// Added to |numeric| in the relative error denominator.
  double epsilon = 1e-6;
};

using LossFunction = std::function<Var(Tape&, ParamSet&)>;

/// Compares backward() against a fourth-order central difference for every
/// scalar of every parameter. Parameter values are restored afterwards and
/// gradients are left zeroed.
GradCheckReport grad_check(const LossFunction& fn, ParamSet& params,
                           double rtol, const GradCheckOptions& options = {});

// Optimization.

struct OptimizerState {
  struct Moments {
    Tensor first;
    Tensor second;
  };

  double learning_rate = 5e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, Moments> moments;
};

/// One Adam step with decoupled weight decay, then zeroes gradients.
/// Throws ContractError when no backward pass has populated gradients.
void adam_step(OptimizerState& state, ParamSet& params);

}  // namespace mim

#endif  // MIM_NUMERICS_HPP
