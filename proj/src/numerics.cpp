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

#include "mim/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mim {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << " x " << cols << "]";
  return os.str();
}

std::string shape_string(const Tensor& t) {
  return shape_string(t.rows(), t.cols());
}

// ---------------------------------------------------------------------------
// ParamSet

Parameter& ParamSet::add(const std::string& name, Tensor value, bool decay) {
  if (params_.count(name) != 0) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  Parameter p;
  p.grad = Tensor::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  p.decay = decay;
  return params_.emplace(name, std::move(p)).first->second;
}

void ParamSet::remove(const std::string& name) { params_.erase(name); }

bool ParamSet::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

Parameter& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ContractError("unknown parameter '" + name + "'");
  }
  return it->second;
}

const Parameter& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ContractError("unknown parameter '" + name + "'");
  }
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

Index ParamSet::scalar_count() const {
  Index n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, p] : params_) p.grad.setZero();
  has_gradients_ = false;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound variable");
  return tape_->value(*this);
}

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) {
    throw ContractError("expected a scalar, got " + shape_string(v));
  }
  return v(0, 0);
}

const Tensor& BackwardContext::out_value() const {
  return tape_.nodes_[node_].value;
}

const Tensor& BackwardContext::out_grad() const {
  return tape_.nodes_[node_].grad;
}

std::size_t BackwardContext::input_count() const {
  return tape_.nodes_[node_].inputs.size();
}

const Tensor& BackwardContext::input_value(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

bool BackwardContext::input_requires_grad(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].requires_grad;
}

Tensor& BackwardContext::input_grad(std::size_t i) {
  auto& in = tape_.nodes_[tape_.nodes_[node_].inputs.at(i)];
  if (!in.has_grad) {
    in.grad = Tensor::Zero(in.value.rows(), in.value.cols());
    in.has_grad = true;
  }
  return in.grad;
}

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("variable does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) {
  if (checked_ && !value.allFinite()) {
    throw NumericError("non-finite value in constant " + shape_string(value));
  }
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(ParamSet& params, const std::string& name) {
  Parameter& p = params.at(name);
  if (checked_ && !p.value.allFinite()) {
    throw NumericError("non-finite value in parameter '" + name + "'");
  }
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  n.owner = &params;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward,
                 const char* op_name) {
  if (checked_ && !value.allFinite()) {
    throw NumericError(std::string("non-finite output from ") + op_name + " " +
                       shape_string(value));
  }
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owned(v);
    n.inputs.push_back(v.id_);
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(const Var& v) const {
  check_owned(v);
  return nodes_[v.id_].value;
}

Tensor Tape::grad(const Var& v) const {
  check_owned(v);
  const Node& n = nodes_[v.id_];
  if (!n.has_grad) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  check_owned(loss);
  Node& root = nodes_[loss.id_];
  if (root.value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        shape_string(root.value));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  root.grad = Tensor::Ones(1, 1);
  root.has_grad = true;

  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad || !n.backward) continue;
    BackwardContext ctx(*this, id);
    n.backward(ctx);
  }

  for (Node& n : nodes_) {
    if (n.param == nullptr) continue;
    if (n.has_grad) n.param->grad += n.grad;
    n.owner->mark_gradients();
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands live on different tapes");
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.value()) + " vs " +
                         shape_string(b.value()));
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.value().size() != 1) {
    throw DimensionError(std::string(op) + ": expected scalar, got " +
                         shape_string(s.value()));
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.value()) + " . " +
                         shape_string(b.value()));
  }
  Tensor out = a.value() * b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        if (ctx.input_requires_grad(0))
          ctx.input_grad(0).noalias() += g * ctx.input_value(1).transpose();
        if (ctx.input_requires_grad(1))
          ctx.input_grad(1).noalias() += ctx.input_value(0).transpose() * g;
      },
      "matmul");
}

Var matmul_nt(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(a.value()) + " . " +
                         shape_string(b.value()) + "^T");
  }
  Tensor out = a.value() * b.value().transpose();
  return a.tape()->record(
      std::move(out), {a, b},
      [](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        if (ctx.input_requires_grad(0))
          ctx.input_grad(0).noalias() += g * ctx.input_value(1);
        if (ctx.input_requires_grad(1))
          ctx.input_grad(1).noalias() += g.transpose() * ctx.input_value(0);
      },
      "matmul_nt");
}

Var add_bias(const Var& x, const Var& bias) {
  require_same_tape(x, bias);
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_bias: input " + shape_string(x.value()) +
                         " with bias " + shape_string(bias.value()));
  }
  Tensor out = x.value().rowwise() + bias.value().row(0);
  return x.tape()->record(
      std::move(out), {x, bias},
      [](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        if (ctx.input_requires_grad(0)) ctx.input_grad(0) += g;
        if (ctx.input_requires_grad(1))
          ctx.input_grad(1) += g.colwise().sum();
      },
      "add_bias");
}

Var linear(const Var& input, const Var& weight, const Var& bias) {
  if (input.cols() != weight.rows()) {
    throw DimensionError("linear: input " + shape_string(input.value()) +
                         " does not match weight " +
                         shape_string(weight.value()));
  }
  return add_bias(matmul(input, weight), bias);
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value() + b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [](BackwardContext& ctx) {
        if (ctx.input_requires_grad(0)) ctx.input_grad(0) += ctx.out_grad();
        if (ctx.input_requires_grad(1)) ctx.input_grad(1) += ctx.out_grad();
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor out = a.value() - b.value();
  return a.tape()->record(
      std::move(out), {a, b},
      [](BackwardContext& ctx) {
        if (ctx.input_requires_grad(0)) ctx.input_grad(0) += ctx.out_grad();
        if (ctx.input_requires_grad(1)) ctx.input_grad(1) -= ctx.out_grad();
      },
      "sub");
}

Var hadamard(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "hadamard");
  Tensor out = a.value().cwiseProduct(b.value());
  return a.tape()->record(
      std::move(out), {a, b},
      [](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        if (ctx.input_requires_grad(0))
          ctx.input_grad(0) += g.cwiseProduct(ctx.input_value(1));
        if (ctx.input_requires_grad(1))
          ctx.input_grad(1) += g.cwiseProduct(ctx.input_value(0));
      },
      "hadamard");
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value() * factor;
  return a.tape()->record(
      std::move(out), {a},
      [factor](BackwardContext& ctx) {
        ctx.input_grad(0) += ctx.out_grad() * factor;
      },
      "scale");
}

Var divide_by_scalar(const Var& a, const Var& s) {
  require_same_tape(a, s);
  require_scalar(s, "divide_by_scalar");
  const double d = s.scalar();
  if (d == 0.0) throw NumericError("divide_by_scalar: division by zero");
  Tensor out = a.value() / d;
  return a.tape()->record(
      std::move(out), {a, s},
      [](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        const double d = ctx.input_value(1)(0, 0);
        if (ctx.input_requires_grad(0)) ctx.input_grad(0) += g / d;
        if (ctx.input_requires_grad(1)) {
          ctx.input_grad(1)(0, 0) -=
              g.cwiseProduct(ctx.input_value(0)).sum() / (d * d);
        }
      },
      "divide_by_scalar");
}

Var tanh(const Var& x) {
  Tensor out = x.value().array().tanh().matrix();
  return x.tape()->record(
      std::move(out), {x},
      [](BackwardContext& ctx) {
        const auto y = ctx.out_value().array();
        ctx.input_grad(0).array() += ctx.out_grad().array() * (1.0 - y * y);
      },
      "tanh");
}

Var exp(const Var& x) {
  Tensor out = x.value().array().exp().matrix();
  return x.tape()->record(
      std::move(out), {x},
      [](BackwardContext& ctx) {
        ctx.input_grad(0).array() +=
            ctx.out_grad().array() * ctx.out_value().array();
      },
      "exp");
}

Var sum(const Var& x) {
  Tensor out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape()->record(
      std::move(out), {x},
      [](BackwardContext& ctx) {
        ctx.input_grad(0).array() += ctx.out_grad()(0, 0);
      },
      "sum");
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), 1.0 / n);
}

Var transpose(const Var& x) {
  Tensor out = x.value().transpose();
  return x.tape()->record(
      std::move(out), {x},
      [](BackwardContext& ctx) {
        ctx.input_grad(0) += ctx.out_grad().transpose();
      },
      "transpose");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: " + shape_string(p.value()) +
                           " does not match width " + std::to_string(cols));
    }
    rows += p.rows();
  }
  Tensor out(rows, cols);
  Index offset = 0;
  std::vector<Index> offsets;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offsets.push_back(offset);
    offset += p.rows();
  }
  return parts.front().tape()->record(
      std::move(out), std::vector<Var>(parts.begin(), parts.end()),
      [offsets](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        for (std::size_t i = 0; i < ctx.input_count(); ++i) {
          if (!ctx.input_requires_grad(i)) continue;
          Tensor& gi = ctx.input_grad(i);
          gi += g.middleRows(offsets[i], gi.rows());
        }
      },
      "concat_rows");
}

Var exp_clamped(const Var& x, double lo, double hi) {
  require_scalar(x, "exp_clamped");
  if (!(lo < hi)) throw ContractError("exp_clamped: lo must be below hi");
  const double raw = std::exp(x.scalar());
  const bool inside = raw > lo && raw < hi;
  Tensor out(1, 1);
  out(0, 0) = std::clamp(raw, lo, hi);
  return x.tape()->record(
      std::move(out), {x},
      [inside](BackwardContext& ctx) {
        if (inside) {
          ctx.input_grad(0)(0, 0) +=
              ctx.out_grad()(0, 0) * ctx.out_value()(0, 0);
        }
      },
      "exp_clamped");
}

Var normalize_rows(const Var& x, double min_norm) {
  const Tensor& v = x.value();
  Vector<double> norms = v.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) >= min_norm)) {
      throw DegenerateInputError("row " + std::to_string(i) +
                                 " has norm below " + std::to_string(min_norm));
    }
  }
  Tensor out = norms.cwiseInverse().asDiagonal() * v;
  return x.tape()->record(
      std::move(out), {x},
      [norms](BackwardContext& ctx) {
        const Tensor& y = ctx.out_value();
        const Tensor& g = ctx.out_grad();
        Vector<double> proj = y.cwiseProduct(g).rowwise().sum();
        Tensor gy = g - proj.asDiagonal() * y;
        ctx.input_grad(0) += norms.cwiseInverse().asDiagonal() * gy;
      },
      "normalize_rows");
}

Var embedding_mean(const Var& table,
                   std::span<const std::vector<std::int32_t>> sequences,
                   std::int32_t pad_id) {
  const Tensor& t = table.value();
  const Index rows = static_cast<Index>(sequences.size());
  Tensor out = Tensor::Zero(rows, t.cols());
  std::vector<std::vector<std::int32_t>> kept(sequences.size());
  for (Index r = 0; r < rows; ++r) {
    for (std::size_t pos = 0; pos < sequences[r].size(); ++pos) {
      const std::int32_t id = sequences[r][pos];
      if (id == pad_id) continue;
      if (id < 0 || id >= t.rows()) {
        throw ValidationError("token id " + std::to_string(id) +
                              " at position " + std::to_string(pos) +
                              " outside vocabulary of " +
                              std::to_string(t.rows()));
      }
      kept[r].push_back(id);
    }
    for (std::int32_t id : kept[r]) out.row(r) += t.row(id);
    if (!kept[r].empty()) out.row(r) /= static_cast<double>(kept[r].size());
  }
  return table.tape()->record(
      std::move(out), {table},
      [kept = std::move(kept)](BackwardContext& ctx) {
        const Tensor& g = ctx.out_grad();
        Tensor& gt = ctx.input_grad(0);
        for (std::size_t r = 0; r < kept.size(); ++r) {
          if (kept[r].empty()) continue;
          const double w = 1.0 / static_cast<double>(kept[r].size());
          for (std::int32_t id : kept[r]) gt.row(id) += w * g.row(r);
        }
      },
      "embedding_mean");
}

Var diagonal_cross_entropy(const Var& logits) {
  const Tensor& s = logits.value();
  if (s.rows() != s.cols() || s.rows() == 0) {
    throw DimensionError("diagonal_cross_entropy: expected square logits, got " +
                         shape_string(s));
  }
  const Index n = s.rows();
  Tensor softmax(n, n);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double m = s.row(i).maxCoeff();
    auto shifted = (s.row(i).array() - m).exp();
    const double z = shifted.sum();
    softmax.row(i) = shifted / z;
    total += (m + std::log(z)) - s(i, i);
  }
  Tensor out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  return logits.tape()->record(
      std::move(out), {logits},
      [softmax = std::move(softmax)](BackwardContext& ctx) {
        const Index n = softmax.rows();
        const double g = ctx.out_grad()(0, 0) / static_cast<double>(n);
        Tensor& gl = ctx.input_grad(0);
        gl += g * softmax;
        gl.diagonal().array() -= g;
      },
      "diagonal_cross_entropy");
}

// ---------------------------------------------------------------------------
// Gradient checking

bool GradCheckReport::passed() const { return failures().empty(); }

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (!(e.max_rel_error < rtol)) out.push_back(e.name);
  }
  return out;
}

const GradCheckEntry& GradCheckReport::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw ContractError("no grad-check entry for '" + name + "'");
}

GradCheckReport grad_check(const LossFunction& fn, ParamSet& params,
                           double rtol, const GradCheckOptions& options) {
  params.zero_grad();
  {
    Tape tape;
    Var loss = fn(tape, params);
    tape.backward(loss);
  }

  auto evaluate = [&](const std::string& name) {
    Tape tape(false);
    const double v = fn(tape, params).scalar();
    if (!std::isfinite(v)) {
      throw NumericError("non-finite loss while perturbing '" + name + "'");
    }
    return v;
  };

  GradCheckReport report;
  report.rtol = rtol;
  const double h = options.step;
  for (auto& [name, p] : params) {
    GradCheckEntry entry;
    entry.name = name;
    if (!p.grad.allFinite()) {
      throw NumericError("non-finite analytic gradient for '" + name + "'");
    }
    for (Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double x0 = x;
      x = x0 + h;
      const double f1 = evaluate(name);
      x = x0 - h;
      const double fm1 = evaluate(name);
      x = x0 + 2 * h;
      const double f2 = evaluate(name);
      x = x0 - 2 * h;
      const double fm2 = evaluate(name);
      x = x0;
      const double numeric = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
      const double analytic = p.grad.data()[i];
      const double rel =
          std::abs(analytic - numeric) / (std::abs(numeric) + options.epsilon);
      if (rel > entry.max_rel_error || i == 0) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = analytic;
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  params.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(OptimizerState& state, ParamSet& params) {
  if (!params.has_gradients()) {
    throw ContractError("adam_step called before any backward pass");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    auto [it, inserted] = state.moments.try_emplace(name);
    auto& m = it->second;
    if (inserted) {
      m.first = Tensor::Zero(p.value.rows(), p.value.cols());
      m.second = Tensor::Zero(p.value.rows(), p.value.cols());
    } else if (m.first.rows() != p.value.rows() ||
               m.first.cols() != p.value.cols()) {
      throw DimensionError("optimizer moments for '" + name + "' are " +
                           shape_string(m.first) + " but parameter is " +
                           shape_string(p.value));
    }
    m.first = state.beta1 * m.first + (1.0 - state.beta1) * p.grad;
    m.second = state.beta2 * m.second +
               (1.0 - state.beta2) * p.grad.cwiseProduct(p.grad);
    Tensor update = (m.first.array() / c1) /
                    ((m.second.array() / c2).sqrt() + state.epsilon);
    if (p.decay && state.weight_decay != 0.0) {
      update += state.weight_decay * p.value;
    }
    p.value -= state.learning_rate * update;
  }
  params.zero_grad();
}

}  // namespace mim
