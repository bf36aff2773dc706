// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flow4d::diffnet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { silu, tanh, relu, identity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

/// A named trainable array. Rank-1 parameters are stored as a 1 x n row.
struct Parameter {
  std::vector<std::size_t> shape;
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

/// Ordered collection of parameters; iteration order is lexicographic by name,
/// which keeps checkpoints and optimizer updates deterministic.
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter, std::less<>>;

  Parameter& add(const std::string& name, std::size_t rows, std::size_t cols);
  Parameter& add_vector(const std::string& name, std::size_t n);
  Parameter& insert(const std::string& name, std::vector<std::size_t> shape, Matrix value);

  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  void zero_grad();
  void set_trainable(std::string_view prefix, bool trainable);
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Reverse-mode recording of matrix-valued operations.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for backpropagation. Parameter leaves
/// accumulate into Parameter::grad; intermediate gradients are reset at the
/// start of every backward() call.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// A non-parameter leaf whose gradient is kept on the tape (read via Var::grad).
  Var leaf(Matrix value);
  Var param(Parameter& p);
  Var frozen(const Parameter& p);

  void backward(Var loss);

  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(std::size_t i) const;
  const Matrix& grad(std::size_t i) const;
  bool needs_grad(std::size_t i) const { return nodes_[i].needs_grad; }

  // Used by operations to record new nodes.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward back);
  void accumulate(Var v, const Matrix& g);
  void accumulate(Var v, Matrix&& g);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    Parameter* target = nullptr;
    Backward back;
    bool needs_grad = false;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
};

// Operations. All inputs must live on the same tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var scale_rows(Var a, const Vector& s);
Var activate(Var a, Activation act);
/// y * (1 + s) + shift, elementwise.
Var modulate(Var y, Var s, Var shift);
Var concat_cols(Var a, Var b);
/// Each row of `a` repeated `times` times consecutively.
Var repeat_rows(Var a, Eigen::Index times);
Var gather_rows(Var a, std::span<const Eigen::Index> rows);
Var sum(Var a);
/// Mean over rows of the squared Euclidean norm of each row.
Var mean_row_sqnorm(Var a);
/// Mean cross-entropy over R*G categorical predictions. Row r of `logits`
/// holds G groups of `classes` consecutive logits; targets is R x G row-major.
Var grouped_cross_entropy(Var logits, std::span<const std::uint8_t> targets,
                          Eigen::Index classes);

struct ModulatedMlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  std::size_t conditioning_dim = 1;
  Activation activation = Activation::silu;

  void validate() const;
};

/// MLP whose hidden layers are modulated feature-wise by the conditioning
/// vector: y <- y * (1 + s(c)) + b(c), with (s, b) linear in c, applied before
/// the nonlinearity. The output layer is plain affine.
class ModulatedMlp {
 public:
  ModulatedMlp() = default;
  ModulatedMlp(ModulatedMlpSpec spec, std::string prefix);

  /// Adds this network's parameters to `store`, drawing weights from
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
  void init(ParamStore& store, std::mt19937_64& rng) const;

  /// `cond` has either as many rows as `input`, or input.rows()/k rows, in
  /// which case each conditioning row applies to k consecutive input rows.
  Var forward(Tape& tape, ParamStore& store, Var input, Var cond) const;
  Var forward_frozen(Tape& tape, const ParamStore& store, Var input, Var cond) const;
  Matrix infer(const ParamStore& store, const Matrix& input, const Matrix& cond) const;

  const ModulatedMlpSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }

 private:
  template <typename Lookup>
  Var forward_impl(Tape& tape, Lookup&& lookup, Var input, Var cond) const;

  std::string name(std::string_view kind, std::size_t layer) const;

  ModulatedMlpSpec spec_;
  std::string prefix_;
};

Vector forward_mlp(const ModulatedMlpSpec& spec, const ParamStore& params,
                   const Vector& input, const Vector& cond, std::string_view prefix = "mlp");

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled, scaled by the learning rate
};

/// Adaptive-moment optimizer with bias correction. Parameters flagged
/// non-trainable are never touched.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParamStore& params);

  std::uint64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  struct Moments {
    Matrix first;
    Matrix second;
  };

  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments, std::less<>> moments_;
};

}  // namespace flow4d::diffnet
