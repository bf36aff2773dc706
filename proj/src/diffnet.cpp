// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/diffnet.hpp"

#include <cmath>
#include <sstream>

#include "flow4d/error.hpp"

namespace flow4d::diffnet {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "silu";
}

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- ParamStore

Parameter& ParamStore::insert(const std::string& name, std::vector<std::size_t> shape, Matrix value) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw InvalidArgument("duplicate parameter '" + name + "'");
  Parameter& p = it->second;
  p.shape = std::move(shape);
  p.grad = Matrix::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  return p;
}

Parameter& ParamStore::add(const std::string& name, std::size_t rows, std::size_t cols) {
  return insert(name, {rows, cols}, Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)));
}

Parameter& ParamStore::add_vector(const std::string& name, std::size_t n) {
  return insert(name, {n}, Matrix::Zero(1, static_cast<Eigen::Index>(n)));
}

Parameter& ParamStore::at(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("no parameter named '" + std::string(name) + "'");
  return it->second;
}

const Parameter& ParamStore::at(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("no parameter named '" + std::string(name) + "'");
  return it->second;
}

bool ParamStore::contains(std::string_view name) const { return params_.find(name) != params_.end(); }

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero();
}

void ParamStore::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& [name, p] : params_) {
    if (std::string_view(name).starts_with(prefix)) p.trainable = trainable;
  }
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ---------------------------------------------------------------------- Tape

const Matrix& Var::value() const { return tape_->value(index_); }
const Matrix& Var::grad() const { return tape_->grad(index_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("scalar(): node is " + shape_str(v));
  return v(0, 0);
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this || v.index_ >= nodes_.size()) throw StateError("variable does not belong to this tape");
}

const Matrix& Tape::value(std::size_t i) const {
  const Node& n = nodes_.at(i);
  return n.ref != nullptr ? *n.ref : n.value;
}

const Matrix& Tape::grad(std::size_t i) const { return nodes_.at(i).grad; }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.target = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::frozen(const Parameter& p) {
  Node n;
  n.ref = &p.value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward back) {
  bool needs = false;
  for (Var v : inputs) {
    check_owner(v);
    needs = needs || nodes_[v.index_].needs_grad;
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs;
  if (needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.index_];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::accumulate(Var v, Matrix&& g) {
  Node& n = nodes_[v.index_];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = std::move(g);
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw StateError("backward() called before any forward computation");
  check_owner(loss);
  if (value(loss.index_).size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(value(loss.index_)));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.index_].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.index_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.target != nullptr) n.target->grad += n.grad;
    if (n.back) n.back(*this, n.grad);
  }
}

// ---------------------------------------------------------------- Operations

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.index())) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b.index())) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b.index())) t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.index())) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b.index())) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + shape_str(row.value()) + " does not broadcast over " + shape_str(a.value()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row.index())) t.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.tape()->push(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var scale_rows(Var a, const Vector& s) {
  if (s.size() != a.rows()) throw DimensionError("scale_rows: factor count differs from row count");
  Matrix out = s.asDiagonal() * a.value();
  return a.tape()->push(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) {
    t.accumulate(a, s.asDiagonal() * g);
  });
}

Var activate(Var a, Activation act) {
  const Matrix& x = a.value();
  Matrix out;
  switch (act) {
    case Activation::silu:
      out = x.array() / (1.0 + (-x.array()).exp());
      break;
    case Activation::tanh:
      out = x.array().tanh();
      break;
    case Activation::relu:
      out = x.cwiseMax(0.0);
      break;
    case Activation::identity:
      out = x;
      break;
  }
  return a.tape()->push(std::move(out), {a}, [a, act](Tape& t, const Matrix& g) {
    const Eigen::ArrayXXd xin = a.value().array();
    switch (act) {
      case Activation::silu: {
        const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-xin).exp());
        t.accumulate(a, (g.array() * sig * (1.0 + xin * (1.0 - sig))).matrix());
        break;
      }
      case Activation::tanh:
        t.accumulate(a, (g.array() * (1.0 - xin.tanh().square())).matrix());
        break;
      case Activation::relu:
        t.accumulate(a, (g.array() * (xin > 0.0).cast<double>()).matrix());
        break;
      case Activation::identity:
        t.accumulate(a, g);
        break;
    }
  });
}

Var modulate(Var y, Var s, Var shift) {
  require_same_shape(y.value(), s.value(), "modulate");
  require_same_shape(y.value(), shift.value(), "modulate");
  Matrix out = y.value().array() * (1.0 + s.value().array()) + shift.value().array();
  return y.tape()->push(std::move(out), {y, s, shift}, [y, s, shift](Tape& t, const Matrix& g) {
    if (t.needs_grad(y.index())) t.accumulate(y, (g.array() * (1.0 + s.value().array())).matrix());
    if (t.needs_grad(s.index())) t.accumulate(s, g.cwiseProduct(y.value()));
    t.accumulate(shift, g);
  });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts differ " + shape_str(a.value()) + " | " + shape_str(b.value()));
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  const Eigen::Index cb = b.cols();
  return a.tape()->push(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.index())) t.accumulate(a, g.leftCols(ca));
    if (t.needs_grad(b.index())) t.accumulate(b, g.rightCols(cb));
  });
}

Var repeat_rows(Var a, Eigen::Index times) {
  if (times < 1) throw InvalidArgument("repeat_rows: times must be >= 1");
  const Matrix& x = a.value();
  Matrix out(x.rows() * times, x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.middleRows(r * times, times).rowwise() = x.row(r);
  return a.tape()->push(std::move(out), {a}, [a, times](Tape& t, const Matrix& g) {
    Matrix ga(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) = g.middleRows(r * times, times).colwise().sum();
    t.accumulate(a, ga);
  });
}

Var gather_rows(Var a, std::span<const Eigen::Index> rows) {
  const Matrix& x = a.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw DimensionError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return a.tape()->push(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, ga);
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean_row_sqnorm(Var a) {
  if (a.rows() == 0) throw DimensionError("mean_row_sqnorm: empty input");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm() * inv;
  return a.tape()->push(std::move(out), {a}, [a, inv](Tape& t, const Matrix& g) {
    t.accumulate(a, a.value() * (2.0 * inv * g(0, 0)));
  });
}

Var grouped_cross_entropy(Var logits, std::span<const std::uint8_t> targets, Eigen::Index classes) {
  const Matrix& z = logits.value();
  if (classes < 1 || z.cols() % classes != 0) throw DimensionError("grouped_cross_entropy: columns not divisible by class count");
  const Eigen::Index groups = z.cols() / classes;
  const Eigen::Index rows = z.rows();
  if (static_cast<Eigen::Index>(targets.size()) != rows * groups) {
    throw DimensionError("grouped_cross_entropy: target count does not match logits");
  }
  for (auto t : targets) {
    if (t >= classes) throw DimensionError("grouped_cross_entropy: target class out of range");
  }
  const double inv = 1.0 / static_cast<double>(rows * groups);
  // Each group is a column block; softmax runs down whole columns at once.
  Matrix prob(rows, z.cols());
  Eigen::ArrayXd mx(rows), denom(rows);
  double total = 0.0;
  for (Eigen::Index gi = 0; gi < groups; ++gi) {
    const Eigen::Index c0 = gi * classes;
    mx = z.col(c0).array();
    for (Eigen::Index c = 1; c < classes; ++c) mx = mx.max(z.col(c0 + c).array());
    denom.setZero();
    for (Eigen::Index c = 0; c < classes; ++c) {
      prob.col(c0 + c).array() = (z.col(c0 + c).array() - mx).exp();
      denom += prob.col(c0 + c).array();
    }
    total += denom.log().sum() + mx.sum();
    denom = denom.inverse();
    for (Eigen::Index c = 0; c < classes; ++c) prob.col(c0 + c).array() *= denom;
    for (Eigen::Index r = 0; r < rows; ++r) total -= z(r, c0 + targets[static_cast<std::size_t>(r * groups + gi)]);
  }
  Matrix out(1, 1);
  out(0, 0) = total * inv;
  std::vector<std::uint8_t> tcopy(targets.begin(), targets.end());
  return logits.tape()->push(std::move(out), {logits},
                             [logits, prob = std::move(prob), tcopy = std::move(tcopy), groups, classes, inv](
                                 Tape& t, const Matrix& g) {
                               const double scale = inv * g(0, 0);
                               Matrix d = prob * scale;
                               for (Eigen::Index gi = 0; gi < groups; ++gi) {
                                 for (Eigen::Index r = 0; r < d.rows(); ++r) {
                                   d(r, gi * classes + tcopy[static_cast<std::size_t>(r * groups + gi)]) -= scale;
                                 }
                               }
                               t.accumulate(logits, std::move(d));
                             });
}

// -------------------------------------------------------------- ModulatedMlp

void ModulatedMlpSpec::validate() const {
  if (input_dim < 1 || output_dim < 1 || conditioning_dim < 1) {
    throw InvalidArgument("ModulatedMlpSpec: all dimensions must be >= 1");
  }
  if (hidden_dims.empty()) throw InvalidArgument("ModulatedMlpSpec: hidden_dims must be non-empty");
  for (std::size_t h : hidden_dims) {
    if (h < 1) throw InvalidArgument("ModulatedMlpSpec: hidden dimension must be >= 1");
  }
}

ModulatedMlp::ModulatedMlp(ModulatedMlpSpec spec, std::string prefix) : spec_(std::move(spec)), prefix_(std::move(prefix)) {
  spec_.validate();
}

std::string ModulatedMlp::name(std::string_view kind, std::size_t layer) const {
  return prefix_ + "." + std::string(kind) + std::to_string(layer);
}

void ModulatedMlp::init(ParamStore& store, std::mt19937_64& rng) const {
  auto fill = [&rng](Parameter& p, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
      for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = u(rng);
    }
  };
  std::size_t in = spec_.input_dim;
  const std::size_t layers = spec_.hidden_dims.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t h = spec_.hidden_dims[l];
    fill(store.add(name("w", l), in, h), in);
    store.add_vector(name("b", l), h);
    fill(store.add(name("ms", l), spec_.conditioning_dim, h), spec_.conditioning_dim);
    store.add_vector(name("msb", l), h);
    fill(store.add(name("mt", l), spec_.conditioning_dim, h), spec_.conditioning_dim);
    store.add_vector(name("mtb", l), h);
    in = h;
  }
  fill(store.add(name("w", layers), in, spec_.output_dim), in);
  store.add_vector(name("b", layers), spec_.output_dim);
}

template <typename Lookup>
Var ModulatedMlp::forward_impl(Tape& tape, Lookup&& p, Var input, Var cond) const {
  (void)tape;
  if (static_cast<std::size_t>(input.cols()) != spec_.input_dim) {
    throw DimensionError(prefix_ + ": input has " + std::to_string(input.cols()) + " features, expected " +
                         std::to_string(spec_.input_dim));
  }
  if (static_cast<std::size_t>(cond.cols()) != spec_.conditioning_dim) {
    throw DimensionError(prefix_ + ": conditioning has " + std::to_string(cond.cols()) + " features, expected " +
                         std::to_string(spec_.conditioning_dim));
  }
  if (cond.rows() < 1 || input.rows() % cond.rows() != 0) {
    throw DimensionError(prefix_ + ": conditioning rows do not divide input rows");
  }
  const Eigen::Index repeat = input.rows() / cond.rows();
  Var h = input;
  const std::size_t layers = spec_.hidden_dims.size();
  for (std::size_t l = 0; l < layers; ++l) {
    Var y = add_row(matmul(h, p(name("w", l))), p(name("b", l)));
    Var s = add_row(matmul(cond, p(name("ms", l))), p(name("msb", l)));
    Var shift = add_row(matmul(cond, p(name("mt", l))), p(name("mtb", l)));
    if (repeat > 1) {
      s = repeat_rows(s, repeat);
      shift = repeat_rows(shift, repeat);
    }
    h = activate(modulate(y, s, shift), spec_.activation);
  }
  return add_row(matmul(h, p(name("w", layers))), p(name("b", layers)));
}

Var ModulatedMlp::forward(Tape& tape, ParamStore& store, Var input, Var cond) const {
  return forward_impl(tape, [&](const std::string& n) { return tape.param(store.at(n)); }, input, cond);
}

Var ModulatedMlp::forward_frozen(Tape& tape, const ParamStore& store, Var input, Var cond) const {
  return forward_impl(tape, [&](const std::string& n) { return tape.frozen(store.at(n)); }, input, cond);
}

Matrix ModulatedMlp::infer(const ParamStore& store, const Matrix& input, const Matrix& cond) const {
  Tape tape;
  Var out = forward_frozen(tape, store, tape.constant(input), tape.constant(cond));
  return out.value();
}

Vector forward_mlp(const ModulatedMlpSpec& spec, const ParamStore& params, const Vector& input, const Vector& cond,
                   std::string_view prefix) {
  if (static_cast<std::size_t>(input.size()) != spec.input_dim) {
    throw DimensionError("forward_mlp: input length " + std::to_string(input.size()) + " != input_dim " +
                         std::to_string(spec.input_dim));
  }
  if (static_cast<std::size_t>(cond.size()) != spec.conditioning_dim) {
    throw DimensionError("forward_mlp: cond length " + std::to_string(cond.size()) + " != conditioning_dim " +
                         std::to_string(spec.conditioning_dim));
  }
  ModulatedMlp net(spec, std::string(prefix));
  Matrix out = net.infer(params, input.transpose(), cond.transpose());
  return out.row(0).transpose();
}

// ---------------------------------------------------------------------- Adam

void Adam::step(ParamStore& params) {
  for (const auto& [name, p] : params) {
    if (p.trainable && !p.grad.allFinite()) throw NonFiniteError("non-finite gradient in parameter '" + name + "'");
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    auto it = moments_.find(name);
    if (it == moments_.end()) {
      it = moments_
               .emplace(name, Moments{Matrix::Zero(p.value.rows(), p.value.cols()),
                                      Matrix::Zero(p.value.rows(), p.value.cols())})
               .first;
    }
    Moments& m = it->second;
    m.first = config_.beta1 * m.first + (1.0 - config_.beta1) * p.grad;
    m.second = config_.beta2 * m.second + (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad);
    if (config_.weight_decay > 0.0) p.value *= 1.0 - config_.learning_rate * config_.weight_decay;
    p.value.array() -= config_.learning_rate * (m.first.array() / c1) /
                       ((m.second.array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace flow4d::diffnet
