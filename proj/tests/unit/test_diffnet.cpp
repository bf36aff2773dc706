// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "flow4d/checkpoint.hpp"
#include "flow4d/diffnet.hpp"
#include "flow4d/error.hpp"
#include "support/gradcheck.hpp"

using namespace flow4d;
using namespace flow4d::diffnet;

namespace {

ModulatedMlpSpec small_spec() {
  ModulatedMlpSpec s;
  s.input_dim = 2;
  s.hidden_dims = {4};
  s.output_dim = 2;
  s.conditioning_dim = 3;
  return s;
}

// Straight-line re-implementation of a one-hidden-layer modulated SiLU network.
Vector oracle_forward(const ParamStore& p, const Vector& x, const Vector& c, std::size_t in, std::size_t hid,
                      std::size_t out, std::size_t cd) {
  std::vector<double> h(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    double y = p.at("mlp.b0").value(0, j);
    for (std::size_t i = 0; i < in; ++i) y += x[i] * p.at("mlp.w0").value(i, j);
    double s = p.at("mlp.msb0").value(0, j);
    double t = p.at("mlp.mtb0").value(0, j);
    for (std::size_t k = 0; k < cd; ++k) {
      s += c[k] * p.at("mlp.ms0").value(k, j);
      t += c[k] * p.at("mlp.mt0").value(k, j);
    }
    const double m = y * (1.0 + s) + t;
    h[j] = m / (1.0 + std::exp(-m));
  }
  Vector o(out);
  for (std::size_t j = 0; j < out; ++j) {
    double y = p.at("mlp.b1").value(0, j);
    for (std::size_t i = 0; i < hid; ++i) y += h[i] * p.at("mlp.w1").value(i, j);
    o[j] = y;
  }
  return o;
}

void randomize(ParamStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& [_, p] : store) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
  }
}

}  // namespace

TEST_CASE("forward_mlp: zero network gives zero output") {
  ModulatedMlpSpec spec = small_spec();
  ModulatedMlp net(spec, "mlp");
  ParamStore store;
  std::mt19937_64 rng(1);
  net.init(store, rng);
  for (auto& [_, p] : store) p.value.setZero();
  Vector out = forward_mlp(spec, store, Vector::Constant(2, 3.5), Vector::Constant(3, -1.0));
  CHECK(out.isZero(0.0));
}

TEST_CASE("forward_mlp: identity-initialised layer passes input through") {
  ModulatedMlpSpec spec;
  spec.input_dim = 3;
  spec.hidden_dims = {3};
  spec.output_dim = 3;
  spec.conditioning_dim = 2;
  spec.activation = Activation::identity;
  ModulatedMlp net(spec, "mlp");
  ParamStore store;
  std::mt19937_64 rng(1);
  net.init(store, rng);
  for (auto& [_, p] : store) p.value.setZero();
  store.at("mlp.w0").value = Matrix::Identity(3, 3);
  store.at("mlp.w1").value = Matrix::Identity(3, 3);
  Vector v(3);
  v << 0.25, -1.5, 7.0;
  Vector out = forward_mlp(spec, store, v, Vector::Constant(2, 0.3));
  CHECK(out == v);
}

TEST_CASE("forward_mlp: random 2-4-2 net matches straight-line oracle") {
  ModulatedMlpSpec spec = small_spec();
  ModulatedMlp net(spec, "mlp");
  ParamStore store;
  std::mt19937_64 rng(20260101);
  net.init(store, rng);
  randomize(store, 99);  // non-zero biases and modulation too
  Vector x(2);
  x << 0.7, -1.3;
  Vector c(3);
  c << 0.2, -0.4, 1.1;
  const Vector got = forward_mlp(spec, store, x, c);
  const Vector want = oracle_forward(store, x, c, 2, 4, 2, 3);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12 * std::max(1.0, std::abs(want[i])));
}

TEST_CASE("forward_mlp: dimension mismatches are rejected") {
  ModulatedMlpSpec spec = small_spec();
  ModulatedMlp net(spec, "mlp");
  ParamStore store;
  std::mt19937_64 rng(1);
  net.init(store, rng);
  CHECK_THROWS_AS(forward_mlp(spec, store, Vector::Zero(3), Vector::Zero(3)), DimensionError);
  CHECK_THROWS_AS(forward_mlp(spec, store, Vector::Zero(2), Vector::Zero(1)), DimensionError);
  ModulatedMlpSpec bad = spec;
  bad.hidden_dims.clear();
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("modulation neutrality: zero scale and shift reproduce the plain network") {
  ModulatedMlpSpec spec;
  spec.input_dim = 5;
  spec.hidden_dims = {8, 6};
  spec.output_dim = 3;
  spec.conditioning_dim = 4;
  ModulatedMlp net(spec, "mlp");
  ParamStore store;
  std::mt19937_64 rng(3);
  net.init(store, rng);
  randomize(store, 4);
  for (const char* k : {"ms", "mt", "msb", "mtb"}) {
    for (int l = 0; l < 2; ++l) store.at(std::string("mlp.") + k + std::to_string(l)).value.setZero();
  }
  Vector x = Vector::LinSpaced(5, -1.0, 1.0);
  const Vector modulated = forward_mlp(spec, store, x, Vector::LinSpaced(4, 3.0, -2.0));
  // Unmodulated reference built from the same primitive ops.
  Tape t;
  Var h = t.constant(x.transpose());
  for (int l = 0; l < 2; ++l) {
    Var y = add_row(matmul(h, t.frozen(store.at("mlp.w" + std::to_string(l)))),
                    t.frozen(store.at("mlp.b" + std::to_string(l))));
    h = activate(y, Activation::silu);
  }
  Matrix plain = add_row(matmul(h, t.frozen(store.at("mlp.w2"))), t.frozen(store.at("mlp.b2"))).value();
  CHECK(modulated == plain.transpose());
}

TEST_CASE("backward: constant loss has zero gradients") {
  ParamStore store;
  store.add("w", 2, 2).value << 1, 2, 3, 4;
  Tape tape;
  Var x = tape.constant(Matrix::Ones(1, 2));
  Var loss = scale(sum(matmul(x, tape.param(store.at("w")))), 0.0);
  tape.backward(loss);
  CHECK(store.at("w").grad.isZero(0.0));
}

TEST_CASE("backward: half squared norm of Wx") {
  ParamStore store;
  store.add("w", 1, 1).value(0, 0) = 2.0;
  Tape tape;
  Var y = matmul(tape.constant(Matrix::Constant(1, 1, 3.0)), tape.param(store.at("w")));
  Var loss = scale(sum(mul(y, y)), 0.5);
  CHECK(loss.scalar() == doctest::Approx(18.0));
  tape.backward(loss);
  CHECK(store.at("w").grad(0, 0) == 18.0);
}

TEST_CASE("backward: errors and accumulation") {
  Tape empty;
  Tape other;
  Var foreign = other.constant(Matrix::Ones(1, 1));
  CHECK_THROWS_AS(empty.backward(foreign), StateError);

  ParamStore store;
  store.add("w", 1, 1).value(0, 0) = 2.0;
  Tape tape;
  Var loss = sum(mul(tape.param(store.at("w")), tape.param(store.at("w"))));
  tape.backward(loss);
  tape.backward(loss);
  CHECK(store.at("w").grad(0, 0) == 8.0);  // 2 * (2w) without zero_grad
  store.zero_grad();
  CHECK(store.at("w").grad(0, 0) == 0.0);

  Tape t2;
  Var m = t2.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t2.backward(m), DimensionError);
}

TEST_CASE("backward: random networks agree with central finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (Activation act : {Activation::silu, Activation::tanh}) {
      ModulatedMlpSpec spec;
      spec.input_dim = 3;
      spec.hidden_dims = {5, 4};
      spec.output_dim = 2;
      spec.conditioning_dim = 2;
      spec.activation = act;
      ModulatedMlp net(spec, "net");
      ParamStore store;
      std::mt19937_64 rng(seed);
      net.init(store, rng);
      randomize(store, seed + 100);
      Matrix x = Matrix::Random(6, 3);
      Matrix c = Matrix::Random(3, 2);  // each cond row shared by two input rows
      Matrix target = Matrix::Random(6, 2);
      auto loss = [&](Tape& t, ParamStore& s) {
        Var out = net.forward(t, s, t.constant(x), t.constant(c));
        return mean_row_sqnorm(sub(out, t.constant(target)));
      };
      auto r = flow4d::testing::check_gradients(store, loss);
      INFO("seed " << seed << " worst " << r.worst_name << " rel " << r.worst_relative);
      CHECK(r.failures == 0);
    }
  }
}

TEST_CASE("backward: structural ops agree with finite differences") {
  ParamStore store;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  auto fill = [&](Parameter& p) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
  };
  fill(store.add("table", 4, 3));
  fill(store.add("proj", 5, 12));
  fill(store.add("row", 1, 12));
  std::vector<Eigen::Index> pick{2, 0, 2};
  std::vector<std::uint8_t> targets{0, 3, 1, 2, 2, 1, 0, 0, 3, 3, 1, 2, 0, 1, 2, 3, 0, 1};
  Vector rs(6);
  rs << 0.5, -1.0, 2.0, 0.25, 1.5, -0.75;
  auto loss = [&](Tape& t, ParamStore& s) {
    Var g = gather_rows(t.param(s.at("table")), pick);           // 3 x 3
    Var r = repeat_rows(g, 2);                                     // 6 x 3
    Var c = concat_cols(r, t.constant(Matrix::Constant(6, 2, 0.3)));  // 6 x 5
    Var z = add_row(matmul(c, t.param(s.at("proj"))), t.param(s.at("row")));
    z = scale_rows(activate(z, Activation::silu), rs);
    Var ce = grouped_cross_entropy(z, targets, 4);  // 6 rows x 3 groups of 4 classes
    return add(ce, scale(sum(activate(z, Activation::relu)), 0.1));
  };
  auto r = flow4d::testing::check_gradients(store, loss);
  INFO("worst " << r.worst_name << " rel " << r.worst_relative);
  CHECK(r.failures == 0);
}

TEST_CASE("grouped cross-entropy of uniform logits is ln C") {
  Tape t;
  std::vector<std::uint8_t> targets{0, 5, 3, 2};
  Var ce = grouped_cross_entropy(t.constant(Matrix::Zero(2, 12)), targets, 6);
  CHECK(ce.scalar() == doctest::Approx(std::log(6.0)).epsilon(1e-15));
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParamStore store;
  store.add("w", 2, 3).value.setConstant(0.75);
  Adam opt;
  for (int i = 0; i < 3; ++i) opt.step(store);
  CHECK(store.at("w").value == Matrix::Constant(2, 3, 0.75));
  CHECK(opt.step_count() == 3);
}

TEST_CASE("adam: first step has magnitude lr") {
  ParamStore store;
  store.add("w", 1, 1).value(0, 0) = 1.0;
  store.at("w").grad(0, 0) = 1.0;
  Adam opt({.learning_rate = 0.1});
  opt.step(store);
  CHECK(store.at("w").value(0, 0) == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adam: converges on (w - 5)^2") {
  ParamStore store;
  store.add("w", 1, 1);
  Adam opt({.learning_rate = 0.1});
  for (int i = 0; i < 100; ++i) {
    store.zero_grad();
    store.at("w").grad(0, 0) = 2.0 * (store.at("w").value(0, 0) - 5.0);
    opt.step(store);
  }
  CHECK(std::abs(store.at("w").value(0, 0) - 5.0) < 0.5);
}

TEST_CASE("adam: non-finite gradient names the parameter and skips frozen ones") {
  ParamStore store;
  store.add("alpha", 1, 1);
  store.add("beta", 1, 1).grad(0, 0) = std::nan("");
  Adam opt;
  try {
    opt.step(store);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  store.at("beta").trainable = false;
  store.at("beta").value(0, 0) = 4.0;
  opt.step(store);
  CHECK(store.at("beta").value(0, 0) == 4.0);
}

TEST_CASE("determinism: identical seeds give bit-identical training") {
  auto run = [] {
    ModulatedMlpSpec spec;
    spec.input_dim = 4;
    spec.hidden_dims = {8};
    spec.output_dim = 4;
    spec.conditioning_dim = 2;
    ModulatedMlp net(spec, "n");
    ParamStore store;
    std::mt19937_64 rng(5);
    net.init(store, rng);
    Adam opt;
    Matrix x = Matrix::Constant(3, 4, 0.5);
    Matrix c = Matrix::Constant(3, 2, -0.2);
    for (int i = 0; i < 10; ++i) {
      store.zero_grad();
      Tape t;
      Var l = mean_row_sqnorm(net.forward(t, store, t.constant(x), t.constant(c)));
      t.backward(l);
      opt.step(store);
    }
    Checkpoint ck;
    ck.add_params(store);
    return ck;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint: bit-exact round trip and header validation") {
  ParamStore store;
  std::mt19937_64 rng(8);
  ModulatedMlp net(small_spec(), "mlp");
  net.init(store, rng);
  store.at("mlp.b0").value(0, 1) = -0.0;
  store.at("mlp.b0").value(0, 2) = 1e-310;
  Checkpoint ck;
  ck.set_kind("test", 1);
  ck.add_params(store);
  std::stringstream ss;
  ck.write(ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "F4DC");
  Checkpoint back = Checkpoint::read(ss);
  CHECK(back == ck);
  std::stringstream again;
  back.write(again);
  CHECK(again.str() == bytes);

  ParamStore restored;
  std::mt19937_64 rng2(1234);
  net.init(restored, rng2);
  back.load_params(restored);
  for (const auto& [name, p] : store) {
    CHECK(std::memcmp(p.value.data(), restored.at(name).value.data(), sizeof(double) * p.value.size()) == 0);
  }

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream bs(bad);
  CHECK_THROWS_AS(Checkpoint::read(bs), FormatError);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  std::stringstream vs(wrong_version);
  CHECK_THROWS_AS(Checkpoint::read(vs), VersionError);
  CHECK_THROWS_AS(back.require_kind("other", 1), VersionError);
  CHECK_THROWS_AS(back.require_kind("test", 2), VersionError);
  CHECK_NOTHROW(back.require_kind("test", 1));
}
