// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference oracle for reverse-mode gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>

#include "flow4d/diffnet.hpp"

namespace flow4d::testing {

struct GradCheckResult {
  double worst_relative = 0.0;
  double worst_absolute = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

/// `loss(tape, store)` must build a scalar loss through tape.param() leaves.
/// Checks every entry of every trainable parameter, or at most
/// `max_per_param` randomly chosen entries per parameter when set.
template <typename LossFn>
GradCheckResult check_gradients(diffnet::ParamStore& store, LossFn&& loss, double h = 1e-5,
                                std::size_t max_per_param = 0, std::uint64_t seed = 7, double rel_tol = 1e-4,
                                double abs_tol = 1e-7) {
  store.zero_grad();
  {
    diffnet::Tape tape;
    auto l = loss(tape, store);
    tape.backward(l);
  }
  auto eval = [&] {
    diffnet::Tape tape;
    return loss(tape, store).scalar();
  };
  GradCheckResult r;
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (max_per_param > 0 && n > max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_param);
    }
    for (std::size_t i : idx) {
      double& w = p.value.data()[i];
      const double orig = w;
      w = orig + h;
      const double up = eval();
      w = orig - h;
      const double down = eval();
      w = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad.data()[i];
      const double abs_err = std::abs(numeric - analytic);
      const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(analytic), 1e-300});
      ++r.checked;
      const bool ok = abs_err < abs_tol || rel_err < rel_tol;
      if (!ok) ++r.failures;
      if (abs_err >= abs_tol && rel_err > r.worst_relative) {
        r.worst_relative = rel_err;
        r.worst_name = name + "[" + std::to_string(i) + "]";
      }
      r.worst_absolute = std::max(r.worst_absolute, abs_err);
    }
  }
  return r;
}

}  // namespace flow4d::testing
