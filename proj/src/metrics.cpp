// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flow4d/error.hpp"
#include "flow4d/jacobi.hpp"

namespace flow4d::metrics {

namespace {

void require_same_dims(const LabelGrid& a, const LabelGrid& b) {
  if (a.dims() != b.dims()) throw DimensionError("grid dims differ: " + a.dims().str() + " vs " + b.dims().str());
}

// Exact 1D squared distance transform of sampled function f (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[0]] == inf) {
      v[0] = q;
      continue;
    }
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Squared Euclidean distance (in voxels) from every voxel to the nearest site.
std::vector<double> squared_distance_to(const std::vector<std::array<int, 3>>& sites, Dims dims) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t nx = dims.nx, ny = dims.ny, nz = dims.nz;
  std::vector<double> g(dims.voxels(), inf);
  for (const auto& s : sites) g[s[0] + nx * (s[1] + ny * s[2])] = 0.0;
  const int n_max = std::max({dims.nx, dims.ny, dims.nz});
  std::vector<double> f(n_max), d(n_max), z(n_max + 1);
  std::vector<int> v(n_max);
  auto pass = [&](std::size_t n, std::size_t stride, auto&& starts) {
    for (std::size_t base : starts) {
      for (std::size_t q = 0; q < n; ++q) f[q] = g[base + q * stride];
      edt_1d(f.data(), d.data(), static_cast<int>(n), v, z);
      for (std::size_t q = 0; q < n; ++q) g[base + q * stride] = d[q];
    }
  };
  std::vector<std::size_t> starts;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j) starts.push_back(nx * (j + ny * k));
  pass(nx, 1, starts);
  starts.clear();
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t i = 0; i < nx; ++i) starts.push_back(i + nx * ny * k);
  pass(ny, nx, starts);
  starts.clear();
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) starts.push_back(i + nx * j);
  pass(nz, nx * ny, starts);
  return g;
}

}  // namespace

double dsc(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls) {
  require_same_dims(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_a = a[i] == cls;
    const bool in_b = b[i] == cls;
    na += in_a;
    nb += in_b;
    both += in_a && in_b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<std::array<int, 3>> surface_voxels(const LabelGrid& g, std::uint8_t cls) {
  static constexpr int offsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  std::vector<std::array<int, 3>> out;
  const Dims& d = g.dims();
  for (int k = 0; k < d.nz; ++k) {
    for (int j = 0; j < d.ny; ++j) {
      for (int i = 0; i < d.nx; ++i) {
        if (g.at(i, j, k) != cls) continue;
        for (const auto& o : offsets) {
          const int x = i + o[0], y = j + o[1], z = k + o[2];
          if (!g.contains(x, y, z) || g.at(x, y, z) != cls) {
            out.push_back({i, j, k});
            break;
          }
        }
      }
    }
  }
  return out;
}

std::vector<double> pooled_surface_distances(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls) {
  require_same_dims(a, b);
  const auto sa = surface_voxels(a, cls);
  const auto sb = surface_voxels(b, cls);
  if (sa.empty() || sb.empty()) {
    throw UndefinedMetric(std::string("surface distance undefined: class ") + label_name(cls) + " is empty in " +
                          (sa.empty() ? "the first" : "the second") + " grid");
  }
  const Dims& d = a.dims();
  const std::size_t nx = d.nx, ny = d.ny;
  std::vector<double> out;
  out.reserve(sa.size() + sb.size());
  const auto to_b = squared_distance_to(sb, d);
  for (const auto& p : sa) out.push_back(std::sqrt(to_b[p[0] + nx * (p[1] + ny * p[2])]) * a.voxel_size());
  const auto to_a = squared_distance_to(sa, d);
  for (const auto& p : sb) out.push_back(std::sqrt(to_a[p[0] + nx * (p[1] + ny * p[2])]) * a.voxel_size());
  return out;
}

double nearest_rank_percentile(std::vector<double> values, int p) {
  if (values.empty()) throw UndefinedMetric("percentile of an empty set");
  if (p <= 0 || p > 100) throw InvalidArgument("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  const std::size_t rank = (static_cast<std::size_t>(p) * n + 99) / 100;  // ceil(p n / 100)
  return values[std::max<std::size_t>(rank, 1) - 1];
}

double hd95(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls) {
  return nearest_rank_percentile(pooled_surface_distances(a, b, cls), 95);
}

double hausdorff(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls) {
  const auto d = pooled_surface_distances(a, b, cls);
  return *std::max_element(d.begin(), d.end());
}

VolumeCurve volume_curve(const ShapeSequence& seq, double voxel_size) {
  VolumeCurve c;
  c.frames = static_cast<int>(seq.frames.size());
  const double unit = voxel_size * voxel_size * voxel_size;
  c.values.reserve(4 * seq.frames.size());
  for (const auto& f : seq.frames) {
    std::array<std::size_t, kNumInputClasses> counts{};
    for (auto v : f.labels()) ++counts[std::min<std::size_t>(v, kNumInputClasses - 1)];
    for (auto ch : kVolumeChambers) c.values.push_back(static_cast<double>(counts[ch]) * unit);
  }
  return c;
}

GaussianSummary summarize(const Eigen::MatrixXd& x, double shrinkage) {
  if (x.rows() < 2) throw InvalidArgument("a Gaussian summary needs at least 2 samples");
  GaussianSummary g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  const double scale = std::max(g.cov.trace() / static_cast<double>(g.cov.rows()), 1.0);
  g.cov.diagonal().array() += shrinkage * scale;
  return g;
}

GaussianSummary summarize(std::span<const VolumeCurve> curves, double shrinkage) {
  if (curves.size() < 2) throw InvalidArgument("a Gaussian summary needs at least 2 samples");
  const std::size_t len = curves.front().values.size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(curves.size()), static_cast<Eigen::Index>(len));
  for (std::size_t i = 0; i < curves.size(); ++i) {
    if (curves[i].values.size() != len) {
      throw DimensionError("volume curves differ in length: " + std::to_string(len) + " vs " +
                           std::to_string(curves[i].values.size()));
    }
    for (std::size_t j = 0; j < len; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = curves[i].values[j];
  }
  return summarize(x, shrinkage);
}

double frechet_trace_term(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2) {
  if (s1.rows() != s2.rows() || s1.cols() != s2.cols()) throw DimensionError("covariance shapes differ");
  // In the eigenbasis of S1 = V D V^T the cross term is tr sqrt(D^1/2 (V^T S2 V) D^1/2). Summing
  // d_i + m_ii - 2 sqrt(lambda_i) per index keeps the cancellation local when S1 ~ S2.
  const SymmetricEigen e1 = jacobi_eigen(s1);
  const Eigen::VectorXd d = e1.values.cwiseMax(0.0);
  Eigen::MatrixXd m = e1.vectors.transpose() * s2 * e1.vectors;
  m = 0.5 * (m + m.transpose());
  const Eigen::VectorXd root_d = d.cwiseSqrt();
  const Eigen::MatrixXd c = root_d.asDiagonal() * m * root_d.asDiagonal();
  const SymmetricEigen ec = jacobi_eigen(c);
  double total = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    total += e1.values(i) + m(i, i) - 2.0 * std::sqrt(std::max(ec.values(i), 0.0));
  }
  return total;
}

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.mean.size() != b.mean.size()) {
    throw DimensionError("Gaussian summaries differ in dimension: " + std::to_string(a.mean.size()) + " vs " +
                         std::to_string(b.mean.size()));
  }
  const double d = (a.mean - b.mean).squaredNorm() + frechet_trace_term(a.cov, b.cov);
  if (d < -1e-9) throw Error("Frechet distance evaluated to " + std::to_string(d));
  return std::max(d, 0.0);
}

double vfid(std::span<const VolumeCurve> generated, std::span<const VolumeCurve> reference) {
  if (generated.size() < 2 || reference.size() < 2) throw InvalidArgument("vFID needs at least 2 curves per set");
  if (generated.front().values.size() != reference.front().values.size()) {
    throw DimensionError("vFID curve lengths differ: " + std::to_string(generated.front().values.size()) + " vs " +
                         std::to_string(reference.front().values.size()));
  }
  return frechet_distance(summarize(generated), summarize(reference));
}

double cycle_dsc(const ShapeSequence& seq) {
  if (seq.frames.size() < 2) throw InvalidArgument("cycle-DSC needs at least 2 frames");
  double total = 0.0;
  for (auto c : kForegroundClasses) total += dsc(seq.frames.front(), seq.frames.back(), c);
  return total / static_cast<double>(kForegroundClasses.size());
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw InvalidArgument("incomplete beta argument outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  // Continued fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise.
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);
  constexpr double tiny = 1e-300;
  double f = 1.0, c = 1.0, d = 0.0;
  for (int i = 0; i <= 400; ++i) {
    const int m = i / 2;
    double num;
    if (i == 0) {
      num = 1.0;
    } else if (i % 2 == 0) {
      num = (m * (b - m) * x) / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
    } else {
      num = -((a + m) * (a + b + m) * x) / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
    }
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    const double cd = c * d;
    f *= cd;
    if (std::abs(1.0 - cd) < 1e-15) return front * (f - 1.0) / a;
  }
  throw Error("incomplete beta continued fraction did not converge");
}

double student_t_two_sided_p(double t, double dof) {
  if (!(dof > 0.0)) throw InvalidArgument("degrees of freedom must be positive");
  return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

TTestResult paired_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("paired t-test needs equal-length samples");
  const std::size_t n = x.size();
  if (n < 2) throw InvalidArgument("paired t-test needs at least 2 pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i] - y[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (x[i] - y[i] - mean) * (x[i] - y[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) throw UndefinedMetric("paired t-test undefined: differences have zero variance");
  TTestResult r;
  r.dof = static_cast<int>(n - 1);
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, r.dof);
  return r;
}

}  // namespace flow4d::metrics
