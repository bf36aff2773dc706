// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "flow4d/grid.hpp"

namespace flow4d::metrics {

inline constexpr std::array<std::uint8_t, 5> kForegroundClasses{kLV, kLVM, kRV, kLA, kRA};
inline constexpr std::array<std::uint8_t, 4> kVolumeChambers{kLV, kRV, kLA, kRA};

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dsc(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls);

/// Mask voxels with at least one 6-neighbour outside the mask (or outside the grid).
std::vector<std::array<int, 3>> surface_voxels(const LabelGrid& grid, std::uint8_t cls);

/// Directed surface-to-surface nearest distances from A to B and from B to
/// A, pooled, in physical units. Throws UndefinedMetric on an empty mask.
std::vector<double> pooled_surface_distances(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls);

/// Nearest-rank percentile (p in (0, 100]) of the values.
double nearest_rank_percentile(std::vector<double> values, int p);

double hd95(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls);
double hausdorff(const LabelGrid& a, const LabelGrid& b, std::uint8_t cls);

/// Per frame (LV, RV, LA, RA) volumes, frame-major: length 4 * M.
struct VolumeCurve {
  int frames = 0;
  std::vector<double> values;
};

VolumeCurve volume_curve(const ShapeSequence& seq, double voxel_size);

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance plus gamma*I with
/// gamma = shrinkage * max(trace(cov) / n, 1).
GaussianSummary summarize(std::span<const VolumeCurve> curves, double shrinkage = 1e-6);
GaussianSummary summarize(const Eigen::MatrixXd& samples, double shrinkage = 1e-6);

/// tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2) with eigenvalues clamped at zero.
double frechet_trace_term(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2);
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);
double vfid(std::span<const VolumeCurve> generated, std::span<const VolumeCurve> reference);

/// Mean over the five foreground classes of DSC(first frame, last frame).
double cycle_dsc(const ShapeSequence& seq);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int dof = 0;
};

TTestResult paired_ttest(std::span<const double> x, std::span<const double> y);
double regularized_incomplete_beta(double a, double b, double x);
double student_t_two_sided_p(double t, double dof);

}  // namespace flow4d::metrics
