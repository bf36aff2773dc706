// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

namespace flow4d {

struct SymmetricEigen {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;  // columns are eigenvectors
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Iterates until the
/// off-diagonal Frobenius norm falls below `tol` times the matrix norm.
SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& a, double tol = 1e-12, int max_sweeps = 100);

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero first.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a);

}  // namespace flow4d
