#pragma once

#include <cstdint>
#include <vector>

#include "musc/sparse_coding.hpp"
#include "musc/tensor.hpp"

namespace musc::oracle {

inline constexpr std::size_t kLassoMaxRows = 64;
inline constexpr std::size_t kLassoMaxCols = 256;

struct LassoResult {
  std::vector<double> code;
  double objective = 0.0;
  int sweeps = 0;
};

/// Cyclic coordinate descent on 0.5 ||z - M a||^2 + sum_j w_j |a_j| with exact
/// per-coordinate minimization; nonneg mode restricts a >= 0. Stops when one
/// sweep lowers the objective by less than `tol`. `weights` has one entry per
/// column or a single shared entry. M is d x N, at most 64 x 256.
LassoResult lasso_cd(const TensorD& matrix, const std::vector<double>& z, const std::vector<double>& weights,
                     ShrinkMode mode, double tol = 1e-12, int max_sweeps = 2'000'000);

/// 0.5 ||z - M a||^2 + sum_j w_j |a_j|
double lasso_value(const TensorD& matrix, const std::vector<double>& z, const std::vector<double>& weights,
                   const std::vector<double>& code);

/// Least-norm solution M^T (M M^T)^{-1} z of an underdetermined full-row-rank system.
std::vector<double> least_norm_solution(const TensorD& matrix, const std::vector<double>& z);

/// Solution of the square system M a = z.
std::vector<double> linear_solve(const TensorD& matrix, const std::vector<double>& z);

/// Largest eigenvalue of M^T M by `iters` normalized Gram iterations from each
/// of `starts` random unit vectors; returns the largest Rayleigh quotient.
double gram_lambda_max(const TensorD& matrix, int iters = 10'000, int starts = 8, std::uint64_t seed = 1);

/// Extreme singular values of M (descending order of magnitude: {max, min nonzero-rank}).
std::pair<double, double> singular_range(const TensorD& matrix);

}  // namespace musc::oracle
