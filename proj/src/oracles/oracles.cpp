#include "musc/oracles.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "musc/rng.hpp"

namespace musc::oracle {

namespace {

Eigen::MatrixXd to_eigen(const TensorD& m) {
  if (m.rank() != 2) throw std::invalid_argument("oracle: matrix must be rank 2");
  Eigen::MatrixXd out(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m.at(i, j);
  return out;
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

double weight(const std::vector<double>& w, std::size_t j) { return w.size() == 1 ? w[0] : w[j]; }

}  // namespace

double lasso_value(const TensorD& matrix, const std::vector<double>& z, const std::vector<double>& weights,
                   const std::vector<double>& code) {
  const auto m = to_eigen(matrix);
  const Eigen::VectorXd r = to_eigen(z) - m * to_eigen(code);
  double penalty = 0.0;
  for (std::size_t j = 0; j < code.size(); ++j) penalty += weight(weights, j) * std::abs(code[j]);
  return 0.5 * r.squaredNorm() + penalty;
}

LassoResult lasso_cd(const TensorD& matrix, const std::vector<double>& z, const std::vector<double>& weights,
                     ShrinkMode mode, double tol, int max_sweeps) {
  const auto m = to_eigen(matrix);
  const auto rows = static_cast<std::size_t>(m.rows()), cols = static_cast<std::size_t>(m.cols());
  if (rows > kLassoMaxRows || cols > kLassoMaxCols) throw std::invalid_argument("lasso_cd: matrix exceeds 64 x 256");
  if (z.size() != rows) throw std::invalid_argument("lasso_cd: z length mismatch");
  if (weights.size() != 1 && weights.size() != cols) throw std::invalid_argument("lasso_cd: weight count mismatch");
  for (double w : weights)
    if (!(w >= 0)) throw std::invalid_argument("lasso_cd: weights must be >= 0");

  Eigen::VectorXd a = Eigen::VectorXd::Zero(m.cols());
  Eigen::VectorXd r = to_eigen(z);  // z - M a
  const Eigen::VectorXd col_sq = m.colwise().squaredNorm();
  auto objective = [&] {
    double pen = 0.0;
    for (std::size_t j = 0; j < cols; ++j) pen += weight(weights, j) * std::abs(a[static_cast<Eigen::Index>(j)]);
    return 0.5 * r.squaredNorm() + pen;
  };

  LassoResult out;
  double prev = objective();
  for (out.sweeps = 1; out.sweeps <= max_sweeps; ++out.sweeps) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (col_sq[j] == 0.0) continue;
      const double old = a[j];
      const double rho = m.col(j).dot(r) + col_sq[j] * old;
      const double w = weight(weights, static_cast<std::size_t>(j));
      double next;
      if (mode == ShrinkMode::nonneg)
        next = std::max(rho - w, 0.0) / col_sq[j];
      else
        next = std::copysign(std::max(std::abs(rho) - w, 0.0), rho) / col_sq[j];
      if (next != old) {
        r -= (next - old) * m.col(j);
        a[j] = next;
      }
    }
    const double cur = objective();
    if (prev - cur < tol) {
      prev = cur;
      break;
    }
    prev = cur;
  }
  out.code = to_vector(a);
  out.objective = lasso_value(matrix, z, weights, out.code);
  return out;
}

std::vector<double> least_norm_solution(const TensorD& matrix, const std::vector<double>& z) {
  const auto m = to_eigen(matrix);
  if (m.rows() > m.cols()) throw std::invalid_argument("least_norm_solution: system is overdetermined");
  const Eigen::MatrixXd gram = m * m.transpose();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw std::runtime_error("least_norm_solution: M M^T is not positive definite");
  return to_vector(m.transpose() * ldlt.solve(to_eigen(z)));
}

std::vector<double> linear_solve(const TensorD& matrix, const std::vector<double>& z) {
  const auto m = to_eigen(matrix);
  if (m.rows() != m.cols()) throw std::invalid_argument("linear_solve: matrix must be square");
  return to_vector(m.fullPivLu().solve(to_eigen(z)));
}

double gram_lambda_max(const TensorD& matrix, int iters, int starts, std::uint64_t seed) {
  const auto m = to_eigen(matrix);
  const Eigen::MatrixXd gram = m.transpose() * m;
  double best = 0.0;
  for (int s = 0; s < starts; ++s) {
    Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(s));
    Eigen::VectorXd b(gram.rows());
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.normal();
    b.normalize();
    for (int k = 0; k < iters; ++k) {
      Eigen::VectorXd w = gram * b;
      const double n = w.norm();
      if (n == 0.0) break;
      b = w / n;
    }
    best = std::max(best, b.dot(gram * b));
  }
  return best;
}

std::pair<double, double> singular_range(const TensorD& matrix) {
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(matrix));
  const auto& s = svd.singularValues();
  return {s[0], s[s.size() - 1]};
}

}  // namespace musc::oracle
