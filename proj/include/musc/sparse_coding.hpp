#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "musc/linops.hpp"

namespace musc {

enum class ShrinkMode { nonneg, signed_soft };

std::string to_string(ShrinkMode mode);
ShrinkMode parse_shrink_mode(const std::string& text);

/// Threshold per (scale, channel), broadcast over space.
template <typename T>
using ChannelWeights = std::vector<std::vector<T>>;

/// One ChannelWeights per unrolled step.
template <typename T>
using Thresholds = std::vector<ChannelWeights<T>>;

template <typename T>
ChannelWeights<T> uniform_weights(const CodeLayout& layout, T value);

/// Raised when power iteration meets an operator with E^T E b = 0.
class DegenerateOperatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ShrinkOptions {
  ShrinkMode mode = ShrinkMode::nonneg;
  /// Accept lambda == 0. Only the least-norm limit test needs this.
  bool allow_zero_threshold = false;
};

/// Quantities of one step kept for reverse-mode differentiation.
template <typename T>
struct ShrinkTrace {
  BasicTensor<T> residual;     // z - E alpha_prev
  MultiscaleCode<T> correlation;  // Etilde^T residual
  MultiscaleCode<T> pre;       // alpha_prev + eta * correlation (before thresholding)
  MultiscaleCode<T> code;      // the step's output
};

/// One untied ISTA step:
///   nonneg: relu(alpha + eta Et^T (z - E alpha) - eta lambda)
///   signed: soft threshold of the same pre-activation at eta lambda.
template <typename T>
MultiscaleCode<T> shrink_step(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z,
                              const SynthesisOperator<T>& encoder, const SynthesisOperator<T>& adjoint,
                              const ChannelWeights<T>& lambda, T eta, const ShrinkOptions& opts = {});

template <typename T>
ShrinkTrace<T> shrink_step_traced(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z,
                                  const SynthesisOperator<T>& encoder, const SynthesisOperator<T>& adjoint,
                                  const ChannelWeights<T>& lambda, T eta, const ShrinkOptions& opts = {});

/// K tied steps from the zero code; K == 0 yields the zero code.
template <typename T>
MultiscaleCode<T> ista_k(const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                         const ChannelWeights<T>& lambda, T eta, int steps, const ShrinkOptions& opts = {});

/// Untied unrolled solver with one threshold set per step; steps = lambdas.size().
template <typename T>
MultiscaleCode<T> lista_k(const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                          const SynthesisOperator<T>& adjoint, const Thresholds<T>& lambdas, T eta,
                          const ShrinkOptions& opts = {});

/// 0.5 ||z - E alpha||^2 + sum lambda_c |alpha|
template <typename T>
double lasso_objective(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                       const ChannelWeights<T>& lambda);

struct PowerIterationResult {
  double lambda_max = 0.0;  // Rayleigh quotient estimate of the top eigenvalue of E^T E
  double eta = 0.0;         // 1 / lambda_max
  int iterations = 0;
};

/// Normalized iteration b <- E^T E b / ||E^T E b|| from a seeded random unit
/// vector. A zero-initialized start is undefined and is not offered.
template <typename T>
PowerIterationResult power_iteration(const SynthesisOperator<T>& encoder, int iters = 50, std::uint64_t seed = 0);

/// Same iteration from a caller-supplied start; a zero start throws
/// DegenerateOperatorError.
template <typename T>
PowerIterationResult power_iteration_from(const SynthesisOperator<T>& encoder, MultiscaleCode<T> start, int iters);

}  // namespace musc
