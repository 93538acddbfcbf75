#include "musc/sparse_coding.hpp"

#include <cmath>

#include "musc/rng.hpp"

namespace musc {

std::string to_string(ShrinkMode mode) {
  return mode == ShrinkMode::nonneg ? "nonneg" : "signed";
}

ShrinkMode parse_shrink_mode(const std::string& text) {
  if (text == "nonneg") return ShrinkMode::nonneg;
  if (text == "signed") return ShrinkMode::signed_soft;
  throw std::invalid_argument("unknown shrink mode '" + text + "' (expected nonneg|signed)");
}

template <typename T>
ChannelWeights<T> uniform_weights(const CodeLayout& layout, T value) {
  ChannelWeights<T> w;
  for (const auto& s : layout) w.emplace_back(s.at(0), value);
  return w;
}

namespace {

template <typename T>
void check_thresholds(const ChannelWeights<T>& lambda, const CodeLayout& layout, const ShrinkOptions& opts) {
  if (lambda.size() != layout.size()) throw std::invalid_argument("thresholds: scale count mismatch");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (lambda[i].size() != layout[i].at(0)) throw std::invalid_argument("thresholds: channel count mismatch");
    for (T v : lambda[i]) {
      if (!std::isfinite(v) || v < 0 || (v == 0 && !opts.allow_zero_threshold))
        throw std::invalid_argument("thresholds must be positive");
    }
  }
}

template <typename T>
void threshold_into(const MultiscaleCode<T>& pre, const ChannelWeights<T>& lambda, T eta, ShrinkMode mode,
                    MultiscaleCode<T>& out) {
  for (std::size_t s = 0; s < pre.parts.size(); ++s) {
    const auto& u = pre.parts[s];
    auto& o = out.parts[s];
    const std::size_t channels = u.dim(0);
    const std::size_t plane = u.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      const T t = eta * lambda[s][c];
      const T* up = u.slab(c);
      T* op = o.slab(c);
      if (mode == ShrinkMode::nonneg) {
        for (std::size_t j = 0; j < plane; ++j) {
          const T v = up[j] - t;
          op[j] = v > 0 ? v : T{0};
        }
      } else {
        for (std::size_t j = 0; j < plane; ++j) {
          const T a = std::abs(up[j]) - t;
          op[j] = a > 0 ? std::copysign(a, up[j]) : T{0};
        }
      }
    }
  }
}

}  // namespace

template <typename T>
ShrinkTrace<T> shrink_step_traced(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z,
                                  const SynthesisOperator<T>& encoder, const SynthesisOperator<T>& adjoint,
                                  const ChannelWeights<T>& lambda, T eta, const ShrinkOptions& opts) {
  if (!(eta > 0) || !std::isfinite(eta)) throw std::invalid_argument("shrink_step: step size must be positive");
  const auto layout = encoder.layout();
  if (adjoint.layout() != layout) throw std::invalid_argument("shrink_step: encoder/adjoint layouts differ");
  if (alpha.layout() != layout) throw std::invalid_argument("shrink_step: code does not match dictionary layout");
  require_same_shape(z.dims(), encoder.image_shape(), "shrink_step input");
  check_thresholds(lambda, layout, opts);

  ShrinkTrace<T> tr;
  tr.residual = z;
  tr.residual -= encoder.apply(alpha);
  tr.correlation = adjoint.adjoint(tr.residual);
  tr.pre = alpha;
  tr.pre.axpy(eta, tr.correlation);
  tr.code = MultiscaleCode<T>::zeros(layout);
  threshold_into(tr.pre, lambda, eta, opts.mode, tr.code);
  return tr;
}

template <typename T>
MultiscaleCode<T> shrink_step(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z,
                              const SynthesisOperator<T>& encoder, const SynthesisOperator<T>& adjoint,
                              const ChannelWeights<T>& lambda, T eta, const ShrinkOptions& opts) {
  return shrink_step_traced(alpha, z, encoder, adjoint, lambda, eta, opts).code;
}

template <typename T>
MultiscaleCode<T> ista_k(const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                         const ChannelWeights<T>& lambda, T eta, int steps, const ShrinkOptions& opts) {
  if (steps < 0) throw std::invalid_argument("ista_k: negative step count");
  auto alpha = MultiscaleCode<T>::zeros(encoder.layout());
  for (int k = 0; k < steps; ++k) alpha = shrink_step(alpha, z, encoder, encoder, lambda, eta, opts);
  return alpha;
}

template <typename T>
MultiscaleCode<T> lista_k(const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                          const SynthesisOperator<T>& adjoint, const Thresholds<T>& lambdas, T eta,
                          const ShrinkOptions& opts) {
  if (lambdas.empty()) throw std::invalid_argument("lista_k: needs at least one step");
  auto alpha = MultiscaleCode<T>::zeros(encoder.layout());
  for (const auto& lambda : lambdas) alpha = shrink_step(alpha, z, encoder, adjoint, lambda, eta, opts);
  return alpha;
}

template <typename T>
double lasso_objective(const MultiscaleCode<T>& alpha, const BasicTensor<T>& z, const SynthesisOperator<T>& encoder,
                       const ChannelWeights<T>& lambda) {
  const auto layout = encoder.layout();
  if (alpha.layout() != layout) throw std::invalid_argument("lasso_objective: code does not match dictionary");
  check_thresholds(lambda, layout, ShrinkOptions{ShrinkMode::nonneg, true});
  auto r = encoder.apply(alpha);
  require_same_shape(r.dims(), z.dims(), "lasso_objective");
  double fit = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = static_cast<double>(z[i]) - static_cast<double>(r[i]);
    fit += d * d;
  }
  double penalty = 0.0;
  for (std::size_t s = 0; s < alpha.parts.size(); ++s) {
    const auto& a = alpha.parts[s];
    const std::size_t plane = a.size() / a.dim(0);
    for (std::size_t c = 0; c < a.dim(0); ++c) {
      double l1 = 0.0;
      const T* p = a.slab(c);
      for (std::size_t j = 0; j < plane; ++j) l1 += std::abs(static_cast<double>(p[j]));
      penalty += static_cast<double>(lambda[s][c]) * l1;
    }
  }
  return 0.5 * fit + penalty;
}

template <typename T>
PowerIterationResult power_iteration_from(const SynthesisOperator<T>& encoder, MultiscaleCode<T> b, int iters) {
  if (iters < 1) throw std::invalid_argument("power_iteration: iters must be >= 1");
  if (b.layout() != encoder.layout()) throw std::invalid_argument("power_iteration: start vector layout mismatch");
  double nb = std::sqrt(squared_norm(b));
  if (nb == 0.0) throw DegenerateOperatorError("power_iteration: zero start vector cannot be normalized");
  b *= static_cast<T>(1.0 / nb);
  for (int k = 0; k < iters; ++k) {
    auto w = encoder.adjoint(encoder.apply(b));
    const double nw = std::sqrt(squared_norm(w));
    if (nw == 0.0 || !std::isfinite(nw))
      throw DegenerateOperatorError("power_iteration: E^T E b vanished (degenerate operator)");
    w *= static_cast<T>(1.0 / nw);
    b = std::move(w);
  }
  const double rayleigh = squared_norm(encoder.apply(b)) / squared_norm(b);
  if (!(rayleigh > 0.0)) throw DegenerateOperatorError("power_iteration: zero dominant eigenvalue");
  return {rayleigh, 1.0 / rayleigh, iters};
}

template <typename T>
PowerIterationResult power_iteration(const SynthesisOperator<T>& encoder, int iters, std::uint64_t seed) {
  Rng rng(seed);
  auto b = MultiscaleCode<T>::zeros(encoder.layout());
  for (auto& p : b.parts)
    for (auto& v : p.values()) v = static_cast<T>(rng.normal());
  return power_iteration_from(encoder, std::move(b), iters);
}

#define MUSC_INSTANTIATE(T)                                                                                    \
  template ChannelWeights<T> uniform_weights(const CodeLayout&, T);                                           \
  template ShrinkTrace<T> shrink_step_traced(const MultiscaleCode<T>&, const BasicTensor<T>&,                  \
                                             const SynthesisOperator<T>&, const SynthesisOperator<T>&,         \
                                             const ChannelWeights<T>&, T, const ShrinkOptions&);               \
  template MultiscaleCode<T> shrink_step(const MultiscaleCode<T>&, const BasicTensor<T>&,                      \
                                         const SynthesisOperator<T>&, const SynthesisOperator<T>&,             \
                                         const ChannelWeights<T>&, T, const ShrinkOptions&);                   \
  template MultiscaleCode<T> ista_k(const BasicTensor<T>&, const SynthesisOperator<T>&,                        \
                                    const ChannelWeights<T>&, T, int, const ShrinkOptions&);                   \
  template MultiscaleCode<T> lista_k(const BasicTensor<T>&, const SynthesisOperator<T>&,                       \
                                     const SynthesisOperator<T>&, const Thresholds<T>&, T,                     \
                                     const ShrinkOptions&);                                                    \
  template double lasso_objective(const MultiscaleCode<T>&, const BasicTensor<T>&, const SynthesisOperator<T>&, \
                                  const ChannelWeights<T>&);                                                   \
  template PowerIterationResult power_iteration_from(const SynthesisOperator<T>&, MultiscaleCode<T>, int);     \
  template PowerIterationResult power_iteration(const SynthesisOperator<T>&, int, std::uint64_t);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

}  // namespace musc
