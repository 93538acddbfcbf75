#pragma once

// Brute-force reference implementations written straight from the operator
// definitions. Everything runs in double regardless of the input type.

#include <cstddef>
#include <optional>
#include <vector>

#include "musc/linops.hpp"
#include "musc/tensor.hpp"

namespace oracle_loops {

using musc::TensorD;

template <typename T>
TensorD to_d(const musc::BasicTensor<T>& t) {
  return t.template cast<double>();
}

inline TensorD kron(const TensorD& a, const TensorD& b) {
  TensorD out({a.dim(0) * b.dim(0), a.dim(1) * b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j)
      for (std::size_t p = 0; p < b.dim(0); ++p)
        for (std::size_t q = 0; q < b.dim(1); ++q) out.at(i * b.dim(0) + p, j * b.dim(1) + q) = a.at(i, j) * b.at(p, q);
  return out;
}

// out[i,j] = sum_{p,q in -1..1} x[i+p, j+q] w[p+1, q+1], zero outside.
inline TensorD conv2d(const TensorD& x, const TensorD& w) {
  const long h = static_cast<long>(x.dim(0)), wd = static_cast<long>(x.dim(1));
  TensorD out({x.dim(0), x.dim(1)});
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < wd; ++j) {
      double s = 0;
      for (long p = -1; p <= 1; ++p)
        for (long q = -1; q <= 1; ++q) {
          const long r = i + p, c = j + q;
          if (r < 0 || c < 0 || r >= h || c >= wd) continue;
          s += x.at(r, c) * w.at(p + 1, q + 1);
        }
      out.at(i, j) = s;
    }
  return out;
}

// Every input pixel stamps the flipped 2x2 kernel into its output block.
inline TensorD tconv2d(const TensorD& x, const TensorD& v) {
  TensorD out({2 * x.dim(0), 2 * x.dim(1)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) out.at(2 * i + a, 2 * j + b) = x.at(i, j) * v.at(1 - a, 1 - b);
  return out;
}

inline TensorD plane(const TensorD& x, std::size_t c) {
  TensorD p({x.dim(1), x.dim(2)});
  for (std::size_t i = 0; i < x.dim(1); ++i)
    for (std::size_t j = 0; j < x.dim(2); ++j) p.at(i, j) = x.at(c, i, j);
  return p;
}

inline TensorD kernel2(const TensorD& k, std::size_t o, std::size_t c) {
  TensorD p({k.dim(2), k.dim(3)});
  for (std::size_t i = 0; i < k.dim(2); ++i)
    for (std::size_t j = 0; j < k.dim(3); ++j) p.at(i, j) = k.at(o, c, i, j);
  return p;
}

inline TensorD conv_mimo(const TensorD& x, const TensorD& w) {
  TensorD out({w.dim(0), x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < w.dim(0); ++o)
    for (std::size_t c = 0; c < x.dim(0); ++c) {
      const auto y = conv2d(plane(x, c), kernel2(w, o, c));
      for (std::size_t i = 0; i < x.dim(1); ++i)
        for (std::size_t j = 0; j < x.dim(2); ++j) out.at(o, i, j) += y.at(i, j);
    }
  return out;
}

inline TensorD tconv_mimo(const TensorD& x, const TensorD& v) {
  TensorD out({v.dim(0), 2 * x.dim(1), 2 * x.dim(2)});
  for (std::size_t o = 0; o < v.dim(0); ++o)
    for (std::size_t c = 0; c < x.dim(0); ++c) {
      const auto y = tconv2d(plane(x, c), kernel2(v, o, c));
      for (std::size_t i = 0; i < y.dim(0); ++i)
        for (std::size_t j = 0; j < y.dim(1); ++j) out.at(o, i, j) += y.at(i, j);
    }
  return out;
}

inline TensorD conv1x1(const TensorD& x, const TensorD& k) {
  TensorD out({k.dim(0), x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < k.dim(0); ++o)
    for (std::size_t c = 0; c < x.dim(0); ++c)
      for (std::size_t i = 0; i < x.dim(1); ++i)
        for (std::size_t j = 0; j < x.dim(2); ++j) out.at(o, i, j) += k.at(o, c, 0, 0) * x.at(c, i, j);
  return out;
}

inline TensorD concat(const TensorD& a, const TensorD& b) {
  TensorD out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::size_t k = 0;
  for (double v : a.values()) out[k++] = v;
  for (double v : b.values()) out[k++] = v;
  return out;
}

template <typename T>
TensorD dict_apply(const musc::DictionaryParams<T>& p, const musc::MultiscaleCode<T>& code) {
  TensorD xi = to_d(code.parts[0]);
  if (p.bottom) xi = conv_mimo(xi, to_d(*p.bottom));
  for (int i = 1; i <= p.spec.scales; ++i) {
    const auto up = tconv_mimo(xi, to_d(p.upsample[i - 1]));
    xi = conv_mimo(concat(to_d(code.parts[i]), up), to_d(p.merge[i - 1]));
  }
  return conv1x1(xi, to_d(p.head));
}

template <typename T>
double max_abs_diff(const musc::BasicTensor<T>& a, const TensorD& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace oracle_loops
