#include "musc/linops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace musc {

namespace {

// Raw kernels. Images are contiguous C x H x W blocks; kernels are
// (out, in, kh, kw). `kin` is the kernel's input-channel extent and `koff`
// the first kernel input channel used, so one kernel can be split across
// concatenated inputs without materializing the concatenation.

// The 3x3 routines work on zero-padded planes of row stride P = w + 2, so that
// every tap is a constant offset into one contiguous buffer. Results are
// produced with stride P; the two extra columns per row are discarded.

template <typename T>
std::vector<T> pad_planes(const T* x, std::size_t channels, std::size_t h, std::size_t w) {
  const std::size_t stride = w + 2, plane = (h + 2) * stride;
  std::vector<T> out(channels * plane + 2, T{0});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x + (c * h + i) * w, w, out.data() + c * plane + (i + 1) * stride + 1);
  return out;
}

// acc[k] += sum_t wt[t] * src[k + off[t]] for k < n
template <typename T>
inline void nine_tap_acc(const T* src, const std::size_t* off, const T* wt, std::size_t n, T* acc) {
  const T* s0 = src + off[0];
  const T* s1 = src + off[1];
  const T* s2 = src + off[2];
  const T* s3 = src + off[3];
  const T* s4 = src + off[4];
  const T* s5 = src + off[5];
  const T* s6 = src + off[6];
  const T* s7 = src + off[7];
  const T* s8 = src + off[8];
  const T w0 = wt[0], w1 = wt[1], w2 = wt[2], w3 = wt[3], w4 = wt[4], w5 = wt[5], w6 = wt[6], w7 = wt[7], w8 = wt[8];
#pragma omp simd
  for (std::size_t k = 0; k < n; ++k)
    acc[k] += w0 * s0[k] + w1 * s1[k] + w2 * s2[k] + w3 * s3[k] + w4 * s4[k] + w5 * s5[k] + w6 * s6[k] +
              w7 * s7[k] + w8 * s8[k];
}

template <typename T>
void add_unpadded(const std::vector<T>& acc, std::size_t h, std::size_t w, T* out) {
  const std::size_t stride = w + 2;
  for (std::size_t i = 0; i < h; ++i) {
    const T* a = acc.data() + i * stride;
    T* o = out + i * w;
    for (std::size_t j = 0; j < w; ++j) o[j] += a[j];
  }
}

template <typename T>
void conv3x3_acc(const T* x, std::size_t channels, std::size_t h, std::size_t w, const T* k, std::size_t out_ch,
                 std::size_t kin, std::size_t koff, T* out) {
  const std::size_t stride = w + 2, plane = (h + 2) * stride, n = h * stride;
  const auto xp = pad_planes(x, channels, h, w);
  std::size_t off[9];
  for (std::size_t t = 0; t < 9; ++t) off[t] = (t / 3) * stride + t % 3;
  std::vector<T> acc(n);
  for (std::size_t m = 0; m < out_ch; ++m) {
    std::fill(acc.begin(), acc.end(), T{0});
    for (std::size_t c = 0; c < channels; ++c)
      nine_tap_acc(xp.data() + c * plane, off, k + (m * kin + koff + c) * 9, n, acc.data());
    add_unpadded(acc, h, w, out + m * h * w);
  }
}

// out (channels x h x w) += adjoint of conv3x3 applied to g (out_ch x h x w).
template <typename T>
void conv3x3_adjoint_acc(const T* g, std::size_t out_ch, std::size_t h, std::size_t w, const T* k,
                         std::size_t kin, std::size_t koff, std::size_t channels, T* out) {
  const std::size_t stride = w + 2, plane = (h + 2) * stride, n = h * stride;
  const auto gp = pad_planes(g, out_ch, h, w);
  // Correlation with the flipped kernel: tap t reads offset (2 - p) * stride + (2 - q).
  std::size_t off[9];
  for (std::size_t t = 0; t < 9; ++t) off[t] = (2 - t / 3) * stride + (2 - t % 3);
  std::vector<T> acc(n);
  for (std::size_t c = 0; c < channels; ++c) {
    std::fill(acc.begin(), acc.end(), T{0});
    for (std::size_t m = 0; m < out_ch; ++m)
      nine_tap_acc(gp.data() + m * plane, off, k + (m * kin + koff + c) * 9, n, acc.data());
    add_unpadded(acc, h, w, out + c * h * w);
  }
}

// gk[m, koff + c, p, q] += sum_ij g[m,i,j] x[c, i+p, j+q]
template <typename T>
void conv3x3_kernel_grad_acc(const T* x, std::size_t channels, std::size_t h, std::size_t w, const T* g,
                             std::size_t out_ch, std::size_t kin, std::size_t koff, T* gk) {
  const std::size_t stride = w + 2, plane = (h + 2) * stride, n = h * stride;
  const auto xp = pad_planes(x, channels, h, w);
  const auto gp = pad_planes(g, out_ch, h, w);
  for (std::size_t m = 0; m < out_ch; ++m) {
    // g in stride-P layout with zero pad columns
    const T* gm = gp.data() + m * plane + stride + 1;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* xc = xp.data() + c * plane;
      const T *s0 = xc, *s1 = xc + 1, *s2 = xc + 2;
      const T *s3 = xc + stride, *s4 = s3 + 1, *s5 = s3 + 2;
      const T *s6 = xc + 2 * stride, *s7 = s6 + 1, *s8 = s6 + 2;
      T a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
#pragma omp simd reduction(+ : a0, a1, a2, a3, a4, a5, a6, a7, a8)
      for (std::size_t i = 0; i < n; ++i) {
        const T gv = gm[i];
        a0 += gv * s0[i];
        a1 += gv * s1[i];
        a2 += gv * s2[i];
        a3 += gv * s3[i];
        a4 += gv * s4[i];
        a5 += gv * s5[i];
        a6 += gv * s6[i];
        a7 += gv * s7[i];
        a8 += gv * s8[i];
      }
      T* kk = gk + (m * kin + koff + c) * 9;
      kk[0] += a0;
      kk[1] += a1;
      kk[2] += a2;
      kk[3] += a3;
      kk[4] += a4;
      kk[5] += a5;
      kk[6] += a6;
      kk[7] += a7;
      kk[8] += a8;
    }
  }
}

// out (out_ch x 2h x 2w) += sum_c x_c (x) flip(v_mc)
template <typename T>
void tconv_acc(const T* x, std::size_t channels, std::size_t h, std::size_t w, const T* v, std::size_t out_ch,
               T* out) {
  const std::size_t ow = 2 * w;
  const std::size_t ohw = 4 * h * w;
  for (std::size_t m = 0; m < out_ch; ++m) {
    T* o = out + m * ohw;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* xc = x + c * h * w;
      const T* vv = v + (m * channels + c) * 4;
      // flipped: fb[r][s] = v[1-r][1-s]
      const T f00 = vv[3], f01 = vv[2], f10 = vv[1], f11 = vv[0];
      for (std::size_t a = 0; a < h; ++a) {
        const T* xr = xc + a * w;
        T* r0 = o + (2 * a) * ow;
        T* r1 = r0 + ow;
        for (std::size_t b = 0; b < w; ++b) {
          const T xv = xr[b];
          r0[2 * b] += xv * f00;
          r0[2 * b + 1] += xv * f01;
          r1[2 * b] += xv * f10;
          r1[2 * b + 1] += xv * f11;
        }
      }
    }
  }
}

template <typename T>
void tconv_adjoint_acc(const T* g, std::size_t out_ch, std::size_t h, std::size_t w, const T* v,
                       std::size_t channels, T* out) {
  const std::size_t ow = 2 * w;
  const std::size_t ohw = 4 * h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* oc = out + c * h * w;
    for (std::size_t m = 0; m < out_ch; ++m) {
      const T* gm = g + m * ohw;
      const T* vv = v + (m * channels + c) * 4;
      const T f00 = vv[3], f01 = vv[2], f10 = vv[1], f11 = vv[0];
      for (std::size_t a = 0; a < h; ++a) {
        const T* r0 = gm + (2 * a) * ow;
        const T* r1 = r0 + ow;
        T* orow = oc + a * w;
        for (std::size_t b = 0; b < w; ++b)
          orow[b] += r0[2 * b] * f00 + r0[2 * b + 1] * f01 + r1[2 * b] * f10 + r1[2 * b + 1] * f11;
      }
    }
  }
}

// gv[m,c,r,s] += sum_ab g[m, 2a+1-r, 2b+1-s] x[c,a,b]
template <typename T>
void tconv_kernel_grad_acc(const T* x, std::size_t channels, std::size_t h, std::size_t w, const T* g,
                           std::size_t out_ch, T* gv) {
  const std::size_t ow = 2 * w;
  const std::size_t ohw = 4 * h * w;
  for (std::size_t m = 0; m < out_ch; ++m) {
    const T* gm = g + m * ohw;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* xc = x + c * h * w;
      T a00 = 0, a01 = 0, a10 = 0, a11 = 0;
      for (std::size_t a = 0; a < h; ++a) {
        const T* xr = xc + a * w;
        const T* r0 = gm + (2 * a) * ow;
        const T* r1 = r0 + ow;
        for (std::size_t b = 0; b < w; ++b) {
          const T xv = xr[b];
          a00 += r0[2 * b] * xv;
          a01 += r0[2 * b + 1] * xv;
          a10 += r1[2 * b] * xv;
          a11 += r1[2 * b + 1] * xv;
        }
      }
      T* vv = gv + (m * channels + c) * 4;
      vv[3] += a00;
      vv[2] += a01;
      vv[1] += a10;
      vv[0] += a11;
    }
  }
}

template <typename T>
void conv1x1_acc(const T* x, std::size_t channels, std::size_t hw, const T* k, std::size_t out_ch, T* out) {
  for (std::size_t m = 0; m < out_ch; ++m) {
    T* o = out + m * hw;
    for (std::size_t c = 0; c < channels; ++c) {
      const T wt = k[m * channels + c];
      const T* xc = x + c * hw;
#pragma omp simd
      for (std::size_t j = 0; j < hw; ++j) o[j] += wt * xc[j];
    }
  }
}

template <typename T>
void conv1x1_adjoint_acc(const T* g, std::size_t out_ch, std::size_t hw, const T* k, std::size_t channels, T* out) {
  for (std::size_t c = 0; c < channels; ++c) {
    T* oc = out + c * hw;
    for (std::size_t m = 0; m < out_ch; ++m) {
      const T wt = k[m * channels + c];
      const T* gm = g + m * hw;
#pragma omp simd
      for (std::size_t j = 0; j < hw; ++j) oc[j] += wt * gm[j];
    }
  }
}

template <typename T>
void conv1x1_kernel_grad_acc(const T* x, std::size_t channels, std::size_t hw, const T* g, std::size_t out_ch,
                             T* gk) {
  for (std::size_t m = 0; m < out_ch; ++m) {
    const T* gm = g + m * hw;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* xc = x + c * hw;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t j = 0; j < hw; ++j) acc += gm[j] * xc[j];
      gk[m * channels + c] += acc;
    }
  }
}

void require_rank(const Shape& dims, std::size_t rank, const char* what) {
  if (dims.size() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(dims));
}

void require_kernel(const Shape& k, std::size_t kh, std::size_t kw, const char* what) {
  if (k.size() != 4 || k[2] != kh || k[3] != kw)
    throw std::invalid_argument(std::string(what) + ": expected (M,C," + std::to_string(kh) + "," +
                                std::to_string(kw) + ") kernel, got " + shape_string(k));
}

template <typename T>
BasicTensor<T> as_mimo(const BasicTensor<T>& x2) {
  return x2.reshaped({1, x2.dim(0), x2.dim(1)});
}

}  // namespace

// --- ScaleSpec -----------------------------------------------------------------

void ScaleSpec::validate() const {
  if (scales < 0 || scales > 10) throw std::invalid_argument("ScaleSpec: scales must be in 0..10");
  if (channels < 1 || height < 1 || width < 1 || out_channels < 1)
    throw std::invalid_argument("ScaleSpec: channels, height, width and out_channels must be positive");
  if (channels % (1 << scales) != 0)
    throw std::invalid_argument("ScaleSpec: channels (" + std::to_string(channels) + ") not divisible by 2^" +
                                std::to_string(scales));
  if (static_cast<int>(code_channels(scales)) < out_channels)
    throw std::invalid_argument("ScaleSpec: finest code has fewer channels than the image");
}

std::size_t ScaleSpec::code_size() const {
  std::size_t n = 0;
  for (int i = 0; i <= scales; ++i) n += shape_product(code_shape(i));
  return n;
}

CodeLayout code_layout(const ScaleSpec& spec) {
  CodeLayout layout;
  for (int i = 0; i <= spec.scales; ++i) layout.push_back(spec.code_shape(i));
  return layout;
}

std::vector<std::pair<std::string, Shape>> kernel_shapes(const ScaleSpec& spec) {
  std::vector<std::pair<std::string, Shape>> out;
  const auto c0 = spec.code_channels(0);
  if (spec.bottom_conv) out.emplace_back("bottom", Shape{c0, c0, 3, 3});
  for (int i = 1; i <= spec.scales; ++i) {
    const auto ci = spec.code_channels(i);
    out.emplace_back("up" + std::to_string(i), Shape{ci, spec.code_channels(i - 1), 2, 2});
    out.emplace_back("merge" + std::to_string(i), Shape{ci, 2 * ci, 3, 3});
  }
  out.emplace_back("head", Shape{static_cast<std::size_t>(spec.out_channels), spec.code_channels(spec.scales), 1, 1});
  return out;
}

// --- MultiscaleCode ------------------------------------------------------------

template <typename T>
MultiscaleCode<T> MultiscaleCode<T>::zeros(const CodeLayout& layout) {
  MultiscaleCode c;
  c.parts.reserve(layout.size());
  for (const auto& s : layout) c.parts.emplace_back(s);
  return c;
}

template <typename T>
CodeLayout MultiscaleCode<T>::layout() const {
  CodeLayout l;
  for (const auto& p : parts) l.push_back(p.dims());
  return l;
}

template <typename T>
std::size_t MultiscaleCode<T>::size() const {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  return n;
}

namespace {
template <typename T>
void require_same_layout(const MultiscaleCode<T>& a, const MultiscaleCode<T>& b, const char* what) {
  if (a.parts.size() != b.parts.size()) throw std::invalid_argument(std::string(what) + ": scale count mismatch");
  for (std::size_t i = 0; i < a.parts.size(); ++i) require_same_shape(a.parts[i].dims(), b.parts[i].dims(), what);
}
}  // namespace

template <typename T>
MultiscaleCode<T>& MultiscaleCode<T>::operator+=(const MultiscaleCode& other) {
  require_same_layout(*this, other, "code +=");
  for (std::size_t i = 0; i < parts.size(); ++i) parts[i] += other.parts[i];
  return *this;
}

template <typename T>
MultiscaleCode<T>& MultiscaleCode<T>::operator-=(const MultiscaleCode& other) {
  require_same_layout(*this, other, "code -=");
  for (std::size_t i = 0; i < parts.size(); ++i) parts[i] -= other.parts[i];
  return *this;
}

template <typename T>
MultiscaleCode<T>& MultiscaleCode<T>::operator*=(T s) {
  for (auto& p : parts) p *= s;
  return *this;
}

template <typename T>
MultiscaleCode<T>& MultiscaleCode<T>::axpy(T s, const MultiscaleCode& x) {
  require_same_layout(*this, x, "code axpy");
  for (std::size_t i = 0; i < parts.size(); ++i) parts[i].axpy(s, x.parts[i]);
  return *this;
}

template <typename T>
double dot(const MultiscaleCode<T>& a, const MultiscaleCode<T>& b) {
  require_same_layout(a, b, "code dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.parts.size(); ++i) s += dot(a.parts[i], b.parts[i]);
  return s;
}

template <typename T>
double squared_norm(const MultiscaleCode<T>& a) {
  return dot(a, a);
}

template <typename T>
double max_abs_diff(const MultiscaleCode<T>& a, const MultiscaleCode<T>& b) {
  require_same_layout(a, b, "code max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.parts.size(); ++i) m = std::max(m, max_abs_diff(a.parts[i], b.parts[i]));
  return m;
}

template <typename T>
std::vector<T> flatten(const MultiscaleCode<T>& code) {
  std::vector<T> out;
  out.reserve(code.size());
  for (const auto& p : code.parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

template <typename T>
MultiscaleCode<T> unflatten(const std::vector<T>& flat, const CodeLayout& layout) {
  auto code = MultiscaleCode<T>::zeros(layout);
  if (flat.size() != code.size())
    throw std::invalid_argument("unflatten: " + std::to_string(flat.size()) + " values for code of size " +
                                std::to_string(code.size()));
  std::size_t off = 0;
  for (auto& p : code.parts) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.size(), p.data());
    off += p.size();
  }
  return code;
}

// --- DictionaryParams ----------------------------------------------------------

template <typename T>
DictionaryParams<T> DictionaryParams<T>::zeros(const ScaleSpec& spec) {
  spec.validate();
  DictionaryParams p;
  p.spec = spec;
  for (const auto& [name, shape] : kernel_shapes(spec)) {
    if (name == "bottom")
      p.bottom.emplace(shape);
    else if (name.starts_with("up"))
      p.upsample.emplace_back(shape);
    else if (name.starts_with("merge"))
      p.merge.emplace_back(shape);
    else
      p.head = BasicTensor<T>(shape);
  }
  return p;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> DictionaryParams<T>::named_kernels() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  if (bottom) out.emplace_back("bottom", &*bottom);
  for (std::size_t i = 0; i < upsample.size(); ++i) {
    out.emplace_back("up" + std::to_string(i + 1), &upsample[i]);
    if (i < merge.size()) out.emplace_back("merge" + std::to_string(i + 1), &merge[i]);
  }
  out.emplace_back("head", &head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const BasicTensor<T>*>> DictionaryParams<T>::named_kernels() const {
  std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
  for (auto& [n, k] : const_cast<DictionaryParams*>(this)->named_kernels()) out.emplace_back(n, k);
  return out;
}

template <typename T>
void DictionaryParams<T>::validate() const {
  spec.validate();
  if (bottom.has_value() != spec.bottom_conv)
    throw std::invalid_argument("DictionaryParams: bottom kernel presence disagrees with spec");
  if (upsample.size() != static_cast<std::size_t>(spec.scales) || merge.size() != upsample.size())
    throw std::invalid_argument("DictionaryParams: expected one up/merge kernel pair per scale");
  const auto expected = kernel_shapes(spec);
  const auto actual = named_kernels();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (actual[i].first != expected[i].first || actual[i].second->dims() != expected[i].second)
      throw std::invalid_argument("DictionaryParams: kernel " + expected[i].first + " should be " +
                                  shape_string(expected[i].second) + ", got " +
                                  shape_string(actual[i].second->dims()));
  }
}

// --- single channel ------------------------------------------------------------

template <typename T>
BasicTensor<T> conv_siso(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_rank(x.dims(), 2, "conv_siso");
  if (w.dims() != Shape{3, 3}) throw std::invalid_argument("conv_siso: kernel must be 3x3");
  return conv_mimo(as_mimo(x), w.reshaped({1, 1, 3, 3})).reshaped(x.dims());
}

template <typename T>
BasicTensor<T> tconv_siso(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  require_rank(x.dims(), 2, "tconv_siso");
  if (v.dims() != Shape{2, 2}) throw std::invalid_argument("tconv_siso: kernel must be 2x2");
  const auto flipped = BasicTensor<T>::from_rows({{v.at(1, 1), v.at(1, 0)}, {v.at(0, 1), v.at(0, 0)}});
  return kron(x, flipped);
}

template <typename T>
BasicTensor<T> tconv_siso_direct(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  require_rank(x.dims(), 2, "tconv_siso_direct");
  if (v.dims() != Shape{2, 2}) throw std::invalid_argument("tconv_siso_direct: kernel must be 2x2");
  const auto nails = BasicTensor<T>::from_rows({{0, 0}, {0, 1}});
  const auto up = kron(x, nails);
  const std::size_t h = up.dim(0), w = up.dim(1);
  BasicTensor<T> out({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < 2; ++p)
        for (std::size_t q = 0; q < 2; ++q)
          if (i + p < h && j + q < w) s += up.at(i + p, j + q) * v.at(p, q);
      out.at(i, j) = s;
    }
  return out;
}

// --- multi channel -------------------------------------------------------------

template <typename T>
BasicTensor<T> conv_mimo(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  require_rank(x.dims(), 3, "conv_mimo");
  require_kernel(w.dims(), 3, 3, "conv_mimo");
  if (w.dim(1) != x.dim(0)) throw std::invalid_argument("conv_mimo: kernel expects " + std::to_string(w.dim(1)) +
                                                        " input channels, got " + std::to_string(x.dim(0)));
  BasicTensor<T> out({w.dim(0), x.dim(1), x.dim(2)});
  conv3x3_acc(x.data(), x.dim(0), x.dim(1), x.dim(2), w.data(), w.dim(0), w.dim(1), 0, out.data());
  return out;
}

template <typename T>
BasicTensor<T> conv_mimo_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& w) {
  require_rank(g.dims(), 3, "conv_mimo_adjoint");
  require_kernel(w.dims(), 3, 3, "conv_mimo_adjoint");
  if (w.dim(0) != g.dim(0)) throw std::invalid_argument("conv_mimo_adjoint: channel mismatch");
  BasicTensor<T> out({w.dim(1), g.dim(1), g.dim(2)});
  conv3x3_adjoint_acc(g.data(), g.dim(0), g.dim(1), g.dim(2), w.data(), w.dim(1), 0, w.dim(1), out.data());
  return out;
}

template <typename T>
BasicTensor<T> conv_mimo_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g) {
  require_rank(x.dims(), 3, "conv_mimo_kernel_grad");
  require_rank(g.dims(), 3, "conv_mimo_kernel_grad");
  if (x.dim(1) != g.dim(1) || x.dim(2) != g.dim(2))
    throw std::invalid_argument("conv_mimo_kernel_grad: spatial mismatch");
  BasicTensor<T> gk({g.dim(0), x.dim(0), 3, 3});
  conv3x3_kernel_grad_acc(x.data(), x.dim(0), x.dim(1), x.dim(2), g.data(), g.dim(0), x.dim(0), 0, gk.data());
  return gk;
}

template <typename T>
BasicTensor<T> tconv_mimo(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  require_rank(x.dims(), 3, "tconv_mimo");
  require_kernel(v.dims(), 2, 2, "tconv_mimo");
  if (v.dim(1) != x.dim(0)) throw std::invalid_argument("tconv_mimo: channel mismatch");
  BasicTensor<T> out({v.dim(0), 2 * x.dim(1), 2 * x.dim(2)});
  tconv_acc(x.data(), x.dim(0), x.dim(1), x.dim(2), v.data(), v.dim(0), out.data());
  return out;
}

template <typename T>
BasicTensor<T> tconv_mimo_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& v) {
  require_rank(g.dims(), 3, "tconv_mimo_adjoint");
  require_kernel(v.dims(), 2, 2, "tconv_mimo_adjoint");
  if (v.dim(0) != g.dim(0) || g.dim(1) % 2 || g.dim(2) % 2)
    throw std::invalid_argument("tconv_mimo_adjoint: shape mismatch");
  const std::size_t h = g.dim(1) / 2, w = g.dim(2) / 2;
  BasicTensor<T> out({v.dim(1), h, w});
  tconv_adjoint_acc(g.data(), g.dim(0), h, w, v.data(), v.dim(1), out.data());
  return out;
}

template <typename T>
BasicTensor<T> tconv_mimo_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g) {
  require_rank(x.dims(), 3, "tconv_mimo_kernel_grad");
  require_rank(g.dims(), 3, "tconv_mimo_kernel_grad");
  if (g.dim(1) != 2 * x.dim(1) || g.dim(2) != 2 * x.dim(2))
    throw std::invalid_argument("tconv_mimo_kernel_grad: spatial mismatch");
  BasicTensor<T> gv({g.dim(0), x.dim(0), 2, 2});
  tconv_kernel_grad_acc(x.data(), x.dim(0), x.dim(1), x.dim(2), g.data(), g.dim(0), gv.data());
  return gv;
}

template <typename T>
BasicTensor<T> conv1x1(const BasicTensor<T>& x, const BasicTensor<T>& k) {
  require_rank(x.dims(), 3, "conv1x1");
  require_kernel(k.dims(), 1, 1, "conv1x1");
  if (k.dim(1) != x.dim(0)) throw std::invalid_argument("conv1x1: channel mismatch");
  BasicTensor<T> out({k.dim(0), x.dim(1), x.dim(2)});
  conv1x1_acc(x.data(), x.dim(0), x.dim(1) * x.dim(2), k.data(), k.dim(0), out.data());
  return out;
}

template <typename T>
BasicTensor<T> conv1x1_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& k) {
  require_rank(g.dims(), 3, "conv1x1_adjoint");
  require_kernel(k.dims(), 1, 1, "conv1x1_adjoint");
  if (k.dim(0) != g.dim(0)) throw std::invalid_argument("conv1x1_adjoint: channel mismatch");
  BasicTensor<T> out({k.dim(1), g.dim(1), g.dim(2)});
  conv1x1_adjoint_acc(g.data(), g.dim(0), g.dim(1) * g.dim(2), k.data(), k.dim(1), out.data());
  return out;
}

template <typename T>
BasicTensor<T> conv1x1_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g) {
  require_rank(x.dims(), 3, "conv1x1_kernel_grad");
  require_rank(g.dims(), 3, "conv1x1_kernel_grad");
  BasicTensor<T> gk({g.dim(0), x.dim(0), 1, 1});
  conv1x1_kernel_grad_acc(x.data(), x.dim(0), x.dim(1) * x.dim(2), g.data(), g.dim(0), gk.data());
  return gk;
}

namespace {

// Shared by up_block and the dictionary cascade: conv of [skip ; up] with a
// kernel whose input channels are split between the two operands.
template <typename T>
BasicTensor<T> merge_conv(const BasicTensor<T>& skip, const BasicTensor<T>& up, const BasicTensor<T>& w) {
  const std::size_t h = skip.dim(1), wd = skip.dim(2);
  BasicTensor<T> out({w.dim(0), h, wd});
  conv3x3_acc(skip.data(), skip.dim(0), h, wd, w.data(), w.dim(0), w.dim(1), 0, out.data());
  conv3x3_acc(up.data(), up.dim(0), h, wd, w.data(), w.dim(0), w.dim(1), skip.dim(0), out.data());
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> up_block(const BasicTensor<T>& skip, const BasicTensor<T>& low, const BasicTensor<T>& w,
                        const BasicTensor<T>& v) {
  require_rank(skip.dims(), 3, "up_block skip");
  require_rank(low.dims(), 3, "up_block low");
  require_kernel(w.dims(), 3, 3, "up_block W");
  require_kernel(v.dims(), 2, 2, "up_block V");
  const std::size_t c = skip.dim(0);
  if (low.dim(0) != 2 * c || skip.dim(1) != 2 * low.dim(1) || skip.dim(2) != 2 * low.dim(2))
    throw std::invalid_argument("up_block: expected skip (C,2H,2W) and low (2C,H,W), got " +
                                shape_string(skip.dims()) + " and " + shape_string(low.dims()));
  if (v.dim(0) != c || v.dim(1) != 2 * c || w.dim(0) != c || w.dim(1) != 2 * c)
    throw std::invalid_argument("up_block: kernel shapes do not match C=" + std::to_string(c));
  return merge_conv(skip, tconv_mimo(low, v), w);
}

// --- dictionary ----------------------------------------------------------------

namespace {

template <typename T>
void require_code(const DictionaryParams<T>& p, const MultiscaleCode<T>& code) {
  const auto layout = code_layout(p.spec);
  if (code.parts.size() != layout.size())
    throw std::invalid_argument("dictionary: code has " + std::to_string(code.parts.size()) + " scales, expected " +
                                std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (code.parts[i].dims() != layout[i])
      throw std::invalid_argument("dictionary: scale " + std::to_string(i) + " code is " +
                                  shape_string(code.parts[i].dims()) + ", expected " + shape_string(layout[i]));
}

// Intermediates of one synthesis pass: xi[i] is the feature map after scale
// i, up[i-1] the transposed-conv output feeding scale i.
template <typename T>
struct SynthesisTrace {
  std::vector<BasicTensor<T>> xi;
  std::vector<BasicTensor<T>> up;
  BasicTensor<T> output;
};

template <typename T>
SynthesisTrace<T> synthesize(const DictionaryParams<T>& p, const MultiscaleCode<T>& code) {
  require_code(p, code);
  SynthesisTrace<T> tr;
  tr.xi.reserve(code.parts.size());
  tr.xi.push_back(p.bottom ? conv_mimo(code.parts[0], *p.bottom) : code.parts[0]);
  for (int i = 1; i <= p.spec.scales; ++i) {
    tr.up.push_back(tconv_mimo(tr.xi.back(), p.upsample[i - 1]));
    tr.xi.push_back(merge_conv(code.parts[i], tr.up.back(), p.merge[i - 1]));
  }
  tr.output = conv1x1(tr.xi.back(), p.head);
  return tr;
}

}  // namespace

template <typename T>
BasicTensor<T> dict_apply(const DictionaryParams<T>& p, const MultiscaleCode<T>& code) {
  require_code(p, code);
  BasicTensor<T> xi = p.bottom ? conv_mimo(code.parts[0], *p.bottom) : code.parts[0];
  for (int i = 1; i <= p.spec.scales; ++i)
    xi = merge_conv(code.parts[i], tconv_mimo(xi, p.upsample[i - 1]), p.merge[i - 1]);
  return conv1x1(xi, p.head);
}

template <typename T>
MultiscaleCode<T> dict_adjoint(const DictionaryParams<T>& p, const BasicTensor<T>& image) {
  require_same_shape(image.dims(), p.spec.image_shape(), "dict_adjoint");
  auto code = MultiscaleCode<T>::zeros(code_layout(p.spec));
  BasicTensor<T> g = conv1x1_adjoint(image, p.head);
  for (int i = p.spec.scales; i >= 1; --i) {
    const auto& w = p.merge[i - 1];
    const std::size_t ci = p.spec.code_channels(i);
    const std::size_t h = g.dim(1), wd = g.dim(2);
    conv3x3_adjoint_acc(g.data(), g.dim(0), h, wd, w.data(), w.dim(1), 0, ci, code.parts[i].data());
    BasicTensor<T> g_up({ci, h, wd});
    conv3x3_adjoint_acc(g.data(), g.dim(0), h, wd, w.data(), w.dim(1), ci, ci, g_up.data());
    g = tconv_mimo_adjoint(g_up, p.upsample[i - 1]);
  }
  code.parts[0] = p.bottom ? conv_mimo_adjoint(g, *p.bottom) : std::move(g);
  return code;
}

template <typename T>
DictVjp<T> dict_vjp(const DictionaryParams<T>& p, const MultiscaleCode<T>& code, const BasicTensor<T>& cotangent,
                    bool want_code_grad) {
  require_same_shape(cotangent.dims(), p.spec.image_shape(), "dict_vjp");
  auto tr = synthesize(p, code);
  DictVjp<T> out{std::move(tr.output), DictionaryParams<T>::zeros(p.spec), std::nullopt};
  if (want_code_grad) out.code_grad = MultiscaleCode<T>::zeros(code_layout(p.spec));

  const std::size_t hw_s = cotangent.dim(1) * cotangent.dim(2);
  conv1x1_kernel_grad_acc(tr.xi.back().data(), tr.xi.back().dim(0), hw_s, cotangent.data(), cotangent.dim(0),
                          out.kernel_grad.head.data());
  BasicTensor<T> g = conv1x1_adjoint(cotangent, p.head);
  for (int i = p.spec.scales; i >= 1; --i) {
    const auto& w = p.merge[i - 1];
    auto& gw = out.kernel_grad.merge[i - 1];
    const std::size_t ci = p.spec.code_channels(i);
    const std::size_t h = g.dim(1), wd = g.dim(2);
    const auto& skip = code.parts[i];
    const auto& up = tr.up[i - 1];
    conv3x3_kernel_grad_acc(skip.data(), ci, h, wd, g.data(), g.dim(0), w.dim(1), 0, gw.data());
    conv3x3_kernel_grad_acc(up.data(), ci, h, wd, g.data(), g.dim(0), w.dim(1), ci, gw.data());
    if (want_code_grad)
      conv3x3_adjoint_acc(g.data(), g.dim(0), h, wd, w.data(), w.dim(1), 0, ci, out.code_grad->parts[i].data());
    BasicTensor<T> g_up({ci, h, wd});
    conv3x3_adjoint_acc(g.data(), g.dim(0), h, wd, w.data(), w.dim(1), ci, ci, g_up.data());
    const auto& low = tr.xi[i - 1];
    tconv_kernel_grad_acc(low.data(), low.dim(0), low.dim(1), low.dim(2), g_up.data(), g_up.dim(0),
                          out.kernel_grad.upsample[i - 1].data());
    if (i > 1 || p.bottom || want_code_grad) g = tconv_mimo_adjoint(g_up, p.upsample[i - 1]);
  }
  if (p.bottom) {
    const auto& a0 = code.parts[0];
    conv3x3_kernel_grad_acc(a0.data(), a0.dim(0), a0.dim(1), a0.dim(2), g.data(), g.dim(0), p.bottom->dim(1), 0,
                            out.kernel_grad.bottom->data());
    if (want_code_grad) out.code_grad->parts[0] = conv_mimo_adjoint(g, *p.bottom);
  } else if (want_code_grad) {
    out.code_grad->parts[0] = std::move(g);
  }
  return out;
}

template <typename T>
BasicTensor<T> materialize(const DictionaryParams<T>& p, std::size_t max_code_size) {
  const std::size_t n = p.spec.code_size();
  if (n > max_code_size)
    throw std::invalid_argument("materialize: code size " + std::to_string(n) + " exceeds cap " +
                                std::to_string(max_code_size));
  const std::size_t d = p.spec.image_size();
  const auto layout = code_layout(p.spec);
  BasicTensor<T> m({d, n});
  std::vector<T> e(n, T{0});
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1;
    const auto col = dict_apply(p, unflatten(e, layout));
    e[j] = 0;
    for (std::size_t i = 0; i < d; ++i) m.at(i, j) = col[i];
  }
  return m;
}

// --- operator wrappers ---------------------------------------------------------

template <typename T>
MultiscaleDictionary<T>::MultiscaleDictionary(DictionaryParams<T> params) : params_(std::move(params)) {
  params_.validate();
}

template <typename T>
DenseDictionary<T>::DenseDictionary(BasicTensor<T> matrix) : matrix_(std::move(matrix)) {
  require_rank(matrix_.dims(), 2, "DenseDictionary");
}

template <typename T>
BasicTensor<T> DenseDictionary<T>::apply(const MultiscaleCode<T>& code) const {
  if (code.parts.size() != 1 || code.parts[0].size() != matrix_.dim(1))
    throw std::invalid_argument("DenseDictionary::apply: code does not match matrix columns");
  const std::size_t d = matrix_.dim(0), n = matrix_.dim(1);
  BasicTensor<T> out({d});
  const T* a = code.parts[0].data();
  for (std::size_t i = 0; i < d; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += matrix_.at(i, j) * a[j];
    out[i] = s;
  }
  return out;
}

template <typename T>
MultiscaleCode<T> DenseDictionary<T>::adjoint(const BasicTensor<T>& image) const {
  const std::size_t d = matrix_.dim(0), n = matrix_.dim(1);
  if (image.size() != d) throw std::invalid_argument("DenseDictionary::adjoint: image size mismatch");
  auto code = MultiscaleCode<T>::zeros(layout());
  T* a = code.parts[0].data();
  for (std::size_t i = 0; i < d; ++i) {
    const T yi = image[i];
    for (std::size_t j = 0; j < n; ++j) a[j] += matrix_.at(i, j) * yi;
  }
  return code;
}

#define MUSC_INSTANTIATE(T)                                                                                    \
  template struct MultiscaleCode<T>;                                                                           \
  template struct DictionaryParams<T>;                                                                         \
  template class MultiscaleDictionary<T>;                                                                      \
  template class DenseDictionary<T>;                                                                           \
  template double dot(const MultiscaleCode<T>&, const MultiscaleCode<T>&);                                     \
  template double squared_norm(const MultiscaleCode<T>&);                                                      \
  template double max_abs_diff(const MultiscaleCode<T>&, const MultiscaleCode<T>&);                            \
  template std::vector<T> flatten(const MultiscaleCode<T>&);                                                   \
  template MultiscaleCode<T> unflatten(const std::vector<T>&, const CodeLayout&);                              \
  template BasicTensor<T> conv_siso(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> tconv_siso(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> tconv_siso_direct(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> conv_mimo(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> conv_mimo_adjoint(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> conv_mimo_kernel_grad(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> tconv_mimo(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> tconv_mimo_adjoint(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> tconv_mimo_kernel_grad(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> conv1x1(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> conv1x1_adjoint(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> conv1x1_kernel_grad(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> up_block(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,        \
                                   const BasicTensor<T>&);                                                     \
  template BasicTensor<T> dict_apply(const DictionaryParams<T>&, const MultiscaleCode<T>&);                    \
  template MultiscaleCode<T> dict_adjoint(const DictionaryParams<T>&, const BasicTensor<T>&);                  \
  template DictVjp<T> dict_vjp(const DictionaryParams<T>&, const MultiscaleCode<T>&, const BasicTensor<T>&,    \
                               bool);                                                                          \
  template BasicTensor<T> materialize(const DictionaryParams<T>&, std::size_t);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

}  // namespace musc
