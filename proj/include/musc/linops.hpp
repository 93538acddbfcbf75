#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "musc/tensor.hpp"

namespace musc {

/// Shape schedule of a multiscale dictionary with `scales` Up-blocks.
///
/// Scale 0 is the coarsest code: `channels` x `height` x `width`. Scale i has
/// channels / 2^i channels and 2^i times the spatial size; the synthesized
/// image has `out_channels` channels at the scale-`scales` resolution.
struct ScaleSpec {
  int scales = 2;
  int channels = 16;
  int height = 8;
  int width = 8;
  int out_channels = 1;
  /// 3x3 C->C convolution on the coarsest code before the first Up-block.
  bool bottom_conv = true;

  /// Throws std::invalid_argument on a degenerate schedule.
  void validate() const;

  std::size_t code_channels(int scale) const { return static_cast<std::size_t>(channels) >> scale; }
  std::size_t code_height(int scale) const { return static_cast<std::size_t>(height) << scale; }
  std::size_t code_width(int scale) const { return static_cast<std::size_t>(width) << scale; }
  Shape code_shape(int scale) const { return {code_channels(scale), code_height(scale), code_width(scale)}; }
  Shape image_shape() const {
    return {static_cast<std::size_t>(out_channels), code_height(scales), code_width(scales)};
  }
  /// Total code dimension N.
  std::size_t code_size() const;
  /// Image dimension d.
  std::size_t image_size() const { return shape_product(image_shape()); }

  friend bool operator==(const ScaleSpec&, const ScaleSpec&) = default;
};

using CodeLayout = std::vector<Shape>;

CodeLayout code_layout(const ScaleSpec& spec);

/// One tensor per scale, coarsest first.
template <typename T>
struct MultiscaleCode {
  std::vector<BasicTensor<T>> parts;

  static MultiscaleCode zeros(const CodeLayout& layout);
  CodeLayout layout() const;
  std::size_t size() const;

  MultiscaleCode& operator+=(const MultiscaleCode& other);
  MultiscaleCode& operator-=(const MultiscaleCode& other);
  MultiscaleCode& operator*=(T s);
  MultiscaleCode& axpy(T s, const MultiscaleCode& x);

  friend bool operator==(const MultiscaleCode&, const MultiscaleCode&) = default;
};

template <typename T>
double dot(const MultiscaleCode<T>& a, const MultiscaleCode<T>& b);
template <typename T>
double squared_norm(const MultiscaleCode<T>& a);
template <typename T>
double max_abs_diff(const MultiscaleCode<T>& a, const MultiscaleCode<T>& b);
template <typename T>
std::vector<T> flatten(const MultiscaleCode<T>& code);
template <typename T>
MultiscaleCode<T> unflatten(const std::vector<T>& flat, const CodeLayout& layout);

/// Kernels of one synthesis operator. Kernel tensors are (out, in, kh, kw).
template <typename T>
struct DictionaryParams {
  ScaleSpec spec;
  std::optional<BasicTensor<T>> bottom;  // C x C x 3 x 3
  std::vector<BasicTensor<T>> upsample;  // scale i: C_i x C_{i-1} x 2 x 2
  std::vector<BasicTensor<T>> merge;     // scale i: C_i x 2C_i x 3 x 3
  BasicTensor<T> head;                   // C_out x C_S x 1 x 1

  static DictionaryParams zeros(const ScaleSpec& spec);
  void validate() const;

  /// Stable (name, kernel) enumeration: bottom, up1, merge1, ..., head.
  std::vector<std::pair<std::string, BasicTensor<T>*>> named_kernels();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> named_kernels() const;

  friend bool operator==(const DictionaryParams&, const DictionaryParams&) = default;
};

std::vector<std::pair<std::string, Shape>> kernel_shapes(const ScaleSpec& spec);

// Single-channel operators (rank-2 in and out).

/// 3x3 zero-padded correlation, out[i,j] = sum_{p,q} x[i+p, j+q] w[p,q].
template <typename T>
BasicTensor<T> conv_siso(const BasicTensor<T>& x, const BasicTensor<T>& w);
/// Transposed convolution in Kronecker form: x (x) flip(v).
template <typename T>
BasicTensor<T> tconv_siso(const BasicTensor<T>& x, const BasicTensor<T>& v);
/// Bed-of-nails upsampling followed by a 2x2 correlation (zero padded past
/// the bottom/right edge). Reference path; equals tconv_siso.
template <typename T>
BasicTensor<T> tconv_siso_direct(const BasicTensor<T>& x, const BasicTensor<T>& v);

// Multi-channel operators. x is C x H x W.

template <typename T>
BasicTensor<T> conv_mimo(const BasicTensor<T>& x, const BasicTensor<T>& w);
template <typename T>
BasicTensor<T> conv_mimo_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& w);
/// d<g, conv_mimo(x, w)>/dw
template <typename T>
BasicTensor<T> conv_mimo_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g);

template <typename T>
BasicTensor<T> tconv_mimo(const BasicTensor<T>& x, const BasicTensor<T>& v);
template <typename T>
BasicTensor<T> tconv_mimo_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& v);
template <typename T>
BasicTensor<T> tconv_mimo_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g);

template <typename T>
BasicTensor<T> conv1x1(const BasicTensor<T>& x, const BasicTensor<T>& k);
template <typename T>
BasicTensor<T> conv1x1_adjoint(const BasicTensor<T>& g, const BasicTensor<T>& k);
template <typename T>
BasicTensor<T> conv1x1_kernel_grad(const BasicTensor<T>& x, const BasicTensor<T>& g);

/// conv_mimo([skip ; tconv_mimo(low, v)], w), skip channels first.
template <typename T>
BasicTensor<T> up_block(const BasicTensor<T>& skip, const BasicTensor<T>& low, const BasicTensor<T>& w,
                        const BasicTensor<T>& v);

// The composed dictionary.

template <typename T>
BasicTensor<T> dict_apply(const DictionaryParams<T>& p, const MultiscaleCode<T>& code);
template <typename T>
MultiscaleCode<T> dict_adjoint(const DictionaryParams<T>& p, const BasicTensor<T>& image);

/// Vector-Jacobian product of (p, code) -> dict_apply(p, code) against `cotangent`.
template <typename T>
struct DictVjp {
  BasicTensor<T> output;             // dict_apply(p, code)
  DictionaryParams<T> kernel_grad;   // d<cotangent, output>/dp
  std::optional<MultiscaleCode<T>> code_grad;  // dict_adjoint(p, cotangent)
};

template <typename T>
DictVjp<T> dict_vjp(const DictionaryParams<T>& p, const MultiscaleCode<T>& code, const BasicTensor<T>& cotangent,
                    bool want_code_grad);

/// Dense d x N matrix whose column j is dict_apply of the j-th indicator code.
template <typename T>
BasicTensor<T> materialize(const DictionaryParams<T>& p, std::size_t max_code_size = 4096);

/// Linear synthesis operator seen by the sparse coding solvers.
template <typename T>
class SynthesisOperator {
 public:
  virtual ~SynthesisOperator() = default;
  virtual BasicTensor<T> apply(const MultiscaleCode<T>& code) const = 0;
  virtual MultiscaleCode<T> adjoint(const BasicTensor<T>& image) const = 0;
  virtual CodeLayout layout() const = 0;
  virtual Shape image_shape() const = 0;
};

template <typename T>
class MultiscaleDictionary final : public SynthesisOperator<T> {
 public:
  explicit MultiscaleDictionary(DictionaryParams<T> params);
  BasicTensor<T> apply(const MultiscaleCode<T>& code) const override { return dict_apply(params_, code); }
  MultiscaleCode<T> adjoint(const BasicTensor<T>& image) const override { return dict_adjoint(params_, image); }
  CodeLayout layout() const override { return code_layout(params_.spec); }
  Shape image_shape() const override { return params_.spec.image_shape(); }
  const DictionaryParams<T>& params() const { return params_; }

 private:
  DictionaryParams<T> params_;
};

/// Explicit d x N matrix. Codes are a single part of shape (N, 1, 1), so
/// per-channel thresholds become per-entry; images are rank-1 of length d.
template <typename T>
class DenseDictionary final : public SynthesisOperator<T> {
 public:
  explicit DenseDictionary(BasicTensor<T> matrix);
  BasicTensor<T> apply(const MultiscaleCode<T>& code) const override;
  MultiscaleCode<T> adjoint(const BasicTensor<T>& image) const override;
  CodeLayout layout() const override { return {{matrix_.dim(1), 1, 1}}; }
  Shape image_shape() const override { return {matrix_.dim(0)}; }
  const BasicTensor<T>& matrix() const { return matrix_; }

 private:
  BasicTensor<T> matrix_;
};

}  // namespace musc
