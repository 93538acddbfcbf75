#include <cmath>

#include "doctest.h"
#include "loop_oracles.hpp"
#include "musc/linops.hpp"
#include "musc/rng.hpp"
#include "musc/train.hpp"

using namespace musc;
namespace ol = oracle_loops;

namespace {

ScaleSpec spec_of(int scales, int channels, int h, int w, bool bottom = true, int out = 1) {
  ScaleSpec s;
  s.scales = scales;
  s.channels = channels;
  s.height = h;
  s.width = w;
  s.bottom_conv = bottom;
  s.out_channels = out;
  return s;
}

template <typename T>
MultiscaleCode<T> random_code(const ScaleSpec& spec, Rng& rng) {
  auto c = MultiscaleCode<T>::zeros(code_layout(spec));
  for (auto& p : c.parts) p = rng.normal_tensor<T>(p.dims());
  return c;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

}  // namespace

TEST_CASE("conv_siso: identity, zero and loop oracle") {
  Rng rng(10);
  const auto x = rng.normal_tensor<float>({5, 7});
  auto delta = Tensor::zeros({3, 3});
  delta.at(1, 1) = 1;
  CHECK(conv_siso(x, delta) == x);
  CHECK(conv_siso(x, Tensor::zeros({3, 3})) == Tensor::zeros({5, 7}));
  CHECK_THROWS_AS(conv_siso(x, Tensor::zeros({2, 2})), std::invalid_argument);

  for (int t = 0; t < 10; ++t) {
    const auto xi = rng.normal_tensor<float>({5, 7});
    const auto w = rng.normal_tensor<float>({3, 3});
    CHECK(ol::max_abs_diff(conv_siso(xi, w), ol::conv2d(xi.cast<double>(), w.cast<double>())) <= 1e-5);
  }
}

TEST_CASE("conv_siso: shifted delta moves the image") {
  // w[0,1] picks x[i-1, j]: the output is the input shifted down by one row.
  const auto x = Tensor::from_rows({{1, 2}, {3, 4}});
  auto w = Tensor::zeros({3, 3});
  w.at(0, 1) = 1;
  CHECK(conv_siso(x, w) == Tensor::from_rows({{0, 0}, {1, 2}}));
}

TEST_CASE("tconv_siso: worked examples") {
  const auto xi = Tensor::from_rows({{1, 2}, {3, 4}});
  const auto nails = tconv_siso(xi, Tensor::from_rows({{0, 0}, {0, 1}}));
  CHECK(nails == Tensor::from_rows({{1, 0, 2, 0}, {0, 0, 0, 0}, {3, 0, 4, 0}, {0, 0, 0, 0}}));
  const auto ones = tconv_siso(xi, Tensor::from_rows({{1, 1}, {1, 1}}));
  CHECK(ones == Tensor::from_rows({{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}}));
  CHECK(tconv_siso_direct(xi, Tensor::from_rows({{0, 0}, {0, 1}})) == nails);
  CHECK(tconv_siso_direct(xi, Tensor::from_rows({{1, 1}, {1, 1}})) == ones);
}

TEST_CASE("tconv_siso: direct form equals Kronecker form") {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(7);
    const auto x = rng.uniform_tensor<float>({n, n}, -1, 1);
    const auto v = rng.normal_tensor<float>({2, 2});
    CHECK(max_abs_diff(tconv_siso(x, v), tconv_siso_direct(x, v)) <= 1e-6);
    CHECK(ol::max_abs_diff(tconv_siso(x, v), ol::tconv2d(x.cast<double>(), v.cast<double>())) <= 1e-6);
  }
  // Non-square inputs are fine as well.
  const auto x = rng.normal_tensor<float>({3, 5});
  const auto v = rng.normal_tensor<float>({2, 2});
  CHECK(max_abs_diff(tconv_siso(x, v), tconv_siso_direct(x, v)) <= 1e-6);
}

TEST_CASE("MIMO operators against loop oracles") {
  Rng rng(12);
  for (int t = 0; t < 5; ++t) {
    const std::size_t c = 1 + rng.below(4), m = 1 + rng.below(4), h = 1 + rng.below(6), w = 1 + rng.below(6);
    const auto x = rng.normal_tensor<float>({c, h, w});
    const auto k3 = rng.normal_tensor<float>({m, c, 3, 3});
    const auto k2 = rng.normal_tensor<float>({m, c, 2, 2});
    const auto k1 = rng.normal_tensor<float>({m, c, 1, 1});
    CHECK(ol::max_abs_diff(conv_mimo(x, k3), ol::conv_mimo(x.cast<double>(), k3.cast<double>())) <= 1e-5);
    CHECK(ol::max_abs_diff(tconv_mimo(x, k2), ol::tconv_mimo(x.cast<double>(), k2.cast<double>())) <= 1e-5);
    CHECK(ol::max_abs_diff(conv1x1(x, k1), ol::conv1x1(x.cast<double>(), k1.cast<double>())) <= 1e-5);
  }
}

TEST_CASE("MIMO operators: special kernels") {
  Rng rng(13);
  const auto x = rng.normal_tensor<float>({2, 4, 5});
  auto deltas = Tensor::zeros({1, 2, 3, 3});
  deltas.at(0, 0, 1, 1) = 1;
  deltas.at(0, 1, 1, 1) = 1;
  const auto sum = conv_mimo(x, deltas);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(sum.at(0, i, j) == doctest::Approx(x.at(0, i, j) + x.at(1, i, j)));
  CHECK(conv_mimo(x, Tensor::zeros({3, 2, 3, 3})) == Tensor::zeros({3, 4, 5}));
  CHECK(tconv_mimo(x, Tensor::zeros({3, 2, 2, 2})) == Tensor::zeros({3, 8, 10}));

  const auto x1 = rng.normal_tensor<float>({1, 3, 3});
  const auto v = rng.normal_tensor<float>({2, 2});
  CHECK(tconv_mimo(x1, v.reshaped({1, 1, 2, 2})).reshaped({6, 6}) == tconv_siso(x1.reshaped({3, 3}), v));

  CHECK_THROWS_AS(conv_mimo(x, Tensor::zeros({1, 3, 3, 3})), std::invalid_argument);
  CHECK_THROWS_AS(tconv_mimo(x, Tensor::zeros({1, 3, 2, 2})), std::invalid_argument);
}

TEST_CASE("single operators: adjoint identities and kernel gradients") {
  Rng rng(14);
  const auto x = rng.normal_tensor<double>({3, 5, 4});
  const auto k3 = rng.normal_tensor<double>({2, 3, 3, 3});
  const auto k2 = rng.normal_tensor<double>({2, 3, 2, 2});
  const auto k1 = rng.normal_tensor<double>({2, 3, 1, 1});

  const auto g3 = rng.normal_tensor<double>({2, 5, 4});
  CHECK(rel_err(dot(conv_mimo(x, k3), g3), dot(x, conv_mimo_adjoint(g3, k3))) <= 1e-12);
  // <g, conv(x, k)> is linear in k, so its gradient satisfies <grad, k> = <g, conv(x, k)>.
  CHECK(rel_err(dot(conv_mimo_kernel_grad(x, g3), k3), dot(g3, conv_mimo(x, k3))) <= 1e-12);

  const auto g2 = rng.normal_tensor<double>({2, 10, 8});
  CHECK(rel_err(dot(tconv_mimo(x, k2), g2), dot(x, tconv_mimo_adjoint(g2, k2))) <= 1e-12);
  CHECK(rel_err(dot(tconv_mimo_kernel_grad(x, g2), k2), dot(g2, tconv_mimo(x, k2))) <= 1e-12);

  const auto g1 = rng.normal_tensor<double>({2, 5, 4});
  CHECK(rel_err(dot(conv1x1(x, k1), g1), dot(x, conv1x1_adjoint(g1, k1))) <= 1e-12);
  CHECK(rel_err(dot(conv1x1_kernel_grad(x, g1), k1), dot(g1, conv1x1(x, k1))) <= 1e-12);

  // Kernel gradients entry by entry against the loop oracle (the map is linear in k).
  auto e = TensorD::zeros(k3.dims());
  const auto grad = conv_mimo_kernel_grad(x, g3);
  for (std::size_t i = 0; i < e.size(); ++i) {
    e.fill(0);
    e[i] = 1;
    CHECK(grad[i] == doctest::Approx(dot(g3, ol::conv_mimo(x, e))).epsilon(1e-12));
  }
}

TEST_CASE("conv kernels on odd and tiny planes") {
  // The padded-plane implementation must handle 1xN and Nx1 planes.
  Rng rng(15);
  for (const auto& hw : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {1, 6}, {6, 1}, {2, 3}, {7, 9}}) {
    const auto x = rng.normal_tensor<double>({2, hw.first, hw.second});
    const auto k = rng.normal_tensor<double>({3, 2, 3, 3});
    const auto g = rng.normal_tensor<double>({3, hw.first, hw.second});
    CHECK(ol::max_abs_diff(conv_mimo(x, k), ol::conv_mimo(x, k)) <= 1e-12);
    CHECK(rel_err(dot(conv_mimo(x, k), g), dot(x, conv_mimo_adjoint(g, k))) <= 1e-12);
    CHECK(rel_err(dot(conv_mimo_kernel_grad(x, g), k), dot(g, conv_mimo(x, k))) <= 1e-12);
  }
}

TEST_CASE("up_block") {
  Rng rng(16);
  const auto beta = rng.normal_tensor<float>({4, 16, 16});
  const auto low = rng.normal_tensor<float>({8, 8, 8});
  const auto w = rng.normal_tensor<float>({4, 8, 3, 3});
  const auto v = rng.normal_tensor<float>({4, 8, 2, 2});
  const auto out = up_block(beta, low, w, v);
  CHECK(out.dims() == Shape{4, 16, 16});

  const auto ref = ol::conv_mimo(ol::concat(beta.cast<double>(), ol::tconv_mimo(low.cast<double>(), v.cast<double>())),
                                 w.cast<double>());
  CHECK(ol::max_abs_diff(out, ref) <= 1e-4);

  // Deltas on the skip channels make the block a projection onto beta.
  auto pick = Tensor::zeros({4, 8, 3, 3});
  for (std::size_t c = 0; c < 4; ++c) pick.at(c, c, 1, 1) = 1;
  CHECK(up_block(beta, low, pick, v) == beta);

  CHECK_THROWS_AS(up_block(beta, rng.normal_tensor<float>({8, 4, 4}), w, v), std::invalid_argument);
}

TEST_CASE("ScaleSpec schedule") {
  const auto s = spec_of(4, 512, 2, 3);
  CHECK_NOTHROW(s.validate());
  const auto layout = code_layout(s);
  REQUIRE(layout.size() == 5);
  CHECK(layout[0] == Shape{512, 2, 3});
  CHECK(layout[4] == Shape{32, 32, 48});
  CHECK(s.image_shape() == Shape{1, 32, 48});
  std::size_t n = 0;
  for (int i = 0; i <= 4; ++i) n += (512u >> i) * (2u << i) * (3u << i) / 1;
  CHECK(s.code_size() == n);

  CHECK_THROWS_AS(spec_of(3, 4, 2, 2).validate(), std::invalid_argument);  // C not divisible by 2^S
  CHECK_THROWS_AS(spec_of(1, 2, 0, 2).validate(), std::invalid_argument);

  // Overcompleteness holds for every valid schedule with S >= 1.
  for (int sc = 1; sc <= 4; ++sc)
    for (int c : {16, 32, 64})
      for (int out : {1, 3}) {
        const auto t = spec_of(sc, c, 2, 2, true, out);
        if (c >> sc < out) continue;
        CHECK(t.code_size() > t.image_size());
      }
}

TEST_CASE("kernel shapes follow the per-scale channel flow") {
  // Four Up-blocks at 512 channels: 512->512, 512->256, 256->128, 128->64, 64->32, then 32->1.
  const auto shapes = kernel_shapes(spec_of(4, 512, 1, 1));
  std::map<std::string, Shape> m(shapes.begin(), shapes.end());
  CHECK(m.at("bottom") == Shape{512, 512, 3, 3});
  CHECK(m.at("up1") == Shape{256, 512, 2, 2});
  CHECK(m.at("merge1") == Shape{256, 512, 3, 3});
  CHECK(m.at("up2") == Shape{128, 256, 2, 2});
  CHECK(m.at("merge2") == Shape{128, 256, 3, 3});
  CHECK(m.at("up3") == Shape{64, 128, 2, 2});
  CHECK(m.at("merge3") == Shape{64, 128, 3, 3});
  CHECK(m.at("up4") == Shape{32, 64, 2, 2});
  CHECK(m.at("merge4") == Shape{32, 64, 3, 3});
  CHECK(m.at("head") == Shape{1, 32, 1, 1});
  CHECK(m.size() == 10);
  CHECK(kernel_shapes(spec_of(4, 512, 1, 1, false)).size() == 9);
}

TEST_CASE("dict_apply: full-size shape contract") {
  // Zero dictionary on the full four-scale schedule; only the shapes matter.
  const auto s = spec_of(4, 512, 1, 1);
  const auto p = DictionaryParams<float>::zeros(s);
  const auto a = MultiscaleCode<float>::zeros(code_layout(s));
  CHECK(a.parts[0].dims() == Shape{512, 1, 1});
  CHECK(a.parts[4].dims() == Shape{32, 16, 16});
  CHECK(dict_apply(p, a).dims() == Shape{1, 16, 16});
}

TEST_CASE("dict_apply and dict_adjoint against the compositional oracle") {
  Rng rng(17);
  for (const auto& s : {spec_of(1, 2, 2, 2), spec_of(2, 8, 3, 2), spec_of(2, 8, 2, 2, false), spec_of(1, 4, 2, 2, true, 2)}) {
    const auto p = random_dictionary<double>(s, 3);
    const auto a = random_code<double>(s, rng);
    CHECK(ol::max_abs_diff(dict_apply(p, a), ol::dict_apply(p, a)) <= 1e-12);
    CHECK(dict_apply(p, MultiscaleCode<double>::zeros(code_layout(s))) == TensorD::zeros(s.image_shape()));
    const auto y = rng.normal_tensor<double>(s.image_shape());
    CHECK(rel_err(dot(dict_apply(p, a), y), dot(a, dict_adjoint(p, y))) <= 1e-12);
    const auto zero = dict_adjoint(p, TensorD::zeros(s.image_shape()));
    CHECK(squared_norm(zero) == 0.0);
  }
}

TEST_CASE("dictionary is linear") {
  Rng rng(18);
  const auto s = spec_of(2, 8, 4, 4);
  const auto p = random_dictionary<float>(s, 5);
  for (int t = 0; t < 10; ++t) {
    const auto a = random_code<float>(s, rng);
    const auto b = random_code<float>(s, rng);
    const float ca = static_cast<float>(rng.normal()), cb = static_cast<float>(rng.normal());
    auto mix = a;
    mix *= ca;
    mix.axpy(cb, b);
    auto ref = dict_apply(p, a);
    ref *= ca;
    ref.axpy(cb, dict_apply(p, b));
    CHECK(std::sqrt(squared_norm(dict_apply(p, mix) - ref) / squared_norm(ref)) <= 1e-5);
  }
}

TEST_CASE("adjoint identity on three schedules") {
  Rng rng(19);
  for (const auto& s : {spec_of(1, 8, 8, 8), spec_of(2, 16, 8, 8), spec_of(3, 16, 4, 4)}) {
    const auto p = random_dictionary<double>(s, 6);
    for (int t = 0; t < 100; ++t) {
      const auto a = random_code<double>(s, rng);
      const auto y = rng.normal_tensor<double>(s.image_shape());
      CHECK(rel_err(dot(dict_apply(p, a), y), dot(a, dict_adjoint(p, y))) <= 1e-5);
    }
  }
}

TEST_CASE("dict_vjp matches apply, adjoint and kernel linearity") {
  Rng rng(20);
  const auto s = spec_of(2, 4, 2, 3);
  const auto p = random_dictionary<double>(s, 7);
  const auto a = random_code<double>(s, rng);
  const auto g = rng.normal_tensor<double>(s.image_shape());
  const auto v = dict_vjp(p, a, g, true);
  CHECK(v.output == dict_apply(p, a));
  REQUIRE(v.code_grad);
  CHECK(max_abs_diff(*v.code_grad, dict_adjoint(p, g)) <= 1e-12);
  CHECK_FALSE(dict_vjp(p, a, g, false).code_grad.has_value());

  // Each kernel enters linearly: perturbing one kernel by e changes <g, D a> by
  // <grad, e> up to second-order terms, exactly here since D a is affine in each kernel.
  auto q = p;
  const auto named = v.kernel_grad.named_kernels();
  auto qk = q.named_kernels();
  for (std::size_t k = 0; k < named.size(); ++k) {
    const auto e = rng.normal_tensor<double>(qk[k].second->dims());
    const auto keep = *qk[k].second;
    *qk[k].second = keep + e;
    const double delta = dot(g, dict_apply(q, a)) - dot(g, dict_apply(p, a));
    *qk[k].second = keep;
    CHECK(delta == doctest::Approx(dot(*named[k].second, e)).epsilon(1e-9));
  }
}

TEST_CASE("materialize") {
  const auto s = spec_of(1, 2, 2, 2);
  CHECK(materialize(DictionaryParams<double>::zeros(s)) == TensorD::zeros({16, 24}));

  const auto p = random_dictionary<double>(s, 8);
  const auto m = materialize(p);
  REQUIRE(m.dims() == Shape{16, 24});
  Rng rng(21);
  const auto a = random_code<double>(s, rng);
  const auto flat = flatten(a);
  const auto out = dict_apply(p, a);
  for (std::size_t i = 0; i < 16; ++i) {
    double r = 0;
    for (std::size_t j = 0; j < 24; ++j) r += m.at(i, j) * flat[j];
    CHECK(out[i] == doctest::Approx(r).epsilon(1e-12));
  }
  const auto y = rng.normal_tensor<double>(s.image_shape());
  const auto back = flatten(dict_adjoint(p, y));
  for (std::size_t j = 0; j < 24; ++j) {
    double r = 0;
    for (std::size_t i = 0; i < 16; ++i) r += m.at(i, j) * y[i];
    CHECK(back[j] == doctest::Approx(r).epsilon(1e-12));
  }
  CHECK_THROWS_AS(materialize(p, 10), std::invalid_argument);
}

TEST_CASE("flatten and unflatten are inverse") {
  Rng rng(22);
  const auto s = spec_of(2, 4, 2, 2);
  const auto a = random_code<float>(s, rng);
  CHECK(unflatten(flatten(a), code_layout(s)) == a);
  CHECK_THROWS(unflatten(std::vector<float>(3), code_layout(s)));
}

TEST_CASE("dictionary rejects mismatched codes and images") {
  const auto s = spec_of(1, 2, 2, 2);
  const auto p = random_dictionary<float>(s, 9);
  CHECK_THROWS_AS(dict_apply(p, MultiscaleCode<float>::zeros(code_layout(spec_of(1, 2, 3, 3)))), std::invalid_argument);
  CHECK_THROWS_AS(dict_adjoint(p, Tensor::zeros({1, 3, 3})), std::invalid_argument);
}
