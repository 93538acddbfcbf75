#include <cmath>

#include "doctest.h"
#include "musc/oracles.hpp"
#include "musc/rng.hpp"
#include "musc/sparse_coding.hpp"
#include "musc/train.hpp"

using namespace musc;

namespace {

DenseDictionary<double> scalar_dict(double e) { return DenseDictionary<double>(TensorD({1, 1}, std::vector<double>{e})); }

MultiscaleCode<double> scalar_code(double v) {
  MultiscaleCode<double> c;
  c.parts.push_back(TensorD({1, 1, 1}, std::vector<double>{v}));
  return c;
}

TensorD vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return TensorD({n}, std::move(v));
}

std::vector<double> as_vector(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

// Unit-norm columns, signal of unit expected norm.
std::pair<TensorD, TensorD> surrogate(Rng& rng, std::size_t d, std::size_t n) {
  auto m = rng.normal_tensor<double>({d, n});
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += m.at(i, j) * m.at(i, j);
    for (std::size_t i = 0; i < d; ++i) m.at(i, j) /= std::sqrt(s);
  }
  return {m, rng.normal_tensor<double>({d}, 1.0 / std::sqrt(static_cast<double>(d)))};
}

ScaleSpec tiny_spec(int scales, int channels, int size, bool bottom = true) {
  ScaleSpec s;
  s.scales = scales;
  s.channels = channels;
  s.height = size;
  s.width = size;
  s.bottom_conv = bottom;
  return s;
}

}  // namespace

TEST_CASE("shrink step on a scalar problem") {
  const auto e = scalar_dict(1.0);
  const auto zero = scalar_code(0.0);
  const ChannelWeights<double> lam{{0.3}};
  CHECK(shrink_step(zero, vec({1.0}), e, e, lam, 1.0).parts[0][0] == doctest::Approx(0.7));
  CHECK(shrink_step(zero, vec({-1.0}), e, e, lam, 1.0, {ShrinkMode::nonneg}).parts[0][0] == 0.0);
  CHECK(shrink_step(zero, vec({-1.0}), e, e, lam, 1.0, {ShrinkMode::signed_soft}).parts[0][0] == doctest::Approx(-0.7));
}

TEST_CASE("shrink step preconditions") {
  const auto e = scalar_dict(1.0);
  const auto zero = scalar_code(0.0);
  CHECK_THROWS_AS(shrink_step(zero, vec({1.0}), e, e, {{0.3}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(shrink_step(zero, vec({1.0}), e, e, {{0.3}}, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(shrink_step(zero, vec({1.0}), e, e, {{0.0}}, 1.0), std::invalid_argument);
  CHECK_NOTHROW(shrink_step(zero, vec({1.0}), e, e, {{0.0}}, 1.0, {ShrinkMode::signed_soft, true}));
  CHECK_THROWS_AS(shrink_step(zero, vec({1.0}), e, e, {{0.3, 0.3}}, 1.0), std::invalid_argument);
  CHECK(parse_shrink_mode("signed") == ShrinkMode::signed_soft);
  CHECK(parse_shrink_mode(to_string(ShrinkMode::nonneg)) == ShrinkMode::nonneg);
  CHECK_THROWS(parse_shrink_mode("relu"));
}

TEST_CASE("ista_k composition") {
  Rng rng(30);
  const auto [m, z] = surrogate(rng, 6, 10);
  const DenseDictionary<double> e(m);
  const auto lam = uniform_weights(e.layout(), 0.05);
  const double eta = 1.0 / oracle::gram_lambda_max(m);
  CHECK(squared_norm(ista_k(z, e, lam, eta, 0)) == 0.0);
  const auto zero = MultiscaleCode<double>::zeros(e.layout());
  CHECK(ista_k(z, e, lam, eta, 1) == shrink_step(zero, z, e, e, lam, eta));
  CHECK(ista_k(z, e, lam, eta, 3) ==
        shrink_step(shrink_step(shrink_step(zero, z, e, e, lam, eta), z, e, e, lam, eta), z, e, e, lam, eta));
  CHECK_THROWS_AS(ista_k(z, e, lam, eta, -1), std::invalid_argument);
}

TEST_CASE("lista_k reduces to ista_k and follows per-step thresholds") {
  Rng rng(31);
  const auto [m, z] = surrogate(rng, 6, 10);
  const DenseDictionary<double> e(m);
  const auto lam = uniform_weights(e.layout(), 0.05);
  const double eta = 1.0 / oracle::gram_lambda_max(m);
  CHECK(lista_k(z, e, e, Thresholds<double>(4, lam), eta) == ista_k(z, e, lam, eta, 4));
  CHECK_THROWS_AS(lista_k(z, e, e, Thresholds<double>{}, eta), std::invalid_argument);

  // E = [1], eta = 0.5, z = 1, thresholds 0.2 then 0.4:
  //   step 1: u = 0.5,                 a = 0.5 - 0.5 * 0.2 = 0.4
  //   step 2: u = 0.4 + 0.5 * 0.6 = 0.7, a = 0.7 - 0.5 * 0.4 = 0.5
  const auto one = scalar_dict(1.0);
  const Thresholds<double> steps{{{0.2}}, {{0.4}}};
  CHECK(lista_k(vec({1.0}), one, one, steps, 0.5).parts[0][0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("nonneg mode yields nonnegative codes") {
  Rng rng(32);
  const auto spec = tiny_spec(2, 8, 2);
  const auto p = random_dictionary<float>(spec, 1);
  const auto q = random_dictionary<float>(spec, 2);
  const MultiscaleDictionary<float> e(p), et(q);
  const auto lam = uniform_weights<float>(e.layout(), 0.01f);
  for (int t = 0; t < 10; ++t) {
    const auto z = rng.normal_tensor<float>(spec.image_shape());
    const auto a = lista_k(z, e, et, Thresholds<float>(3, lam), 0.3f);
    for (const auto& part : a.parts)
      for (float v : part.values()) CHECK(v >= 0.0f);
  }
}

TEST_CASE("lasso objective") {
  Rng rng(33);
  const auto [m, z] = surrogate(rng, 5, 9);
  const DenseDictionary<double> e(m);
  const auto lam = uniform_weights(e.layout(), 0.2);
  CHECK(lasso_objective(MultiscaleCode<double>::zeros(e.layout()), z, e, lam) ==
        doctest::Approx(0.5 * squared_norm(z)).epsilon(1e-15));
  // 0.5 (3 - 2 * 1)^2 + 0.5 * |1| = 1
  CHECK(lasso_objective(scalar_code(1.0), vec({3.0}), scalar_dict(2.0), {{0.5}}) == doctest::Approx(1.0));
  const auto a = rng.normal_tensor<double>({9, 1, 1});
  MultiscaleCode<double> code{{a}};
  CHECK(lasso_objective(code, z, e, lam) == doctest::Approx(oracle::lasso_value(m, as_vector(z), {0.2}, as_vector(a))));
}

TEST_CASE("coordinate descent oracle sanity") {
  Rng rng(34);
  const auto [m, z] = surrogate(rng, 6, 12);
  for (auto mode : {ShrinkMode::nonneg, ShrinkMode::signed_soft}) {
    const auto r = oracle::lasso_cd(m, as_vector(z), {1e6}, mode);
    for (double v : r.code) CHECK(v == 0.0);
  }
  const auto sq = rng.normal_tensor<double>({5, 5});
  const auto y = as_vector(rng.normal_tensor<double>({5}));
  const auto cd = oracle::lasso_cd(sq, y, {0.0}, ShrinkMode::signed_soft, 1e-30, 5'000'000);
  const auto ref = oracle::linear_solve(sq, y);
  for (std::size_t i = 0; i < 5; ++i) CHECK(cd.code[i] == doctest::Approx(ref[i]).epsilon(1e-8).scale(1.0));
  CHECK_THROWS(oracle::lasso_cd(TensorD::zeros({65, 4}), std::vector<double>(65), {0.1}, ShrinkMode::nonneg));
}

TEST_CASE("ISTA reaches the coordinate-descent objective on the 8x16 surrogate") {
  Rng rng(41);
  auto m = rng.normal_tensor<double>({8, 16});
  for (std::size_t j = 0; j < 16; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < 8; ++i) n += m.at(i, j) * m.at(i, j);
    for (std::size_t i = 0; i < 8; ++i) m.at(i, j) /= std::sqrt(n);
  }
  const auto z = rng.normal_tensor<double>({8}, 1.0 / std::sqrt(8.0));
  const DenseDictionary<double> e(m);
  const double eta = 1.0 / oracle::gram_lambda_max(m, 2000, 2);
  const auto lam = uniform_weights(e.layout(), 0.1);
  for (auto mode : {ShrinkMode::nonneg, ShrinkMode::signed_soft}) {
    const auto a = ista_k(z, e, lam, eta, 1000, {mode, false});
    const auto ref = oracle::lasso_cd(m, as_vector(z), {0.1}, mode);
    CHECK(std::abs(lasso_objective(a, z, e, lam) - ref.objective) <= 1e-6);
  }
}

TEST_CASE("ISTA converges to the oracle objective on random instances") {
  // Slowly converging instances need far more than 1000 steps; 50000 covers all of these.
  for (std::uint64_t i = 0; i < 10; ++i) {
    Rng rng = Rng(35).fork(i);
    const auto [m, z] = surrogate(rng, 8, 16);
    const DenseDictionary<double> e(m);
    const double eta = 1.0 / oracle::gram_lambda_max(m, 2000, 2);
    const auto lam = uniform_weights(e.layout(), 0.1);
    for (auto mode : {ShrinkMode::nonneg, ShrinkMode::signed_soft}) {
      const auto a = ista_k(z, e, lam, eta, 50000, {mode, false});
      const auto ref = oracle::lasso_cd(m, as_vector(z), {0.1}, mode);
      CHECK(std::abs(lasso_objective(a, z, e, lam) - ref.objective) <= 1e-9);
    }
  }
}

TEST_CASE("fixed points are exactly the lasso minimizers") {
  Rng rng(36);
  for (int t = 0; t < 5; ++t) {
    const auto [m, z] = surrogate(rng, 6, 12);
    const DenseDictionary<double> e(m);
    const double eta = 1.0 / oracle::gram_lambda_max(m, 2000, 2);
    const auto lam = uniform_weights(e.layout(), 0.05);
    for (auto mode : {ShrinkMode::nonneg, ShrinkMode::signed_soft}) {
      const auto ref = oracle::lasso_cd(m, as_vector(z), {0.05}, mode);
      MultiscaleCode<double> star{{TensorD({12, 1, 1}, ref.code)}};
      CHECK(max_abs_diff(shrink_step(star, z, e, e, lam, eta, {mode, false}), star) <= 1e-5);

      // A perturbed code has a strictly higher objective and is moved by the step.
      auto off = star;
      off.parts[0][static_cast<std::size_t>(t)] += 0.1;
      CHECK(lasso_objective(off, z, e, lam) > ref.objective);
      CHECK(max_abs_diff(shrink_step(off, z, e, e, lam, eta, {mode, false}), off) > 1e-5);
    }
  }
}

TEST_CASE("ISTA objective never increases") {
  const auto spec = tiny_spec(1, 4, 4);
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto p = random_dictionary<double>(spec, 100 + i);
    const MultiscaleDictionary<double> e(p);
    const double eta = 1.0 / oracle::gram_lambda_max(materialize(p), 2000, 2);
    Rng rng = Rng(37).fork(i);
    const auto z = rng.normal_tensor<double>(spec.image_shape());
    ChannelWeights<double> lam;
    for (const auto& shape : e.layout()) {
      lam.emplace_back(shape[0]);
      for (auto& v : lam.back()) v = rng.uniform(0.01, 0.2);
    }
    const ShrinkOptions opts{i % 2 ? ShrinkMode::signed_soft : ShrinkMode::nonneg, false};
    auto a = MultiscaleCode<double>::zeros(e.layout());
    double prev = lasso_objective(a, z, e, lam);
    for (int k = 0; k < 100; ++k) {
      a = shrink_step(a, z, e, e, lam, eta, opts);
      const double cur = lasso_objective(a, z, e, lam);
      CHECK(cur <= prev + 1e-6 * std::abs(prev));
      CHECK(std::isfinite(cur));
      prev = cur;
    }
  }
}

TEST_CASE("zero-threshold ISTA converges to the least-norm solution") {
  const auto spec = tiny_spec(1, 2, 2, false);
  const auto p = random_dictionary<double>(spec, 60);
  const auto m = materialize(p);
  const auto [smax, smin] = oracle::singular_range(m);
  REQUIRE(smax / smin < 20.0);
  const MultiscaleDictionary<double> e(p);
  const double eta = 1.0 / oracle::gram_lambda_max(m);
  Rng rng(38);
  const auto z = rng.normal_tensor<double>(spec.image_shape());
  const auto a = flatten(ista_k(z, e, uniform_weights(e.layout(), 0.0), eta, 5000, {ShrinkMode::signed_soft, true}));
  const auto ref = oracle::least_norm_solution(m, as_vector(z));
  double num = 0, den = 0;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    num += (a[j] - ref[j]) * (a[j] - ref[j]);
    den += ref[j] * ref[j];
  }
  CHECK(std::sqrt(num / den) <= 1e-3);
}

TEST_CASE("power iteration") {
  const DenseDictionary<double> diag(TensorD::from_rows({{3, 0}, {0, 1}}));
  const auto r = power_iteration(diag, 50, 0);
  CHECK(std::abs(r.lambda_max - 9.0) <= 1e-6);
  CHECK(std::abs(r.eta - 1.0 / 9.0) <= 1e-6);
  CHECK(r.iterations == 50);

  CHECK_THROWS_AS(power_iteration_from(diag, MultiscaleCode<double>::zeros(diag.layout()), 10), DegenerateOperatorError);
  CHECK_THROWS_AS(power_iteration(DenseDictionary<double>(TensorD::zeros({2, 2})), 10, 0), DegenerateOperatorError);
  CHECK_THROWS_AS(power_iteration(diag, 0, 0), std::invalid_argument);

  const auto spec = tiny_spec(2, 4, 2);
  const auto p = random_dictionary<double>(spec, 70);
  const auto est = power_iteration(MultiscaleDictionary<double>(p), 1000, 71);
  const double ref = oracle::gram_lambda_max(materialize(p), 10000, 8);
  CHECK(std::abs(est.lambda_max - ref) / ref <= 1e-4);
  CHECK(ref == doctest::Approx(oracle::singular_range(materialize(p)).first * oracle::singular_range(materialize(p)).first).epsilon(1e-10));
  // The Rayleigh quotient never overshoots the top eigenvalue.
  CHECK(est.lambda_max <= ref * (1 + 1e-12));
}

TEST_CASE("Gram oracle agrees with the SVD") {
  Rng rng(39);
  const auto m = rng.normal_tensor<double>({7, 11});
  const auto [smax, smin] = oracle::singular_range(m);
  CHECK(oracle::gram_lambda_max(m) == doctest::Approx(smax * smax).epsilon(1e-10));
  CHECK(smin > 0);
}
