#include "musc/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "musc/analysis.hpp"
#include "musc/linops.hpp"
#include "musc/oracles.hpp"
#include "musc/rng.hpp"
#include "musc/sparse_coding.hpp"
#include "musc/synthdata.hpp"
#include "musc/train.hpp"

namespace musc::selfcheck {

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

ScaleSpec make_spec(int scales, int channels, int size, bool bottom = true) {
  ScaleSpec s;
  s.scales = scales;
  s.channels = channels;
  s.height = size;
  s.width = size;
  s.out_channels = 1;
  s.bottom_conv = bottom;
  s.validate();
  return s;
}

template <typename T>
MultiscaleCode<T> random_code(const CodeLayout& layout, Rng& rng) {
  auto code = MultiscaleCode<T>::zeros(layout);
  for (auto& p : code.parts) p = rng.normal_tensor<T>(p.dims());
  return code;
}

template <typename T>
std::vector<double> as_doubles(std::span<const T> v) {
  return {v.begin(), v.end()};
}

// y = M x, accumulated in double.
template <typename T>
std::vector<double> matvec(const BasicTensor<T>& m, const std::vector<double>& x, bool transpose) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> y(transpose ? cols : rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double a = m.at(i, j);
      if (transpose)
        y[j] += a * x[i];
      else
        y[i] += a * x[j];
    }
  return y;
}

double rel_diff(const std::vector<double>& a, const std::vector<double>& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ref[i]) * (a[i] - ref[i]);
    den += ref[i] * ref[i];
  }
  return std::sqrt(num / den);
}

// ---------------------------------------------------------------------------

template <typename T>
Outcome check_kron_as(const Options& o) {
  const int trials = o.level == Level::full ? 200 : 50;
  Rng rng(11);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 2 + rng.below(7);
    const auto x = rng.uniform_tensor<T>({n, n}, -1.0, 1.0);
    const auto v = rng.normal_tensor<T>({2, 2});
    worst = std::max(worst, max_abs_diff(tconv_siso(x, v), tconv_siso_direct(x, v)));
  }
  return {worst <= 1e-6, std::to_string(trials) + " pairs, n in 2..8, max |diff| " + fmt(worst)};
}

Outcome check_kron(const Options& o) { return o.f64 ? check_kron_as<double>(o) : check_kron_as<float>(o); }

// Per pair, in double: |<Da, y> - <a, D^T y>| / max(|<Da, y>|, |<a, D^T y>|).
// In float the inner product itself can nearly cancel, so the float pass is
// scaled by ||Da|| ||y|| instead.
template <typename T>
double adjoint_error(const Options& o, bool scale_by_norms) {
  const int pairs = o.level == Level::full ? 100 : 20;
  const std::vector<ScaleSpec> specs{make_spec(1, 8, 8), make_spec(2, 16, 8), make_spec(3, 16, 4)};
  double worst = 0.0;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    const auto p = random_dictionary<T>(specs[s], 20 + s);
    const auto layout = code_layout(specs[s]);
    Rng rng = Rng(21).fork(s);
    for (int k = 0; k < pairs; ++k) {
      const auto a = random_code<T>(layout, rng);
      const auto y = rng.normal_tensor<T>(specs[s].image_shape());
      const auto da = dict_apply(p, a);
      const double lhs = dot(da, y);
      const double rhs = dot(a, dict_adjoint(p, y));
      const double scale = scale_by_norms ? std::sqrt(squared_norm(da) * squared_norm(y))
                                          : std::max(std::abs(lhs), std::abs(rhs));
      worst = std::max(worst, std::abs(lhs - rhs) / scale);
    }
  }
  return worst;
}

Outcome check_adjoint(const Options& o) {
  const double exact = adjoint_error<double>(o, false);
  const double single = adjoint_error<float>(o, true);
  return {exact <= 1e-5 && single <= 1e-5, std::string(o.level == Level::full ? "100" : "20") +
                                               " pairs x S in {1,2,3}; f64 relative error " + fmt(exact) +
                                               ", f32 error / (||Da|| ||y||) " + fmt(single)};
}

template <typename T>
Outcome check_materialize_as(const Options& o) {
  const auto spec = make_spec(2, 8, 4);
  const auto p = random_dictionary<T>(spec, 30);
  const auto m = materialize(p, 1024);
  const auto layout = code_layout(spec);
  Rng rng(31);
  const int trials = o.level == Level::full ? 10 : 3;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto a = random_code<T>(layout, rng);
    const auto fwd = dict_apply(p, a);
    worst = std::max(worst, rel_diff(as_doubles<T>(fwd.values()), matvec(m, as_doubles<T>(flatten(a)), false)));
    const auto y = rng.normal_tensor<T>(spec.image_shape());
    const auto adj = flatten(dict_adjoint(p, y));
    worst = std::max(worst, rel_diff(as_doubles<T>(adj), matvec(m, as_doubles<T>(y.values()), true)));
  }
  return {worst <= 1e-5, "N=" + std::to_string(spec.code_size()) + ", d=" + std::to_string(spec.image_size()) +
                             ", max relative error " + fmt(worst)};
}

Outcome check_materialize(const Options& o) {
  return o.f64 ? check_materialize_as<double>(o) : check_materialize_as<float>(o);
}

Outcome check_ista_oracle(const Options&) {
  constexpr int kSteps = 1000;
  constexpr double kLambda = 0.1;
  // Unit-norm atoms and a unit-scale signal.
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
  const auto lambda = uniform_weights(e.layout(), kLambda);
  double worst = 0.0;
  for (const auto mode : {ShrinkMode::nonneg, ShrinkMode::signed_soft}) {
    const auto a = ista_k(z, e, lambda, eta, kSteps, {mode, false});
    const double f = lasso_objective(a, z, e, lambda);
    const auto ref = oracle::lasso_cd(m, as_doubles<double>(z.values()), {kLambda}, mode);
    worst = std::max(worst, std::abs(f - ref.objective));
  }
  return {worst <= 1e-6, "8x16, lambda 0.1, K=1000, both modes, max objective gap " + fmt(worst)};
}

Outcome check_descent(const Options& o) {
  const int instances = o.level == Level::full ? 20 : 5;
  constexpr int kSteps = 100;
  const auto spec = make_spec(1, 4, 4);
  const auto layout = code_layout(spec);
  int violations = 0;
  double worst = 0.0;  // largest relative increase seen
  for (int i = 0; i < instances; ++i) {
    const auto p = random_dictionary<double>(spec, 100 + static_cast<std::uint64_t>(i));
    const MultiscaleDictionary<double> e(p);
    const double eta = 1.0 / oracle::gram_lambda_max(materialize(p), 2000, 2);
    Rng rng = Rng(51).fork(static_cast<std::uint64_t>(i));
    const auto z = rng.normal_tensor<double>(spec.image_shape());
    ChannelWeights<double> lambda;
    for (const auto& shape : layout) {
      std::vector<double> row(shape[0]);
      for (auto& v : row) v = rng.uniform(0.01, 0.2);
      lambda.push_back(row);
    }
    const ShrinkOptions opts{i % 2 == 0 ? ShrinkMode::nonneg : ShrinkMode::signed_soft, false};
    auto a = MultiscaleCode<double>::zeros(layout);
    double prev = lasso_objective(a, z, e, lambda);
    for (int k = 0; k < kSteps; ++k) {
      a = shrink_step(a, z, e, e, lambda, eta, opts);
      const double cur = lasso_objective(a, z, e, lambda);
      const double rise = (cur - prev) / std::abs(prev);
      worst = std::max(worst, rise);
      if (rise > 1e-6) ++violations;
      prev = cur;
    }
  }
  return {violations == 0, std::to_string(instances) + " instances x " + std::to_string(kSteps) +
                               " steps, violations " + std::to_string(violations) + ", max relative rise " +
                               fmt(worst)};
}

Outcome check_least_norm(const Options& o) {
  constexpr int kSteps = 5000;
  constexpr double kMaxCondition = 20.0;
  const auto spec = make_spec(1, 2, 2, false);
  // First dictionary of a fixed seed sequence that is well enough conditioned
  // for the iteration to reach the limit within kSteps.
  DictionaryParams<double> p;
  TensorD m;
  double condition = 0.0;
  std::uint64_t seed = 60;
  for (;; ++seed) {
    p = random_dictionary<double>(spec, seed);
    m = materialize(p);
    const auto [smax, smin] = oracle::singular_range(m);
    condition = smax / smin;
    if (condition <= kMaxCondition) break;
    if (seed > 1000) return {false, "no well-conditioned dictionary found"};
  }
  const MultiscaleDictionary<double> e(p);
  const double eta = 1.0 / oracle::gram_lambda_max(m, 10000, 8);
  const auto zero = uniform_weights(e.layout(), 0.0);
  const int trials = o.level == Level::full ? 3 : 1;
  Rng rng(61);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto z = rng.normal_tensor<double>(spec.image_shape());
    const auto a = ista_k(z, e, zero, eta, kSteps, {ShrinkMode::signed_soft, true});
    const auto ref = oracle::least_norm_solution(m, as_doubles<double>(z.values()));
    worst = std::max(worst, rel_diff(as_doubles<double>(flatten(a)), ref));
  }
  return {worst <= 1e-3, "d=" + std::to_string(spec.image_size()) + ", N=" + std::to_string(spec.code_size()) +
                             ", condition " + fmt(condition) + ", K=5000, max relative error " + fmt(worst)};
}

Outcome check_power(const Options&) {
  const DenseDictionary<double> diag(TensorD::from_rows({{3.0, 0.0}, {0.0, 1.0}}));
  const auto d = power_iteration(diag, 50, 0);
  const double diag_err = std::abs(d.lambda_max - 9.0);

  const auto spec = make_spec(2, 4, 2);
  const auto p = random_dictionary<double>(spec, 70);
  // The top two eigenvalues of this instance differ by about 4%, so the
  // default 50 iterations are not converged; the comparison runs 1000.
  const MultiscaleDictionary<double> e(p);
  const double ref = oracle::gram_lambda_max(materialize(p), 10000, 8);
  const double rel = std::abs(power_iteration(e, 1000, 71).lambda_max - ref) / ref;
  const double rel50 = std::abs(power_iteration(e, 50, 71).lambda_max - ref) / ref;
  return {diag_err <= 1e-6 && rel <= 1e-4,
          "diag(3,1): |err| " + fmt(diag_err) + "; multiscale: oracle " + fmt(ref) + ", relative error " + fmt(rel) +
              " at 1000 iterations (" + fmt(rel50) + " at 50)"};
}

// Central differences on every entry of every learnable leaf.
struct GradReport {
  double worst = 0.0;
  std::string worst_leaf;
  int leaves = 0;
  int redraws = 0;
};

template <typename T>
double kink_margin(const ModelParams<T>& m, std::span<const Sample<T>> batch) {
  const EffectiveModel<T> em(m);
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& s : batch) {
    const auto tape = forward(em, s.z);
    for (std::size_t k = 0; k < tape.steps.size(); ++k)
      for (std::size_t sc = 0; sc < tape.steps[k].pre.parts.size(); ++sc) {
        const auto& pre = tape.steps[k].pre.parts[sc];
        const std::size_t plane = pre.size() / pre.dim(0);
        for (std::size_t c = 0; c < pre.dim(0); ++c) {
          const double t = static_cast<double>(em.eta) * em.lambda[k][sc][c];
          for (std::size_t j = 0; j < plane; ++j) {
            const double u = pre.slab(c)[j];
            margin = std::min(margin, em.mode == ShrinkMode::nonneg ? std::abs(u - t) : std::abs(std::abs(u) - t));
          }
        }
      }
  }
  return margin;
}

GradReport gradient_check(const ModelConfig& cfg, std::uint64_t seed) {
  constexpr double kStep = 1e-5;
  constexpr double kMargin = 2e-4;
  auto m = init_model<double>(cfg, seed);
  Rng rng = Rng(seed).fork(99);
  // Untie the copies and spread the thresholds so every leaf sees a generic point.
  for (auto& [name, t] : m.leaves) {
    if (name.starts_with("lambda."))
      for (auto& v : t.values()) v += rng.uniform(-0.5, 0.5) * v;
    else if (name.ends_with(".gain"))
      t[0] *= rng.uniform(0.8, 1.2);
    else if (name != "eta")
      for (auto& v : t.values()) v += 0.1 * rng.normal() * (std::abs(v) + 0.05);
  }

  GradReport report;
  std::vector<Sample<double>> batch;
  for (;;) {
    batch.clear();
    for (int i = 0; i < 2; ++i)
      batch.push_back({rng.normal_tensor<double>(cfg.spec.image_shape()),
                       rng.uniform_tensor<double>(cfg.spec.image_shape(), 0.0, 1.0)});
    if (kink_margin<double>(m, batch) > kMargin) break;
    if (++report.redraws > 200) throw std::runtime_error("gradient check: could not avoid rectifier kinks");
  }

  const auto analytic = loss_and_grad<double>(m, batch).grads;
  for (auto& [name, leaf] : m.leaves) {
    if (!m.is_learnable(name)) continue;
    ++report.leaves;
    const auto& g = analytic.at(name);
    double num = 0.0, den_fd = 0.0, den_an = 0.0;
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double keep = leaf[i];
      leaf[i] = keep + kStep;
      const double up = loss<double>(m, batch);
      leaf[i] = keep - kStep;
      const double down = loss<double>(m, batch);
      leaf[i] = keep;
      const double fd = (up - down) / (2 * kStep);
      num += (fd - g[i]) * (fd - g[i]);
      den_fd += fd * fd;
      den_an += g[i] * g[i];
    }
    const double rel = std::sqrt(num) / std::max({std::sqrt(den_fd), std::sqrt(den_an), 1e-7});
    if (rel > report.worst) {
      report.worst = rel;
      report.worst_leaf = name;
    }
  }
  return report;
}

Outcome check_gradients(const Options& o) {
  struct Case {
    int steps;
    ShrinkMode mode;
    bool weight_norm;
    bool tie;
  };
  std::vector<Case> cases{{1, ShrinkMode::nonneg, true, false}, {3, ShrinkMode::nonneg, true, false}};
  if (o.level == Level::full) {
    cases.push_back({1, ShrinkMode::signed_soft, false, false});
    cases.push_back({3, ShrinkMode::signed_soft, false, false});
    cases.push_back({3, ShrinkMode::nonneg, false, true});
  }
  double worst = 0.0;
  std::string where;
  int leaves = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    ModelConfig cfg;
    cfg.spec = make_spec(2, 4, 2);
    cfg.steps = cases[i].steps;
    cfg.mode = cases[i].mode;
    cfg.weight_norm = cases[i].weight_norm;
    cfg.tie_dicts = cases[i].tie;
    cfg.init_lambda = 0.05;
    const auto r = gradient_check(cfg, 80 + i);
    leaves += r.leaves;
    if (r.worst >= worst) {
      worst = r.worst;
      where = r.worst_leaf + " (K=" + std::to_string(cfg.steps) + ", " + to_string(cfg.mode) +
              (cfg.weight_norm ? ", weight norm" : "") + (cfg.tie_dicts ? ", tied" : "") + ")";
    }
  }
  return {worst <= 1e-4, std::to_string(cases.size()) + " configurations, " + std::to_string(leaves) +
                             " leaves, worst relative error " + fmt(worst) + " at " + where};
}

// Support per scale for center indicators: finest <= 3 and never shrinking
// toward coarser scales (min over channels at the coarser scale >= max at the finer).
std::string support_violation(const DictionaryParams<float>& d, const std::string& label) {
  const int scales = d.spec.scales;
  std::vector<std::size_t> lo(scales + 1), hi(scales + 1);
  for (int s = 0; s <= scales; ++s) {
    lo[s] = SIZE_MAX;
    hi[s] = 0;
    for (std::size_t c = 0; c < d.spec.code_channels(s); ++c) {
      const auto a = extract_atom(d, center_indicator(d.spec, s, c));
      lo[s] = std::min(lo[s], a.support);
      hi[s] = std::max(hi[s], a.support);
    }
  }
  if (hi[scales] > 3) return label + ": finest-scale support " + std::to_string(hi[scales]);
  for (int s = scales; s > 0; --s)
    if (lo[s - 1] < hi[s]) return label + ": support shrinks from scale " + std::to_string(s);
  return {};
}

Outcome check_probing(const Options& o) {
  std::vector<std::string> problems;
  std::ostringstream detail;
  const auto fresh = init_model<float>(ModelConfig{}, 0);
  for (const auto role : {DictRole::encoder, DictRole::adjoint, DictRole::decoder})
    if (auto v = support_violation(fresh.dictionary(role), "random " + dict_prefix(role, false)); !v.empty())
      problems.push_back(v);

  std::optional<ModelParams<float>> trained;
  std::string source;
  if (!o.model.empty()) {
    trained = load_checkpoint<float>(o.model);
    source = o.model.filename().string();
  } else if (o.level == Level::full) {
    TrainConfig cfg;
    cfg.train_steps = 300;
    cfg.eval_interval = 300;
    cfg.threads = o.threads;
    const auto corpus = gen_corpus<float>(cfg.task);
    trained = train_loop<float>(cfg, corpus.train, corpus.val).model;
    source = "default model trained 300 steps";
  }
  if (trained) {
    for (const auto role : {DictRole::encoder, DictRole::adjoint, DictRole::decoder})
      if (auto v = support_violation(trained->dictionary(role), "trained " + dict_prefix(role, false)); !v.empty())
        problems.push_back(v);
    SampleSet<float> val;
    if (!o.data.empty()) {
      val = load_sample_set<float>(o.data / "val", Split::val);
    } else {
      TaskSpec task;
      val.split = Split::val;
      for (int i = 0; i < task.n_val; ++i) val.samples.push_back(gen_sample<float>(task, Split::val, i));
    }
    const auto report = sparsity_profile(*trained, val, o.threads);
    detail << "density " << fmt(report.overall) << " per scale";
    for (double d : report.density) detail << ' ' << fmt(d);
    detail << " (" << source << ")";
    if (!(report.overall < 0.5)) problems.push_back("code density " + fmt(report.overall) + " >= 0.5");
  } else {
    detail << "density not measured at quick level without --model";
  }
  bool support_ok = true;
  for (const auto& p : problems) support_ok = support_ok && !p.starts_with("random") && !p.starts_with("trained");
  if (support_ok) detail << "; finest support <= 3, non-decreasing toward coarse scales";
  if (!problems.empty()) {
    std::string all;
    for (const auto& p : problems) all += (all.empty() ? "" : "; ") + p;
    return {false, all + " [" + detail.str() + "]"};
  }
  return {true, detail.str()};
}

struct Entry {
  const char* id;
  const char* title;
  Outcome (*fn)(const Options&);
};

const std::vector<Entry>& entries() {
  static const std::vector<Entry> list{
      {"kron", "transposed conv: direct form equals Kronecker form", check_kron},
      {"adjoint", "dictionary adjoint identity", check_adjoint},
      {"materialize", "apply/adjoint vs materialized matrix", check_materialize},
      {"ista_oracle", "ISTA objective vs coordinate descent", check_ista_oracle},
      {"descent", "monotone ISTA objective", check_descent},
      {"least_norm", "lambda=0 limit is the least-norm solution", check_least_norm},
      {"power", "power iteration vs closed form and Gram oracle", check_power},
      {"gradients", "backward pass vs central differences", check_gradients},
      {"probing", "atom support and code density", check_probing},
  };
  return list;
}

}  // namespace

const std::vector<std::string>& check_ids() {
  static const std::vector<std::string> ids = [] {
    std::vector<std::string> out;
    for (const auto& e : entries()) out.emplace_back(e.id);
    return out;
  }();
  return ids;
}

Result run(const std::string& id, const Options& options) {
  const auto it = std::find_if(entries().begin(), entries().end(), [&](const Entry& e) { return id == e.id; });
  if (it == entries().end()) throw std::invalid_argument("selfcheck: unknown check '" + id + "'");
  Result r{it->id, it->title, false, {}, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto out = it->fn(options);
    r.pass = out.pass;
    r.detail = out.detail;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<Result> run_all(const Options& options, const std::function<void(const Result&)>& on_result) {
  std::vector<Result> out;
  for (const auto& id : check_ids()) {
    out.push_back(run(id, options));
    if (on_result) on_result(out.back());
  }
  return out;
}

void print(const Result& r, std::ostream& out) {
  out << (r.pass ? "PASS" : "FAIL") << "  " << r.id << "  " << r.title << "  " << r.detail << "  (" << std::fixed
      << std::setprecision(2) << r.seconds << " s)" << std::defaultfloat << '\n';
}

}  // namespace musc::selfcheck
