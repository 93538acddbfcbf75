#include "musc/train.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "musc/parallel.hpp"
#include "musc/rng.hpp"

namespace musc {

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  spec.validate();
  if (steps < 0) throw std::invalid_argument("ModelConfig: unroll_steps must be >= 0");
  if (!(init_lambda >= kLambdaFloor) || !std::isfinite(init_lambda))
    throw std::invalid_argument("ModelConfig: init_lambda must be >= 1e-5");
  if (power_iters < 1) throw std::invalid_argument("ModelConfig: power_iters must be >= 1");
}

const std::set<std::string>& model_config_keys() {
  static const std::set<std::string> keys{"scales",    "channels",     "height",       "width",
                                          "out_channels", "bottom_conv", "unroll_steps", "mode",
                                          "tie_dicts", "learn_lambda", "learn_eta",    "weight_norm",
                                          "init_lambda", "power_iters"};
  return keys;
}

void write_model_config(KeyValueDoc& doc, const ModelConfig& c) {
  doc.set("scales", c.spec.scales);
  doc.set("channels", c.spec.channels);
  doc.set("height", c.spec.height);
  doc.set("width", c.spec.width);
  doc.set("out_channels", c.spec.out_channels);
  doc.set("bottom_conv", c.spec.bottom_conv);
  doc.set("unroll_steps", c.steps);
  doc.set("mode", to_string(c.mode));
  doc.set("tie_dicts", c.tie_dicts);
  doc.set("learn_lambda", c.learn_lambda);
  doc.set("learn_eta", c.learn_eta);
  doc.set("weight_norm", c.weight_norm);
  doc.set("init_lambda", c.init_lambda);
  doc.set("power_iters", c.power_iters);
}

ModelConfig read_model_config(const KeyValueDoc& doc, ModelConfig c) {
  c.spec.scales = doc.get_int("scales", c.spec.scales);
  c.spec.channels = doc.get_int("channels", c.spec.channels);
  c.spec.height = doc.get_int("height", c.spec.height);
  c.spec.width = doc.get_int("width", c.spec.width);
  c.spec.out_channels = doc.get_int("out_channels", c.spec.out_channels);
  c.spec.bottom_conv = doc.get_bool("bottom_conv", c.spec.bottom_conv);
  c.steps = doc.get_int("unroll_steps", c.steps);
  c.mode = parse_shrink_mode(doc.get_string("mode", to_string(c.mode)));
  c.tie_dicts = doc.get_bool("tie_dicts", c.tie_dicts);
  c.learn_lambda = doc.get_bool("learn_lambda", c.learn_lambda);
  c.learn_eta = doc.get_bool("learn_eta", c.learn_eta);
  c.weight_norm = doc.get_bool("weight_norm", c.weight_norm);
  c.init_lambda = doc.get_double("init_lambda", c.init_lambda);
  c.power_iters = doc.get_int("power_iters", c.power_iters);
  c.validate();
  return c;
}

std::string dict_prefix(DictRole role, bool tied) {
  if (tied) return "enc";
  switch (role) {
    case DictRole::encoder: return "enc";
    case DictRole::adjoint: return "adj";
    case DictRole::decoder: return "dec";
  }
  return "enc";
}

namespace {

constexpr std::array<DictRole, 3> kRoles{DictRole::encoder, DictRole::adjoint, DictRole::decoder};

std::vector<std::string> dict_prefixes(bool tied) {
  if (tied) return {"enc"};
  return {"enc", "adj", "dec"};
}

std::string lambda_leaf(int scale) { return "lambda.s" + std::to_string(scale); }

template <typename T>
const BasicTensor<T>& leaf(const ParamMap<T>& leaves, const std::string& name) {
  const auto it = leaves.find(name);
  if (it == leaves.end()) throw std::invalid_argument("model: missing leaf '" + name + "'");
  return it->second;
}

template <typename T>
void add_scaled(DictionaryParams<T>& acc, const DictionaryParams<T>& x, T scale) {
  auto a = acc.named_kernels();
  const auto b = x.named_kernels();
  for (std::size_t i = 0; i < a.size(); ++i) a[i].second->axpy(scale, *b[i].second);
}

std::atomic<std::uint64_t> next_model_id{1};

}  // namespace

// ---------------------------------------------------------------------------
// Model parameters

template <typename T>
std::map<std::string, Shape> ModelParams<T>::leaf_shapes(const ModelConfig& c) {
  std::map<std::string, Shape> out;
  for (const auto& prefix : dict_prefixes(c.tie_dicts)) {
    for (const auto& [name, shape] : kernel_shapes(c.spec)) {
      if (c.weight_norm) {
        out[prefix + "." + name + ".dir"] = shape;
        out[prefix + "." + name + ".gain"] = Shape{1};
      } else {
        out[prefix + "." + name] = shape;
      }
    }
  }
  if (c.steps > 0)
    for (int s = 0; s <= c.spec.scales; ++s)
      out[lambda_leaf(s)] = Shape{static_cast<std::size_t>(c.steps), c.spec.code_channels(s)};
  out["eta"] = Shape{1};
  return out;
}

template <typename T>
void ModelParams<T>::validate() const {
  config.validate();
  const auto shapes = leaf_shapes(config);
  if (shapes.size() != leaves.size()) throw std::invalid_argument("model: unexpected number of leaves");
  for (const auto& [name, shape] : shapes) {
    const auto& t = leaf(leaves, name);
    if (t.dims() != shape)
      throw std::invalid_argument("model: leaf '" + name + "' has shape " + shape_string(t.dims()) + ", expected " +
                                  shape_string(shape));
    t.require_finite(name.c_str());
  }
  if (!(eta() > 0)) throw std::invalid_argument("model: step size must be positive");
}

template <typename T>
DictionaryParams<T> ModelParams<T>::dictionary(DictRole role) const {
  const std::string prefix = dict_prefix(role, config.tie_dicts);
  auto p = DictionaryParams<T>::zeros(config.spec);
  for (auto& [name, k] : p.named_kernels()) {
    if (config.weight_norm) {
      const auto& dir = leaf(leaves, prefix + "." + name + ".dir");
      const double gain = leaf(leaves, prefix + "." + name + ".gain")[0];
      const double norm = std::sqrt(squared_norm(dir));
      if (!(norm > 0)) throw std::invalid_argument("model: zero direction tensor for " + prefix + "." + name);
      *k = dir;
      *k *= static_cast<T>(gain / norm);
    } else {
      *k = leaf(leaves, prefix + "." + name);
    }
  }
  return p;
}

template <typename T>
Thresholds<T> ModelParams<T>::thresholds() const {
  Thresholds<T> out(static_cast<std::size_t>(config.steps));
  for (int k = 0; k < config.steps; ++k) {
    for (int s = 0; s <= config.spec.scales; ++s) {
      const auto& raw = leaf(leaves, lambda_leaf(s));
      std::vector<T> row(raw.dim(1));
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = std::max(raw.at(static_cast<std::size_t>(k), c), T{0}) + static_cast<T>(kLambdaFloor);
      out[static_cast<std::size_t>(k)].push_back(std::move(row));
    }
  }
  return out;
}

template <typename T>
T ModelParams<T>::eta() const {
  return leaf(leaves, "eta")[0];
}

template <typename T>
bool ModelParams<T>::is_learnable(const std::string& name) const {
  if (name.starts_with("lambda.")) return config.learn_lambda;
  if (name == "eta") return config.learn_eta;
  return true;
}

template <typename T>
DictionaryParams<T> random_dictionary(const ScaleSpec& spec, std::uint64_t seed) {
  auto w = DictionaryParams<T>::zeros(spec);
  Rng rng = Rng(seed).fork(1);
  for (auto& [name, k] : w.named_kernels()) {
    const double fan = 9.0 * static_cast<double>(k->dim(1));
    *k = rng.normal_tensor<T>(k->dims(), 1.0 / std::sqrt(fan));
  }
  return w;
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto w = random_dictionary<T>(config.spec, seed);

  ModelParams<T> m;
  m.config = config;
  for (const auto& prefix : dict_prefixes(config.tie_dicts)) {
    for (const auto& [name, k] : w.named_kernels()) {
      if (config.weight_norm) {
        m.leaves[prefix + "." + name + ".dir"] = *k;
        m.leaves[prefix + "." + name + ".gain"] =
            BasicTensor<T>(Shape{1}, static_cast<T>(std::sqrt(squared_norm(*k))));
      } else {
        m.leaves[prefix + "." + name] = *k;
      }
    }
  }
  if (config.steps > 0)
    for (int s = 0; s <= config.spec.scales; ++s)
      m.leaves[lambda_leaf(s)] =
          BasicTensor<T>(Shape{static_cast<std::size_t>(config.steps), config.spec.code_channels(s)},
                         static_cast<T>(config.init_lambda - kLambdaFloor));

  const MultiscaleDictionary<T> encoder(m.dictionary(DictRole::encoder));
  const auto pi = power_iteration(encoder, config.power_iters, Rng(seed).fork(2).next_u64());
  m.leaves["eta"] = BasicTensor<T>(Shape{1}, static_cast<T>(pi.eta));
  return m;
}

template <typename U, typename T>
ModelParams<U> cast_model(const ModelParams<T>& m) {
  ModelParams<U> out;
  out.config = m.config;
  for (const auto& [name, t] : m.leaves) out.leaves.emplace(name, t.template cast<U>());
  return out;
}

// ---------------------------------------------------------------------------
// Forward and backward

template <typename T>
EffectiveModel<T>::EffectiveModel(const ModelParams<T>& m)
    : encoder(m.dictionary(DictRole::encoder)),
      adjoint(m.dictionary(DictRole::adjoint)),
      decoder(m.dictionary(DictRole::decoder)),
      lambda(m.thresholds()),
      eta(m.eta()),
      mode(m.config.mode),
      id(next_model_id.fetch_add(1)) {}

template <typename T>
ForwardTape<T> forward(const EffectiveModel<T>& m, const BasicTensor<T>& z) {
  require_same_shape(z.dims(), m.encoder.image_shape(), "forward input");
  ForwardTape<T> tape;
  tape.model_id = m.id;
  tape.input = z;
  auto alpha = MultiscaleCode<T>::zeros(m.encoder.layout());
  const ShrinkOptions opts{m.mode, false};
  for (const auto& lambda : m.lambda) {
    tape.steps.push_back(shrink_step_traced(alpha, z, m.encoder, m.adjoint, lambda, m.eta, opts));
    alpha = tape.steps.back().code;
  }
  tape.prediction = m.decoder.apply(alpha);
  tape.code = std::move(alpha);
  return tape;
}

template <typename T>
BasicTensor<T> predict(const ModelParams<T>& m, const BasicTensor<T>& z, bool clip_negative) {
  const EffectiveModel<T> em(m);
  auto y = forward(em, z).prediction;
  if (clip_negative)
    for (auto& v : y.values()) v = std::max(v, T{0});
  return y;
}

template <typename T>
double loss(const ModelParams<T>& m, std::span<const Sample<T>> batch) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  const EffectiveModel<T> em(m);
  double total = 0.0;
  for (const auto& s : batch) {
    const auto y = forward(em, s.z).prediction;
    require_same_shape(y.dims(), s.x.dims(), "loss target");
    total += 0.5 * squared_norm(y - s.x);
  }
  return total / static_cast<double>(batch.size());
}

template <typename T>
EffectiveGrads<T> EffectiveGrads<T>::zeros(const EffectiveModel<T>& m) {
  EffectiveGrads g;
  const auto& spec = m.encoder.params().spec;
  g.encoder = DictionaryParams<T>::zeros(spec);
  g.adjoint = DictionaryParams<T>::zeros(spec);
  g.decoder = DictionaryParams<T>::zeros(spec);
  for (std::size_t k = 0; k < m.lambda.size(); ++k) g.lambda.push_back(uniform_weights(code_layout(spec), T{0}));
  return g;
}

template <typename T>
EffectiveGrads<T>& EffectiveGrads<T>::operator+=(const EffectiveGrads& o) {
  add_scaled(encoder, o.encoder, T{1});
  add_scaled(adjoint, o.adjoint, T{1});
  add_scaled(decoder, o.decoder, T{1});
  if (lambda.size() != o.lambda.size()) throw std::invalid_argument("EffectiveGrads: step count mismatch");
  for (std::size_t k = 0; k < lambda.size(); ++k)
    for (std::size_t s = 0; s < lambda[k].size(); ++s)
      for (std::size_t c = 0; c < lambda[k][s].size(); ++c) lambda[k][s][c] += o.lambda[k][s][c];
  eta += o.eta;
  return *this;
}

template <typename T>
EffectiveGrads<T> backward(const EffectiveModel<T>& m, const ForwardTape<T>& tape, const BasicTensor<T>& cotangent) {
  if (tape.model_id != m.id) throw StaleTapeError("backward: tape was recorded with different parameters");
  require_same_shape(cotangent.dims(), tape.prediction.dims(), "backward cotangent");
  auto g = EffectiveGrads<T>::zeros(m);
  const std::size_t steps = tape.steps.size();

  auto dec = dict_vjp(m.decoder.params(), tape.code, cotangent, steps > 0);
  g.decoder = std::move(dec.kernel_grad);
  if (steps == 0) return g;

  MultiscaleCode<T> g_code = std::move(*dec.code_grad);
  const double eta = m.eta;
  for (std::size_t k = steps; k-- > 0;) {
    const auto& tr = tape.steps[k];
    const auto& lambda = m.lambda[k];

    // Through the threshold: g_pre is the gradient w.r.t. the pre-activation.
    auto g_pre = MultiscaleCode<T>::zeros(tr.pre.layout());
    for (std::size_t s = 0; s < tr.pre.parts.size(); ++s) {
      const auto& pre = tr.pre.parts[s];
      const std::size_t channels = pre.dim(0), plane = pre.size() / channels;
      for (std::size_t c = 0; c < channels; ++c) {
        const T t = m.eta * lambda[s][c];
        const T* u = pre.slab(c);
        const T* ga = g_code.parts[s].slab(c);
        T* gp = g_pre.parts[s].slab(c);
        double signed_sum = 0.0;
        if (m.mode == ShrinkMode::nonneg) {
          for (std::size_t j = 0; j < plane; ++j)
            if (u[j] - t > 0) {
              gp[j] = ga[j];
              signed_sum += ga[j];
            }
        } else {
          for (std::size_t j = 0; j < plane; ++j)
            if (std::abs(u[j]) > t) {
              gp[j] = ga[j];
              signed_sum += u[j] > 0 ? ga[j] : -ga[j];
            }
        }
        g.lambda[k][s][c] += static_cast<T>(-eta * signed_sum);
        g.eta += -static_cast<double>(lambda[s][c]) * signed_sum;
      }
    }

    // pre = alpha_prev + eta * Et^T residual
    g.eta += dot(g_pre, tr.correlation);
    MultiscaleCode<T> g_corr = g_pre;
    g_corr *= m.eta;
    auto adj = dict_vjp(m.adjoint.params(), g_corr, tr.residual, false);
    add_scaled(g.adjoint, adj.kernel_grad, T{1});
    if (k == 0) break;  // alpha_0 = 0: the encoder term vanishes

    // residual = z - E alpha_prev
    const auto& alpha_prev = tape.steps[k - 1].code;
    auto enc = dict_vjp(m.encoder.params(), alpha_prev, adj.output, true);
    add_scaled(g.encoder, enc.kernel_grad, T{-1});
    g_code = std::move(g_pre);
    g_code -= *enc.code_grad;
  }
  return g;
}

template <typename T>
ParamMap<T> leaf_gradients(const ModelParams<T>& m, const EffectiveGrads<T>& g) {
  ParamMap<T> out;
  for (const auto& [name, shape] : ModelParams<T>::leaf_shapes(m.config)) out.emplace(name, BasicTensor<T>(shape));

  const std::array<const DictionaryParams<T>*, 3> role_grads{&g.encoder, &g.adjoint, &g.decoder};
  for (std::size_t r = 0; r < kRoles.size(); ++r) {
    const std::string prefix = dict_prefix(kRoles[r], m.config.tie_dicts);
    for (const auto& [name, gw] : role_grads[r]->named_kernels()) {
      const std::string base = prefix + "." + name;
      if (m.config.weight_norm) {
        // w = gain * u / |u|
        const auto& u = leaf(m.leaves, base + ".dir");
        const double gain = leaf(m.leaves, base + ".gain")[0];
        const double norm2 = squared_norm(u), norm = std::sqrt(norm2);
        const double proj = dot(*gw, u);
        out.at(base + ".gain")[0] += static_cast<T>(proj / norm);
        auto& gu = out.at(base + ".dir");
        gu.axpy(static_cast<T>(gain / norm), *gw);
        gu.axpy(static_cast<T>(-gain * proj / (norm * norm2)), u);
      } else {
        out.at(base) += *gw;
      }
    }
  }

  for (std::size_t k = 0; k < g.lambda.size(); ++k)
    for (std::size_t s = 0; s < g.lambda[k].size(); ++s) {
      const auto name = lambda_leaf(static_cast<int>(s));
      const auto& raw = leaf(m.leaves, name);
      auto& gl = out.at(name);
      for (std::size_t c = 0; c < g.lambda[k][s].size(); ++c)
        gl.at(k, c) = raw.at(k, c) > 0 ? g.lambda[k][s][c] : T{0};
    }
  out.at("eta")[0] = static_cast<T>(g.eta);

  for (auto& [name, t] : out)
    if (!m.is_learnable(name)) t.fill(T{0});
  return out;
}

template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& m, std::span<const Sample<T>> batch, int threads) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  const EffectiveModel<T> em(m);
  const double inv_m = 1.0 / static_cast<double>(batch.size());
  std::vector<double> losses(batch.size());
  std::vector<std::optional<EffectiveGrads<T>>> grads(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const auto tape = forward(em, batch[i].z);
    require_same_shape(tape.prediction.dims(), batch[i].x.dims(), "loss target");
    auto diff = tape.prediction - batch[i].x;
    losses[i] = 0.5 * squared_norm(diff) * inv_m;
    diff *= static_cast<T>(inv_m);
    grads[i] = backward(em, tape, diff);
  });
  LossAndGrad<T> out;
  EffectiveGrads<T> total = std::move(*grads[0]);
  for (std::size_t i = 1; i < batch.size(); ++i) total += *grads[i];
  for (double l : losses) out.loss += l;
  out.grads = leaf_gradients(m, total);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

namespace {

template <typename T>
void check_gradients(const ModelParams<T>& m, const ParamMap<T>& grads) {
  for (const auto& [name, p] : m.leaves) {
    if (!m.is_learnable(name)) continue;
    const auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for leaf '" + name + "'");
    require_same_shape(it->second.dims(), p.dims(), "optimizer gradient");
    const auto& g = it->second;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NonFiniteGradientError("non-finite gradient in leaf '" + name + "' at flat index " + std::to_string(i));
  }
}

}  // namespace

template <typename T>
void adam_step(ModelParams<T>& m, const ParamMap<T>& grads, AdamState<T>& state, const OptimizerConfig& cfg) {
  check_gradients(m, grads);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : m.leaves) {
    if (!m.is_learnable(name)) continue;
    const auto& g = grads.at(name);
    auto& mt = state.m.try_emplace(name, p.dims()).first->second;
    auto& vt = state.v.try_emplace(name, p.dims()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
      mt[i] = static_cast<T>(mi);
      vt[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
    }
  }
}

template <typename T>
void sgd_step(ModelParams<T>& m, const ParamMap<T>& grads, const OptimizerConfig& cfg) {
  check_gradients(m, grads);
  for (auto& [name, p] : m.leaves)
    if (m.is_learnable(name)) p.axpy(static_cast<T>(-cfg.lr), grads.at(name));
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  model.validate();
  if (data_dir.empty()) {
    task.validate();
    const Shape expected{1, static_cast<std::size_t>(task.image_size), static_cast<std::size_t>(task.image_size)};
    if (model.spec.image_shape() != expected)
      throw std::invalid_argument("TrainConfig: model output " + shape_string(model.spec.image_shape()) +
                                  " does not match task images " + shape_string(expected));
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (train_steps < 0) throw std::invalid_argument("TrainConfig: train_steps must be >= 0");
  if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval_interval must be >= 1");
  if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
  if (!(optimizer.lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
}

const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = model_config_keys();
    for (const auto& t : task_spec_keys())
      if (t != "seed") k.insert(t);
    for (const char* extra : {"data_seed", "data", "optimizer", "lr", "beta1", "beta2", "eps", "batch_size",
                              "train_steps", "eval_interval", "seed", "clip_eval"})
      k.insert(extra);
    return k;
  }();
  return keys;
}

void write_train_config(KeyValueDoc& doc, const TrainConfig& c) {
  write_model_config(doc, c.model);
  KeyValueDoc task;
  write_task_spec(task, c.task);
  for (const auto& [k, v] : task.entries()) doc.set(k == "seed" ? "data_seed" : k, v);
  if (!c.data_dir.empty()) doc.set("data", c.data_dir);
  doc.set("optimizer", c.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd");
  doc.set("lr", c.optimizer.lr);
  doc.set("beta1", c.optimizer.beta1);
  doc.set("beta2", c.optimizer.beta2);
  doc.set("eps", c.optimizer.eps);
  doc.set("batch_size", c.batch_size);
  doc.set("train_steps", c.train_steps);
  doc.set("eval_interval", c.eval_interval);
  doc.set("seed", c.seed);
  doc.set("clip_eval", c.clip_eval);
}

TrainConfig read_train_config(const KeyValueDoc& doc, TrainConfig c) {
  doc.require_known(train_config_keys());
  KeyValueDoc task;
  for (const auto& [k, v] : doc.entries()) {
    if (k == "data_seed")
      task.set("seed", v);
    else if (k != "seed" && task_spec_keys().contains(k))
      task.set(k, v);
  }
  c.task = read_task_spec(task, c.task);
  c.data_dir = doc.get_string("data", c.data_dir);

  // The coarsest code size follows from the image size unless given.
  const int scales = doc.get_int("scales", c.model.spec.scales);
  if (!doc.has("height")) c.model.spec.height = c.task.image_size >> scales;
  if (!doc.has("width")) c.model.spec.width = c.task.image_size >> scales;
  c.model = read_model_config(doc, c.model);

  const auto kind = doc.get_string("optimizer", c.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd");
  if (kind == "adam")
    c.optimizer.kind = OptimizerKind::adam;
  else if (kind == "sgd")
    c.optimizer.kind = OptimizerKind::sgd;
  else
    throw ConfigError("config: optimizer must be adam or sgd, got '" + kind + "'");
  c.optimizer.lr = doc.get_double("lr", c.optimizer.lr);
  c.optimizer.beta1 = doc.get_double("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = doc.get_double("beta2", c.optimizer.beta2);
  c.optimizer.eps = doc.get_double("eps", c.optimizer.eps);
  c.batch_size = doc.get_int("batch_size", c.batch_size);
  c.train_steps = doc.get_int("train_steps", c.train_steps);
  c.eval_interval = doc.get_int("eval_interval", c.eval_interval);
  c.seed = doc.get_u64("seed", c.seed);
  c.clip_eval = doc.get_bool("clip_eval", c.clip_eval);
  c.validate();
  return c;
}

template <typename T>
EvalResult evaluate(const ModelParams<T>& m, const SampleSet<T>& set, bool clip_negative, int threads) {
  if (set.empty()) throw std::invalid_argument("evaluate: empty sample set");
  const EffectiveModel<T> em(m);
  std::vector<double> losses(set.size()), psnrs(set.size());
  parallel_for(set.size(), threads, [&](std::size_t i) {
    const auto& s = set.samples[i];
    auto y = forward(em, s.z).prediction;
    losses[i] = 0.5 * squared_norm(y - s.x);
    if (clip_negative)
      for (auto& v : y.values()) v = std::max(v, T{0});
    psnrs[i] = psnr(y, s.x);
  });
  EvalResult r;
  for (std::size_t i = 0; i < set.size(); ++i) {
    r.loss += losses[i];
    r.psnr += psnrs[i];
  }
  r.loss /= static_cast<double>(set.size());
  r.psnr /= static_cast<double>(set.size());
  return r;
}

template <typename T>
TrainResult<T> train_loop(const TrainConfig& cfg, const SampleSet<T>& train, const SampleSet<T>& val,
                          const std::filesystem::path& checkpoint, const MetricsCallback& on_eval) {
  cfg.validate();
  if (train.empty() || val.empty()) throw std::invalid_argument("train_loop: train and validation sets must be nonempty");
  for (const auto* set : {&train, &val})
    for (const auto& s : set->samples) {
      require_same_shape(s.z.dims(), cfg.model.spec.image_shape(), "training input");
      require_same_shape(s.x.dims(), cfg.model.spec.image_shape(), "training target");
    }

  TrainResult<T> result{init_model<T>(cfg.model, cfg.seed), {}, {}};
  auto& model = result.model;
  AdamState<T> adam;
  Rng order = Rng(cfg.seed).fork(3);
  std::vector<std::size_t> perm(train.size());
  std::size_t cursor = perm.size();

  auto diverge = [&](int step, const std::string& why) {
    if (!checkpoint.empty()) save_checkpoint(model, checkpoint);
    throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + why);
  };
  auto record = [&](int step) {
    const auto e = evaluate(model, val, cfg.clip_eval, cfg.threads);
    if (!std::isfinite(e.loss)) diverge(step, "validation loss is not finite");
    result.metrics.push_back({step, e.loss, e.psnr});
    if (on_eval) on_eval(result.metrics.back());
  };

  record(0);
  std::vector<Sample<T>> batch;
  for (int step = 1; step <= cfg.train_steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == perm.size()) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[order.below(i)]);
        cursor = 0;
      }
      batch.push_back(train.samples[perm[cursor++]]);
    }

    const auto lg = loss_and_grad<T>(model, batch, cfg.threads);
    if (!std::isfinite(lg.loss)) diverge(step, "training loss is not finite");
    const ModelParams<T> previous = model;
    try {
      if (cfg.optimizer.kind == OptimizerKind::adam)
        adam_step(model, lg.grads, adam, cfg.optimizer);
      else
        sgd_step(model, lg.grads, cfg.optimizer);
    } catch (const NonFiniteGradientError& e) {
      diverge(step, e.what());
    }
    if (!(model.eta() > 0) || !std::isfinite(model.eta())) {
      model = previous;
      diverge(step, "step size left the positive range");
    }
    result.train_loss.push_back(lg.loss);
    if (step % cfg.eval_interval == 0 || step == cfg.train_steps) record(step);
  }
  if (!checkpoint.empty()) save_checkpoint(model, checkpoint);
  return result;
}

void write_metrics_tsv(const std::vector<MetricsRecord>& metrics, std::ostream& out) {
  out << "step\tloss\tval_psnr\n";
  const auto old = out.precision(10);
  for (const auto& r : metrics) out << r.step << '\t' << r.loss << '\t' << r.val_psnr << '\n';
  out.precision(old);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "MUSC1";
constexpr int kCheckpointVersion = 1;

void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: truncated file");
    v |= static_cast<std::uint64_t>(c) << (8 * i);
  }
  return v;
}

}  // namespace

template <typename T>
void save_checkpoint(const ModelParams<T>& m, const std::filesystem::path& path) {
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  put_le(out, m.leaves.size(), 4);
  for (const auto& [name, t] : m.leaves) {
    put_le(out, name.size(), 2);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_ntf(out, t);
  }
  KeyValueDoc footer;
  footer.set("format_version", kCheckpointVersion);
  write_model_config(footer, m.config);
  out << footer.to_string();
  if (!out) throw FormatError("checkpoint: write failed: " + path.string());
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  std::string magic(kCheckpointMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic in " + path.string());
  const auto count = get_le(in, 4);
  ModelParams<T> m;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(get_le(in, 2), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (!in) throw FormatError("checkpoint: truncated file");
    if (!m.leaves.emplace(name, read_ntf<T>(in)).second) throw FormatError("checkpoint: duplicate leaf " + name);
  }
  std::ostringstream rest;
  rest << in.rdbuf();
  const auto footer = KeyValueDoc::parse(rest.str());
  if (footer.get_int("format_version", -1) != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version");
  for (const auto& key : model_config_keys())
    if (!footer.has(key)) throw FormatError("checkpoint: footer lacks key '" + key + "'");
  m.config = read_model_config(footer);
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return m;
}

#define MUSC_INSTANTIATE(T)                                                                                     \
  template struct ModelParams<T>;                                                                               \
  template struct EffectiveModel<T>;                                                                            \
  template struct EffectiveGrads<T>;                                                                            \
  template DictionaryParams<T> random_dictionary<T>(const ScaleSpec&, std::uint64_t);                           \
  template ModelParams<T> init_model<T>(const ModelConfig&, std::uint64_t);                                     \
  template ForwardTape<T> forward(const EffectiveModel<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> predict(const ModelParams<T>&, const BasicTensor<T>&, bool);                          \
  template double loss(const ModelParams<T>&, std::span<const Sample<T>>);                                      \
  template EffectiveGrads<T> backward(const EffectiveModel<T>&, const ForwardTape<T>&, const BasicTensor<T>&);  \
  template ParamMap<T> leaf_gradients(const ModelParams<T>&, const EffectiveGrads<T>&);                         \
  template LossAndGrad<T> loss_and_grad(const ModelParams<T>&, std::span<const Sample<T>>, int);                \
  template void adam_step(ModelParams<T>&, const ParamMap<T>&, AdamState<T>&, const OptimizerConfig&);          \
  template void sgd_step(ModelParams<T>&, const ParamMap<T>&, const OptimizerConfig&);                          \
  template EvalResult evaluate(const ModelParams<T>&, const SampleSet<T>&, bool, int);                          \
  template TrainResult<T> train_loop(const TrainConfig&, const SampleSet<T>&, const SampleSet<T>&,              \
                                     const std::filesystem::path&, const MetricsCallback&);                     \
  template void save_checkpoint(const ModelParams<T>&, const std::filesystem::path&);                           \
  template ModelParams<T> load_checkpoint<T>(const std::filesystem::path&);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

template ModelParams<double> cast_model<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_model<float, double>(const ModelParams<double>&);

}  // namespace musc
