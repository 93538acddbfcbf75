#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "musc/config.hpp"
#include "musc/linops.hpp"
#include "musc/sparse_coding.hpp"
#include "musc/synthdata.hpp"

namespace musc {

/// Lower bound added to relu(lambda_raw) so thresholds stay positive.
inline constexpr double kLambdaFloor = 1e-5;

struct ModelConfig {
  ScaleSpec spec;
  int steps = 5;  // unrolling depth K
  ShrinkMode mode = ShrinkMode::nonneg;
  bool tie_dicts = false;
  bool learn_lambda = true;
  bool learn_eta = true;
  bool weight_norm = true;
  double init_lambda = 0.001;  // effective threshold at initialization
  int power_iters = 50;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

const std::set<std::string>& model_config_keys();
void write_model_config(KeyValueDoc& doc, const ModelConfig& cfg);
ModelConfig read_model_config(const KeyValueDoc& doc, ModelConfig base = {});

template <typename T>
using ParamMap = std::map<std::string, BasicTensor<T>>;

enum class DictRole { encoder, adjoint, decoder };

/// Leaf prefix of a role: "enc", "adj", "dec"; all map to "enc" when tied.
std::string dict_prefix(DictRole role, bool tied);

/// Learnable leaves of a model, keyed by name:
///   {enc,adj,dec}.{bottom,up<i>,merge<i>,head}     plain kernels
///   {enc,adj,dec}.<kernel>.dir / .gain             with weight normalization
///   lambda.s<i>   (K, C_i) raw thresholds; effective = relu(raw) + kLambdaFloor
///   eta           (1) step size
template <typename T>
struct ModelParams {
  ModelConfig config;
  ParamMap<T> leaves;

  /// Effective kernels of one role (weight normalization resolved).
  DictionaryParams<T> dictionary(DictRole role) const;
  /// Effective thresholds, one ChannelWeights per step.
  Thresholds<T> thresholds() const;
  T eta() const;
  bool is_learnable(const std::string& leaf) const;
  /// Expected leaf names and shapes for `config`.
  static std::map<std::string, Shape> leaf_shapes(const ModelConfig& config);
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Gaussian kernels with std 1/sqrt(9 * in_channels).
template <typename T>
DictionaryParams<T> random_dictionary(const ScaleSpec& spec, std::uint64_t seed);

/// Random encoder kernels (std 1/sqrt(9 * in_channels)), adjoint and
/// decoder copied from it, thresholds at init_lambda, step size from power
/// iteration on the encoder.
template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Resolved operators used by forward and backward.
template <typename T>
struct EffectiveModel {
  explicit EffectiveModel(const ModelParams<T>& m);

  MultiscaleDictionary<T> encoder;
  MultiscaleDictionary<T> adjoint;
  MultiscaleDictionary<T> decoder;
  Thresholds<T> lambda;
  T eta;
  ShrinkMode mode;
  std::uint64_t id;  // identifies the parameter snapshot that produced a tape
};

template <typename T>
struct ForwardTape {
  std::uint64_t model_id = 0;
  BasicTensor<T> input;
  std::vector<ShrinkTrace<T>> steps;
  MultiscaleCode<T> code;
  BasicTensor<T> prediction;
};

template <typename T>
ForwardTape<T> forward(const EffectiveModel<T>& m, const BasicTensor<T>& z);

/// Prediction D alpha_z; optionally clipped at 0 from below.
template <typename T>
BasicTensor<T> predict(const ModelParams<T>& m, const BasicTensor<T>& z, bool clip_negative = false);

/// (1 / 2M) sum_i ||D alpha_{z_i} - x_i||^2
template <typename T>
double loss(const ModelParams<T>& m, std::span<const Sample<T>> batch);

/// Gradients with respect to the effective operators and thresholds.
template <typename T>
struct EffectiveGrads {
  DictionaryParams<T> encoder;
  DictionaryParams<T> adjoint;
  DictionaryParams<T> decoder;
  Thresholds<T> lambda;
  double eta = 0.0;

  static EffectiveGrads zeros(const EffectiveModel<T>& m);
  EffectiveGrads& operator+=(const EffectiveGrads& other);
};

class StaleTapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Reverse pass through one tape for the cotangent d loss / d prediction.
template <typename T>
EffectiveGrads<T> backward(const EffectiveModel<T>& m, const ForwardTape<T>& tape, const BasicTensor<T>& cotangent);

/// Chain rule from effective quantities to leaves. Frozen leaves get zeros.
template <typename T>
ParamMap<T> leaf_gradients(const ModelParams<T>& m, const EffectiveGrads<T>& g);

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  ParamMap<T> grads;
};

/// Per-sample passes may run on `threads` workers; sample gradients are summed
/// in index order so the result does not depend on the thread count.
template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& m, std::span<const Sample<T>> batch, int threads = 1);

// Optimization.

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

template <typename T>
struct AdamState {
  ParamMap<T> m;
  ParamMap<T> v;
  long step = 0;
};

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam update of the learnable leaves.
template <typename T>
void adam_step(ModelParams<T>& m, const ParamMap<T>& grads, AdamState<T>& state, const OptimizerConfig& cfg);
template <typename T>
void sgd_step(ModelParams<T>& m, const ParamMap<T>& grads, const OptimizerConfig& cfg);

// Training.

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  TaskSpec task;
  std::string data_dir;  // corpus directory; empty generates from `task`
  int batch_size = 16;
  int train_steps = 2000;
  int eval_interval = 100;
  std::uint64_t seed = 0;
  int threads = 1;
  bool clip_eval = true;

  void validate() const;
};

/// Keys accepted in a training config file.
const std::set<std::string>& train_config_keys();
void write_train_config(KeyValueDoc& doc, const TrainConfig& cfg);
/// Rejects unknown keys.
TrainConfig read_train_config(const KeyValueDoc& doc, TrainConfig base = {});

struct MetricsRecord {
  int step = 0;
  double loss = 0.0;      // validation loss
  double val_psnr = 0.0;  // mean PSNR of clipped predictions on the validation split
};

struct EvalResult {
  double loss = 0.0;
  double psnr = 0.0;
};

template <typename T>
EvalResult evaluate(const ModelParams<T>& m, const SampleSet<T>& set, bool clip_negative = true, int threads = 1);

template <typename T>
struct TrainResult {
  ModelParams<T> model;
  std::vector<MetricsRecord> metrics;
  std::vector<double> train_loss;  // batch loss at every step
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Called after each evaluation.
using MetricsCallback = std::function<void(const MetricsRecord&)>;

/// Deterministic given cfg.seed. Evaluates at step 0, every eval_interval
/// steps and after the last step. On a non-finite loss or gradient the last
/// good model is written to `checkpoint` (when given) and DivergenceError is
/// thrown.
template <typename T>
TrainResult<T> train_loop(const TrainConfig& cfg, const SampleSet<T>& train, const SampleSet<T>& val,
                          const std::filesystem::path& checkpoint = {}, const MetricsCallback& on_eval = {});

void write_metrics_tsv(const std::vector<MetricsRecord>& metrics, std::ostream& out);

// Checkpoints: "MUSC1", u32 count, per leaf (u16 name length, name, NTF
// tensor), then key=value footer lines. Tensors are stored as f32.

template <typename T>
void save_checkpoint(const ModelParams<T>& m, const std::filesystem::path& path);
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path);

template <typename U, typename T>
ModelParams<U> cast_model(const ModelParams<T>& m);

}  // namespace musc
