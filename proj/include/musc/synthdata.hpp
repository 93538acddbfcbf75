#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "musc/config.hpp"
#include "musc/tensor.hpp"

namespace musc {

enum class Task { streaks, gauss, blur };

std::string to_string(Task task);
Task parse_task(const std::string& text);

enum class Split : std::uint64_t { train = 1, val = 2, test = 3 };

std::string to_string(Split split);

/// Synthetic corruption task. Each split draws from its own seed stream.
struct TaskSpec {
  Task task = Task::streaks;
  int image_size = 32;
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  std::uint64_t seed = 0;

  // streaks: z = x + s, s made of oriented line segments
  int streak_count = 6;
  double streak_min_length = 0.4;  // fraction of image_size
  double streak_max_length = 1.0;
  double streak_intensity = 0.5;

  // gauss: z = x + N(0, sigma^2)
  double noise_sigma = 0.1;

  // blur: Gaussian blur, then bilinear down/up sampling by `downscale`
  double blur_sigma = 1.0;
  int downscale = 2;

  void validate() const;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// Keys used by TaskSpec inside key=value documents.
const std::set<std::string>& task_spec_keys();
void write_task_spec(KeyValueDoc& doc, const TaskSpec& spec);
/// Reads TaskSpec keys present in `doc`, keeping `base` values for the rest.
TaskSpec read_task_spec(const KeyValueDoc& doc, TaskSpec base = {});

template <typename T>
struct Sample {
  BasicTensor<T> z;  // corrupted input, 1 x H x W
  BasicTensor<T> x;  // clean target, 1 x H x W, values in [0, 1]
};

template <typename T>
struct SampleSet {
  Split split = Split::train;
  std::vector<Sample<T>> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

template <typename T>
struct Corpus {
  SampleSet<T> train;
  SampleSet<T> val;
  SampleSet<T> test;
};

/// Clean image: smooth Gaussian blobs plus piecewise-constant rectangles, clipped to [0, 1].
template <typename T>
BasicTensor<T> clean_image(const TaskSpec& spec, std::uint64_t seed);

/// Pure function of (spec, split, index).
template <typename T>
Sample<T> gen_sample(const TaskSpec& spec, Split split, std::size_t index);

template <typename T>
Corpus<T> gen_corpus(const TaskSpec& spec);

/// 10 log10(range^2 / MSE) with range = max(ref) - min(ref).
/// Returns +inf when the images are identical; throws for a constant reference.
template <typename T>
double psnr(const BasicTensor<T>& estimate, const BasicTensor<T>& reference);

/// 10 log10(1 / MSE).
template <typename T>
double psnr_fr(const BasicTensor<T>& estimate, const BasicTensor<T>& reference);

/// ||estimate - reference||^2 / ||reference||^2.
template <typename T>
double nmse(const BasicTensor<T>& estimate, const BasicTensor<T>& reference);

/// Mean psnr(z, x) over a split: the input-PSNR baseline.
template <typename T>
double mean_input_psnr(const SampleSet<T>& set);

/// Writes {dir}/{split}/{idx}_z.ntf, {idx}_x.ntf and {dir}/spec.txt. The spec
/// file records the validation input-PSNR baseline as `input_psnr_val`.
template <typename T>
void save_corpus(const Corpus<T>& corpus, const TaskSpec& spec, const std::filesystem::path& dir);

/// Reads the pairs in one split directory, ordered by index.
template <typename T>
SampleSet<T> load_sample_set(const std::filesystem::path& split_dir, Split split = Split::train);

}  // namespace musc
