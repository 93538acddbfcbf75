#include "musc/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "musc/rng.hpp"

namespace musc {

std::string to_string(Task task) {
  switch (task) {
    case Task::streaks: return "streaks";
    case Task::gauss: return "gauss";
    case Task::blur: return "blur";
  }
  return "?";
}

Task parse_task(const std::string& text) {
  if (text == "streaks") return Task::streaks;
  if (text == "gauss") return Task::gauss;
  if (text == "blur") return Task::blur;
  throw std::invalid_argument("unknown task '" + text + "' (expected streaks|gauss|blur)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void TaskSpec::validate() const {
  if (image_size < 4) throw std::invalid_argument("TaskSpec: image_size must be >= 4");
  if (n_train < 1 || n_val < 1 || n_test < 1) throw std::invalid_argument("TaskSpec: split sizes must be >= 1");
  if (streak_count < 0) throw std::invalid_argument("TaskSpec: streak_count must be >= 0");
  if (!(streak_min_length > 0) || streak_max_length < streak_min_length)
    throw std::invalid_argument("TaskSpec: invalid streak length range");
  if (!(streak_intensity >= 0)) throw std::invalid_argument("TaskSpec: streak_intensity must be >= 0");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("TaskSpec: noise_sigma must be >= 0");
  if (!(blur_sigma > 0)) throw std::invalid_argument("TaskSpec: blur_sigma must be > 0");
  if (downscale < 1 || image_size % downscale != 0)
    throw std::invalid_argument("TaskSpec: downscale must be >= 1 and divide image_size");
}

const std::set<std::string>& task_spec_keys() {
  static const std::set<std::string> keys{"task",          "image_size",        "n_train",
                                          "n_val",         "n_test",            "seed",
                                          "streak_count",  "streak_min_length", "streak_max_length",
                                          "streak_intensity", "noise_sigma",    "blur_sigma",
                                          "downscale"};
  return keys;
}

void write_task_spec(KeyValueDoc& doc, const TaskSpec& s) {
  doc.set("task", to_string(s.task));
  doc.set("image_size", s.image_size);
  doc.set("n_train", s.n_train);
  doc.set("n_val", s.n_val);
  doc.set("n_test", s.n_test);
  doc.set("seed", s.seed);
  doc.set("streak_count", s.streak_count);
  doc.set("streak_min_length", s.streak_min_length);
  doc.set("streak_max_length", s.streak_max_length);
  doc.set("streak_intensity", s.streak_intensity);
  doc.set("noise_sigma", s.noise_sigma);
  doc.set("blur_sigma", s.blur_sigma);
  doc.set("downscale", s.downscale);
}

TaskSpec read_task_spec(const KeyValueDoc& doc, TaskSpec s) {
  s.task = parse_task(doc.get_string("task", to_string(s.task)));
  s.image_size = doc.get_int("image_size", s.image_size);
  s.n_train = doc.get_int("n_train", s.n_train);
  s.n_val = doc.get_int("n_val", s.n_val);
  s.n_test = doc.get_int("n_test", s.n_test);
  s.seed = doc.get_u64("seed", s.seed);
  s.streak_count = doc.get_int("streak_count", s.streak_count);
  s.streak_min_length = doc.get_double("streak_min_length", s.streak_min_length);
  s.streak_max_length = doc.get_double("streak_max_length", s.streak_max_length);
  s.streak_intensity = doc.get_double("streak_intensity", s.streak_intensity);
  s.noise_sigma = doc.get_double("noise_sigma", s.noise_sigma);
  s.blur_sigma = doc.get_double("blur_sigma", s.blur_sigma);
  s.downscale = doc.get_int("downscale", s.downscale);
  s.validate();
  return s;
}

namespace {

using Plane = std::vector<double>;

void add_streaks(Plane& img, int n, const TaskSpec& spec, Rng& rng) {
  if (spec.streak_count == 0) return;
  Plane s(img.size(), 0.0);
  const double base_angle = rng.uniform(0.0, std::numbers::pi);
  for (int k = 0; k < spec.streak_count; ++k) {
    const double angle = base_angle + rng.uniform(-0.15, 0.15);
    const double length = rng.uniform(spec.streak_min_length, spec.streak_max_length) * n;
    const double cy = rng.uniform(0.0, n), cx = rng.uniform(0.0, n);
    const double intensity = spec.streak_intensity * rng.uniform(0.6, 1.0);
    const double dy = std::sin(angle), dx = std::cos(angle);
    const int samples = static_cast<int>(std::ceil(2.0 * length)) + 1;
    for (int t = 0; t < samples; ++t) {
      const double u = -0.5 * length + length * t / (samples - 1);
      const long r = std::lround(cy + u * dy - 0.5);
      const long c = std::lround(cx + u * dx - 0.5);
      if (r < 0 || c < 0 || r >= n || c >= n) continue;
      double& px = s[static_cast<std::size_t>(r * n + c)];
      px = std::max(px, intensity);
    }
  }
  for (std::size_t i = 0; i < img.size(); ++i) img[i] += s[i];
}

Plane gaussian_blur(const Plane& img, int n, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  auto clampi = [n](int i) { return std::clamp(i, 0, n - 1); };
  Plane tmp(img.size()), out(img.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * img[r * n + clampi(c + i)];
      tmp[r * n + c] = s;
    }
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[clampi(r + i) * n + c];
      out[r * n + c] = s;
    }
  return out;
}

// Bilinear resampling between square grids, pixel-center aligned, edge clamped.
Plane bilinear_resize(const Plane& img, int n_in, int n_out) {
  Plane out(static_cast<std::size_t>(n_out) * n_out);
  const double scale = static_cast<double>(n_in) / n_out;
  auto coord = [&](int i) {
    const double p = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
    const int i0 = std::min(static_cast<int>(p), n_in - 1);
    const int i1 = std::min(i0 + 1, n_in - 1);
    return std::tuple{i0, i1, p - i0};
  };
  for (int r = 0; r < n_out; ++r) {
    const auto [r0, r1, fr] = coord(r);
    for (int c = 0; c < n_out; ++c) {
      const auto [c0, c1, fc] = coord(c);
      const double top = (1 - fc) * img[r0 * n_in + c0] + fc * img[r0 * n_in + c1];
      const double bot = (1 - fc) * img[r1 * n_in + c0] + fc * img[r1 * n_in + c1];
      out[r * n_out + c] = (1 - fr) * top + fr * bot;
    }
  }
  return out;
}

Plane clean_plane(const TaskSpec& spec, Rng rng) {
  const int n = spec.image_size;
  Plane img(static_cast<std::size_t>(n) * n, rng.uniform(0.1, 0.5));
  const int blobs = 2 + static_cast<int>(rng.below(4));
  for (int b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.0, n), cx = rng.uniform(0.0, n);
    const double sigma = rng.uniform(0.08, 0.3) * n;
    const double amp = rng.uniform(-0.4, 0.6);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const double d2 = (r + 0.5 - cy) * (r + 0.5 - cy) + (c + 0.5 - cx) * (c + 0.5 - cx);
        img[r * n + c] += amp * std::exp(-0.5 * d2 / (sigma * sigma));
      }
  }
  const int rects = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < rects; ++k) {
    const int h = std::max(1, static_cast<int>(rng.uniform(0.15, 0.6) * n));
    const int w = std::max(1, static_cast<int>(rng.uniform(0.15, 0.6) * n));
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - h + 1)));
    const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - w + 1)));
    const double offset = rng.uniform(-0.3, 0.4);
    for (int r = top; r < top + h; ++r)
      for (int c = left; c < left + w; ++c) img[r * n + c] += offset;
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

template <typename T>
BasicTensor<T> to_tensor(const Plane& p, int n) {
  BasicTensor<T> t({1, static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
  for (std::size_t i = 0; i < p.size(); ++i) t[i] = static_cast<T>(p[i]);
  return t;
}

template <typename T>
double mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.dims(), b.dims(), "metric");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

template <typename T>
BasicTensor<T> clean_image(const TaskSpec& spec, std::uint64_t seed) {
  return to_tensor<T>(clean_plane(spec, Rng(seed)), spec.image_size);
}

template <typename T>
Sample<T> gen_sample(const TaskSpec& spec, Split split, std::size_t index) {
  spec.validate();
  const Rng stream = Rng(spec.seed).fork(static_cast<std::uint64_t>(split)).fork(index);
  const int n = spec.image_size;
  const Plane x = clean_plane(spec, stream.fork(1));
  Rng noise = stream.fork(2);
  Plane z = x;
  switch (spec.task) {
    case Task::streaks:
      add_streaks(z, n, spec, noise);
      break;
    case Task::gauss:
      if (spec.noise_sigma > 0)
        for (auto& v : z) v += spec.noise_sigma * noise.normal();
      break;
    case Task::blur: {
      const Plane blurred = gaussian_blur(x, n, spec.blur_sigma);
      const int low = n / spec.downscale;
      z = bilinear_resize(bilinear_resize(blurred, n, low), low, n);
      break;
    }
  }
  return {to_tensor<T>(z, n), to_tensor<T>(x, n)};
}

template <typename T>
Corpus<T> gen_corpus(const TaskSpec& spec) {
  spec.validate();
  Corpus<T> corpus;
  auto fill = [&](SampleSet<T>& set, Split split, int count) {
    set.split = split;
    set.samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) set.samples.push_back(gen_sample<T>(spec, split, static_cast<std::size_t>(i)));
  };
  fill(corpus.train, Split::train, spec.n_train);
  fill(corpus.val, Split::val, spec.n_val);
  fill(corpus.test, Split::test, spec.n_test);
  return corpus;
}

template <typename T>
double psnr(const BasicTensor<T>& estimate, const BasicTensor<T>& reference) {
  const auto [lo, hi] = std::minmax_element(reference.values().begin(), reference.values().end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0)) throw std::invalid_argument("psnr: reference image is constant");
  const double m = mse(estimate, reference);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / m);
}

template <typename T>
double psnr_fr(const BasicTensor<T>& estimate, const BasicTensor<T>& reference) {
  const double m = mse(estimate, reference);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

template <typename T>
double nmse(const BasicTensor<T>& estimate, const BasicTensor<T>& reference) {
  const double ref = squared_norm(reference);
  if (ref == 0.0) throw std::invalid_argument("nmse: zero reference");
  return mse(estimate, reference) * static_cast<double>(reference.size()) / ref;
}

template <typename T>
double mean_input_psnr(const SampleSet<T>& set) {
  if (set.empty()) throw std::invalid_argument("mean_input_psnr: empty set");
  double s = 0.0;
  for (const auto& smp : set.samples) s += psnr(smp.z, smp.x);
  return s / static_cast<double>(set.size());
}

template <typename T>
void save_corpus(const Corpus<T>& corpus, const TaskSpec& spec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const auto* set : {&corpus.train, &corpus.val, &corpus.test}) {
    const fs::path sub = dir / to_string(set->split);
    fs::create_directories(sub);
    for (std::size_t i = 0; i < set->size(); ++i) {
      write_ntf(sub / (std::to_string(i) + "_z.ntf"), set->samples[i].z);
      write_ntf(sub / (std::to_string(i) + "_x.ntf"), set->samples[i].x);
    }
  }
  KeyValueDoc doc;
  write_task_spec(doc, spec);
  if (!corpus.val.empty()) doc.set("input_psnr_val", mean_input_psnr(corpus.val));
  if (!corpus.train.empty()) doc.set("input_psnr_train", mean_input_psnr(corpus.train));
  std::ofstream out(dir / "spec.txt");
  if (!out) throw FormatError("cannot write " + (dir / "spec.txt").string());
  out << doc.to_string();
}

template <typename T>
SampleSet<T> load_sample_set(const std::filesystem::path& split_dir, Split split) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(split_dir)) throw FormatError("not a sample directory: " + split_dir.string());
  SampleSet<T> set;
  set.split = split;
  for (std::size_t i = 0;; ++i) {
    const auto zp = split_dir / (std::to_string(i) + "_z.ntf");
    const auto xp = split_dir / (std::to_string(i) + "_x.ntf");
    if (!fs::exists(zp) && !fs::exists(xp)) break;
    if (!fs::exists(zp) || !fs::exists(xp)) throw FormatError("incomplete pair " + std::to_string(i) + " in " + split_dir.string());
    Sample<T> s{read_ntf<T>(zp), read_ntf<T>(xp)};
    require_same_shape(s.z.dims(), s.x.dims(), "sample pair");
    set.samples.push_back(std::move(s));
  }
  if (set.empty()) throw FormatError("no samples found in " + split_dir.string());
  return set;
}

#define MUSC_INSTANTIATE(T)                                                                            \
  template BasicTensor<T> clean_image<T>(const TaskSpec&, std::uint64_t);                             \
  template Sample<T> gen_sample<T>(const TaskSpec&, Split, std::size_t);                              \
  template Corpus<T> gen_corpus<T>(const TaskSpec&);                                                  \
  template double psnr(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template double psnr_fr(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template double nmse(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template double mean_input_psnr(const SampleSet<T>&);                                               \
  template void save_corpus(const Corpus<T>&, const TaskSpec&, const std::filesystem::path&);         \
  template SampleSet<T> load_sample_set<T>(const std::filesystem::path&, Split);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

}  // namespace musc
