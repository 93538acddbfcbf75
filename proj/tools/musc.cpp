// musc command-line tool. Machine-readable TSV goes to stdout, prose to stderr.
// Exit codes: 0 success, 1 usage, 2 runtime failure, 3 selfcheck failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "musc/analysis.hpp"
#include "musc/config.hpp"
#include "musc/parallel.hpp"
#include "musc/selfcheck.hpp"
#include "musc/synthdata.hpp"
#include "musc/train.hpp"

namespace fs = std::filesystem;
using namespace musc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 2;
constexpr int kExitSelfcheck = 3;

bool use_f64() {
  const char* v = std::getenv("MUSC_F64");
  return v != nullptr && std::string(v) == "1";
}

/// A corpus root holds {train,val,test}/ and spec.txt; anything else is taken
/// to be a split directory.
fs::path split_dir(const fs::path& data, const std::string& split) {
  if (fs::exists(data / "spec.txt") && fs::is_directory(data / split)) return data / split;
  return data;
}

Split split_of(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string config;
  std::string out;
  std::string task;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_train, n_val, n_test, image_size;
};

template <typename T>
int cmd_synth(const SynthArgs& a) {
  TaskSpec spec;
  if (!a.config.empty()) {
    const auto doc = KeyValueDoc::load(a.config);
    doc.require_known(task_spec_keys());
    spec = read_task_spec(doc);
  }
  if (!a.task.empty()) spec.task = parse_task(a.task);
  if (a.seed) spec.seed = *a.seed;
  if (a.n_train) spec.n_train = *a.n_train;
  if (a.n_val) spec.n_val = *a.n_val;
  if (a.n_test) spec.n_test = *a.n_test;
  if (a.image_size) spec.image_size = *a.image_size;
  spec.validate();

  const auto corpus = gen_corpus<T>(spec);
  save_corpus(corpus, spec, a.out);
  std::cerr << "wrote " << to_string(spec.task) << " corpus to " << a.out << '\n';
  std::cout << std::setprecision(10) << "split\tcount\tinput_psnr\n";
  for (const auto* set : {&corpus.train, &corpus.val, &corpus.test})
    std::cout << to_string(set->split) << '\t' << set->size() << '\t'
              << (set->empty() ? 0.0 : mean_input_psnr(*set)) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

template <typename T>
int cmd_train(const TrainArgs& a, int threads) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = read_train_config(KeyValueDoc::load(a.config));
  if (a.seed) cfg.seed = *a.seed;
  cfg.threads = threads;
  cfg.validate();

  SampleSet<T> train, val;
  if (!cfg.data_dir.empty()) {
    train = load_sample_set<T>(fs::path(cfg.data_dir) / "train", Split::train);
    val = load_sample_set<T>(fs::path(cfg.data_dir) / "val", Split::val);
    std::cerr << "loaded " << train.size() << " train / " << val.size() << " val samples from " << cfg.data_dir
              << '\n';
  } else {
    auto corpus = gen_corpus<T>(cfg.task);
    train = std::move(corpus.train);
    val = std::move(corpus.val);
    std::cerr << "generated " << train.size() << " train / " << val.size() << " val samples\n";
  }
  std::cerr << "input PSNR (val): " << mean_input_psnr(val) << " dB\n";

  const fs::path out(a.out);
  fs::create_directories(out);
  {
    KeyValueDoc doc;
    write_train_config(doc, cfg);
    std::ofstream(out / "config.txt") << doc.to_string();
  }

  std::cout << std::setprecision(10) << "step\tval_loss\tval_psnr\n" << std::flush;
  const auto log = [](const MetricsRecord& r) {
    std::cout << r.step << '\t' << r.loss << '\t' << r.val_psnr << '\n' << std::flush;
  };
  try {
    const auto result = train_loop<T>(cfg, train, val, out / "model.musc", log);
    std::ofstream metrics(out / "metrics.tsv");
    metrics << std::setprecision(10);
    write_metrics_tsv(result.metrics, metrics);
    std::ofstream losses(out / "train_loss.tsv");
    losses << std::setprecision(17) << "step\tloss\n";
    for (std::size_t i = 0; i < result.train_loss.size(); ++i) losses << i + 1 << '\t' << result.train_loss[i] << '\n';
    std::cerr << "saved " << (out / "model.musc").string() << '\n';
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructArgs {
  std::string model, input, output, pgm;
  bool no_clip = false;
};

template <typename T>
int cmd_reconstruct(const ReconstructArgs& a) {
  const auto m = load_checkpoint<T>(a.model);
  auto z = read_ntf<T>(a.input);
  const Shape want = m.config.spec.image_shape();
  // Accept a bare H x W image for single-channel models.
  if (z.rank() == 2 && want[0] == 1) z = z.reshaped({1, z.dim(0), z.dim(1)});
  if (z.dims() != want) {
    std::ostringstream os;
    os << "input image is " << shape_string(z.dims()) << " but the model expects " << shape_string(want);
    throw std::invalid_argument(os.str());
  }
  const auto y = predict(m, z, !a.no_clip);
  write_ntf(a.output, y);
  if (!a.pgm.empty()) {
    if (y.dim(0) != 1) throw std::invalid_argument("--pgm needs a single-channel model");
    export_pgm(y.reshaped({y.dim(1), y.dim(2)}), a.pgm);
  }
  std::cerr << "wrote " << a.output << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string model, data, split = "val", metrics = "psnr,psnr_fr,nmse";
  bool no_clip = false;
};

template <typename T>
int cmd_eval(const EvalArgs& a, int threads) {
  std::vector<std::string> names;
  std::stringstream ss(a.metrics);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item != "psnr" && item != "psnr_fr" && item != "nmse")
      throw CLI::ValidationError("--metrics", "unknown metric '" + item + "'");
    names.push_back(item);
  }
  if (names.empty()) throw CLI::ValidationError("--metrics", "no metrics requested");

  const auto m = load_checkpoint<T>(a.model);
  const auto set = load_sample_set<T>(split_dir(a.data, a.split), split_of(a.split));
  if (set.empty()) throw std::runtime_error("no samples found under " + a.data);

  std::vector<std::vector<double>> rows(set.size(), std::vector<double>(names.size()));
  std::vector<double> input_psnr(set.size());
  parallel_for(set.size(), threads, [&](std::size_t i) {
    const auto& s = set.samples[i];
    const auto y = predict(m, s.z, !a.no_clip);
    for (std::size_t k = 0; k < names.size(); ++k)
      rows[i][k] = names[k] == "psnr" ? psnr(y, s.x) : names[k] == "psnr_fr" ? psnr_fr(y, s.x) : nmse(y, s.x);
    input_psnr[i] = psnr(s.z, s.x);
  });

  std::cout << std::setprecision(10) << "index";
  for (const auto& n : names) std::cout << '\t' << n;
  std::cout << '\n';
  std::vector<double> mean(names.size(), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::cout << i;
    for (std::size_t k = 0; k < names.size(); ++k) {
      std::cout << '\t' << rows[i][k];
      mean[k] += rows[i][k] / static_cast<double>(rows.size());
    }
    std::cout << '\n';
  }
  std::cout << "mean";
  for (double v : mean) std::cout << '\t' << v;
  std::cout << '\n';

  double base = 0.0;
  for (double v : input_psnr) base += v / static_cast<double>(input_psnr.size());
  std::cerr << set.size() << " samples, input PSNR " << base << " dB\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// atoms / sparsity

struct AtomsArgs {
  std::string model, dict = "encoder", out;
  int scale = -1;
  std::size_t count = 16;
};

template <typename T>
int cmd_atoms(const AtomsArgs& a) {
  const auto m = load_checkpoint<T>(a.model);
  const DictRole role = a.dict == "encoder" ? DictRole::encoder
                        : a.dict == "adjoint" ? DictRole::adjoint
                                              : DictRole::decoder;
  const int scale = a.scale < 0 ? m.config.spec.scales : a.scale;
  if (scale > m.config.spec.scales)
    throw CLI::ValidationError("--scale", "model has scales 0.." + std::to_string(m.config.spec.scales));
  fs::create_directories(a.out);
  const auto entries = atom_grid(m.dictionary(role), scale, a.count, a.out);
  std::cout << std::setprecision(10) << "channel\tnorm\tsupport\tfile\n";
  for (const auto& e : entries)
    std::cout << e.channel << '\t' << e.norm << '\t' << e.support << '\t' << e.file.filename().string() << '\n';
  return kExitOk;
}

struct SparsityArgs {
  std::string model, data, out, split = "val";
};

template <typename T>
int cmd_sparsity(const SparsityArgs& a, int threads) {
  const auto m = load_checkpoint<T>(a.model);
  const auto set = load_sample_set<T>(split_dir(a.data, a.split), split_of(a.split));
  if (set.empty()) throw std::runtime_error("no samples found under " + a.data);
  const auto report = sparsity_profile(m, set, threads);
  std::cout << std::setprecision(10);
  write_sparsity_tsv(report, std::cout);
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    f << std::setprecision(10);
    write_sparsity_tsv(report, f);
    if (!f) throw std::runtime_error("cannot write " + a.out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck

struct SelfcheckArgs {
  std::string level = "full", model, data, only;
};

int cmd_selfcheck(const SelfcheckArgs& a, int threads) {
  selfcheck::Options opts;
  opts.level = a.level == "quick" ? selfcheck::Level::quick : selfcheck::Level::full;
  opts.model = a.model;
  opts.data = a.data;
  opts.threads = threads;
  opts.f64 = use_f64();
  bool ok = true;
  const auto report = [&](const selfcheck::Result& r) {
    selfcheck::print(r, std::cout);
    std::cout << std::flush;
    ok = ok && r.pass;
  };
  if (!a.only.empty())
    report(selfcheck::run(a.only, opts));
  else
    selfcheck::run_all(opts, report);
  std::cerr << (ok ? "all checks passed" : "some checks FAILED") << '\n';
  return ok ? kExitOk : kExitSelfcheck;
}

template <typename Fn>
int dispatch(Fn&& fn) {
  return use_f64() ? fn(double{}) : fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale convolutional dictionaries trained by unrolled sparse coding"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  c_synth->add_option("--config", synth.config, "key=value file with task keys")->check(CLI::ExistingFile);
  c_synth->add_option("--task", synth.task, "streaks | gauss | blur");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--n-train", synth.n_train)->check(CLI::PositiveNumber);
  c_synth->add_option("--n-val", synth.n_val)->check(CLI::PositiveNumber);
  c_synth->add_option("--n-test", synth.n_test)->check(CLI::PositiveNumber);
  c_synth->add_option("--image-size", synth.image_size)->check(CLI::PositiveNumber);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", train.config, "key=value training config")->check(CLI::ExistingFile);
  c_train->add_option("--out", train.out, "Output directory (model.musc, metrics.tsv, ...)")->required();
  c_train->add_option("--seed", train.seed, "Overrides the config seed");

  ReconstructArgs recon;
  auto* c_recon = app.add_subcommand("reconstruct", "Run a model on one NTF image");
  c_recon->add_option("--model", recon.model)->required()->check(CLI::ExistingFile);
  c_recon->add_option("--input", recon.input)->required()->check(CLI::ExistingFile);
  c_recon->add_option("--output", recon.output)->required();
  c_recon->add_option("--pgm", recon.pgm, "Also write a PGM preview");
  c_recon->add_flag("--no-clip", recon.no_clip, "Keep negative output values");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Per-sample metrics on a corpus split");
  c_eval->add_option("--model", eval.model)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", eval.data, "Corpus or split directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--split", eval.split)->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_option("--metrics", eval.metrics, "Comma-separated: psnr,psnr_fr,nmse");
  c_eval->add_flag("--no-clip", eval.no_clip);

  AtomsArgs atoms;
  auto* c_atoms = app.add_subcommand("atoms", "Export dictionary atoms as PGM");
  c_atoms->add_option("--model", atoms.model)->required()->check(CLI::ExistingFile);
  c_atoms->add_option("--dict", atoms.dict)->check(CLI::IsMember({"encoder", "adjoint", "decoder"}));
  c_atoms->add_option("--scale", atoms.scale, "Code scale (default: finest)");
  c_atoms->add_option("--count", atoms.count);
  c_atoms->add_option("--out", atoms.out)->required();

  SparsityArgs sparsity;
  auto* c_sparsity = app.add_subcommand("sparsity", "Code density per scale");
  c_sparsity->add_option("--model", sparsity.model)->required()->check(CLI::ExistingFile);
  c_sparsity->add_option("--data", sparsity.data)->required()->check(CLI::ExistingDirectory);
  c_sparsity->add_option("--split", sparsity.split)->check(CLI::IsMember({"train", "val", "test"}));
  c_sparsity->add_option("--out", sparsity.out, "Also write the TSV here");

  SelfcheckArgs check;
  auto* c_check = app.add_subcommand("selfcheck", "Run the verification suite");
  c_check->add_option("--level", check.level)->check(CLI::IsMember({"quick", "full"}));
  c_check->add_option("--model", check.model, "Trained checkpoint for the density probe")->check(CLI::ExistingFile);
  c_check->add_option("--data", check.data, "Corpus for the density probe")->check(CLI::ExistingDirectory);
  c_check->add_option("--only", check.only, "Run a single check")->check(CLI::IsMember(selfcheck::check_ids()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : 1;
  }

  try {
    if (*c_synth) return dispatch([&](auto t) { return cmd_synth<decltype(t)>(synth); });
    if (*c_train) return dispatch([&](auto t) { return cmd_train<decltype(t)>(train, threads); });
    if (*c_recon) return dispatch([&](auto t) { return cmd_reconstruct<decltype(t)>(recon); });
    if (*c_eval) return dispatch([&](auto t) { return cmd_eval<decltype(t)>(eval, threads); });
    if (*c_atoms) return dispatch([&](auto t) { return cmd_atoms<decltype(t)>(atoms); });
    if (*c_sparsity) return dispatch([&](auto t) { return cmd_sparsity<decltype(t)>(sparsity, threads); });
    if (*c_check) return cmd_selfcheck(check, threads);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 1;
}
