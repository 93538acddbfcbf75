#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "loop_oracles.hpp"
#include "musc/analysis.hpp"
#include "musc/rng.hpp"
#include "test_util.hpp"

using namespace musc;

namespace {

ScaleSpec spec_of(int scales, int channels, int size) {
  ScaleSpec s;
  s.scales = scales;
  s.channels = channels;
  s.height = size;
  s.width = size;
  return s;
}

std::size_t flat_index(const ScaleSpec& spec, const IndicatorCode& at) {
  std::size_t off = 0;
  for (int s = 0; s < at.scale; ++s) off += shape_product(spec.code_shape(s));
  return off + (at.channel * spec.code_height(at.scale) + at.row) * spec.code_width(at.scale) + at.col;
}

template <typename T>
DictionaryParams<T> abs_plus_one(DictionaryParams<T> d) {
  for (auto& [name, k] : d.named_kernels())
    for (auto& v : k->values()) v = std::abs(v) + 1;
  return d;
}

}  // namespace

TEST_CASE("indicator codes") {
  const auto spec = spec_of(2, 8, 4);
  const IndicatorCode at{1, 3, 2, 5};
  const auto code = make_indicator<double>(spec, at);
  CHECK(squared_norm(code) == 1.0);
  CHECK(code.parts[1].at(3, 2, 5) == 1.0);
  const auto c = center_indicator(spec, 2, 1);
  CHECK(c.row == 8);
  CHECK(c.col == 8);
  CHECK_THROWS(make_indicator<double>(spec, {3, 0, 0, 0}));
  CHECK_THROWS(make_indicator<double>(spec, {0, 8, 0, 0}));
  CHECK_THROWS(make_indicator<double>(spec, {0, 0, 4, 0}));
}

TEST_CASE("atoms equal columns of the materialized dictionary") {
  const auto spec = spec_of(2, 4, 2);
  const auto d = random_dictionary<double>(spec, 3);
  const auto m = materialize(d);
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    IndicatorCode at;
    at.scale = static_cast<int>(rng.next_u64() % 3);
    at.channel = rng.next_u64() % spec.code_channels(at.scale);
    at.row = rng.next_u64() % spec.code_height(at.scale);
    at.col = rng.next_u64() % spec.code_width(at.scale);
    const auto img = MultiscaleDictionary<double>(d).apply(make_indicator<double>(spec, at));
    const std::size_t j = flat_index(spec, at);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(img[i] == m.at(i, j));

    const auto atom = extract_atom(d, at);
    double norm = 0.0;
    for (std::size_t i = 0; i < m.dim(0); ++i) norm += m.at(i, j) * m.at(i, j);
    CHECK(atom.norm == doctest::Approx(std::sqrt(norm)).epsilon(1e-12));
  }
}

TEST_CASE("atom support matches reachability") {
  const auto spec = spec_of(2, 4, 4);
  const auto d = random_dictionary<double>(spec, 5);
  const auto reach = abs_plus_one(d);
  for (int scale = 0; scale <= spec.scales; ++scale) {
    for (const auto& at : {center_indicator(spec, scale, 0), IndicatorCode{scale, spec.code_channels(scale) - 1, 0, 0}}) {
      // With strictly positive kernels nothing cancels, so the nonzero set is the reachable set.
      const auto img = oracle_loops::dict_apply(reach, make_indicator<double>(spec, at));
      std::size_t top = img.dim(1), left = img.dim(2), bottom = 0, right = 0;
      for (std::size_t i = 0; i < img.dim(1); ++i)
        for (std::size_t j = 0; j < img.dim(2); ++j)
          if (img.at(0, i, j) != 0.0) {
            top = std::min(top, i), left = std::min(left, j);
            bottom = std::max(bottom, i), right = std::max(right, j);
          }
      const auto atom = extract_atom(d, at);
      CHECK(atom.top == top);
      CHECK(atom.left == left);
      CHECK(atom.box_height == bottom - top + 1);
      CHECK(atom.box_width == right - left + 1);
      CHECK(atom.support == std::max(atom.box_height, atom.box_width));
      CHECK(atom.image.dims() == Shape{1, atom.box_height, atom.box_width});
    }
  }
}

TEST_CASE("finest atoms fit in 3x3 and supports grow toward coarse scales") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto spec = spec_of(3, 16, 4);
    const auto d = random_dictionary<float>(spec, seed);
    for (std::size_t c = 0; c < spec.code_channels(spec.scales); ++c)
      CHECK(extract_atom(d, center_indicator(spec, spec.scales, c)).support <= 3);
    std::size_t finer = 0;
    for (int s = spec.scales; s >= 0; --s) {
      const auto sup = extract_atom(d, center_indicator(spec, s, 0)).support;
      CHECK(sup >= finer);
      finer = sup;
    }
  }
}

TEST_CASE("vanishing atoms") {
  const auto spec = spec_of(2, 4, 4);
  const auto zero = DictionaryParams<double>::zeros(spec);
  const auto atom = extract_atom(zero, center_indicator(spec, 0, 0));
  CHECK(atom.support == 0);
  CHECK(atom.norm == 0.0);
  CHECK(atom.image.dims() == Shape{1, 1, 1});
}

TEST_CASE("atom grid output") {
  test_util::TempDir dir;
  const auto spec = spec_of(2, 8, 4);
  const auto d = random_dictionary<float>(spec, 6);
  CHECK(atom_grid(d, 1, 0, dir.path).size() == 4);
  CHECK(std::filesystem::is_empty(dir.path));

  const auto grid = atom_grid(d, 1, 3, dir.path);
  REQUIRE(grid.size() == 4);
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i - 1].norm >= grid[i].norm);
  std::size_t files = 0;
  for (const auto& e : grid) {
    if (e.file.empty()) continue;
    ++files;
    CHECK(e.file.filename() == "atom_s1_c" + std::to_string(e.channel) + ".pgm");
    CHECK(std::filesystem::exists(e.file));
    CHECK(test_util::slurp(e.file).starts_with("P5\n"));
  }
  CHECK(files == 3);
  CHECK(grid.back().file.empty());
  CHECK_THROWS(atom_grid(d, 1, 5, dir.path));
  CHECK_THROWS(atom_grid(d, 3, 1, dir.path));
}

TEST_CASE("code density") {
  ModelConfig cfg;
  cfg.spec = spec_of(2, 8, 4);
  cfg.steps = 3;
  TaskSpec task;
  task.image_size = 16;
  task.n_train = 1;
  task.n_val = 6;
  task.n_test = 1;
  const auto val = gen_corpus<float>(task).val;

  cfg.init_lambda = 1e6;
  const auto dead = sparsity_profile(init_model<float>(cfg, 1), val);
  REQUIRE(dead.density.size() == 3);
  for (double v : dead.density) CHECK(v == 0.0);
  CHECK(dead.overall == 0.0);

  cfg.init_lambda = 0.001;
  cfg.mode = ShrinkMode::signed_soft;
  auto open = init_model<float>(cfg, 1);
  for (auto& [name, leaf] : open.leaves)
    if (name.starts_with("lambda.")) leaf.fill(-1.0f);  // effective threshold at the floor
  const auto dense = sparsity_profile(open, val);
  for (double v : dense.density) CHECK(v >= 0.95);
  CHECK(dense.overall >= 0.95);
  CHECK(dense.overall <= 1.0);

  const auto again = sparsity_profile(open, val, 3);
  CHECK(again.density == dense.density);
  CHECK_THROWS(sparsity_profile(open, SampleSet<float>{}));

  std::ostringstream tsv;
  write_sparsity_tsv(dense, tsv);
  const auto text = tsv.str();
  CHECK(text.starts_with("scale\tdensity\n0\t"));
  CHECK(text.find("\nall\t") != std::string::npos);
}

TEST_CASE("density of explicit codes") {
  MultiscaleCode<double> a, b;
  a.parts = {TensorD({1, 2, 2}, std::vector<double>{1, 0, 0, 0}), TensorD({1, 1, 2}, std::vector<double>{1, 1})};
  b.parts = {TensorD({1, 2, 2}, std::vector<double>{1, 1, 1, 1e-9}), TensorD({1, 1, 2}, std::vector<double>{0, 0})};
  const auto r = sparsity_of<double>({a, b});
  CHECK(r.density[0] == doctest::Approx(0.5));
  CHECK(r.density[1] == doctest::Approx(0.5));
  CHECK(r.overall == doctest::Approx(0.5));
}
