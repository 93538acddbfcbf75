#pragma once

#include <filesystem>
#include <ostream>
#include <vector>

#include "musc/linops.hpp"
#include "musc/synthdata.hpp"
#include "musc/train.hpp"

namespace musc {

/// Threshold for "nonzero" in atom cropping and sparsity counts.
inline constexpr double kNonzeroEps = 1e-8;

/// A code that is 1 at (scale, channel, row, col) and 0 elsewhere.
struct IndicatorCode {
  int scale = 0;
  std::size_t channel = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Indicator at the spatial center of a scale.
IndicatorCode center_indicator(const ScaleSpec& spec, int scale, std::size_t channel);

template <typename T>
MultiscaleCode<T> make_indicator(const ScaleSpec& spec, const IndicatorCode& at);

template <typename T>
struct Atom {
  BasicTensor<T> image;  // C_out x h x w crop; a 1x1x1 zero tensor when the atom vanishes
  std::size_t top = 0, left = 0;
  std::size_t box_height = 0, box_width = 0;
  std::size_t support = 0;  // max(box_height, box_width); 0 for a vanishing atom
  double norm = 0.0;        // l2 norm of the uncropped atom
};

/// dict_apply of the indicator, cropped to the bounding box of |v| > eps.
template <typename T>
Atom<T> extract_atom(const DictionaryParams<T>& dict, const IndicatorCode& at, double eps = kNonzeroEps);

struct AtomEntry {
  std::size_t channel = 0;
  double norm = 0.0;
  std::size_t support = 0;
  std::filesystem::path file;  // empty when not written
};

/// One center atom per channel of `scale`, sorted by decreasing norm; the
/// first `count` are scaled to [-1, 1] and written as atom_s{scale}_c{channel}.pgm.
template <typename T>
std::vector<AtomEntry> atom_grid(const DictionaryParams<T>& dict, int scale, std::size_t count,
                                 const std::filesystem::path& out_dir);

struct SparsityReport {
  std::vector<double> density;  // per scale, fraction of entries with |a| > eps
  double overall = 0.0;
};

/// Density of a collection of codes, averaged over codes.
template <typename T>
SparsityReport sparsity_of(const std::vector<MultiscaleCode<T>>& codes, double eps = kNonzeroEps);

/// Runs the model's encoder on every sample and reports the code density.
template <typename T>
SparsityReport sparsity_profile(const ModelParams<T>& m, const SampleSet<T>& samples, int threads = 1);

/// TSV `scale\tdensity`, one row per scale then an `all` row.
void write_sparsity_tsv(const SparsityReport& report, std::ostream& out);

}  // namespace musc
