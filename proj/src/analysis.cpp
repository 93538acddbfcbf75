#include "musc/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "musc/parallel.hpp"

namespace musc {

IndicatorCode center_indicator(const ScaleSpec& spec, int scale, std::size_t channel) {
  return {scale, channel, spec.code_height(scale) / 2, spec.code_width(scale) / 2};
}

template <typename T>
MultiscaleCode<T> make_indicator(const ScaleSpec& spec, const IndicatorCode& at) {
  if (at.scale < 0 || at.scale > spec.scales) throw std::invalid_argument("indicator: scale out of range");
  if (at.channel >= spec.code_channels(at.scale) || at.row >= spec.code_height(at.scale) ||
      at.col >= spec.code_width(at.scale))
    throw std::invalid_argument("indicator: position out of range for scale " + std::to_string(at.scale));
  auto code = MultiscaleCode<T>::zeros(code_layout(spec));
  code.parts[static_cast<std::size_t>(at.scale)].at(at.channel, at.row, at.col) = T{1};
  return code;
}

template <typename T>
Atom<T> extract_atom(const DictionaryParams<T>& dict, const IndicatorCode& at, double eps) {
  const auto full = dict_apply(dict, make_indicator<T>(dict.spec, at));
  const std::size_t ch = full.dim(0), h = full.dim(1), w = full.dim(2);
  std::size_t r0 = h, r1 = 0, c0 = w, c1 = 0;
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        if (std::abs(static_cast<double>(full.at(c, i, j))) > eps) {
          r0 = std::min(r0, i);
          r1 = std::max(r1, i);
          c0 = std::min(c0, j);
          c1 = std::max(c1, j);
        }
  Atom<T> atom;
  atom.norm = std::sqrt(squared_norm(full));
  if (r0 > r1) {
    atom.image = BasicTensor<T>(Shape{ch, 1, 1});
    return atom;
  }
  atom.top = r0;
  atom.left = c0;
  atom.box_height = r1 - r0 + 1;
  atom.box_width = c1 - c0 + 1;
  atom.support = std::max(atom.box_height, atom.box_width);
  atom.image = BasicTensor<T>(Shape{ch, atom.box_height, atom.box_width});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < atom.box_height; ++i)
      for (std::size_t j = 0; j < atom.box_width; ++j) atom.image.at(c, i, j) = full.at(c, r0 + i, c0 + j);
  return atom;
}

template <typename T>
std::vector<AtomEntry> atom_grid(const DictionaryParams<T>& dict, int scale, std::size_t count,
                                 const std::filesystem::path& out_dir) {
  if (scale < 0 || scale > dict.spec.scales) throw std::invalid_argument("atom_grid: scale out of range");
  const std::size_t channels = dict.spec.code_channels(scale);
  if (count > channels)
    throw std::invalid_argument("atom_grid: count " + std::to_string(count) + " exceeds " + std::to_string(channels) +
                                " channels at scale " + std::to_string(scale));
  std::vector<std::pair<AtomEntry, Atom<T>>> atoms;
  for (std::size_t c = 0; c < channels; ++c) {
    auto a = extract_atom(dict, center_indicator(dict.spec, scale, c));
    atoms.push_back({AtomEntry{c, a.norm, a.support, {}}, std::move(a)});
  }
  std::stable_sort(atoms.begin(), atoms.end(), [](const auto& a, const auto& b) { return a.first.norm > b.first.norm; });
  if (count > 0) std::filesystem::create_directories(out_dir);
  std::vector<AtomEntry> out;
  for (std::size_t k = 0; k < atoms.size(); ++k) {
    auto& [entry, atom] = atoms[k];
    if (k < count) {
      // Channels side by side in one plane.
      const std::size_t ch = atom.image.dim(0), h = atom.image.dim(1), w = atom.image.dim(2);
      BasicTensor<T> plane(Shape{h, ch * w});
      double peak = 0.0;
      for (T v : atom.image.values()) peak = std::max(peak, std::abs(static_cast<double>(v)));
      const T scale_to_unit = peak > 0 ? static_cast<T>(1.0 / peak) : T{1};
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) plane.at(i, c * w + j) = atom.image.at(c, i, j) * scale_to_unit;
      entry.file = out_dir / ("atom_s" + std::to_string(scale) + "_c" + std::to_string(entry.channel) + ".pgm");
      export_pgm(plane, entry.file);
    }
    out.push_back(entry);
  }
  return out;
}

template <typename T>
SparsityReport sparsity_of(const std::vector<MultiscaleCode<T>>& codes, double eps) {
  if (codes.empty()) throw std::invalid_argument("sparsity: no codes");
  SparsityReport r;
  r.density.assign(codes.front().parts.size(), 0.0);
  for (const auto& code : codes) {
    if (code.parts.size() != r.density.size()) throw std::invalid_argument("sparsity: code layouts differ");
    std::size_t nz_total = 0, total = 0;
    for (std::size_t s = 0; s < code.parts.size(); ++s) {
      std::size_t nz = 0;
      for (T v : code.parts[s].values()) nz += std::abs(static_cast<double>(v)) > eps;
      r.density[s] += static_cast<double>(nz) / static_cast<double>(code.parts[s].size());
      nz_total += nz;
      total += code.parts[s].size();
    }
    r.overall += static_cast<double>(nz_total) / static_cast<double>(total);
  }
  for (auto& d : r.density) d /= static_cast<double>(codes.size());
  r.overall /= static_cast<double>(codes.size());
  return r;
}

template <typename T>
SparsityReport sparsity_profile(const ModelParams<T>& m, const SampleSet<T>& samples, int threads) {
  if (samples.empty()) throw std::invalid_argument("sparsity_profile: empty sample set");
  const EffectiveModel<T> em(m);
  std::vector<MultiscaleCode<T>> codes(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { codes[i] = forward(em, samples.samples[i].z).code; });
  return sparsity_of(codes);
}

void write_sparsity_tsv(const SparsityReport& report, std::ostream& out) {
  const auto old = out.precision(10);
  out << "scale\tdensity\n";
  for (std::size_t s = 0; s < report.density.size(); ++s) out << s << '\t' << report.density[s] << '\n';
  out << "all\t" << report.overall << '\n';
  out.precision(old);
}

#define MUSC_INSTANTIATE(T)                                                                                \
  template MultiscaleCode<T> make_indicator<T>(const ScaleSpec&, const IndicatorCode&);                    \
  template Atom<T> extract_atom(const DictionaryParams<T>&, const IndicatorCode&, double);                 \
  template std::vector<AtomEntry> atom_grid(const DictionaryParams<T>&, int, std::size_t,                  \
                                            const std::filesystem::path&);                                 \
  template SparsityReport sparsity_of(const std::vector<MultiscaleCode<T>>&, double);                      \
  template SparsityReport sparsity_profile(const ModelParams<T>&, const SampleSet<T>&, int);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

}  // namespace musc
