#include "musc/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace musc {

namespace {

constexpr std::array<char, 4> kNtfMagic{'N', 'T', 'F', '1'};
constexpr std::size_t kMaxRank = 4;

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v & 0xffu), static_cast<char>((v >> 8) & 0xffu),
                                  static_cast<char>((v >> 16) & 0xffu),
                                  static_cast<char>((v >> 24) & 0xffu)};
  out.write(bytes.data(), bytes.size());
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!in) throw FormatError("ntf: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void check_rank(const Shape& dims) {
  if (dims.empty() || dims.size() > kMaxRank)
    throw std::invalid_argument("tensor rank must be 1..4, got " + std::to_string(dims.size()));
  for (auto d : dims)
    if (d == 0) throw std::invalid_argument("tensor dims must be positive: " + shape_string(dims));
}

}  // namespace

std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

std::size_t shape_product(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                                shape_string(b));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims) : dims_(std::move(dims)) {
  check_rank(dims_);
  data_.assign(shape_product(dims_), T{0});
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, std::vector<T> values)
    : dims_(std::move(dims)), data_(std::move(values)) {
  check_rank(dims_);
  if (shape_product(dims_) != data_.size())
    throw std::invalid_argument("tensor: " + std::to_string(data_.size()) +
                                " values do not fill shape " + shape_string(dims_));
  require_finite("tensor construction");
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, T fill_value) : BasicTensor(std::move(dims)) {
  if (!std::isfinite(fill_value)) throw std::domain_error("tensor: non-finite fill value");
  fill(fill_value);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t h = rows.size();
  const std::size_t w = h ? rows.begin()->size() : 0;
  std::vector<T> v;
  v.reserve(h * w);
  for (const auto& r : rows) {
    if (r.size() != w) throw std::invalid_argument("from_rows: ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return BasicTensor({h, w}, std::move(v));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape dims) const {
  if (shape_product(dims) != data_.size())
    throw std::invalid_argument("reshape " + shape_string(dims_) + " -> " + shape_string(dims));
  BasicTensor out = *this;
  check_rank(dims);
  out.dims_ = std::move(dims);
  return out;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::operator+=(const BasicTensor& other) {
  require_same_shape(dims_, other.dims_, "tensor +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::operator-=(const BasicTensor& other) {
  require_same_shape(dims_, other.dims_, "tensor -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::operator*=(T s) {
  for (auto& v : data_) v *= s;
  return *this;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::axpy(T s, const BasicTensor& x) {
  require_same_shape(dims_, x.dims_, "tensor axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * x.data_[i];
  return *this;
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void BasicTensor<T>::require_finite(const std::string& what) const {
  for (std::size_t i = 0; i < data_.size(); ++i)
    if (!std::isfinite(data_[i]))
      throw std::domain_error(what + ": non-finite value at flat index " + std::to_string(i));
}

template <typename T>
BasicTensor<T> kron(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("kron: operands must be rank 2");
  const std::size_t ah = a.dim(0), aw = a.dim(1), bh = b.dim(0), bw = b.dim(1);
  BasicTensor<T> out({ah * bh, aw * bw});
  for (std::size_t i = 0; i < ah; ++i)
    for (std::size_t j = 0; j < aw; ++j) {
      const T s = a.at(i, j);
      for (std::size_t p = 0; p < bh; ++p)
        for (std::size_t q = 0; q < bw; ++q) out.at(i * bh + p, j * bw + q) = s * b.at(p, q);
    }
  return out;
}

template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.dims(), b.dims(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double squared_norm(const BasicTensor<T>& a) {
  return dot(a, a);
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.dims(), b.dims(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
void write_ntf(std::ostream& out, const BasicTensor<T>& t) {
  if (t.rank() == 0) throw std::invalid_argument("write_ntf: empty tensor");
  t.require_finite("write_ntf");
  out.write(kNtfMagic.data(), kNtfMagic.size());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
  if (!out) throw FormatError("write_ntf: stream error");
}

template <typename T>
BasicTensor<T> read_ntf(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in) throw FormatError("ntf: truncated file");
  if (magic != kNtfMagic) throw FormatError("ntf: bad magic");
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > kMaxRank) throw FormatError("ntf: rank must be 1..4, got " + std::to_string(rank));
  Shape dims(rank);
  for (auto& d : dims) {
    d = get_u32(in);
    if (d == 0) throw FormatError("ntf: zero dimension");
  }
  const std::size_t n = shape_product(dims);
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = std::bit_cast<float>(get_u32(in));
    if (!std::isfinite(f)) throw FormatError("ntf: non-finite value at flat index " + std::to_string(i));
    values[i] = static_cast<T>(f);
  }
  return BasicTensor<T>(std::move(dims), std::move(values));
}

template <typename T>
void write_ntf(const std::filesystem::path& path, const BasicTensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  write_ntf(out, t);
}

template <typename T>
BasicTensor<T> read_ntf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  return read_ntf<T>(in);
}

template <typename T>
void export_pgm(const BasicTensor<T>& image, const std::filesystem::path& path) {
  if (image.rank() != 2) throw std::invalid_argument("export_pgm: image must be rank 2");
  const auto [lo_it, hi_it] = std::minmax_element(image.values().begin(), image.values().end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<unsigned char> pixels(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (hi == lo) {
      pixels[i] = 128;
    } else {
      const double v = (static_cast<double>(image[i]) - lo) / (hi - lo) * 255.0;
      pixels[i] = static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw FormatError("export_pgm: write failed: " + path.string());
}

#define MUSC_INSTANTIATE(T)                                                            \
  template class BasicTensor<T>;                                                       \
  template BasicTensor<T> kron(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template double dot(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template double squared_norm(const BasicTensor<T>&);                                 \
  template double max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template void write_ntf(std::ostream&, const BasicTensor<T>&);                       \
  template BasicTensor<T> read_ntf<T>(std::istream&);                                  \
  template void write_ntf(const std::filesystem::path&, const BasicTensor<T>&);        \
  template BasicTensor<T> read_ntf<T>(const std::filesystem::path&);                   \
  template void export_pgm(const BasicTensor<T>&, const std::filesystem::path&);

MUSC_INSTANTIATE(float)
MUSC_INSTANTIATE(double)

#undef MUSC_INSTANTIATE

}  // namespace musc
