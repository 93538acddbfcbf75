#include "musc/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace musc {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError("config: key '" + key + "' has invalid numeric value '" + text + "'");
  return value;
}

}  // namespace

KeyValueDoc KeyValueDoc::parse(std::string_view text) {
  KeyValueDoc doc;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (doc.has(key)) throw ConfigError("config: duplicate key '" + key + "'");
    doc.entries_.emplace_back(key, std::string(trim(line.substr(eq + 1))));
  }
  return doc;
}

KeyValueDoc KeyValueDoc::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KeyValueDoc::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = std::move(value);
      return;
    }
  entries_.emplace_back(key, std::move(value));
}

void KeyValueDoc::set(const std::string& key, double value) {
  std::ostringstream os;
  os << std::setprecision(17) << value;
  set(key, os.str());
}

bool KeyValueDoc::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

std::optional<std::string> KeyValueDoc::get(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  return std::nullopt;
}

std::string KeyValueDoc::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

int KeyValueDoc::get_int(const std::string& key, int fallback) const {
  const auto v = get(key);
  return v ? parse_number<int>(key, *v) : fallback;
}

std::uint64_t KeyValueDoc::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto v = get(key);
  return v ? parse_number<std::uint64_t>(key, *v) : fallback;
}

double KeyValueDoc::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  // from_chars for double is incomplete in some libstdc++ builds; istringstream is exact enough.
  std::istringstream is(*v);
  is.imbue(std::locale::classic());
  double d{};
  is >> d;
  if (!is || !is.eof()) throw ConfigError("config: key '" + key + "' has invalid numeric value '" + *v + "'");
  return d;
}

bool KeyValueDoc::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + *v + "'");
}

void KeyValueDoc::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : entries_)
    if (!allowed.contains(k)) throw ConfigError("config: unknown key '" + k + "'");
}

std::string KeyValueDoc::to_string() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

}  // namespace musc
