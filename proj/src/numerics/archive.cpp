#include "kpop/archive.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "kpop/error.hpp"

namespace kpop::io {

namespace {

constexpr std::string_view kMagic = "KPOP-ARCHIVE v1";
constexpr std::string_view kManifestEnd = "%%";

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

void put_u64(std::ostream& os, std::uint64_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated tensor blob");
  return to_little(v);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

void write_tensor_blob(std::ostream& os, const nn::Tensor& t) {
  put_u64(os, t.rank());
  for (auto d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
  for (double v : t.data()) {
    const auto bits = to_little(std::bit_cast<std::uint64_t>(v));
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!os) throw IoError("failed writing tensor blob");
}

nn::Tensor read_tensor_blob(std::istream& is) {
  const auto rank = get_u64(is);
  if (rank > 8) throw IoError("tensor blob rank " + std::to_string(rank) + " is implausible");
  nn::Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(get_u64(is)));
  const auto n = static_cast<std::size_t>(nn::shape_numel(shape));
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(get_u64(is));
  return nn::Tensor::from_data(std::move(shape), std::move(data));
}

void Manifest::set(std::string key, std::string value) {
  if (key.find('=') != std::string::npos || key.find('\n') != std::string::npos ||
      value.find('\n') != std::string::npos) {
    throw IoError("manifest entry contains a reserved character: " + key);
  }
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(key), std::move(value));
}

bool Manifest::has(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

const std::string& Manifest::get(std::string_view key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw IoError("manifest is missing key '" + std::string(key) + "'");
}

std::string Manifest::get_or(std::string_view key, std::string fallback) const {
  return has(key) ? get(key) : fallback;
}

double Manifest::get_double(std::string_view key) const {
  const auto& s = get(key);
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("manifest key '" + std::string(key) + "' is not a number: " + s);
  }
}

long long Manifest::get_int(std::string_view key) const {
  const auto& s = get(key);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw IoError("manifest key '" + std::string(key) + "' is not an integer: " + s);
  }
  return v;
}

std::string Manifest::format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string Manifest::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

Manifest Manifest::parse(std::string_view text) {
  Manifest m;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("line " + std::to_string(line_no) + ": expected 'key = value'");
    m.set(trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
  }
  return m;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

const nn::Tensor& Archive::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw IoError("archive has no tensor named '" + std::string(name) + "'");
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << kMagic << '\n' << archive.manifest.to_text() << kManifestEnd << '\n';
  put_u64(os, archive.tensors.size());
  for (const auto& [name, t] : archive.tensors) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_blob(os, t);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kMagic) throw IoError(path.string() + " is not a kpop archive");
  std::string text;
  bool terminated = false;
  while (std::getline(is, line)) {
    if (line == kManifestEnd) {
      terminated = true;
      break;
    }
    text += line + "\n";
  }
  if (!terminated) throw IoError(path.string() + ": manifest not terminated");
  Archive a;
  a.manifest = Manifest::parse(text);
  const auto count = get_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_u64(is);
    if (len > 4096) throw IoError(path.string() + ": tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw IoError(path.string() + ": truncated");
    a.tensors.emplace_back(std::move(name), read_tensor_blob(is));
  }
  return a;
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string tensor_digest(const std::vector<std::pair<std::string, nn::Tensor>>& tensors) {
  std::ostringstream os;
  for (const auto& [name, t] : tensors) {
    put_u64(os, name.size());
    os << name;
    write_tensor_blob(os, t);
  }
  return sha256_hex(os.str());
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

}  // namespace kpop::io
