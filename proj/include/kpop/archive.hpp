#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kpop/tensor.hpp"

namespace kpop::io {

/// Tensor blob: little-endian u64 rank, u64 dims, then raw IEEE-754 f64 values.
void write_tensor_blob(std::ostream& os, const nn::Tensor& t);
nn::Tensor read_tensor_blob(std::istream& is);

/// Ordered `key = value` pairs. Used for archive manifests, registry files,
/// run-config snapshots and sidecar manifests.
class Manifest {
 public:
  void set(std::string key, std::string value);
  template <typename T>
  void set_num(std::string key, T value) {
    set(std::move(key), format_number(value));
  }
  bool has(std::string_view key) const;
  const std::string& get(std::string_view key) const;  // IoError when absent
  std::string get_or(std::string_view key, std::string fallback) const;
  double get_double(std::string_view key) const;
  long long get_int(std::string_view key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_text() const;
  static Manifest parse(std::string_view text);

  static std::string format_number(double v);
  static std::string format_number(long long v) { return std::to_string(v); }
  static std::string format_number(int v) { return std::to_string(v); }
  static std::string format_number(std::uint64_t v) { return std::to_string(v); }
  static std::string format_number(std::int64_t v) { return std::to_string(v); }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

/// Text manifest followed by named tensor blobs in one file. Checkpoints,
/// prompt keys and the oracle all use this container.
struct Archive {
  Manifest manifest;
  std::vector<std::pair<std::string, nn::Tensor>> tensors;

  const nn::Tensor& tensor(std::string_view name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

/// SHA-256 of the named tensor payloads (names, shapes and values).
std::string tensor_digest(const std::vector<std::pair<std::string, nn::Tensor>>& tensors);
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace kpop::io
