#pragma once

// Flat key=value run configuration. Every key has a default; files and
// command-line overrides may only set known keys.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

class RunConfig {
 public:
  /// All keys at their defaults.
  RunConfig();

  static RunConfig from_file(const std::string& path);
  /// Parses "key = value" lines; '#' starts a comment.
  static RunConfig from_string(std::string_view text);

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value" overrides in order.
  void apply(const std::vector<std::string>& overrides);

  bool has(std::string_view key) const { return values_.count(std::string(key)) != 0; }
  const std::string& str(std::string_view key) const;
  double num(std::string_view key) const;
  long long integer(std::string_view key) const;
  std::uint64_t u64(std::string_view key) const;
  bool flag(std::string_view key) const;

  /// Canonical text: sorted "key=value" lines.
  std::string canonical() const;
  /// Hash of canonical(); independent of the order keys were given in.
  std::uint64_t hash() const { return fnv1a(canonical()); }
  std::string hash_hex() const { return hex64(hash()); }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pt
