#pragma once
// One JSON config document with sections dataset/model/train/loss/metrics
// (plus per-subcommand sections). Every key is addressable by dotted path;
// unknown keys are rejected; CLI flags override file values.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segqa/core.hpp"

namespace segqa::config {

class Config {
 public:
  // Full default document.
  static Config defaults();
  // Defaults deep-merged with (validated) file content.
  static Config from_file(const std::string& path);

  // "key.path=value"; value parsed as JSON when possible, else as a string.
  void apply_override(const std::string& assignment);
  void set(const std::string& dotted, const nlohmann::json& value);

  const nlohmann::json& get(const std::string& dotted) const;
  bool is_null(const std::string& dotted) const;

  double get_number(const std::string& dotted) const;
  int get_int(const std::string& dotted) const;
  std::uint64_t get_uint64(const std::string& dotted) const;
  bool get_bool(const std::string& dotted) const;
  std::string get_string(const std::string& dotted) const;
  // Throws code-2 errors naming the key when null/missing.
  std::string require_string(const std::string& dotted) const;

  const nlohmann::json& root() const { return root_; }

  // FNV-1a of the canonical dump; stable across runs.
  std::string hash() const;
  void write_snapshot(const std::string& path) const;

 private:
  explicit Config(nlohmann::json root) : root_(std::move(root)) {}

  nlohmann::json root_;
};

}  // namespace segqa::config
