#include "segqa/config.hpp"

#include <fstream>
#include <sstream>

namespace segqa::config {

using nlohmann::json;

namespace {

json default_document() {
  return json::parse(R"({
    "seed": 0,
    "dataset": {
      "sources": [],
      "patch_size": 1024,
      "split": {"train": 0.8, "test": 0.2},
      "confusions_csv": null,
      "manifest": "manifest.jsonl",
      "labels_csv": "labels.csv",
      "exclude_tags": []
    },
    "model": {
      "d_sem": 768,
      "seg_channels": 64,
      "d_fused": 256,
      "d_hidden": 64,
      "heads": 4,
      "adapter_blocks": 3,
      "ffn_mult": 4,
      "dropout": 0.1,
      "use_token_sequence": false,
      "semantic_source": "toy",
      "segmentation_source": "toy"
    },
    "train": {
      "method_id": null,
      "learning_rate": 1e-4,
      "max_steps": 1000,
      "batch_size": 16,
      "warmup_steps": -1,
      "decay_step_size": -1,
      "decay_gamma": 0.5,
      "weight_decay": 0.01,
      "grad_clip_norm": 1.0,
      "checkpoint": "model.ckpt",
      "loss_curve_csv": "loss_curve.csv"
    },
    "loss": {"alpha": 0.5, "epsilon": 1e-8},
    "metrics": {
      "report_json": "metrics.json",
      "scatter_csv": "scatter.csv"
    },
    "eval": {
      "method_id": null,
      "split": "test",
      "manifest": null,
      "checkpoint": null,
      "predictions_csv": null
    },
    "recommend": {
      "pred_table": null,
      "predictions": {},
      "truth_table": null,
      "report_json": "recommendation.json",
      "ranked_csv": "ranked.csv",
      "pred_tol": 1e-12,
      "truth_tol": 1e-9
    },
    "purify": {
      "captions": null,
      "image_embeddings": null,
      "text_embeddings": null,
      "threshold": null,
      "threshold_quantile": 0.3,
      "client": "mock",
      "http": {"host": "localhost", "port": 8080, "path": "/refine", "timeout_seconds": 30},
      "max_attempts": 3,
      "backoff_ms": 100,
      "max_in_flight": 4,
      "purified_out": "purified.jsonl",
      "report_json": "purify_report.json"
    },
    "report": {"inputs": [], "table_csv": "report.csv", "table_json": "report.json"}
  })");
}

// Leaf markers: "int", "uint", "number", "string", "bool"; a trailing '?'
// allows null. Objects nest; a single-element array is an array schema; the
// key "*" makes an object an open map.
json schema_document() {
  return json::parse(R"({
    "seed": "uint",
    "dataset": {
      "sources": [{"image_id": "string", "width": "int", "height": "int", "dataset_tag": "string"}],
      "patch_size": "int",
      "split": {"train": "number", "test": "number"},
      "confusions_csv": "string?",
      "manifest": "string",
      "labels_csv": "string",
      "exclude_tags": ["string"]
    },
    "model": {
      "d_sem": "int",
      "seg_channels": "int",
      "d_fused": "int",
      "d_hidden": "int",
      "heads": "int",
      "adapter_blocks": "int",
      "ffn_mult": "int",
      "dropout": "number",
      "use_token_sequence": "bool",
      "semantic_source": "string",
      "segmentation_source": "string"
    },
    "train": {
      "method_id": "string?",
      "learning_rate": "number",
      "max_steps": "int",
      "batch_size": "int",
      "warmup_steps": "int",
      "decay_step_size": "int",
      "decay_gamma": "number",
      "weight_decay": "number",
      "grad_clip_norm": "number",
      "checkpoint": "string",
      "loss_curve_csv": "string"
    },
    "loss": {"alpha": "number", "epsilon": "number"},
    "metrics": {"report_json": "string", "scatter_csv": "string"},
    "eval": {
      "method_id": "string?",
      "split": "string",
      "manifest": "string?",
      "checkpoint": "string?",
      "predictions_csv": "string?"
    },
    "recommend": {
      "pred_table": "string?",
      "predictions": {"*": "string"},
      "truth_table": "string?",
      "report_json": "string",
      "ranked_csv": "string",
      "pred_tol": "number",
      "truth_tol": "number"
    },
    "purify": {
      "captions": "string?",
      "image_embeddings": "string?",
      "text_embeddings": "string?",
      "threshold": "number?",
      "threshold_quantile": "number",
      "client": "string",
      "http": {"host": "string", "port": "int", "path": "string", "timeout_seconds": "int"},
      "max_attempts": "int",
      "backoff_ms": "int",
      "max_in_flight": "int",
      "purified_out": "string",
      "report_json": "string"
    },
    "report": {"inputs": ["string"], "table_csv": "string", "table_json": "string"}
  })");
}

bool leaf_matches(const std::string& type, const json& value) {
  std::string t = type;
  if (!t.empty() && t.back() == '?') {
    if (value.is_null()) return true;
    t.pop_back();
  }
  if (t == "int") return value.is_number_integer();
  if (t == "uint") return value.is_number_unsigned() ||
                          (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  if (t == "number") return value.is_number();
  if (t == "string") return value.is_string();
  if (t == "bool") return value.is_boolean();
  throw Error("internal: unknown schema leaf '" + t + "'");
}

void validate(const json& value, const json& schema, const std::string& path) {
  if (schema.is_string()) {
    if (!leaf_matches(schema.get<std::string>(), value))
      throw Error("config key '" + path + "' has wrong type (expected " +
                  schema.get<std::string>() + ")");
    return;
  }
  if (schema.is_array()) {
    if (!value.is_array())
      throw Error("config key '" + path + "' must be an array");
    for (size_t i = 0; i < value.size(); ++i)
      validate(value[i], schema[0], path + "[" + std::to_string(i) + "]");
    return;
  }
  // object schema
  if (!value.is_object())
    throw Error("config key '" + path + "' must be an object");
  const bool open_map = schema.contains("*");
  for (const auto& [key, sub] : value.items()) {
    const std::string sub_path = path.empty() ? key : path + "." + key;
    if (schema.contains(key)) {
      validate(sub, schema.at(key), sub_path);
    } else if (open_map) {
      validate(sub, schema.at("*"), sub_path);
    } else {
      throw Error("unknown config key '" + sub_path + "'");
    }
  }
}

void deep_merge(json& base, const json& overlay) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (const auto& [key, sub] : overlay.items()) {
    if (base.contains(key) && base[key].is_object() && sub.is_object())
      deep_merge(base[key], sub);
    else
      base[key] = sub;
  }
}

std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  std::string p;
  while (std::getline(ss, p, '.')) parts.push_back(p);
  if (parts.empty()) throw Error("empty config key");
  return parts;
}

}  // namespace

Config Config::defaults() { return Config(default_document()); }

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'", 2);
  json file;
  try {
    file = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config '" + path + "': " + e.what());
  }
  validate(file, schema_document(), "");
  json merged = default_document();
  deep_merge(merged, file);
  validate(merged, schema_document(), "");
  return Config(std::move(merged));
}

void Config::set(const std::string& dotted, const json& value) {
  auto parts = split_path(dotted);
  json* node = &root_;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
  validate(root_, schema_document(), "");
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error("override must look like key.path=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // plain string
  }
  set(key, value);
}

const json& Config::get(const std::string& dotted) const {
  const json* node = &root_;
  for (const auto& part : split_path(dotted)) {
    if (!node->is_object() || !node->contains(part))
      throw Error("config key '" + dotted + "' not found");
    node = &node->at(part);
  }
  return *node;
}

bool Config::is_null(const std::string& dotted) const { return get(dotted).is_null(); }

double Config::get_number(const std::string& dotted) const {
  return get(dotted).get<double>();
}
int Config::get_int(const std::string& dotted) const { return get(dotted).get<int>(); }
std::uint64_t Config::get_uint64(const std::string& dotted) const {
  return get(dotted).get<std::uint64_t>();
}
bool Config::get_bool(const std::string& dotted) const { return get(dotted).get<bool>(); }
std::string Config::get_string(const std::string& dotted) const {
  return get(dotted).get<std::string>();
}

std::string Config::require_string(const std::string& dotted) const {
  const json& v = get(dotted);
  if (v.is_null() || !v.is_string() || v.get<std::string>().empty())
    throw Error("required input '" + dotted + "' is not set", 2);
  return v.get<std::string>();
}

std::string Config::hash() const {
  const std::uint64_t h = fnv1a64(root_.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void Config::write_snapshot(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  out << root_.dump(2) << '\n';
}

}  // namespace segqa::config
