#include "segqa/io.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace segqa::io {

using nlohmann::json;

namespace {

json parse_line(const std::string& path, size_t lineno, const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw Error(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what(), 2);
  }
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'", 2);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  return out;
}

}  // namespace

void write_embeddings(const std::string& path, const EmbeddingFile& file) {
  auto out = open_out(path);
  out << json{{"dim", file.dim}}.dump() << '\n';
  for (const auto& [id, vec] : file.by_id) {
    if (vec.dim() != file.dim)
      throw Error("embedding '" + id + "' has dim " + std::to_string(vec.dim()) +
                      ", file header says " + std::to_string(file.dim),
                  2);
    out << json{{"id", id}, {"vec", vec.values}}.dump() << '\n';
  }
}

EmbeddingFile read_embeddings(const std::string& path) {
  auto in = open_in(path);
  EmbeddingFile file;
  std::string line;
  size_t lineno = 0;
  if (!std::getline(in, line)) throw Error(path + ": missing header line", 2);
  ++lineno;
  file.dim = parse_line(path, lineno, line).at("dim").get<int>();
  if (file.dim < 1) throw Error(path + ": header dim must be positive", 2);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(path, lineno, line);
    FeatureVector v(j.at("vec").get<std::vector<double>>());
    if (v.dim() != file.dim)
      throw Error(path + ":" + std::to_string(lineno) + ": vec length " +
                      std::to_string(v.dim()) + " != dim " + std::to_string(file.dim),
                  2);
    v.check_finite("embedding at " + path + ":" + std::to_string(lineno));
    file.by_id[j.at("id").get<std::string>()] = std::move(v);
  }
  return file;
}

void write_feature_maps(const std::string& path, const FeatureMapFile& file) {
  auto out = open_out(path);
  out << json{{"dim", file.dim}}.dump() << '\n';
  for (const auto& [id, m] : file.by_id) {
    if (m.c != file.dim)
      throw Error("feature map '" + id + "' has c=" + std::to_string(m.c) +
                      ", file header says " + std::to_string(file.dim),
                  2);
    out << json{{"id", id}, {"h", m.h}, {"w", m.w}, {"c", m.c}, {"vec", m.values}}.dump()
        << '\n';
  }
}

FeatureMapFile read_feature_maps(const std::string& path) {
  auto in = open_in(path);
  FeatureMapFile file;
  std::string line;
  size_t lineno = 0;
  if (!std::getline(in, line)) throw Error(path + ": missing header line", 2);
  ++lineno;
  file.dim = parse_line(path, lineno, line).at("dim").get<int>();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(path, lineno, line);
    FeatureMap m(j.at("h").get<int>(), j.at("w").get<int>(), j.at("c").get<int>());
    m.values = j.at("vec").get<std::vector<double>>();
    m.check_valid("feature map at " + path + ":" + std::to_string(lineno));
    if (m.c != file.dim)
      throw Error(path + ":" + std::to_string(lineno) + ": c != header dim", 2);
    file.by_id[j.at("id").get<std::string>()] = std::move(m);
  }
  return file;
}

}  // namespace segqa::io
