#pragma once
// Embedding and feature-map files: JSON Lines with a {"dim": d} header line,
// then one {"id", "vec"} record per line (feature maps add "h","w","c" and
// store vec row-major).

#include <map>
#include <string>
#include <vector>

#include "segqa/core.hpp"

namespace segqa::io {

struct EmbeddingFile {
  int dim = 0;
  std::map<std::string, FeatureVector> by_id;
};

struct FeatureMapFile {
  int dim = 0;  // channel count
  std::map<std::string, FeatureMap> by_id;
};

void write_embeddings(const std::string& path, const EmbeddingFile& file);
EmbeddingFile read_embeddings(const std::string& path);

void write_feature_maps(const std::string& path, const FeatureMapFile& file);
FeatureMapFile read_feature_maps(const std::string& path);

}  // namespace segqa::io
