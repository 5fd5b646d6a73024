#include "segqa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace segqa::dataset {

using nlohmann::json;

std::vector<const QualityRecord*> DatasetManifest::split_records(Split s) const {
  std::vector<const QualityRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

std::vector<CropGeometry> crop_patches(const std::string& source_image, int width,
                                       int height, int patch_size) {
  if (patch_size < 1) throw Error("patch_size must be positive");
  if (width < patch_size || height < patch_size)
    throw Error("image too small: " + source_image + " (" + std::to_string(width) + "x" +
                    std::to_string(height) + " < patch " + std::to_string(patch_size) + ")",
                2);
  const int nx = width / patch_size;
  const int ny = height / patch_size;
  std::vector<CropGeometry> crops;
  crops.reserve(static_cast<size_t>(nx) * ny);
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      CropGeometry g;
      g.source_image = source_image;
      g.x0 = gx * patch_size;
      g.y0 = gy * patch_size;
      g.w = patch_size;
      g.h = patch_size;
      crops.push_back(g);
    }
  }
  return crops;
}

DatasetManifest split_manifest(std::vector<QualityRecord> records,
                               std::pair<double, double> ratio, RngSeed seed,
                               int patch_size) {
  if (records.empty()) throw Error("split_manifest: no records", 2);
  if (std::abs(ratio.first + ratio.second - 1.0) > 1e-12)
    throw Error("split ratio fractions must sum to 1");
  if (ratio.first < 0.0 || ratio.second < 0.0)
    throw Error("split ratio fractions must be nonnegative");
  {
    std::set<std::string> ids;
    for (const auto& r : records)
      if (!ids.insert(r.patch_id).second)
        throw Error("duplicate patch_id '" + r.patch_id + "' in manifest", 2);
  }

  const size_t n = records.size();
  const size_t n_train = static_cast<size_t>(
      std::llround(ratio.first * static_cast<double>(n)));

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).derive("split");
  rng.shuffle(order);

  for (size_t pos = 0; pos < n; ++pos)
    records[order[pos]].split = pos < n_train ? Split::kTrain : Split::kTest;

  DatasetManifest m;
  m.records = std::move(records);
  m.patch_size = patch_size;
  m.train_fraction = ratio.first;
  m.test_fraction = ratio.second;
  return m;
}

double compute_oa(const ConfusionMatrix& cm) {
  if (cm.n < 1) throw Error("empty confusion matrix", 3);
  const std::uint64_t total = cm.total();
  if (total == 0) throw Error("empty confusion matrix", 3);
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

ConfusionMatrix count_confusion(const std::vector<int>& truth,
                                const std::vector<int>& predicted, int n_classes) {
  if (truth.size() != predicted.size())
    throw Error("label arrays have different sizes", 3);
  ConfusionMatrix cm(n_classes);
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || predicted[i] < 0 ||
        predicted[i] >= n_classes)
      throw Error("label value outside [0, n_classes)", 3);
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

ScoreTable build_label_table(
    const DatasetManifest& manifest,
    const std::map<std::pair<std::string, std::string>, ConfusionMatrix>& confusions) {
  std::vector<std::string> method_ids;
  for (const auto& [key, cm] : confusions) {
    if (std::find(method_ids.begin(), method_ids.end(), key.second) == method_ids.end())
      method_ids.push_back(key.second);
  }
  std::sort(method_ids.begin(), method_ids.end());

  std::vector<std::string> missing;
  ScoreTable table;
  table.method_ids = method_ids;
  for (const auto& r : manifest.records) table.image_ids.push_back(r.patch_id);
  table.scores.assign(table.n_images() * table.n_methods(), 0.0);

  for (size_t i = 0; i < table.n_images(); ++i) {
    for (size_t m = 0; m < table.n_methods(); ++m) {
      auto it = confusions.find({table.image_ids[i], table.method_ids[m]});
      if (it == confusions.end()) {
        missing.push_back("(" + table.image_ids[i] + ", " + table.method_ids[m] + ")");
        continue;
      }
      table.at(i, m) = compute_oa(it->second);
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing confusion matrices for:";
    for (const auto& k : missing) msg += " " + k;
    throw Error(msg, 2);
  }
  return table;
}

void attach_labels(DatasetManifest& manifest, const ScoreTable& labels) {
  std::map<std::string, size_t> row;
  for (size_t i = 0; i < labels.n_images(); ++i) row[labels.image_ids[i]] = i;
  for (auto& r : manifest.records) {
    auto it = row.find(r.patch_id);
    if (it == row.end()) throw Error("label table has no row for '" + r.patch_id + "'", 2);
    for (size_t m = 0; m < labels.n_methods(); ++m)
      r.labels[labels.method_ids[m]] = labels.at(it->second, m);
  }
}

// --- manifest JSONL ---------------------------------------------------------

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  for (const auto& r : manifest.records) {
    json j;
    j["patch_id"] = r.patch_id;
    j["source_image"] = r.geom.source_image;
    j["dataset_tag"] = r.dataset_tag;
    j["x0"] = r.geom.x0;
    j["y0"] = r.geom.y0;
    j["w"] = r.geom.w;
    j["h"] = r.geom.h;
    j["split"] = to_string(r.split);
    j["feature_refs"] = r.feature_refs;
    j["labels"] = r.labels;
    out << j.dump() << '\n';
  }
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open manifest '" + path + "'", 2);
  DatasetManifest m;
  std::set<std::string> seen_ids;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what(), 2);
    }
    QualityRecord r;
    r.patch_id = j.at("patch_id").get<std::string>();
    r.geom.source_image = j.at("source_image").get<std::string>();
    r.dataset_tag = j.at("dataset_tag").get<std::string>();
    r.geom.x0 = j.at("x0").get<int>();
    r.geom.y0 = j.at("y0").get<int>();
    r.geom.w = j.at("w").get<int>();
    r.geom.h = j.at("h").get<int>();
    r.split = split_from_string(j.at("split").get<std::string>());
    r.feature_refs = j.at("feature_refs").get<std::map<std::string, std::string>>();
    r.labels = j.at("labels").get<std::map<std::string, double>>();
    for (const auto& [method, oa] : r.labels)
      if (!(oa >= 0.0 && oa <= 1.0))
        throw Error(path + ": label " + method + " for " + r.patch_id +
                        " outside [0,1]",
                    2);
    if (!seen_ids.insert(r.patch_id).second)
      throw Error(path + ": duplicate patch_id '" + r.patch_id + "'", 2);
    if (r.geom.w > m.patch_size) m.patch_size = r.geom.w;
    m.records.push_back(std::move(r));
  }
  return m;
}

// --- confusion CSV ----------------------------------------------------------

void write_confusions(
    const std::string& path,
    const std::map<std::pair<std::string, std::string>, ConfusionMatrix>& confusions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  for (const auto& [key, cm] : confusions) {
    out << key.first << ',' << key.second << ',' << cm.n << '\n';
    for (int i = 0; i < cm.n; ++i) {
      for (int j = 0; j < cm.n; ++j) {
        if (j) out << ',';
        out << cm.at(i, j);
      }
      out << '\n';
    }
  }
}

std::map<std::pair<std::string, std::string>, ConfusionMatrix> read_confusions(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open confusion CSV '" + path + "'", 2);
  std::map<std::pair<std::string, std::string>, ConfusionMatrix> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream header(line);
    std::string patch_id, method_id, n_str;
    if (!std::getline(header, patch_id, ',') || !std::getline(header, method_id, ',') ||
        !std::getline(header, n_str, ','))
      throw Error(path + ":" + std::to_string(lineno) + ": expected patch_id,method_id,n",
                  2);
    int n = 0;
    try {
      n = std::stoi(n_str);
    } catch (...) {
      throw Error(path + ":" + std::to_string(lineno) + ": bad class count '" + n_str + "'",
                  2);
    }
    if (n < 1) throw Error(path + ":" + std::to_string(lineno) + ": class count < 1", 2);
    ConfusionMatrix cm(n);
    for (int i = 0; i < n; ++i) {
      if (!std::getline(in, line))
        throw Error(path + ": truncated matrix for (" + patch_id + ", " + method_id + ")",
                    2);
      ++lineno;
      std::stringstream row(line);
      std::string cell;
      for (int j = 0; j < n; ++j) {
        if (!std::getline(row, cell, ','))
          throw Error(path + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(n) + " entries",
                      2);
        try {
          cm.at(i, j) = std::stoull(cell);
        } catch (...) {
          throw Error(path + ":" + std::to_string(lineno) + ": bad count '" + cell + "'",
                      2);
        }
      }
    }
    out[{patch_id, method_id}] = std::move(cm);
  }
  return out;
}

// --- score table CSV --------------------------------------------------------

void write_score_table_csv(const std::string& path, const ScoreTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  out << "patch_id";
  for (const auto& m : table.method_ids) out << ',' << m;
  out << '\n';
  out.precision(17);
  for (size_t i = 0; i < table.n_images(); ++i) {
    out << table.image_ids[i];
    for (size_t m = 0; m < table.n_methods(); ++m) out << ',' << table.at(i, m);
    out << '\n';
  }
}

ScoreTable read_score_table_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open score table '" + path + "'", 2);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": empty score table", 2);
  ScoreTable t;
  {
    std::stringstream header(line);
    std::string cell;
    if (!std::getline(header, cell, ',') || cell != "patch_id")
      throw Error(path + ": header must start with patch_id", 2);
    while (std::getline(header, cell, ',')) t.method_ids.push_back(cell);
  }
  if (t.method_ids.empty()) throw Error(path + ": no method columns", 2);
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    t.image_ids.push_back(cell);
    for (size_t m = 0; m < t.method_ids.size(); ++m) {
      if (!std::getline(row, cell, ','))
        throw Error(path + ":" + std::to_string(lineno) + ": missing cell", 2);
      try {
        t.scores.push_back(std::stod(cell));
      } catch (...) {
        throw Error(path + ":" + std::to_string(lineno) + ": bad score '" + cell + "'",
                    2);
      }
    }
  }
  return t;
}

}  // namespace segqa::dataset
