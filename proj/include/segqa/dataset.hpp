#pragma once
// Patch manifests: non-overlapping grid crops, seeded train/test splits,
// OA label computation from confusion matrices, and the on-disk formats
// (manifest JSONL, confusion CSV, label table CSV).

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "segqa/core.hpp"

namespace segqa::dataset {

struct DatasetManifest {
  std::vector<QualityRecord> records;
  int patch_size = 0;
  double train_fraction = 0.8;
  double test_fraction = 0.2;

  std::vector<const QualityRecord*> split_records(Split s) const;
};

// Regular grid of patch_size crops anchored at (0,0), row-major; residual
// margins are dropped, not padded. Throws "image too small" when the extent
// cannot fit one patch.
std::vector<CropGeometry> crop_patches(const std::string& source_image, int width,
                                       int height, int patch_size);

// Record-level uniform random split under seed. |train| = round(a * n).
// Same seed and inputs give the identical assignment.
DatasetManifest split_manifest(std::vector<QualityRecord> records,
                               std::pair<double, double> ratio, RngSeed seed,
                               int patch_size);

// OA = trace / total. Throws on an all-zero matrix.
double compute_oa(const ConfusionMatrix& cm);

// Counts a pair of equal-shape integer label arrays into a ConfusionMatrix
// (test-fixture helper; entry (i,j) counts truth i predicted j).
ConfusionMatrix count_confusion(const std::vector<int>& truth,
                                const std::vector<int>& predicted, int n_classes);

// One OA cell per (patch, method); every pair must be present.
ScoreTable build_label_table(
    const DatasetManifest& manifest,
    const std::map<std::pair<std::string, std::string>, ConfusionMatrix>& confusions);

// Writes labels from a table back onto matching manifest records.
void attach_labels(DatasetManifest& manifest, const ScoreTable& labels);

// --- on-disk formats -------------------------------------------------------

// Manifest: JSON Lines, one record per line with keys patch_id, source_image,
// dataset_tag, x0, y0, w, h, split, feature_refs, labels. UTF-8, \n.
void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

// Confusion CSV: per matrix a "patch_id,method_id,n" row then n rows of n
// comma-separated integers; matrices concatenated.
void write_confusions(
    const std::string& path,
    const std::map<std::pair<std::string, std::string>, ConfusionMatrix>& confusions);
std::map<std::pair<std::string, std::string>, ConfusionMatrix> read_confusions(
    const std::string& path);

// Label/score table CSV with header "patch_id,<method_id>,...".
void write_score_table_csv(const std::string& path, const ScoreTable& table);
ScoreTable read_score_table_csv(const std::string& path);

}  // namespace segqa::dataset
