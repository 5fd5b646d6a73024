#pragma once
// Core domain types shared by every module: feature containers, confusion
// matrices, score tables, manifest records and deterministic randomness.
//
// Numeric conventions: scores and labels are stored as 64-bit floats
// everywhere outside the model (the model trains in 32-bit, see model.hpp).
// All core types are immutable-by-convention after construction and safe to
// share across concurrent readers.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace segqa {

// Single error type for the whole library. The `code` loosely maps to CLI
// exit codes (1 usage, 2 missing input, 3 numeric failure).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg, int code = 1)
      : std::runtime_error(msg), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

// ---------------------------------------------------------------------------
// Feature containers
// ---------------------------------------------------------------------------

// Dense float vector (semantic embeddings, pooled segmentation features,
// fused features).
struct FeatureVector {
  std::vector<double> values;

  FeatureVector() = default;
  explicit FeatureVector(std::vector<double> v) : values(std::move(v)) {}

  int dim() const { return static_cast<int>(values.size()); }

  void check_finite(const std::string& what = "feature vector") const {
    for (double v : values) {
      if (!std::isfinite(v)) throw Error(what + " contains a non-finite entry", 3);
    }
  }
};

// Dense h x w x c spatial map, row-major with channels innermost.
struct FeatureMap {
  int h = 0, w = 0, c = 0;
  std::vector<double> values;  // size h*w*c

  FeatureMap() = default;
  FeatureMap(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), values(static_cast<size_t>(h_) * w_ * c_, 0.0) {
    if (h < 1 || w < 1 || c < 1) throw Error("feature map dims must be >= 1");
  }

  double& at(int i, int j, int k) {
    return values[(static_cast<size_t>(i) * w + j) * c + k];
  }
  double at(int i, int j, int k) const {
    return values[(static_cast<size_t>(i) * w + j) * c + k];
  }

  void check_valid(const std::string& what = "feature map") const {
    if (h < 1 || w < 1 || c < 1) throw Error(what + " has empty dims", 3);
    if (values.size() != static_cast<size_t>(h) * w * c)
      throw Error(what + " storage does not match h*w*c", 3);
    for (double v : values) {
      if (!std::isfinite(v)) throw Error(what + " contains a non-finite entry", 3);
    }
  }
};

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

// n x n count matrix; entry (i, j) counts ground-truth class i predicted as
// class j.
struct ConfusionMatrix {
  int n = 0;
  std::vector<std::uint64_t> counts;  // row-major n*n

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int n_) : n(n_), counts(static_cast<size_t>(n_) * n_, 0) {
    if (n < 1) throw Error("confusion matrix needs at least one class");
  }

  std::uint64_t& at(int i, int j) { return counts[static_cast<size_t>(i) * n + j]; }
  std::uint64_t at(int i, int j) const { return counts[static_cast<size_t>(i) * n + j]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (int i = 0; i < n; ++i) t += at(i, i);
    return t;
  }
};

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

enum class Split { kTrain, kTest };

inline std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }
inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw Error("unknown split '" + s + "'");
}

// Placement of one square patch inside a source image.
struct CropGeometry {
  std::string source_image;
  int x0 = 0, y0 = 0;
  int w = 0, h = 0;
};

// One patch with per-method ground-truth OA labels and provenance metadata.
struct QualityRecord {
  std::string patch_id;
  std::string dataset_tag;
  Split split = Split::kTrain;
  CropGeometry geom;
  std::map<std::string, double> labels;        // method_id -> OA in [0,1]
  std::map<std::string, std::string> feature_refs;  // branch -> file reference
};

// ---------------------------------------------------------------------------
// Score table
// ---------------------------------------------------------------------------

// image x method matrix of predicted or true quality scores. The stored
// method order is the canonical tie-breaking order used by recommendation.
struct ScoreTable {
  std::vector<std::string> image_ids;
  std::vector<std::string> method_ids;
  std::vector<double> scores;  // row-major |images| x |methods|

  ScoreTable() = default;
  ScoreTable(std::vector<std::string> imgs, std::vector<std::string> methods)
      : image_ids(std::move(imgs)),
        method_ids(std::move(methods)),
        scores(image_ids.size() * method_ids.size(), 0.0) {}

  size_t n_images() const { return image_ids.size(); }
  size_t n_methods() const { return method_ids.size(); }

  double& at(size_t i, size_t m) { return scores[i * n_methods() + m]; }
  double at(size_t i, size_t m) const { return scores[i * n_methods() + m]; }

  std::vector<double> row(size_t i) const {
    return {scores.begin() + i * n_methods(), scores.begin() + (i + 1) * n_methods()};
  }
  std::vector<double> column(size_t m) const {
    std::vector<double> col(n_images());
    for (size_t i = 0; i < n_images(); ++i) col[i] = at(i, m);
    return col;
  }

  int method_index(const std::string& id) const {
    for (size_t m = 0; m < method_ids.size(); ++m)
      if (method_ids[m] == id) return static_cast<int>(m);
    return -1;
  }
};

struct TableViolation {
  std::string image_id;   // empty when not cell/row specific
  std::string method_id;  // empty when not cell specific
  std::string message;
};

// Validation never throws; returns one descriptor per failing cell/row.
std::vector<TableViolation> validate_score_table(const ScoreTable& t);

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

struct RngSeed {
  std::uint64_t value = 0;
};

std::uint64_t fnv1a64(const std::string& s);

// Deterministic RNG. The mt19937_64 stream is fixed by the standard, and the
// distributions below are implemented by hand so that equal seeds give
// bit-identical sequences on every platform.
class Rng {
 public:
  explicit Rng(RngSeed seed) : Rng(seed.value) {}
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Independent child stream for a named purpose; composes from the original
  // seed, not from engine state.
  Rng derive(const std::string& label) const {
    return Rng(seed_ ^ (fnv1a64(label) + 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t next_u64() { return state_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n);

  // Standard normal via Box-Muller.
  double normal();

  // Normal(0, std) clipped by rejection to [-2 std, 2 std].
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 state_;
};

}  // namespace segqa
