#pragma once
// Per-image method ranking from predicted score tables and tie-aware
// precision-at-k against ground-truth OA tables.
//
// P@1: the predicted best set (within tolerance of the row maximum) must be
// a subset of the true best set. P@3: the predicted best set must lie inside
// the truth top-3, tie-extended at the rank-3 boundary. Exact ties in
// recommend_method break by the table's canonical method order.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "segqa/core.hpp"

namespace segqa::recommend {

// Default tolerances: predictions are float activations, truth OA values are
// ratios of integer counts (exact as doubles, but 1e-9 absorbs float-ingested
// tables).
inline constexpr double kPredTol = 1e-12;
inline constexpr double kTruthTol = 1e-9;

// All methods within tol of the row maximum.
std::set<std::string> best_set(const std::map<std::string, double>& scores_row,
                               double tol);
std::set<std::string> best_set_row(const ScoreTable& t, size_t row, double tol);

// Methods whose truth rank <= 3, extended through ties at the boundary.
std::set<std::string> top3_set_row(const ScoreTable& t, size_t row, double tol);

// Deterministic argmax; exact ties break by the method order stored in the
// table (first listed wins).
std::string recommend_method(const ScoreTable& pred, size_t row);

struct ImageRecommendation {
  std::string patch_id;
  std::vector<std::string> ranked_methods;  // descending predicted score
  std::set<std::string> predicted_best;
  std::set<std::string> true_best_set;
  std::set<std::string> true_top3_set;
  bool hit_at_1 = false;
  bool hit_at_3 = false;
};

struct RecommendationResult {
  std::vector<ImageRecommendation> per_image;
  double p_at_1 = 0;
  double p_at_3 = 0;
};

double precision_at_1(const ScoreTable& pred, const ScoreTable& truth,
                      double pred_tol = kPredTol, double truth_tol = kTruthTol);
double precision_at_3(const ScoreTable& pred, const ScoreTable& truth,
                      double pred_tol = kPredTol, double truth_tol = kTruthTol);

// Full per-image report; the aggregate fields equal precision_at_{1,3}.
RecommendationResult evaluate(const ScoreTable& pred, const ScoreTable& truth,
                              double pred_tol = kPredTol, double truth_tol = kTruthTol);

std::string result_to_json(const RecommendationResult& r);
void write_ranked_csv(const std::string& path, const RecommendationResult& r);

}  // namespace segqa::recommend
