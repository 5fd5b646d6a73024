#pragma once
// Correlation and error metrics for quality prediction, plus the
// four-parameter logistic mapping applied to predictions before PLCC/RMSE.
//
// Conventions: Spearman uses average ranks under ties (reduces to the
// 1 - 6*sum(d^2)/(n(n^2-1)) closed form when tie-free); Kendall is tau-a
// (ties counted in neither P nor Q, denominator n(n-1)/2 pairs). All
// arithmetic is 64-bit. Every function is pure and concurrency-safe.

#include <string>
#include <vector>

#include "segqa/core.hpp"

namespace segqa::metrics {

// Pearson linear correlation. Throws "zero variance" on constant input.
double plcc(const std::vector<double>& x, const std::vector<double>& y);

// Average ranks (fractional under ties), 1-based.
std::vector<double> average_ranks(const std::vector<double>& v);

// Spearman rank-order correlation: Pearson on average ranks.
double srocc(const std::vector<double>& x, const std::vector<double>& y);

// Kendall tau-a: 2(P - Q) / (n(n-1)).
double krocc(const std::vector<double>& x, const std::vector<double>& y);

double rmse(const std::vector<double>& x, const std::vector<double>& y);

// y = b2 + (b1 - b2) / (1 + exp(-(x - b3)/|b4|))
struct FourPLParams {
  double beta1 = 0, beta2 = 0, beta3 = 0, beta4 = 1;
  bool converged = true;
  int iterations = 0;
  double sse = 0;

  double eval(double x) const;
};

// Least-squares fit via Levenberg-Marquardt. Initialization: b1 = max(label),
// b2 = min(label), b3 = mean(pred), b4 = std(pred). Converged when the
// relative SSE change drops below 1e-10, capped at 500 iterations; on
// non-convergence the best-found parameters are returned with
// converged = false.
FourPLParams fit_4pl(const std::vector<double>& pred, const std::vector<double>& label);

std::vector<double> apply_4pl(const FourPLParams& p, const std::vector<double>& x);

struct MetricBundle {
  double plcc = 0, srocc = 0, krocc = 0, rmse = 0;
  size_t n = 0;
  FourPLParams fitted;
  std::vector<std::string> warnings;
};

// SROCC/KROCC on raw values; PLCC/RMSE on 4PL-mapped predictions. n >= 5.
MetricBundle metric_bundle(const std::vector<double>& pred, const std::vector<double>& label);

// Report JSON {method_id, split, n, plcc, srocc, krocc, rmse, fitted_betas,
// warnings} and a scatter CSV "patch_id,predicted,label".
std::string bundle_to_json(const MetricBundle& b, const std::string& method_id,
                           const std::string& split);
void write_scatter_csv(const std::string& path, const std::vector<std::string>& patch_ids,
                       const std::vector<double>& pred, const std::vector<double>& label);

}  // namespace segqa::metrics
