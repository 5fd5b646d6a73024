#include "segqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace segqa::metrics {

namespace {

void require_same_nonempty(const std::vector<double>& x, const std::vector<double>& y,
                           size_t min_n) {
  if (x.size() != y.size())
    throw Error("metric inputs have different lengths (" + std::to_string(x.size()) +
                    " vs " + std::to_string(y.size()) + ")",
                3);
  if (x.size() < min_n)
    throw Error("metric needs at least " + std::to_string(min_n) + " samples", 3);
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  double m = mean(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

double plcc(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_nonempty(x, y, 2);
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("zero variance input to PLCC", 3);
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });

  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    // positions i..j share the same value; assign the mean 1-based rank
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double srocc(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_nonempty(x, y, 2);
  try {
    return plcc(average_ranks(x), average_ranks(y));
  } catch (const Error&) {
    throw Error("zero variance input to SROCC (all values tied)", 3);
  }
}

double krocc(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_nonempty(x, y, 2);
  const size_t n = x.size();
  long long concordant = 0, discordant = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      const double prod = dx * dy;
      if (prod > 0)
        ++concordant;
      else if (prod < 0)
        ++discordant;
      // ties in either coordinate count in neither P nor Q (tau-a)
    }
  }
  const double denom = static_cast<double>(n) * static_cast<double>(n - 1);
  return 2.0 * static_cast<double>(concordant - discordant) / denom;
}

double rmse(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_nonempty(x, y, 1);
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(acc / static_cast<double>(x.size()));
}

double FourPLParams::eval(double x) const {
  const double scale = std::abs(beta4);
  const double s = 1.0 / (1.0 + std::exp(-(x - beta3) / scale));
  return beta2 + (beta1 - beta2) * s;
}

namespace {

double sse_of(const FourPLParams& p, const std::vector<double>& x,
              const std::vector<double>& y) {
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double r = p.eval(x[i]) - y[i];
    acc += r * r;
  }
  return acc;
}

// Solve the symmetric 4x4 system A d = g in place (Gaussian elimination with
// partial pivoting). Returns false if singular.
bool solve4(double A[4][4], double g[4], double d[4]) {
  int piv[4] = {0, 1, 2, 3};
  for (int col = 0; col < 4; ++col) {
    int best = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(A[piv[r]][col]) > std::abs(A[piv[best]][col])) best = r;
    std::swap(piv[col], piv[best]);
    const double p = A[piv[col]][col];
    if (p == 0.0 || !std::isfinite(p)) return false;
    for (int r = col + 1; r < 4; ++r) {
      const double f = A[piv[r]][col] / p;
      for (int c = col; c < 4; ++c) A[piv[r]][c] -= f * A[piv[col]][c];
      g[piv[r]] -= f * g[piv[col]];
    }
  }
  for (int col = 3; col >= 0; --col) {
    double acc = g[piv[col]];
    for (int c = col + 1; c < 4; ++c) acc -= A[piv[col]][c] * d[c];
    d[col] = acc / A[piv[col]][col];
  }
  return std::isfinite(d[0]) && std::isfinite(d[1]) && std::isfinite(d[2]) &&
         std::isfinite(d[3]);
}

}  // namespace

FourPLParams fit_4pl(const std::vector<double>& pred, const std::vector<double>& label) {
  require_same_nonempty(pred, label, 5);
  {
    double lo = label[0], hi = label[0];
    for (double v : label) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo == hi) throw Error("4PL fit needs nonconstant labels", 3);
  }

  FourPLParams p;
  p.beta1 = *std::max_element(label.begin(), label.end());
  p.beta2 = *std::min_element(label.begin(), label.end());
  p.beta3 = mean(pred);
  p.beta4 = stddev(pred);
  if (p.beta4 == 0.0) p.beta4 = 1.0;

  const size_t n = pred.size();
  double sse = sse_of(p, pred, label);
  double lambda = 1e-3;
  constexpr int kMaxIter = 500;
  constexpr double kRelTol = 1e-10;

  FourPLParams best = p;
  best.sse = sse;

  int iter = 0;
  bool converged = false;
  for (; iter < kMaxIter; ++iter) {
    // Jacobian of residuals r_i = y(x_i) - label_i w.r.t. (b1, b2, b3, b4).
    double JtJ[4][4] = {};
    double Jtr[4] = {};
    const double scale = std::abs(p.beta4);
    const double sign4 = p.beta4 >= 0 ? 1.0 : -1.0;
    for (size_t i = 0; i < n; ++i) {
      const double u = (pred[i] - p.beta3) / scale;
      const double s = 1.0 / (1.0 + std::exp(-u));
      const double sp = s * (1.0 - s);
      const double r = p.beta2 + (p.beta1 - p.beta2) * s - label[i];
      const double J[4] = {
          s,                                            // d/db1
          1.0 - s,                                      // d/db2
          -(p.beta1 - p.beta2) * sp / scale,            // d/db3
          -(p.beta1 - p.beta2) * sp * u * sign4 / scale  // d/db4
      };
      for (int a = 0; a < 4; ++a) {
        Jtr[a] += J[a] * r;
        for (int b = a; b < 4; ++b) JtJ[a][b] += J[a] * J[b];
      }
    }
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < a; ++b) JtJ[a][b] = JtJ[b][a];

    // One damped step; on failure increase damping and retry within the
    // iteration budget.
    double A[4][4];
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) A[a][b] = JtJ[a][b];
    for (int a = 0; a < 4; ++a) A[a][a] += lambda * (JtJ[a][a] > 0 ? JtJ[a][a] : 1.0);
    double g[4] = {-Jtr[0], -Jtr[1], -Jtr[2], -Jtr[3]};
    double d[4];
    if (!solve4(A, g, d)) {
      lambda *= 10.0;
      continue;
    }

    FourPLParams trial = p;
    trial.beta1 += d[0];
    trial.beta2 += d[1];
    trial.beta3 += d[2];
    trial.beta4 += d[3];
    if (trial.beta4 == 0.0) trial.beta4 = p.beta4 * 0.5;

    const double trial_sse = sse_of(trial, pred, label);
    if (std::isfinite(trial_sse) && trial_sse <= sse) {
      const double rel = (sse - trial_sse) / std::max(sse, 1e-300);
      p = trial;
      sse = trial_sse;
      lambda = std::max(lambda * 0.3, 1e-12);
      if (sse < best.sse) {
        best = p;
        best.sse = sse;
      }
      if (rel < kRelTol) {
        converged = true;
        ++iter;
        break;
      }
    } else {
      lambda *= 10.0;
      if (lambda > 1e12) break;  // stalled
    }
  }

  best.converged = converged;
  best.iterations = iter;
  best.sse = sse_of(best, pred, label);
  return best;
}

std::vector<double> apply_4pl(const FourPLParams& p, const std::vector<double>& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = p.eval(x[i]);
  return out;
}

MetricBundle metric_bundle(const std::vector<double>& pred,
                           const std::vector<double>& label) {
  require_same_nonempty(pred, label, 5);
  MetricBundle b;
  b.n = pred.size();
  b.srocc = srocc(pred, label);
  b.krocc = krocc(pred, label);
  b.fitted = fit_4pl(pred, label);
  if (!b.fitted.converged)
    b.warnings.push_back("4PL fit did not converge; using best-found parameters");
  const std::vector<double> mapped = apply_4pl(b.fitted, pred);
  b.plcc = plcc(mapped, label);
  b.rmse = rmse(mapped, label);
  return b;
}

std::string bundle_to_json(const MetricBundle& b, const std::string& method_id,
                           const std::string& split) {
  nlohmann::json j;
  j["method_id"] = method_id;
  j["split"] = split;
  j["n"] = b.n;
  j["plcc"] = b.plcc;
  j["srocc"] = b.srocc;
  j["krocc"] = b.krocc;
  j["rmse"] = b.rmse;
  j["fitted_betas"] = {b.fitted.beta1, b.fitted.beta2, b.fitted.beta3, b.fitted.beta4};
  j["warnings"] = b.warnings;
  return j.dump(2) + "\n";
}

void write_scatter_csv(const std::string& path, const std::vector<std::string>& patch_ids,
                       const std::vector<double>& pred, const std::vector<double>& label) {
  if (patch_ids.size() != pred.size() || pred.size() != label.size())
    throw Error("scatter export: mismatched column lengths", 3);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  out << "patch_id,predicted,label\n";
  out.precision(17);
  for (size_t i = 0; i < patch_ids.size(); ++i)
    out << patch_ids[i] << ',' << pred[i] << ',' << label[i] << '\n';
}

}  // namespace segqa::metrics
