#include "segqa/recommend.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

namespace segqa::recommend {

namespace {

void require_aligned(const ScoreTable& pred, const ScoreTable& truth) {
  if (pred.image_ids != truth.image_ids || pred.method_ids != truth.method_ids)
    throw Error("prediction and truth tables must share images and methods", 2);
  if (pred.n_images() == 0) throw Error("empty score tables", 2);
}

std::set<std::string> best_of(const std::vector<std::string>& method_ids,
                              const std::vector<double>& row, double tol) {
  double best = row[0];
  for (double v : row) best = std::max(best, v);
  std::set<std::string> out;
  for (size_t m = 0; m < row.size(); ++m)
    if (row[m] >= best - tol) out.insert(method_ids[m]);
  return out;
}

bool subset(const std::set<std::string>& a, const std::set<std::string>& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace

std::set<std::string> best_set(const std::map<std::string, double>& scores_row,
                               double tol) {
  if (scores_row.empty()) throw Error("best_set: empty score row", 2);
  std::vector<std::string> ids;
  std::vector<double> vals;
  for (const auto& [id, v] : scores_row) {
    ids.push_back(id);
    vals.push_back(v);
  }
  return best_of(ids, vals, tol);
}

std::set<std::string> best_set_row(const ScoreTable& t, size_t row, double tol) {
  if (t.n_methods() == 0) throw Error("best_set: empty score row", 2);
  return best_of(t.method_ids, t.row(row), tol);
}

std::set<std::string> top3_set_row(const ScoreTable& t, size_t row, double tol) {
  if (t.n_methods() < 3) throw Error("top-3 set needs at least 3 methods", 2);
  std::vector<double> vals = t.row(row);
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double cutoff = sorted[2];  // third-best counting multiplicity
  std::set<std::string> out;
  for (size_t m = 0; m < vals.size(); ++m)
    if (vals[m] >= cutoff - tol) out.insert(t.method_ids[m]);
  return out;
}

std::string recommend_method(const ScoreTable& pred, size_t row) {
  if (pred.n_methods() == 0) throw Error("recommend_method: no methods", 2);
  size_t best = 0;
  for (size_t m = 1; m < pred.n_methods(); ++m)
    if (pred.at(row, m) > pred.at(row, best)) best = m;  // strict: first max wins
  return pred.method_ids[best];
}

RecommendationResult evaluate(const ScoreTable& pred, const ScoreTable& truth,
                              double pred_tol, double truth_tol) {
  require_aligned(pred, truth);
  RecommendationResult res;
  size_t hits1 = 0, hits3 = 0;
  for (size_t i = 0; i < pred.n_images(); ++i) {
    ImageRecommendation rec;
    rec.patch_id = pred.image_ids[i];
    rec.predicted_best = best_set_row(pred, i, pred_tol);
    rec.true_best_set = best_set_row(truth, i, truth_tol);
    rec.true_top3_set = top3_set_row(truth, i, truth_tol);

    std::vector<size_t> order(pred.n_methods());
    for (size_t m = 0; m < order.size(); ++m) order[m] = m;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return pred.at(i, a) > pred.at(i, b);
    });
    for (size_t m : order) rec.ranked_methods.push_back(pred.method_ids[m]);

    rec.hit_at_1 = subset(rec.predicted_best, rec.true_best_set);
    rec.hit_at_3 = subset(rec.predicted_best, rec.true_top3_set);
    hits1 += rec.hit_at_1 ? 1 : 0;
    hits3 += rec.hit_at_3 ? 1 : 0;
    res.per_image.push_back(std::move(rec));
  }
  res.p_at_1 = static_cast<double>(hits1) / static_cast<double>(pred.n_images());
  res.p_at_3 = static_cast<double>(hits3) / static_cast<double>(pred.n_images());
  return res;
}

double precision_at_1(const ScoreTable& pred, const ScoreTable& truth, double pred_tol,
                      double truth_tol) {
  require_aligned(pred, truth);
  size_t hits = 0;
  for (size_t i = 0; i < pred.n_images(); ++i)
    if (subset(best_set_row(pred, i, pred_tol), best_set_row(truth, i, truth_tol)))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.n_images());
}

double precision_at_3(const ScoreTable& pred, const ScoreTable& truth, double pred_tol,
                      double truth_tol) {
  require_aligned(pred, truth);
  size_t hits = 0;
  for (size_t i = 0; i < pred.n_images(); ++i)
    if (subset(best_set_row(pred, i, pred_tol), top3_set_row(truth, i, truth_tol)))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.n_images());
}

std::string result_to_json(const RecommendationResult& r) {
  nlohmann::json j;
  j["p_at_1"] = r.p_at_1;
  j["p_at_3"] = r.p_at_3;
  j["per_image"] = nlohmann::json::array();
  for (const auto& rec : r.per_image) {
    nlohmann::json e;
    e["patch_id"] = rec.patch_id;
    e["ranked_methods"] = rec.ranked_methods;
    e["predicted_best"] = rec.predicted_best;
    e["true_best_set"] = rec.true_best_set;
    e["hit_at_1"] = rec.hit_at_1;
    e["hit_at_3"] = rec.hit_at_3;
    j["per_image"].push_back(e);
  }
  return j.dump(2) + "\n";
}

void write_ranked_csv(const std::string& path, const RecommendationResult& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  out << "patch_id,rank,method_id\n";
  for (const auto& rec : r.per_image)
    for (size_t k = 0; k < rec.ranked_methods.size(); ++k)
      out << rec.patch_id << ',' << (k + 1) << ',' << rec.ranked_methods[k] << '\n';
}

}  // namespace segqa::recommend
