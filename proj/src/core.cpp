#include "segqa/core.hpp"

#include <set>

namespace segqa {

std::vector<TableViolation> validate_score_table(const ScoreTable& t) {
  std::vector<TableViolation> out;

  if (t.scores.size() != t.image_ids.size() * t.method_ids.size()) {
    out.push_back({"", "", "score storage does not match |images| x |methods|"});
    return out;  // cell addressing would be meaningless below
  }

  std::set<std::string> seen_images;
  for (const auto& id : t.image_ids) {
    if (!seen_images.insert(id).second)
      out.push_back({id, "", "duplicate image_id '" + id + "'"});
  }
  std::set<std::string> seen_methods;
  for (const auto& id : t.method_ids) {
    if (!seen_methods.insert(id).second)
      out.push_back({"", id, "duplicate method_id '" + id + "'"});
  }

  for (size_t i = 0; i < t.n_images(); ++i) {
    for (size_t m = 0; m < t.n_methods(); ++m) {
      if (!std::isfinite(t.at(i, m))) {
        out.push_back({t.image_ids[i], t.method_ids[m],
                       "non-finite score at (" + t.image_ids[i] + ", " +
                           t.method_ids[m] + ")"});
      }
    }
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw Error("uniform_index over empty range");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // Box-Muller; u1 shifted away from 0 so log stays finite.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    double x = normal() * stddev;
    if (std::abs(x) <= 2.0 * stddev) return x;
  }
}

}  // namespace segqa
