#include "segqa/purify.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace segqa::purify {

using nlohmann::json;

std::string to_string(Quality q) {
  switch (q) {
    case Quality::kUnscored: return "unscored";
    case Quality::kHigh: return "high";
    case Quality::kLow: return "low";
    case Quality::kRefined: return "refined";
  }
  return "unscored";
}

Quality quality_from_string(const std::string& s) {
  if (s == "unscored") return Quality::kUnscored;
  if (s == "high") return Quality::kHigh;
  if (s == "low") return Quality::kLow;
  if (s == "refined") return Quality::kRefined;
  throw Error("unknown caption quality '" + s + "'");
}

RefinementPrompt default_prompt() {
  RefinementPrompt p;
  p.instruction =
      "Generate a brief description of the remote sensing image, highlighting key "
      "features such as the terrain, environment, layout, or other notable elements "
      "visible in the image.";
  p.metacaption =
      "Description data of the image (insert the following data based on the actual "
      "image): [title]";
  p.example =
      "A satellite image of a coastal city with a network of roads, high-rise "
      "buildings, and a large harbor area.";
  return p;
}

double similarity_score(const FeatureVector& image_vec, const FeatureVector& text_vec) {
  if (image_vec.dim() != text_vec.dim())
    throw Error("similarity_score: dim mismatch (" + std::to_string(image_vec.dim()) +
                    " vs " + std::to_string(text_vec.dim()) + ")",
                3);
  if (image_vec.dim() == 0) throw Error("similarity_score: empty vectors", 3);
  double dot = 0, ni = 0, nt = 0;
  for (int k = 0; k < image_vec.dim(); ++k) {
    dot += image_vec.values[k] * text_vec.values[k];
    ni += image_vec.values[k] * image_vec.values[k];
    nt += text_vec.values[k] * text_vec.values[k];
  }
  if (ni == 0.0 || nt == 0.0) throw Error("similarity_score: zero-norm vector", 3);
  return dot / (std::sqrt(ni) * std::sqrt(nt));
}

void score_records(std::vector<CaptionRecord>& records) {
  for (auto& r : records) r.similarity = similarity_score(r.image_embedding, r.text_embedding);
}

double quantile_threshold(const std::vector<CaptionRecord>& records, double q) {
  if (records.empty()) throw Error("quantile_threshold: no records", 2);
  if (q < 0.0 || q > 1.0) throw Error("quantile must lie in [0,1]");
  std::vector<double> ss;
  ss.reserve(records.size());
  for (const auto& r : records) {
    if (!r.similarity) throw Error("record '" + r.id + "' is unscored", 2);
    ss.push_back(*r.similarity);
  }
  std::sort(ss.begin(), ss.end());
  const double pos = q * static_cast<double>(ss.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, ss.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return ss[lo] * (1.0 - frac) + ss[hi] * frac;
}

std::pair<std::vector<CaptionRecord>, std::vector<CaptionRecord>> partition_by_threshold(
    const std::vector<CaptionRecord>& records, double tau) {
  std::vector<CaptionRecord> high, low;
  for (const auto& r : records) {
    if (!r.similarity) throw Error("record '" + r.id + "' is unscored", 2);
    CaptionRecord copy = r;
    if (*r.similarity >= tau) {
      copy.quality = Quality::kHigh;
      high.push_back(std::move(copy));
    } else {
      copy.quality = Quality::kLow;
      low.push_back(std::move(copy));
    }
  }
  return {std::move(high), std::move(low)};
}

std::string build_prompt(const CaptionRecord& record, const RefinementPrompt& p) {
  if (p.instruction.empty()) throw Error("refinement prompt has no instruction");
  std::string meta = p.metacaption;
  const std::string slot = "[title]";
  if (auto at = meta.find(slot); at != std::string::npos)
    meta.replace(at, slot.size(), record.caption);
  return "Instruction: " + p.instruction + "\nMetacaption: " + meta +
         "\nExample: " + p.example + "\n";
}

MockCaptionClient::MockCaptionClient()
    : handler_([](const std::string& id, const std::string&, const std::string&) {
        return Response{true, "OK:" + id, ""};
      }) {}

CaptionClient::Response HttpCaptionClient::refine(const std::string& id,
                                                  const std::string& image_ref,
                                                  const std::string& prompt) {
  httplib::Client client(opts_.host, opts_.port);
  client.set_connection_timeout(opts_.timeout_seconds, 0);
  client.set_read_timeout(opts_.timeout_seconds, 0);

  json body = {{"id", id}, {"image_ref", image_ref}, {"prompt", prompt}};
  auto res = client.Post(opts_.path, body.dump(), "application/json");
  if (!res) return {false, "", "connection failed: " + httplib::to_string(res.error())};
  if (res->status != 200)
    return {false, "", "HTTP status " + std::to_string(res->status)};
  try {
    json j = json::parse(res->body);
    return {true, j.at("caption").get<std::string>(), ""};
  } catch (const json::exception& e) {
    return {false, "", std::string("bad response body: ") + e.what()};
  }
}

std::vector<CaptionRecord> refine_captions(std::vector<CaptionRecord> low_records,
                                           CaptionClient& client,
                                           const RefineOptions& opts) {
  if (opts.max_attempts < 1) throw Error("max_attempts must be >= 1");
  const size_t n = low_records.size();
  if (n == 0) return low_records;

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      CaptionRecord& rec = low_records[i];
      const std::string prompt = build_prompt(rec, opts.prompt);
      const std::string image_ref = rec.image_ref.empty() ? rec.id : rec.image_ref;

      int attempt = 0;
      for (; attempt < opts.max_attempts; ++attempt) {
        if (attempt > 0 && opts.backoff_base_ms > 0) {
          const int delay = opts.backoff_base_ms << (attempt - 1);
          std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
        auto resp = client.refine(rec.id, image_ref, prompt);
        if (resp.ok) {
          rec.provenance = rec.caption;
          rec.caption = resp.caption;
          rec.quality = Quality::kRefined;
          rec.failed = false;
          break;
        }
      }
      rec.attempts = std::min(attempt + 1, opts.max_attempts);
      if (rec.quality != Quality::kRefined) rec.failed = true;
    }
  };

  const size_t n_workers =
      std::min<size_t>(std::max(1, opts.max_in_flight), n);
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return low_records;
}

PurifiedCounts assemble_purified(const std::vector<CaptionRecord>& high,
                                 const std::vector<CaptionRecord>& refined,
                                 const std::string& path) {
  std::set<std::string> ids;
  for (const auto& r : high)
    if (!ids.insert(r.id).second) throw Error("duplicate id '" + r.id + "' in high set", 2);
  for (const auto& r : refined)
    if (!ids.insert(r.id).second)
      throw Error("id collision between high and refined sets: '" + r.id + "'", 2);

  PurifiedCounts counts;
  counts.high = high.size();
  std::vector<CaptionRecord> all = high;
  for (const auto& r : refined) {
    if (r.failed)
      ++counts.failed;
    else
      ++counts.refined;
    all.push_back(r);
  }
  write_captions(path, all);
  return counts;
}

void write_captions(const std::string& path, const std::vector<CaptionRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    j["quality"] = to_string(r.quality);
    j["provenance"] = r.provenance;
    if (!r.image_ref.empty()) j["image_ref"] = r.image_ref;
    if (r.similarity) j["similarity"] = *r.similarity;
    if (r.attempts > 0) j["attempts"] = r.attempts;
    if (r.failed) j["failed"] = true;
    out << j.dump() << '\n';
  }
}

std::vector<CaptionRecord> read_captions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open captions '" + path + "'", 2);
  std::vector<CaptionRecord> out;
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
    CaptionRecord r;
    r.id = j.at("id").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    if (j.contains("quality")) r.quality = quality_from_string(j["quality"]);
    if (j.contains("provenance")) r.provenance = j["provenance"].get<std::string>();
    if (j.contains("image_ref")) r.image_ref = j["image_ref"].get<std::string>();
    if (j.contains("similarity")) r.similarity = j["similarity"].get<double>();
    if (j.contains("attempts")) r.attempts = j["attempts"].get<int>();
    if (j.contains("failed")) r.failed = j["failed"].get<bool>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace segqa::purify
