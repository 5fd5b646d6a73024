#pragma once
// Caption purification: cosine similarity scoring of image/text embedding
// pairs, threshold partition into high/low-quality captions, structured
// prompt construction, refinement through a pluggable caption service, and
// purified-dataset assembly.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segqa/core.hpp"

namespace segqa::purify {

enum class Quality { kUnscored, kHigh, kLow, kRefined };

std::string to_string(Quality q);
Quality quality_from_string(const std::string& s);

struct CaptionRecord {
  std::string id;
  std::string caption;
  std::string image_ref;  // opaque reference passed to the caption service
  FeatureVector image_embedding;
  FeatureVector text_embedding;
  std::optional<double> similarity;
  Quality quality = Quality::kUnscored;
  std::string provenance;  // original caption once refined
  int attempts = 0;
  bool failed = false;
};

// Structured refinement prompt; the metacaption template carries a [title]
// slot filled with the record's current caption.
struct RefinementPrompt {
  std::string instruction;
  std::string metacaption;
  std::string example;
};

// The shipped default prompt for aerial-imagery caption refinement.
RefinementPrompt default_prompt();

// Cosine similarity. Throws on dim mismatch or zero-norm input.
double similarity_score(const FeatureVector& image_vec, const FeatureVector& text_vec);

// Fills record.similarity for every record (parallel-safe, pure per record).
void score_records(std::vector<CaptionRecord>& records);

// q-quantile of the observed similarity scores (all records must be scored).
double quantile_threshold(const std::vector<CaptionRecord>& records, double q);

// high: SS >= tau (quality=kHigh), low: SS < tau (quality=kLow). Exhaustive
// and exclusive; throws on an unscored record.
std::pair<std::vector<CaptionRecord>, std::vector<CaptionRecord>> partition_by_threshold(
    const std::vector<CaptionRecord>& records, double tau);

// Instruction + filled metacaption + example, labeled sections, deterministic.
std::string build_prompt(const CaptionRecord& record, const RefinementPrompt& p);

// --- caption service clients ------------------------------------------------

class CaptionClient {
 public:
  struct Response {
    bool ok = false;
    std::string caption;
    std::string error;
  };

  virtual ~CaptionClient() = default;
  // May be called concurrently from several worker threads.
  virtual Response refine(const std::string& id, const std::string& image_ref,
                          const std::string& prompt) = 0;
};

// Scriptable in-process client; the handler runs under no lock and must be
// thread-safe if refinement runs with max_in_flight > 1.
class MockCaptionClient : public CaptionClient {
 public:
  using Handler = std::function<Response(const std::string& id,
                                         const std::string& image_ref,
                                         const std::string& prompt)>;

  MockCaptionClient();  // echoes "OK:" + id
  explicit MockCaptionClient(Handler handler) : handler_(std::move(handler)) {}

  Response refine(const std::string& id, const std::string& image_ref,
                  const std::string& prompt) override {
    return handler_(id, image_ref, prompt);
  }

 private:
  Handler handler_;
};

// HTTP-JSON client: POST {"id","image_ref","prompt"} -> {"caption"}.
class HttpCaptionClient : public CaptionClient {
 public:
  struct Options {
    std::string host;          // e.g. "localhost"
    int port = 80;
    std::string path = "/refine";
    int timeout_seconds = 30;
  };

  explicit HttpCaptionClient(Options opts) : opts_(std::move(opts)) {}
  Response refine(const std::string& id, const std::string& image_ref,
                  const std::string& prompt) override;

 private:
  Options opts_;
};

// --- refinement -------------------------------------------------------------

struct RefineOptions {
  RefinementPrompt prompt = default_prompt();
  int max_attempts = 3;       // total tries per record
  int backoff_base_ms = 100;  // doubles after each failed attempt; 0 disables
  int max_in_flight = 4;      // concurrent requests
};

// Refines every record through the client: caption replaced by the service
// response, original kept under provenance, quality set to kRefined. Records
// whose attempts are exhausted are flagged failed (never dropped); ids and
// order are preserved.
std::vector<CaptionRecord> refine_captions(std::vector<CaptionRecord> low_records,
                                           CaptionClient& client,
                                           const RefineOptions& opts = {});

// --- assembly and files -----------------------------------------------------

struct PurifiedCounts {
  size_t high = 0;
  size_t refined = 0;
  size_t failed = 0;
};

// Union of high-quality and refined records written as caption JSONL.
// Throws naming the id on a collision between the two sets.
PurifiedCounts assemble_purified(const std::vector<CaptionRecord>& high,
                                 const std::vector<CaptionRecord>& refined,
                                 const std::string& path);

// Caption JSONL: {"id","caption","quality","provenance"} per line (plus
// "image_ref", "similarity", "failed" when present).
void write_captions(const std::string& path, const std::vector<CaptionRecord>& records);
std::vector<CaptionRecord> read_captions(const std::string& path);

}  // namespace segqa::purify
