#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <cmath>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "segqa/cli.hpp"
#include "segqa/core.hpp"
#include "segqa/dataset.hpp"
#include "segqa/io.hpp"
#include "segqa/purify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segqa;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("segqa_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), {}};
}

// Two 2048x2048 sources (4 patches each), 3 methods, deterministic OA spread.
void write_build_inputs(const TempDir& tmp, const std::string& cfg_name = "config.json") {
  std::map<std::pair<std::string, std::string>, ConfusionMatrix> conf;
  const std::vector<std::string> methods{"m1", "m2", "m3"};
  int bump = 0;
  for (const std::string image : {"imgA", "imgB"}) {
    for (int y = 0; y < 2048; y += 1024) {
      for (int x = 0; x < 2048; x += 1024) {
        const std::string pid =
            image + "_x" + std::to_string(x) + "_y" + std::to_string(y);
        for (size_t mi = 0; mi < methods.size(); ++mi) {
          ConfusionMatrix cm(2);
          cm.at(0, 0) = 60 + 5 * bump % 25 + 10 * mi;
          cm.at(0, 1) = 20;
          cm.at(1, 0) = 10;
          cm.at(1, 1) = 50;
          conf[{pid, methods[mi]}] = cm;
        }
        ++bump;
      }
    }
  }
  dataset::write_confusions(tmp.file("confusions.csv"), conf);

  json cfg;
  cfg["seed"] = 11;
  cfg["dataset"]["patch_size"] = 1024;
  cfg["dataset"]["confusions_csv"] = tmp.file("confusions.csv");
  cfg["dataset"]["sources"] = json::array();
  for (const std::string image : {"imgA", "imgB"})
    cfg["dataset"]["sources"].push_back({{"image_id", image},
                                         {"width", 2048},
                                         {"height", 2048},
                                         {"dataset_tag", "synthetic"}});
  cfg["model"] = {{"d_sem", 12}, {"seg_channels", 6}, {"d_fused", 16},
                  {"d_hidden", 8}, {"heads", 2}};
  cfg["train"] = {{"method_id", "m1"}, {"max_steps", 60}, {"batch_size", 4},
                  {"learning_rate", 2e-3}};
  std::ofstream out(tmp.file(cfg_name));
  out << cfg.dump(2);
}

}  // namespace

TEST_CASE("build-dataset writes the manifest and label table deterministically") {
  TempDir tmp;
  write_build_inputs(tmp);

  const std::vector<std::string> args{"build-dataset", "--config", tmp.file("config.json"),
                                      "--out", tmp.file("run1")};
  REQUIRE(cli::run(args) == 0);

  auto manifest = dataset::read_manifest(tmp.file("run1/manifest.jsonl"));
  CHECK(manifest.records.size() == 8);  // 2 sources x 4 patches
  CHECK(manifest.split_records(Split::kTrain).size() == 6);  // round(0.8*8)
  auto labels = dataset::read_score_table_csv(tmp.file("run1/labels.csv"));
  CHECK(labels.n_images() == 8);
  CHECK(labels.n_methods() == 3);
  CHECK(fs::exists(tmp.file("run1/resolved_config.json")));

  // byte-identical rerun
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("run2")}) == 0);
  CHECK(slurp(tmp.file("run1/manifest.jsonl")) == slurp(tmp.file("run2/manifest.jsonl")));
  CHECK(slurp(tmp.file("run1/labels.csv")) == slurp(tmp.file("run2/labels.csv")));
}

TEST_CASE("build-dataset fails with exit 2 naming a missing confusion CSV") {
  TempDir tmp;
  write_build_inputs(tmp);
  json cfg = json::parse(slurp(tmp.file("config.json")));
  cfg["dataset"]["confusions_csv"] = tmp.file("nope.csv");
  std::ofstream(tmp.file("config.json")) << cfg.dump();
  CHECK(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                  tmp.file("out")}) == 2);
}

TEST_CASE("unknown config keys are rejected with exit 1") {
  TempDir tmp;
  std::ofstream(tmp.file("bad.json")) << R"({"trainx": {"lr": 1}})";
  CHECK(cli::run({"train", "--config", tmp.file("bad.json"), "--out", tmp.file("out")}) ==
        1);
}

TEST_CASE("override flags win over file values") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("o1"), "--override", "dataset.split.train=0.5",
                    "--override", "dataset.split.test=0.5"}) == 0);
  auto manifest = dataset::read_manifest(tmp.file("o1/manifest.jsonl"));
  CHECK(manifest.split_records(Split::kTrain).size() == 4);
}

TEST_CASE("train then eval produce a checkpoint, curve, metrics and scatter") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);

  // point the pipeline at the built manifest
  REQUIRE(cli::run({"train", "--config", tmp.file("config.json"), "--out",
                    tmp.file("train"), "--override",
                    "dataset.manifest=" + tmp.file("data/manifest.jsonl")}) == 0);
  CHECK(fs::exists(tmp.file("train/model.ckpt")));
  CHECK(fs::exists(tmp.file("train/model.ckpt.json")));
  CHECK(fs::exists(tmp.file("train/loss_curve.csv")));

  REQUIRE(cli::run({"eval", "--config", tmp.file("config.json"), "--out",
                    tmp.file("eval"), "--override",
                    "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                    "--override", "eval.method_id=m1", "--override",
                    "eval.split=train", "--override",
                    "eval.checkpoint=" + tmp.file("train/model.ckpt")}) == 0);
  json report = json::parse(slurp(tmp.file("eval/metrics.json")));
  CHECK(report["method_id"] == "m1");
  CHECK(report["n"].get<int>() == 6);
  CHECK(std::abs(report["srocc"].get<double>()) <= 1.0);
  CHECK(fs::exists(tmp.file("eval/scatter.csv")));
}

TEST_CASE("eval on oracle predictions yields plcc = srocc = 1") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);

  REQUIRE(cli::run({"eval", "--config", tmp.file("config.json"), "--out",
                    tmp.file("eval"), "--override",
                    "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                    "--override", "eval.method_id=m2", "--override",
                    "eval.split=train", "--override",
                    "eval.predictions_csv=" + tmp.file("data/labels.csv")}) == 0);
  json report = json::parse(slurp(tmp.file("eval/metrics.json")));
  CHECK(report["srocc"].get<double>() == doctest::Approx(1.0));
  CHECK(report["plcc"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(report["rmse"].get<double>() < 1e-3);
}

TEST_CASE("recommend on pred == truth reports perfect precision and ranked lists") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);

  REQUIRE(cli::run({"recommend", "--config", tmp.file("config.json"), "--out",
                    tmp.file("rec"), "--override",
                    "recommend.pred_table=" + tmp.file("data/labels.csv"),
                    "--override",
                    "recommend.truth_table=" + tmp.file("data/labels.csv")}) == 0);
  json report = json::parse(slurp(tmp.file("rec/recommendation.json")));
  CHECK(report["p_at_1"].get<double>() == 1.0);
  CHECK(report["p_at_3"].get<double>() == 1.0);
  CHECK(report["per_image"].size() == 8);
  CHECK(fs::exists(tmp.file("rec/ranked.csv")));
}

TEST_CASE("purify pipeline with the mock client") {
  TempDir tmp;

  io::EmbeddingFile img, txt;
  img.dim = txt.dim = 4;
  std::vector<purify::CaptionRecord> caps;
  Rng rng(90);
  for (int i = 0; i < 12; ++i) {
    const std::string id = "c" + std::to_string(i);
    FeatureVector a{{rng.normal(), rng.normal(), rng.normal(), rng.normal()}};
    FeatureVector b = a;
    if (i % 3 == 0)
      for (auto& v : b.values) v = rng.normal();  // scrambled -> low similarity
    img.by_id[id] = a;
    txt.by_id[id] = b;
    purify::CaptionRecord r;
    r.id = id;
    r.caption = "caption " + std::to_string(i);
    caps.push_back(r);
  }
  io::write_embeddings(tmp.file("img.jsonl"), img);
  io::write_embeddings(tmp.file("txt.jsonl"), txt);
  purify::write_captions(tmp.file("captions.jsonl"), caps);

  REQUIRE(cli::run({"purify", "--out", tmp.file("out"), "--override",
                    "purify.captions=" + tmp.file("captions.jsonl"), "--override",
                    "purify.image_embeddings=" + tmp.file("img.jsonl"), "--override",
                    "purify.text_embeddings=" + tmp.file("txt.jsonl"), "--override",
                    "purify.backoff_ms=0"}) == 0);

  json report = json::parse(slurp(tmp.file("out/purify_report.json")));
  CHECK(report["counts"]["total"].get<int>() == 12);
  const int high = report["counts"]["high"].get<int>();
  const int low = report["counts"]["low"].get<int>();
  CHECK(high + low == 12);
  CHECK(low > 0);  // 0.3-quantile default threshold keeps both branches busy
  CHECK(report["counts"]["refined"].get<int>() == low);

  auto purified = purify::read_captions(tmp.file("out/purified.jsonl"));
  CHECK(purified.size() == 12);
}

TEST_CASE("report aggregates one column per method") {
  TempDir tmp;
  for (int i = 1; i <= 3; ++i) {
    json j;
    j["method_id"] = "m" + std::to_string(i);
    j["split"] = "test";
    j["n"] = 10;
    j["plcc"] = 0.9 - 0.1 * i;
    j["srocc"] = 0.85;
    j["krocc"] = 0.7;
    j["rmse"] = 0.05;
    j["fitted_betas"] = {1.0, 0.0, 0.5, 0.1};
    j["warnings"] = json::array();
    std::ofstream(tmp.file("metrics_m" + std::to_string(i) + ".json")) << j.dump();
  }

  REQUIRE(cli::run({"report", "--out", tmp.file("out"), "--override",
                    "report.inputs=[\"" + tmp.file("metrics_m1.json") + "\",\"" +
                        tmp.file("metrics_m2.json") + "\",\"" +
                        tmp.file("metrics_m3.json") + "\"]"}) == 0);

  std::ifstream in(tmp.file("out/report.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "metric,m1,m2,m3");  // column count == methods
  json table = json::parse(slurp(tmp.file("out/report.json")));
  CHECK(table.size() == 3);
}

TEST_CASE("dataset tags listed in exclude_tags are filtered out") {
  TempDir tmp;
  write_build_inputs(tmp);
  json cfg = json::parse(slurp(tmp.file("config.json")));
  cfg["dataset"]["sources"][1]["dataset_tag"] = "flooded";
  cfg["dataset"]["exclude_tags"] = {"flooded"};
  std::ofstream(tmp.file("config.json")) << cfg.dump();

  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("out")}) == 0);
  auto manifest = dataset::read_manifest(tmp.file("out/manifest.jsonl"));
  CHECK(manifest.records.size() == 4);  // only imgA's patches remain
  for (const auto& r : manifest.records) CHECK(r.dataset_tag == "synthetic");
}

TEST_CASE("end-to-end: eight desk models feed the recommender and the report") {
  TempDir tmp;

  // one 4096^2 source -> 16 patches; 8 methods with patch-dependent OA
  const auto crops = dataset::crop_patches("img0", 4096, 4096, 1024);
  std::map<std::pair<std::string, std::string>, ConfusionMatrix> conf;
  Rng rng(404);
  for (const auto& g : crops) {
    const std::string pid =
        "img0_x" + std::to_string(g.x0) + "_y" + std::to_string(g.y0);
    const double difficulty = rng.uniform(0.05, 0.4);
    for (int m = 1; m <= 8; ++m) {
      ConfusionMatrix cm(2);
      const double err =
          std::clamp(difficulty + 0.04 * m + rng.uniform(-0.03, 0.03), 0.01, 0.9);
      cm.at(0, 0) = static_cast<std::uint64_t>(1000 * (1.0 - err));
      cm.at(0, 1) = static_cast<std::uint64_t>(1000 * err) + 1;
      cm.at(1, 1) = 500;
      conf[{pid, "m" + std::to_string(m)}] = cm;
    }
  }
  dataset::write_confusions(tmp.file("confusions.csv"), conf);

  json cfg;
  cfg["seed"] = 17;
  cfg["dataset"]["patch_size"] = 1024;
  cfg["dataset"]["confusions_csv"] = tmp.file("confusions.csv");
  cfg["dataset"]["sources"] = {{{"image_id", "img0"}, {"width", 4096},
                                {"height", 4096}, {"dataset_tag", "synthetic"}}};
  cfg["model"] = {{"d_sem", 12}, {"seg_channels", 6}, {"d_fused", 16},
                  {"d_hidden", 8}, {"heads", 2}};
  cfg["train"] = {{"max_steps", 40}, {"batch_size", 4}, {"learning_rate", 2e-3}};
  std::ofstream(tmp.file("config.json")) << cfg.dump(2);

  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);

  json pred_files = json::object();
  json report_inputs = json::array();
  for (int m = 1; m <= 8; ++m) {
    const std::string method = "m" + std::to_string(m);
    REQUIRE(cli::run({"train", "--config", tmp.file("config.json"), "--out",
                      tmp.file("train_" + method), "--override",
                      "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                      "--override", "train.method_id=" + method}) == 0);
    REQUIRE(cli::run({"eval", "--config", tmp.file("config.json"), "--out",
                      tmp.file("eval_" + method), "--override",
                      "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                      "--override", "eval.method_id=" + method, "--override",
                      "eval.split=train", "--override",
                      "eval.checkpoint=" + tmp.file("train_" + method + "/model.ckpt")}) ==
            0);
    pred_files[method] = tmp.file("eval_" + method + "/scatter.csv");
    report_inputs.push_back(tmp.file("eval_" + method + "/metrics.json"));
  }

  REQUIRE(cli::run({"recommend", "--config", tmp.file("config.json"), "--out",
                    tmp.file("rec"), "--override",
                    "recommend.predictions=" + pred_files.dump(), "--override",
                    "recommend.truth_table=" + tmp.file("data/labels.csv")}) == 0);
  json rec = json::parse(slurp(tmp.file("rec/recommendation.json")));
  CHECK(rec["per_image"].size() == 13);  // train split of 16 records
  CHECK(rec["p_at_1"].get<double>() >= 0.0);
  CHECK(rec["p_at_1"].get<double>() <= 1.0);
  CHECK(rec["p_at_3"].get<double>() >= rec["p_at_1"].get<double>());
  for (const auto& img : rec["per_image"]) CHECK(img["ranked_methods"].size() == 8);

  REQUIRE(cli::run({"report", "--out", tmp.file("rep"), "--override",
                    "report.inputs=" + report_inputs.dump()}) == 0);
  std::ifstream in(tmp.file("rep/report.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "metric,m1,m2,m3,m4,m5,m6,m7,m8");
}

TEST_CASE("train is byte-identical across reruns with the same seed") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);
  for (const std::string run : {"t1", "t2"}) {
    REQUIRE(cli::run({"train", "--config", tmp.file("config.json"), "--out",
                      tmp.file(run), "--override",
                      "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                      "--override", "train.max_steps=30"}) == 0);
  }
  CHECK(slurp(tmp.file("t1/model.ckpt")) == slurp(tmp.file("t2/model.ckpt")));
  CHECK(slurp(tmp.file("t1/loss_curve.csv")) == slurp(tmp.file("t2/loss_curve.csv")));
}

TEST_CASE("file-backed embeddings and feature maps drive train and eval") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);
  auto manifest = dataset::read_manifest(tmp.file("data/manifest.jsonl"));

  io::EmbeddingFile emb;
  emb.dim = 12;
  io::FeatureMapFile maps;
  maps.dim = 6;
  Rng rng(91);
  for (const auto& r : manifest.records) {
    FeatureVector v{std::vector<double>(12)};
    for (auto& x : v.values) x = rng.normal();
    emb.by_id[r.patch_id] = v;
    FeatureMap m(3, 3, 6);
    for (auto& x : m.values) x = rng.normal();
    maps.by_id[r.patch_id] = m;
  }
  io::write_embeddings(tmp.file("emb.jsonl"), emb);
  io::write_feature_maps(tmp.file("segmaps.jsonl"), maps);

  REQUIRE(cli::run({"train", "--config", tmp.file("config.json"), "--out",
                    tmp.file("train"), "--override",
                    "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                    "--override", "model.semantic_source=" + tmp.file("emb.jsonl"),
                    "--override",
                    "model.segmentation_source=" + tmp.file("segmaps.jsonl"),
                    "--override", "train.max_steps=30"}) == 0);
  REQUIRE(cli::run({"eval", "--config", tmp.file("config.json"), "--out",
                    tmp.file("eval"), "--override",
                    "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                    "--override", "model.semantic_source=" + tmp.file("emb.jsonl"),
                    "--override",
                    "model.segmentation_source=" + tmp.file("segmaps.jsonl"),
                    "--override", "eval.method_id=m1", "--override", "eval.split=train",
                    "--override", "eval.checkpoint=" + tmp.file("train/model.ckpt")}) ==
          0);

  // a file with the wrong width is rejected up front
  CHECK(cli::run({"train", "--config", tmp.file("config.json"), "--out", tmp.file("t2"),
                  "--override", "dataset.manifest=" + tmp.file("data/manifest.jsonl"),
                  "--override", "model.semantic_source=" + tmp.file("emb.jsonl"),
                  "--override", "model.d_sem=64"}) == 2);
}

TEST_CASE("purify reaches a real HTTP refinement endpoint") {
  TempDir tmp;
  io::EmbeddingFile img, txt;
  img.dim = txt.dim = 3;
  std::vector<purify::CaptionRecord> caps;
  Rng rng(92);
  for (int i = 0; i < 6; ++i) {
    const std::string id = "c" + std::to_string(i);
    FeatureVector a{{rng.normal(), rng.normal(), rng.normal()}};
    FeatureVector b = a;
    if (i % 2 == 0)
      for (auto& v : b.values) v = rng.normal();
    img.by_id[id] = a;
    txt.by_id[id] = b;
    purify::CaptionRecord r;
    r.id = id;
    r.caption = "caption " + std::to_string(i);
    caps.push_back(r);
  }
  io::write_embeddings(tmp.file("img.jsonl"), img);
  io::write_embeddings(tmp.file("txt.jsonl"), txt);
  purify::write_captions(tmp.file("captions.jsonl"), caps);

  httplib::Server server;
  server.Post("/refine", [](const httplib::Request& req, httplib::Response& res) {
    auto body = json::parse(req.body);
    res.set_content(
        json{{"caption", "http:" + body.at("id").get<std::string>()}}.dump(),
        "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const int rc = cli::run(
      {"purify", "--out", tmp.file("out"), "--override",
       "purify.captions=" + tmp.file("captions.jsonl"), "--override",
       "purify.image_embeddings=" + tmp.file("img.jsonl"), "--override",
       "purify.text_embeddings=" + tmp.file("txt.jsonl"), "--override",
       "purify.client=http", "--override", "purify.http.host=127.0.0.1", "--override",
       "purify.http.port=" + std::to_string(port), "--override", "purify.backoff_ms=0"});
  server.stop();
  th.join();
  REQUIRE(rc == 0);

  auto purified = purify::read_captions(tmp.file("out/purified.jsonl"));
  size_t refined = 0;
  for (const auto& r : purified)
    if (r.quality == purify::Quality::kRefined) {
      ++refined;
      CHECK(r.caption == "http:" + r.id);
    }
  CHECK(refined > 0);
}

TEST_CASE("--seed flag wins over the config file seed") {
  TempDir tmp;
  write_build_inputs(tmp);  // config carries seed 11
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("out"), "--seed", "4242"}) == 0);
  json snapshot = json::parse(slurp(tmp.file("out/resolved_config.json")));
  CHECK(snapshot["seed"].get<std::uint64_t>() == 4242);
}

TEST_CASE("recommend rejects a prediction table with a NaN cell") {
  TempDir tmp;
  write_build_inputs(tmp);
  REQUIRE(cli::run({"build-dataset", "--config", tmp.file("config.json"), "--out",
                    tmp.file("data")}) == 0);
  auto table = dataset::read_score_table_csv(tmp.file("data/labels.csv"));
  table.at(0, 0) = std::nan("");
  dataset::write_score_table_csv(tmp.file("bad.csv"), table);
  CHECK(cli::run({"recommend", "--config", tmp.file("config.json"), "--out",
                  tmp.file("rec"), "--override",
                  "recommend.pred_table=" + tmp.file("bad.csv"), "--override",
                  "recommend.truth_table=" + tmp.file("data/labels.csv")}) == 2);
}

TEST_CASE("usage errors exit 1: missing subcommand and bad override") {
  CHECK(cli::run({}) == 1);
  CHECK(cli::run({"train", "--override", "no_equals_sign"}) == 1);
  CHECK(cli::run({"train", "--override", "bogus.key=1"}) == 1);
}
