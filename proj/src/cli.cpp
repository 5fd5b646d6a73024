#include "segqa/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "segqa/config.hpp"
#include "segqa/dataset.hpp"
#include "segqa/metrics.hpp"
#include "segqa/model.hpp"
#include "segqa/purify.hpp"
#include "segqa/recommend.hpp"
#include "segqa/training.hpp"

namespace segqa::cli {

namespace fs = std::filesystem;
using config::Config;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

Config resolve_config(const CommonArgs& args) {
  Config cfg = args.config_path.empty() ? Config::defaults()
                                        : Config::from_file(args.config_path);
  for (const auto& o : args.overrides) cfg.apply_override(o);
  if (args.seed_given) cfg.set("seed", args.seed);
  return cfg;
}

// Output paths from the config are taken relative to --out.
std::string out_path(const CommonArgs& args, const std::string& configured) {
  fs::path p(configured);
  if (p.is_absolute()) return p.string();
  return (fs::path(args.out_dir) / p).string();
}

void prepare_out_dir(const CommonArgs& args, const Config& cfg) {
  fs::create_directories(args.out_dir);
  cfg.write_snapshot(out_path(args, "resolved_config.json"));
}

std::unique_ptr<model::SemanticEncoder> make_encoder(const Config& cfg) {
  const std::string source = cfg.get_string("model.semantic_source");
  if (source == "toy") {
    model::TinyVitEncoder::Options opts;
    opts.d_sem = cfg.get_int("model.d_sem");
    opts.heads = cfg.get_int("model.heads");
    opts.seed = cfg.get_uint64("seed");
    return std::make_unique<model::TinyVitEncoder>(opts);
  }
  auto enc = std::make_unique<model::FileBackedEncoder>(io::read_embeddings(source));
  if (enc->dim() != cfg.get_int("model.d_sem"))
    throw Error("model.d_sem=" + std::to_string(cfg.get_int("model.d_sem")) +
                    " but '" + source + "' stores dim " + std::to_string(enc->dim()),
                2);
  return enc;
}

std::unique_ptr<model::SegmentationFeatureProvider> make_seg_provider(
    const Config& cfg, const std::string& method_id) {
  const std::string source = cfg.get_string("model.segmentation_source");
  if (source == "toy")
    return std::make_unique<model::ToySegFeatures>(
        method_id, cfg.get_int("model.seg_channels"), cfg.get_uint64("seed"));
  auto prov =
      std::make_unique<model::FileBackedSegFeatures>(io::read_feature_maps(source));
  if (prov->channels() != cfg.get_int("model.seg_channels"))
    throw Error("model.seg_channels=" + std::to_string(cfg.get_int("model.seg_channels")) +
                    " but '" + source + "' stores c=" + std::to_string(prov->channels()),
                2);
  return prov;
}

model::ModelConfig model_config_from(const Config& cfg) {
  model::ModelConfig mc;
  mc.d_sem = cfg.get_int("model.d_sem");
  mc.seg_channels = cfg.get_int("model.seg_channels");
  mc.d_fused = cfg.get_int("model.d_fused");
  mc.d_hidden = cfg.get_int("model.d_hidden");
  mc.heads = cfg.get_int("model.heads");
  mc.adapter_blocks = cfg.get_int("model.adapter_blocks");
  mc.ffn_mult = cfg.get_int("model.ffn_mult");
  mc.dropout = cfg.get_number("model.dropout");
  mc.use_token_sequence = cfg.get_bool("model.use_token_sequence");
  return mc;
}

training::TrainConfig train_config_from(const Config& cfg) {
  training::TrainConfig tc;
  tc.learning_rate = cfg.get_number("train.learning_rate");
  tc.max_steps = cfg.get_int("train.max_steps");
  tc.batch_size = cfg.get_int("train.batch_size");
  tc.warmup_steps = cfg.get_int("train.warmup_steps");
  tc.decay_step_size = cfg.get_int("train.decay_step_size");
  tc.decay_gamma = cfg.get_number("train.decay_gamma");
  tc.weight_decay = cfg.get_number("train.weight_decay");
  tc.grad_clip_norm = cfg.get_number("train.grad_clip_norm");
  tc.seed = cfg.get_uint64("seed");
  return tc;
}

training::LossConfig loss_config_from(const Config& cfg) {
  training::LossConfig lc;
  lc.alpha = cfg.get_number("loss.alpha");
  lc.epsilon = cfg.get_number("loss.epsilon");
  return lc;
}

// --- subcommands ------------------------------------------------------------

int cmd_build_dataset(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  const json& sources = cfg.get("dataset.sources");
  if (sources.empty()) throw Error("dataset.sources is empty", 2);
  const int patch = cfg.get_int("dataset.patch_size");
  const auto exclude = cfg.get("dataset.exclude_tags").get<std::vector<std::string>>();

  std::vector<QualityRecord> records;
  for (const auto& src : sources) {
    const std::string tag = src.at("dataset_tag").get<std::string>();
    if (std::find(exclude.begin(), exclude.end(), tag) != exclude.end()) continue;
    const std::string image = src.at("image_id").get<std::string>();
    for (const auto& geom :
         dataset::crop_patches(image, src.at("width").get<int>(),
                               src.at("height").get<int>(), patch)) {
      QualityRecord r;
      r.patch_id = image + "_x" + std::to_string(geom.x0) + "_y" +
                   std::to_string(geom.y0);
      r.dataset_tag = tag;
      r.geom = geom;
      r.feature_refs["semantic"] = cfg.get_string("model.semantic_source");
      r.feature_refs["segmentation"] = cfg.get_string("model.segmentation_source");
      records.push_back(std::move(r));
    }
  }

  auto manifest = dataset::split_manifest(
      std::move(records),
      {cfg.get_number("dataset.split.train"), cfg.get_number("dataset.split.test")},
      RngSeed{cfg.get_uint64("seed")}, patch);

  const std::string confusions_path = cfg.require_string("dataset.confusions_csv");
  if (!fs::exists(confusions_path))
    throw Error("confusion CSV '" + confusions_path + "' does not exist", 2);
  auto confusions = dataset::read_confusions(confusions_path);
  auto labels = dataset::build_label_table(manifest, confusions);
  dataset::attach_labels(manifest, labels);

  const std::string manifest_path = out_path(args, cfg.get_string("dataset.manifest"));
  const std::string labels_path = out_path(args, cfg.get_string("dataset.labels_csv"));
  dataset::write_manifest(manifest_path, manifest);
  dataset::write_score_table_csv(labels_path, labels);

  size_t n_train = manifest.split_records(Split::kTrain).size();
  std::cout << "build-dataset: " << manifest.records.size() << " patches ("
            << n_train << " train / " << manifest.records.size() - n_train
            << " test), " << labels.n_methods() << " methods\n"
            << "  manifest: " << manifest_path << "\n  labels:   " << labels_path
            << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  const std::string method_id = cfg.require_string("train.method_id");
  auto manifest = dataset::read_manifest(cfg.require_string("dataset.manifest"));
  auto encoder = make_encoder(cfg);
  auto seg = make_seg_provider(cfg, method_id);

  auto examples = training::build_examples(manifest, Split::kTrain, method_id, *encoder,
                                           *seg, cfg.get_bool("model.use_token_sequence"));

  model::QualityModel<float> m;
  m.init(model_config_from(cfg), Rng(cfg.get_uint64("seed")).derive("model-init"));

  auto result = training::train(m, examples, train_config_from(cfg), loss_config_from(cfg));

  const std::string curve_path = out_path(args, cfg.get_string("train.loss_curve_csv"));
  training::write_loss_curve(curve_path, result.curve);

  model::CheckpointMeta meta;
  meta.config_hash = cfg.hash();
  meta.step = static_cast<int>(result.curve.size());
  meta.train_loss = result.final_loss;
  if (!result.curve.empty()) {
    const auto& last = result.curve.back();
    meta.metrics_json =
        json{{"mse", last.mse}, {"kl", last.kl}, {"total", last.total}}.dump();
  }
  const std::string ckpt_path = out_path(args, cfg.get_string("train.checkpoint"));
  model::save_checkpoint(ckpt_path, m, meta);

  std::cout << "train: method " << method_id << ", " << examples.size()
            << " examples, " << result.curve.size() << " steps, final loss "
            << result.final_loss << "\n  checkpoint: " << ckpt_path
            << "\n  curve:      " << curve_path << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  const std::string method_id = cfg.require_string("eval.method_id");
  const std::string split_name = cfg.get_string("eval.split");
  const Split split = split_from_string(split_name);
  const std::string manifest_path = cfg.is_null("eval.manifest")
                                        ? cfg.require_string("dataset.manifest")
                                        : cfg.get_string("eval.manifest");
  auto manifest = dataset::read_manifest(manifest_path);

  std::vector<std::string> patch_ids;
  std::vector<double> preds, labels;

  if (!cfg.is_null("eval.predictions_csv")) {
    // Score an existing prediction table against the manifest labels.
    auto table = dataset::read_score_table_csv(cfg.get_string("eval.predictions_csv"));
    const int col = table.method_index(method_id);
    if (col < 0)
      throw Error("predictions table has no column for '" + method_id + "'", 2);
    std::map<std::string, double> by_id;
    for (size_t i = 0; i < table.n_images(); ++i)
      by_id[table.image_ids[i]] = table.at(i, static_cast<size_t>(col));
    for (const auto* r : manifest.split_records(split)) {
      auto pit = by_id.find(r->patch_id);
      if (pit == by_id.end())
        throw Error("predictions table has no row for patch '" + r->patch_id + "'", 2);
      auto lit = r->labels.find(method_id);
      if (lit == r->labels.end())
        throw Error("record '" + r->patch_id + "' has no label for '" + method_id + "'",
                    2);
      patch_ids.push_back(r->patch_id);
      preds.push_back(pit->second);
      labels.push_back(lit->second);
    }
  } else {
    auto encoder = make_encoder(cfg);
    auto seg = make_seg_provider(cfg, method_id);
    auto examples = training::build_examples(
        manifest, split, method_id, *encoder, *seg,
        cfg.get_bool("model.use_token_sequence"));
    model::QualityModel<float> m;
    m.init(model_config_from(cfg), Rng(cfg.get_uint64("seed")).derive("model-init"));
    model::load_checkpoint(cfg.require_string("eval.checkpoint"), m);
    auto result = training::evaluate(m, examples);
    patch_ids = std::move(result.patch_ids);
    preds = std::move(result.predictions);
    labels = std::move(result.labels);
  }

  auto bundle = metrics::metric_bundle(preds, labels);
  const std::string report_path = out_path(args, cfg.get_string("metrics.report_json"));
  {
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw Error("cannot open '" + report_path + "' for writing", 2);
    out << metrics::bundle_to_json(bundle, method_id, split_name);
  }
  const std::string scatter_path = out_path(args, cfg.get_string("metrics.scatter_csv"));
  metrics::write_scatter_csv(scatter_path, patch_ids, preds, labels);

  std::cout << "eval: method " << method_id << " on " << split_name << " (n="
            << bundle.n << ")\n  plcc " << bundle.plcc << "  srocc " << bundle.srocc
            << "  krocc " << bundle.krocc << "  rmse " << bundle.rmse
            << "\n  report:  " << report_path << "\n  scatter: " << scatter_path << "\n";
  return 0;
}

ScoreTable assemble_pred_table(const Config& cfg) {
  if (!cfg.is_null("recommend.pred_table"))
    return dataset::read_score_table_csv(cfg.get_string("recommend.pred_table"));

  const json& files = cfg.get("recommend.predictions");
  if (files.empty())
    throw Error("set recommend.pred_table or recommend.predictions", 2);

  // Assemble per-method scatter exports (patch_id,predicted,label) into one
  // table; all files must cover the identical patch set.
  ScoreTable t;
  std::map<std::string, std::map<std::string, double>> columns;  // method -> id -> score
  for (const auto& [method, path] : files.items()) {
    std::ifstream in(path.get<std::string>());
    if (!in) throw Error("cannot open predictions '" + path.get<std::string>() + "'", 2);
    std::string line;
    std::getline(in, line);  // header
    auto& col = columns[method];
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw Error("bad scatter line in '" + path.get<std::string>() + "'", 2);
      col[line.substr(0, c1)] = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    }
    t.method_ids.push_back(method);
  }
  const auto& first = columns.begin()->second;
  for (const auto& [id, v] : first) t.image_ids.push_back(id);
  t.scores.assign(t.n_images() * t.n_methods(), 0.0);
  for (size_t m = 0; m < t.n_methods(); ++m) {
    const auto& col = columns.at(t.method_ids[m]);
    if (col.size() != t.n_images())
      throw Error("prediction files cover different patch sets", 2);
    for (size_t i = 0; i < t.n_images(); ++i) {
      auto it = col.find(t.image_ids[i]);
      if (it == col.end())
        throw Error("method '" + t.method_ids[m] + "' is missing patch '" +
                        t.image_ids[i] + "'",
                    2);
      t.at(i, m) = it->second;
    }
  }
  return t;
}

int cmd_recommend(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  ScoreTable pred = assemble_pred_table(cfg);
  ScoreTable truth = dataset::read_score_table_csv(cfg.require_string("recommend.truth_table"));

  // Align truth to the prediction table's patch set and method order.
  ScoreTable aligned;
  aligned.image_ids = pred.image_ids;
  aligned.method_ids = pred.method_ids;
  aligned.scores.assign(pred.scores.size(), 0.0);
  std::map<std::string, size_t> truth_row;
  for (size_t i = 0; i < truth.n_images(); ++i) truth_row[truth.image_ids[i]] = i;
  for (size_t i = 0; i < pred.n_images(); ++i) {
    auto it = truth_row.find(pred.image_ids[i]);
    if (it == truth_row.end())
      throw Error("truth table has no row for patch '" + pred.image_ids[i] + "'", 2);
    for (size_t m = 0; m < pred.n_methods(); ++m) {
      const int col = truth.method_index(pred.method_ids[m]);
      if (col < 0)
        throw Error("truth table has no column for method '" + pred.method_ids[m] + "'",
                    2);
      aligned.at(i, m) = truth.at(it->second, static_cast<size_t>(col));
    }
  }

  for (const auto* table : {&pred, &aligned}) {
    const auto violations = validate_score_table(*table);
    if (!violations.empty()) {
      std::string msg = table == &pred ? "prediction" : "truth";
      msg += " table is invalid:";
      for (size_t i = 0; i < violations.size() && i < 5; ++i)
        msg += " " + violations[i].message + ";";
      throw Error(msg, 2);
    }
  }

  auto result = recommend::evaluate(pred, aligned, cfg.get_number("recommend.pred_tol"),
                                    cfg.get_number("recommend.truth_tol"));

  const std::string report_path = out_path(args, cfg.get_string("recommend.report_json"));
  {
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw Error("cannot open '" + report_path + "' for writing", 2);
    out << recommend::result_to_json(result);
  }
  const std::string ranked_path = out_path(args, cfg.get_string("recommend.ranked_csv"));
  recommend::write_ranked_csv(ranked_path, result);

  std::cout << "recommend: " << result.per_image.size() << " images, "
            << pred.n_methods() << " methods\n  P@1 = " << result.p_at_1
            << "\n  P@3 = " << result.p_at_3 << "\n";
  for (const auto& rec : result.per_image) {
    std::cout << "  " << rec.patch_id << ":";
    for (const auto& m : rec.ranked_methods) std::cout << " " << m;
    std::cout << "\n";
  }
  std::cout << "  report: " << report_path << "\n  ranked: " << ranked_path << "\n";
  return 0;
}

int cmd_purify(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  auto records = purify::read_captions(cfg.require_string("purify.captions"));
  if (records.empty()) throw Error("no caption records", 2);
  auto image_emb = io::read_embeddings(cfg.require_string("purify.image_embeddings"));
  auto text_emb = io::read_embeddings(cfg.require_string("purify.text_embeddings"));
  for (auto& r : records) {
    auto iit = image_emb.by_id.find(r.id);
    auto tit = text_emb.by_id.find(r.id);
    if (iit == image_emb.by_id.end())
      throw Error("no image embedding for caption '" + r.id + "'", 2);
    if (tit == text_emb.by_id.end())
      throw Error("no text embedding for caption '" + r.id + "'", 2);
    r.image_embedding = iit->second;
    r.text_embedding = tit->second;
  }

  purify::score_records(records);
  const double tau = cfg.is_null("purify.threshold")
                         ? purify::quantile_threshold(
                               records, cfg.get_number("purify.threshold_quantile"))
                         : cfg.get_number("purify.threshold");
  auto [high, low] = purify::partition_by_threshold(records, tau);

  std::unique_ptr<purify::CaptionClient> client;
  const std::string client_kind = cfg.get_string("purify.client");
  if (client_kind == "mock") {
    client = std::make_unique<purify::MockCaptionClient>();
  } else if (client_kind == "http") {
    purify::HttpCaptionClient::Options opts;
    opts.host = cfg.get_string("purify.http.host");
    opts.port = cfg.get_int("purify.http.port");
    opts.path = cfg.get_string("purify.http.path");
    opts.timeout_seconds = cfg.get_int("purify.http.timeout_seconds");
    client = std::make_unique<purify::HttpCaptionClient>(opts);
  } else {
    throw Error("purify.client must be 'mock' or 'http'");
  }

  purify::RefineOptions ropts;
  ropts.max_attempts = cfg.get_int("purify.max_attempts");
  ropts.backoff_base_ms = cfg.get_int("purify.backoff_ms");
  ropts.max_in_flight = cfg.get_int("purify.max_in_flight");
  auto refined = purify::refine_captions(low, *client, ropts);

  const std::string out_file = out_path(args, cfg.get_string("purify.purified_out"));
  auto counts = purify::assemble_purified(high, refined, out_file);

  json report;
  report["threshold"] = tau;
  report["counts"] = {{"total", records.size()},
                      {"high", counts.high},
                      {"low", low.size()},
                      {"refined", counts.refined},
                      {"failed", counts.failed}};
  const std::string report_path = out_path(args, cfg.get_string("purify.report_json"));
  {
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw Error("cannot open '" + report_path + "' for writing", 2);
    out << report.dump(2) << '\n';
  }

  std::cout << "purify: " << records.size() << " records, tau = " << tau << "\n  high "
            << counts.high << ", low " << low.size() << " (refined " << counts.refined
            << ", failed " << counts.failed << ")\n  purified: " << out_file
            << "\n  report:   " << report_path << "\n";
  return 0;
}

int cmd_report(const CommonArgs& args) {
  Config cfg = resolve_config(args);
  prepare_out_dir(args, cfg);

  const auto inputs = cfg.get("report.inputs").get<std::vector<std::string>>();
  if (inputs.empty()) throw Error("report.inputs is empty", 2);

  std::vector<std::string> methods;
  std::map<std::string, json> by_method;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open metric report '" + path + "'", 2);
    json j = json::parse(in);
    const std::string method = j.at("method_id").get<std::string>();
    methods.push_back(method);
    by_method[method] = j;
  }

  const std::vector<std::string> rows = {"plcc", "srocc", "krocc", "rmse", "n"};
  const std::string csv_path = out_path(args, cfg.get_string("report.table_csv"));
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw Error("cannot open '" + csv_path + "' for writing", 2);
    out << "metric";
    for (const auto& m : methods) out << ',' << m;
    out << '\n';
    out.precision(17);
    for (const auto& row : rows) {
      out << row;
      for (const auto& m : methods) out << ',' << by_method[m].at(row).dump();
      out << '\n';
    }
  }
  json table;
  for (const auto& m : methods) table[m] = by_method[m];
  const std::string json_path = out_path(args, cfg.get_string("report.table_json"));
  {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw Error("cannot open '" + json_path + "' for writing", 2);
    out << table.dump(2) << '\n';
  }

  std::cout << "report: " << methods.size() << " methods\n  table: " << csv_path
            << "\n  json:  " << json_path << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"No-reference segmentation quality assessment toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Config file (JSON)");
    sub->add_option("--out", common.out_dir, "Output directory");
    sub->add_option("--override", common.overrides,
                    "Config override key.path=value (repeatable)");
    sub->add_option("--seed", common.seed, "Top-level RNG seed")
        ->each([&](const std::string&) { common.seed_given = true; });
  };

  int (*handler)(const CommonArgs&) = nullptr;
  struct SubDef {
    const char* name;
    const char* desc;
    int (*fn)(const CommonArgs&);
  };
  const SubDef subs[] = {
      {"build-dataset", "Crop sources, split, compute OA labels", cmd_build_dataset},
      {"train", "Train the quality model for one method", cmd_train},
      {"eval", "Evaluate predictions on a split", cmd_eval},
      {"recommend", "Rank methods per image and report P@1/P@3", cmd_recommend},
      {"purify", "Score, partition and refine captions", cmd_purify},
      {"report", "Aggregate per-method metric reports", cmd_report},
  };
  for (const auto& def : subs) {
    CLI::App* sub = app.add_subcommand(def.name, def.desc);
    add_common(sub);
    sub->callback([&handler, fn = def.fn]() { handler = fn; });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage errors exit 1
  }

  try {
    return handler ? handler(common) : 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace segqa::cli
