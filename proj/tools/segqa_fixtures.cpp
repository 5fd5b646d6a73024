// Generates a self-contained synthetic input set for desk runs and CI: a
// config with source extents, per-patch/per-method confusion matrices whose
// OA tracks a hidden per-patch difficulty, caption records and paired
// image/text embeddings for the purification pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "segqa/core.hpp"
#include "segqa/dataset.hpp"
#include "segqa/io.hpp"
#include "segqa/purify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segqa;

int main(int argc, char** argv) {
  CLI::App app{"Synthetic fixture generator"};
  std::string out_dir = "fixtures";
  std::uint64_t seed = 7;
  int n_sources = 2;
  int extent = 4096;
  int patch_size = 1024;
  int n_methods = 4;
  int n_classes = 4;
  int label_side = 64;
  int n_captions = 40;
  int emb_dim = 16;
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--sources", n_sources, "Number of source images");
  app.add_option("--extent", extent, "Source image side length in pixels");
  app.add_option("--patch-size", patch_size, "Patch side length");
  app.add_option("--methods", n_methods, "Number of candidate methods");
  app.add_option("--classes", n_classes, "Label classes");
  app.add_option("--captions", n_captions, "Caption records for purify");
  app.add_option("--emb-dim", emb_dim, "Embedding dim for purify");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out_dir);
    Rng rng = Rng(seed).derive("fixtures");

    // Source extents + config.
    json sources = json::array();
    std::vector<std::string> patch_ids;
    for (int s = 0; s < n_sources; ++s) {
      const std::string image = "img" + std::to_string(s);
      sources.push_back({{"image_id", image},
                         {"width", extent},
                         {"height", extent},
                         {"dataset_tag", s % 2 == 0 ? "urban" : "rural"}});
      for (const auto& g : dataset::crop_patches(image, extent, extent, patch_size))
        patch_ids.push_back(image + "_x" + std::to_string(g.x0) + "_y" +
                            std::to_string(g.y0));
    }

    // Confusions: per patch a hidden difficulty, per method a skill offset;
    // a synthetic label map pair realizes the target error rate.
    std::map<std::pair<std::string, std::string>, ConfusionMatrix> confusions;
    Rng diff_rng = rng.derive("difficulty");
    for (const auto& pid : patch_ids) {
      const double difficulty = diff_rng.uniform(0.05, 0.45);
      for (int m = 0; m < n_methods; ++m) {
        const std::string method = "m" + std::to_string(m + 1);
        Rng r(seed ^ fnv1a64("cm:" + pid + ":" + method));
        const double err = std::clamp(
            difficulty * (0.6 + 0.1 * m) + r.uniform(-0.02, 0.02), 0.01, 0.9);
        std::vector<int> truth(label_side * label_side), pred(truth.size());
        for (size_t i = 0; i < truth.size(); ++i) {
          truth[i] = static_cast<int>(r.uniform_index(n_classes));
          if (r.uniform() < err) {
            pred[i] = static_cast<int>(r.uniform_index(n_classes - 1));
            if (pred[i] >= truth[i]) ++pred[i];
          } else {
            pred[i] = truth[i];
          }
        }
        confusions[{pid, method}] = dataset::count_confusion(truth, pred, n_classes);
      }
    }
    dataset::write_confusions((fs::path(out_dir) / "confusions.csv").string(), confusions);

    json cfg;
    cfg["seed"] = seed;
    cfg["dataset"] = {{"sources", sources},
                      {"patch_size", patch_size},
                      {"confusions_csv", (fs::path(out_dir) / "confusions.csv").string()}};
    cfg["model"] = {{"d_sem", 24}, {"seg_channels", 8}, {"d_fused", 32},
                    {"d_hidden", 16}, {"heads", 4}, {"dropout", 0.1}};
    cfg["train"] = {{"max_steps", 600}, {"batch_size", 8}, {"learning_rate", 2e-3}};
    {
      std::ofstream out(fs::path(out_dir) / "config.json");
      out << cfg.dump(2) << '\n';
    }

    // Purify inputs: captions plus paired embeddings. Half the records get
    // closely aligned embedding pairs (high similarity), half get noisy ones.
    io::EmbeddingFile image_emb, text_emb;
    image_emb.dim = text_emb.dim = emb_dim;
    std::vector<purify::CaptionRecord> captions;
    Rng emb_rng = rng.derive("captions");
    for (int i = 0; i < n_captions; ++i) {
      const std::string id = "cap" + std::to_string(i);
      FeatureVector img{std::vector<double>(emb_dim)};
      for (auto& v : img.values) v = emb_rng.normal();
      FeatureVector txt = img;
      const bool aligned = i % 2 == 0;
      const double noise = aligned ? 0.05 : 1.5;
      for (auto& v : txt.values) v += noise * emb_rng.normal();
      image_emb.by_id[id] = img;
      text_emb.by_id[id] = txt;
      purify::CaptionRecord rec;
      rec.id = id;
      rec.caption = aligned ? "a satellite image of landuse of forest"
                            : "Google Earth to photograph by Benjamin Grant";
      captions.push_back(std::move(rec));
    }
    io::write_embeddings((fs::path(out_dir) / "image_embeddings.jsonl").string(),
                         image_emb);
    io::write_embeddings((fs::path(out_dir) / "text_embeddings.jsonl").string(),
                         text_emb);
    purify::write_captions((fs::path(out_dir) / "captions.jsonl").string(), captions);

    std::cout << "fixtures: " << patch_ids.size() << " patches x " << n_methods
              << " methods, " << n_captions << " captions -> " << out_dir << "\n";
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code();
  }
}
