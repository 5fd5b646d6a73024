#include "segqa/model.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace segqa::model {

FeatureVector gap(const FeatureMap& m) {
  m.check_valid();
  FeatureVector out(std::vector<double>(m.c, 0.0));
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j)
      for (int k = 0; k < m.c; ++k) out.values[k] += m.at(i, j, k);
  const double denom = static_cast<double>(m.h) * static_cast<double>(m.w);
  for (int k = 0; k < m.c; ++k) out.values[k] /= denom;
  return out;
}

FeatureVector FileBackedEncoder::encode(const std::string& patch_id) const {
  auto it = file_.by_id.find(patch_id);
  if (it == file_.by_id.end())
    throw Error("no embedding stored for patch '" + patch_id + "'", 2);
  return it->second;
}

FeatureMap FileBackedSegFeatures::features(const std::string& patch_id) const {
  auto it = file_.by_id.find(patch_id);
  if (it == file_.by_id.end())
    throw Error("no segmentation features stored for patch '" + patch_id + "'", 2);
  return it->second;
}

// ---------------------------------------------------------------------------
// TinyVitEncoder
// ---------------------------------------------------------------------------

TinyVitEncoder::TinyVitEncoder(Options opts) : opts_(opts) {
  if (opts_.image_size % opts_.patch_size != 0)
    throw Error("patch size must divide the image size");
  Rng rng = Rng(opts_.seed).derive("tiny-vit");
  const int patch_dim = 3 * opts_.patch_size * opts_.patch_size;
  const int side = opts_.image_size / opts_.patch_size;
  const int n_tokens = side * side + 1;

  patch_embed_.init(rng.derive("patch_embed"), patch_dim, opts_.d_sem,
                    "encoder.patch_embed");
  cls_token_.resize(1, opts_.d_sem);
  {
    Rng r = rng.derive("cls");
    for (int k = 0; k < opts_.d_sem; ++k) cls_token_(0, k) = r.truncated_normal(0.02);
  }
  pos_embed_.resize(n_tokens, opts_.d_sem);
  {
    Rng r = rng.derive("pos");
    for (int t = 0; t < n_tokens; ++t)
      for (int k = 0; k < opts_.d_sem; ++k) pos_embed_(t, k) = r.truncated_normal(0.02);
  }
  blocks_.resize(opts_.blocks);
  for (int b = 0; b < opts_.blocks; ++b)
    blocks_[b].init(rng.derive("block" + std::to_string(b)), opts_.d_sem, opts_.heads,
                    4, "encoder.block" + std::to_string(b));
  final_norm_.init(opts_.d_sem, "encoder.final_norm");
}

FeatureMap TinyVitEncoder::synthesize_raster(const std::string& patch_id) const {
  Rng rng(opts_.seed ^ fnv1a64("raster:" + patch_id));
  FeatureMap raster(opts_.image_size, opts_.image_size, 3);
  for (auto& v : raster.values) v = rng.uniform(-1.0, 1.0);
  return raster;
}

nn::Mat<double> TinyVitEncoder::run_blocks(const FeatureMap& raster) const {
  if (raster.h != opts_.image_size || raster.w != opts_.image_size || raster.c != 3)
    throw Error("encoder expects a " + std::to_string(opts_.image_size) + "x" +
                    std::to_string(opts_.image_size) + "x3 raster",
                3);
  const int p = opts_.patch_size;
  const int side = opts_.image_size / p;
  const int patch_dim = 3 * p * p;

  nn::Mat<double> patches(side * side, patch_dim);
  for (int py = 0; py < side; ++py) {
    for (int px = 0; px < side; ++px) {
      int col = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < 3; ++ch)
            patches(py * side + px, col++) = raster.at(py * p + dy, px * p + dx, ch);
    }
  }

  nn::Mat<double> tokens = patch_embed_.forward(patches);
  nn::Mat<double> seq(tokens.rows() + 1, opts_.d_sem);
  seq.row(0) = cls_token_.row(0);
  seq.bottomRows(tokens.rows()) = tokens;
  seq += pos_embed_;
  for (auto& b : blocks_) seq = b.forward(seq);
  return final_norm_.forward(seq);
}

FeatureVector TinyVitEncoder::encode(const std::string& patch_id) const {
  return encode_image(synthesize_raster(patch_id));
}

FeatureVector TinyVitEncoder::encode_image(const FeatureMap& raster) const {
  nn::Mat<double> seq = run_blocks(raster);
  FeatureVector out(std::vector<double>(opts_.d_sem));
  for (int k = 0; k < opts_.d_sem; ++k) out.values[k] = seq(0, k);
  return out;
}

std::vector<FeatureVector> TinyVitEncoder::encode_tokens(const std::string& patch_id) const {
  nn::Mat<double> seq = run_blocks(synthesize_raster(patch_id));
  std::vector<FeatureVector> out;
  out.reserve(seq.rows());
  for (Eigen::Index t = 0; t < seq.rows(); ++t) {
    FeatureVector v(std::vector<double>(opts_.d_sem));
    for (int k = 0; k < opts_.d_sem; ++k) v.values[k] = seq(t, k);
    out.push_back(std::move(v));
  }
  return out;
}

double TinyVitEncoder::parameter_checksum() const {
  double acc = 0;
  std::vector<nn::Param<double>*> params;
  patch_embed_.collect(params);
  for (auto& b : blocks_) b.collect(params);
  final_norm_.collect(params);
  for (auto* p : params) acc += p->value.template cast<double>().sum();
  acc += cls_token_.sum() + pos_embed_.sum();
  return acc;
}

// ---------------------------------------------------------------------------
// ToySegFeatures
// ---------------------------------------------------------------------------

ToySegFeatures::ToySegFeatures(const std::string& method_id, int channels,
                               std::uint64_t seed, int image_size)
    : method_id_(method_id), channels_(channels), seed_(seed), image_size_(image_size) {
  if (channels < 1) throw Error("seg feature channels must be >= 1");
  Rng rng(seed ^ fnv1a64("toy-seg:" + method_id));
  filters_.resize(static_cast<size_t>(channels) * 3 * 3 * 3);
  for (auto& f : filters_) f = rng.normal() * 0.3;
  filter_bias_.resize(channels);
  for (auto& b : filter_bias_) b = rng.normal() * 0.05;
}

FeatureMap ToySegFeatures::features(const std::string& patch_id) const {
  Rng rng(seed_ ^ fnv1a64("raster:" + patch_id));
  FeatureMap raster(image_size_, image_size_, 3);
  for (auto& v : raster.values) v = rng.uniform(-1.0, 1.0);

  const int out_side = (image_size_ - 3) / 2 + 1;  // valid 3x3, stride 2
  FeatureMap out(out_side, out_side, channels_);
  for (int oy = 0; oy < out_side; ++oy) {
    for (int ox = 0; ox < out_side; ++ox) {
      for (int ch = 0; ch < channels_; ++ch) {
        double acc = filter_bias_[ch];
        const double* f = &filters_[static_cast<size_t>(ch) * 27];
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 3; ++dx)
            for (int ic = 0; ic < 3; ++ic)
              acc += f[(dy * 3 + dx) * 3 + ic] * raster.at(oy * 2 + dy, ox * 2 + dx, ic);
        out.at(oy, ox, ch) = nn::Gelu<double>::value(acc);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kMagic = 0x43415153;  // "SQAC"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw Error("truncated checkpoint '" + path + "'", 2);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, QualityModel<float>& model,
                     const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  auto params = model.params();
  write_pod(out, kMagic);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    write_pod(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_pod(out, static_cast<std::uint32_t>(p->value.rows()));
    write_pod(out, static_cast<std::uint32_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(float) * p->value.size()));
  }

  nlohmann::json side;
  side["config_hash"] = meta.config_hash;
  side["step"] = meta.step;
  side["train_loss"] = meta.train_loss;
  if (!meta.metrics_json.empty())
    side["metrics"] = nlohmann::json::parse(meta.metrics_json);
  else
    side["metrics"] = nullptr;
  std::ofstream sidecar(path + ".json", std::ios::binary);
  if (!sidecar) throw Error("cannot open '" + path + ".json' for writing", 2);
  sidecar << side.dump(2) << '\n';
}

CheckpointMeta load_checkpoint(const std::string& path, QualityModel<float>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'", 2);
  if (read_pod<std::uint32_t>(in, path) != kMagic)
    throw Error("'" + path + "' is not a checkpoint", 2);
  if (read_pod<std::uint32_t>(in, path) != kVersion)
    throw Error("unsupported checkpoint version in '" + path + "'", 2);
  const auto count = read_pod<std::uint32_t>(in, path);

  std::map<std::string, nn::Param<float>*> by_name;
  for (auto* p : model.params()) by_name[p->name] = p;
  size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw Error("truncated checkpoint", 2);
    const auto rows = read_pod<std::uint32_t>(in, path);
    const auto cols = read_pod<std::uint32_t>(in, path);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw Error("checkpoint parameter '" + name + "' not present in model", 2);
    auto* p = it->second;
    if (p->value.rows() != static_cast<Eigen::Index>(rows) ||
        p->value.cols() != static_cast<Eigen::Index>(cols))
      throw Error("shape mismatch for parameter '" + name + "'", 2);
    if (!in.read(reinterpret_cast<char*>(p->value.data()),
                 static_cast<std::streamsize>(sizeof(float) * p->value.size())))
      throw Error("truncated checkpoint '" + path + "'", 2);
    ++loaded;
  }
  if (loaded != by_name.size())
    throw Error("checkpoint is missing " + std::to_string(by_name.size() - loaded) +
                    " model parameters",
                2);

  std::ifstream sidecar(path + ".json", std::ios::binary);
  CheckpointMeta meta;
  if (sidecar) {
    nlohmann::json side = nlohmann::json::parse(sidecar);
    meta.config_hash = side.value("config_hash", "");
    meta.step = side.value("step", 0);
    meta.train_loss = side.value("train_loss", 0.0);
    if (side.contains("metrics") && !side["metrics"].is_null())
      meta.metrics_json = side["metrics"].dump();
  }
  return meta;
}

double parameter_checksum(const std::vector<nn::Param<float>*>& params) {
  double acc = 0;
  for (const auto* p : params) acc += p->value.cast<double>().sum();
  return acc;
}

}  // namespace segqa::model
