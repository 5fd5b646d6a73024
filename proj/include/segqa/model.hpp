#pragma once
// The dual-branch quality model. A frozen, pluggable semantic encoder feeds a
// three-block transformer adapter; pooled segmentation features feed a
// two-layer MLP adapter; a cross-gating block fuses the branches (the
// semantic side gates the segmentation side, with a residual on the projected
// segmentation features); a dropout/MLP/sigmoid head emits a score in (0,1).
//
// Training arithmetic is 32-bit (QualityModel<float>); the double
// instantiation is the shadow path used by the finite-difference tests.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "segqa/core.hpp"
#include "segqa/io.hpp"
#include "segqa/nn.hpp"

namespace segqa::model {

struct ModelConfig {
  int d_sem = 768;       // semantic embedding width (ViT-L CLS)
  int seg_channels = 64; // c1, channels of the pre-classifier feature map
  int d_fused = 256;
  int d_hidden = 64;
  int heads = 4;
  int adapter_blocks = 3;
  int ffn_mult = 4;
  double dropout = 0.1;
  // When true the semantic adapter consumes the encoder's full token
  // sequence; default is the CLS vector as a length-1 sequence.
  bool use_token_sequence = false;
};

// Spatial global average pooling: h x w x c -> per-channel means.
FeatureVector gap(const FeatureMap& m);

template <typename S>
nn::Mat<S> to_row_matrix(const FeatureVector& v) {
  nn::Mat<S> out(1, v.dim());
  for (int k = 0; k < v.dim(); ++k) out(0, k) = static_cast<S>(v.values[k]);
  return out;
}

template <typename S>
nn::Mat<S> to_token_matrix(const std::vector<FeatureVector>& tokens) {
  if (tokens.empty()) throw Error("empty token sequence", 3);
  nn::Mat<S> out(static_cast<Eigen::Index>(tokens.size()), tokens[0].dim());
  for (size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t].dim() != tokens[0].dim())
      throw Error("ragged token sequence", 3);
    for (int k = 0; k < tokens[t].dim(); ++k)
      out(static_cast<Eigen::Index>(t), k) = static_cast<S>(tokens[t].values[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frozen feature sources
// ---------------------------------------------------------------------------

// Produces the semantic embedding for a patch. Implementations are frozen:
// deterministic per input, never touched by the optimizer.
class SemanticEncoder {
 public:
  virtual ~SemanticEncoder() = default;
  virtual int dim() const = 0;
  // CLS embedding.
  virtual FeatureVector encode(const std::string& patch_id) const = 0;
  // Full token sequence (CLS first); defaults to the CLS vector alone.
  virtual std::vector<FeatureVector> encode_tokens(const std::string& patch_id) const {
    return {encode(patch_id)};
  }
  // Sum of all internal parameters; 0.0 for parameterless providers. Used to
  // assert the freezing contract across training steps.
  virtual double parameter_checksum() const { return 0.0; }
};

// Production path: precomputed embeddings from the JSONL embedding format.
class FileBackedEncoder : public SemanticEncoder {
 public:
  explicit FileBackedEncoder(io::EmbeddingFile file) : file_(std::move(file)) {}
  static FileBackedEncoder from_path(const std::string& path) {
    return FileBackedEncoder(io::read_embeddings(path));
  }

  int dim() const override { return file_.dim; }
  FeatureVector encode(const std::string& patch_id) const override;

 private:
  io::EmbeddingFile file_;
};

// Self-contained desk encoder: a small frozen vision transformer over a
// raster synthesized deterministically from the patch_id. Weights are fixed
// by the seed at construction.
class TinyVitEncoder : public SemanticEncoder {
 public:
  struct Options {
    int d_sem = 32;
    int heads = 4;
    int blocks = 2;
    int image_size = 12;   // synthesized raster is image_size^2 x 3
    int patch_size = 4;
    std::uint64_t seed = 0;
  };

  explicit TinyVitEncoder(Options opts);

  int dim() const override { return opts_.d_sem; }
  FeatureVector encode(const std::string& patch_id) const override;
  std::vector<FeatureVector> encode_tokens(const std::string& patch_id) const override;
  // Encode an explicit raster instead of a synthesized one.
  FeatureVector encode_image(const FeatureMap& raster) const;
  double parameter_checksum() const override;

  FeatureMap synthesize_raster(const std::string& patch_id) const;

 private:
  nn::Mat<double> run_blocks(const FeatureMap& raster) const;

  Options opts_;
  mutable nn::Linear<double> patch_embed_;
  nn::Mat<double> cls_token_;
  nn::Mat<double> pos_embed_;
  mutable std::vector<nn::TransformerBlock<double>> blocks_;
  mutable nn::LayerNorm<double> final_norm_;
};

// Produces the pre-classifier feature map of one segmentation method.
class SegmentationFeatureProvider {
 public:
  virtual ~SegmentationFeatureProvider() = default;
  virtual int channels() const = 0;
  virtual FeatureMap features(const std::string& patch_id) const = 0;
};

class FileBackedSegFeatures : public SegmentationFeatureProvider {
 public:
  explicit FileBackedSegFeatures(io::FeatureMapFile file) : file_(std::move(file)) {}
  static FileBackedSegFeatures from_path(const std::string& path) {
    return FileBackedSegFeatures(io::read_feature_maps(path));
  }

  int channels() const override { return file_.dim; }
  FeatureMap features(const std::string& patch_id) const override;

 private:
  io::FeatureMapFile file_;
};

// Toy convolutional stub standing in for a real segmentation network: one
// frozen 3x3 stride-2 convolution plus GELU over a synthesized raster.
// Distinct method_ids get distinct frozen filters.
class ToySegFeatures : public SegmentationFeatureProvider {
 public:
  ToySegFeatures(const std::string& method_id, int channels, std::uint64_t seed,
                 int image_size = 11);

  int channels() const override { return channels_; }
  FeatureMap features(const std::string& patch_id) const override;

 private:
  std::string method_id_;
  int channels_;
  std::uint64_t seed_;
  int image_size_;
  std::vector<double> filters_;  // channels x 3 x 3 x 3
  std::vector<double> filter_bias_;
};

// ---------------------------------------------------------------------------
// Trainable modules
// ---------------------------------------------------------------------------

// Three pre-norm transformer blocks over the token sequence, then a linear
// projection of the leading (CLS) token to the fused width.
template <typename S>
struct SemanticAdapter {
  std::vector<nn::TransformerBlock<S>> blocks;
  nn::Linear<S> proj;
  bool training_ = false;
  std::vector<Eigen::Index> rows_cache_;

  void init(Rng rng, const ModelConfig& cfg) {
    blocks.resize(cfg.adapter_blocks);
    for (int b = 0; b < cfg.adapter_blocks; ++b)
      blocks[b].init(rng.derive("block" + std::to_string(b)), cfg.d_sem, cfg.heads,
                     cfg.ffn_mult, "sem_adapter.block" + std::to_string(b));
    proj.init(rng.derive("proj"), cfg.d_sem, cfg.d_fused, "sem_adapter.proj");
  }

  void set_training(bool t) {
    training_ = t;
    for (auto& b : blocks) b.set_training(t);
    proj.training = t;
  }

  nn::Mat<S> forward(const nn::Mat<S>& tokens) {
    nn::Mat<S> h = tokens;
    for (auto& b : blocks) h = b.forward(h);
    if (training_) rows_cache_.push_back(h.rows());
    nn::Mat<S> cls = h.row(0);
    return proj.forward(cls);
  }

  nn::Mat<S> backward(const nn::Mat<S>& dy) {
    nn::Mat<S> dcls = proj.backward(dy);
    const Eigen::Index rows = nn::pop_cache(rows_cache_);
    nn::Mat<S> dh = nn::Mat<S>::Zero(rows, dcls.cols());
    dh.row(0) = dcls.row(0);
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dh = it->backward(dh);
    return dh;
  }

  void collect(std::vector<nn::Param<S>*>& out) {
    for (auto& b : blocks) b.collect(out);
    proj.collect(out);
  }
};

// Two affine layers with GELU between: c1 -> d_fused -> d_fused.
template <typename S>
struct SegmentationAdapter {
  nn::Linear<S> fc1, fc2;
  nn::Gelu<S> act;

  void init(Rng rng, const ModelConfig& cfg) {
    fc1.init(rng.derive("fc1"), cfg.seg_channels, cfg.d_fused, "seg_adapter.fc1");
    fc2.init(rng.derive("fc2"), cfg.d_fused, cfg.d_fused, "seg_adapter.fc2");
  }

  void set_training(bool t) { fc1.training = fc2.training = act.training = t; }

  nn::Mat<S> forward(const nn::Mat<S>& pooled) {
    return fc2.forward(act.forward(fc1.forward(pooled)));
  }
  nn::Mat<S> backward(const nn::Mat<S>& dy) {
    return fc1.backward(act.backward(fc2.backward(dy)));
  }

  void collect(std::vector<nn::Param<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

// Cross-gating fusion: GELU(W_sem f_sem) gates W_seg f_seg; the gated product
// is projected by W_fusion and the projected segmentation features are added
// back as the residual.
template <typename S>
struct Scgb {
  nn::Linear<S> w_sem, w_seg, w_fusion;
  nn::Gelu<S> gate_act;
  bool training_ = false;

  struct Cache {
    nn::Mat<S> gate, seg_proj;
  };
  std::vector<Cache> cache_;

  void init(Rng rng, int d_fused) {
    w_sem.init(rng.derive("w_sem"), d_fused, d_fused, "scgb.w_sem");
    w_seg.init(rng.derive("w_seg"), d_fused, d_fused, "scgb.w_seg");
    w_fusion.init(rng.derive("w_fusion"), d_fused, d_fused, "scgb.w_fusion");
  }

  void set_training(bool t) {
    training_ = t;
    w_sem.training = w_seg.training = w_fusion.training = gate_act.training = t;
  }

  nn::Mat<S> forward(const nn::Mat<S>& f_sem, const nn::Mat<S>& f_seg) {
    if (f_sem.rows() != f_seg.rows() || f_sem.cols() != f_seg.cols())
      throw Error("SCGB inputs must share shape", 3);
    if (f_sem.cols() != w_sem.in_dim())
      throw Error("SCGB input dim " + std::to_string(f_sem.cols()) +
                      " != " + std::to_string(w_sem.in_dim()),
                  3);
    nn::Mat<S> gate = gate_act.forward(w_sem.forward(f_sem));
    nn::Mat<S> seg_proj = w_seg.forward(f_seg);
    nn::Mat<S> fused = w_fusion.forward(gate.cwiseProduct(seg_proj)) + seg_proj;
    if (training_) cache_.push_back({gate, seg_proj});
    return fused;
  }

  std::pair<nn::Mat<S>, nn::Mat<S>> backward(const nn::Mat<S>& dfused) {
    Cache c = nn::pop_cache(cache_);
    nn::Mat<S> dprod = w_fusion.backward(dfused);
    nn::Mat<S> dgate = dprod.cwiseProduct(c.seg_proj);
    nn::Mat<S> dseg_proj = dprod.cwiseProduct(c.gate) + dfused;
    nn::Mat<S> df_sem = w_sem.backward(gate_act.backward(dgate));
    nn::Mat<S> df_seg = w_seg.backward(dseg_proj);
    return {std::move(df_sem), std::move(df_seg)};
  }

  void collect(std::vector<nn::Param<S>*>& out) {
    w_sem.collect(out);
    w_seg.collect(out);
    w_fusion.collect(out);
  }
};

// dropout -> affine -> GELU -> dropout -> affine -> sigmoid, output in (0,1).
template <typename S>
struct QualityHead {
  nn::Dropout<S> drop1, drop2;
  nn::Linear<S> fc1, fc2;
  nn::Gelu<S> act;
  bool training_ = false;
  std::vector<nn::Mat<S>> sig_cache_;

  void init(Rng rng, const ModelConfig& cfg) {
    drop1.init(rng.derive("drop1"), cfg.dropout);
    drop2.init(rng.derive("drop2"), cfg.dropout);
    fc1.init(rng.derive("fc1"), cfg.d_fused, cfg.d_hidden, "head.fc1");
    fc2.init(rng.derive("fc2"), cfg.d_hidden, 1, "head.fc2");
  }

  void set_training(bool t) {
    training_ = t;
    drop1.training = drop2.training = t;
    fc1.training = fc2.training = act.training = t;
  }

  nn::Mat<S> forward(const nn::Mat<S>& x) {
    nn::Mat<S> z =
        fc2.forward(drop2.forward(act.forward(fc1.forward(drop1.forward(x)))));
    nn::Mat<S> y = z.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
    if (training_) sig_cache_.push_back(y);
    return y;
  }

  nn::Mat<S> backward(const nn::Mat<S>& dy) {
    nn::Mat<S> y = nn::pop_cache(sig_cache_);
    nn::Mat<S> dz = dy.cwiseProduct(
        y.unaryExpr([](S v) { return v * (S(1) - v); }));
    return drop1.backward(fc1.backward(act.backward(drop2.backward(fc2.backward(dz)))));
  }

  void collect(std::vector<nn::Param<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

// ---------------------------------------------------------------------------

template <typename S>
struct QualityModel {
  ModelConfig cfg;
  SemanticAdapter<S> semantic_adapter;
  SegmentationAdapter<S> segmentation_adapter;
  Scgb<S> fusion;
  QualityHead<S> head;

  void init(const ModelConfig& config, Rng rng) {
    cfg = config;
    semantic_adapter.init(rng.derive("sem_adapter"), cfg);
    segmentation_adapter.init(rng.derive("seg_adapter"), cfg);
    fusion.init(rng.derive("scgb"), cfg.d_fused);
    head.init(rng.derive("head"), cfg);
  }

  void set_training(bool t) {
    semantic_adapter.set_training(t);
    segmentation_adapter.set_training(t);
    fusion.set_training(t);
    head.set_training(t);
  }

  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> out;
    semantic_adapter.collect(out);
    segmentation_adapter.collect(out);
    fusion.collect(out);
    head.collect(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  // One sample: token sequence (n_tok x d_sem) and pooled segmentation
  // features (1 x c1) to a score strictly inside (0,1).
  S forward(const nn::Mat<S>& sem_tokens, const nn::Mat<S>& seg_pooled) {
    if (sem_tokens.rows() < 1 || sem_tokens.cols() != cfg.d_sem)
      throw Error("semantic input is " + std::to_string(sem_tokens.rows()) + "x" +
                      std::to_string(sem_tokens.cols()) + ", expected n x " +
                      std::to_string(cfg.d_sem),
                  3);
    if (seg_pooled.rows() != 1 || seg_pooled.cols() != cfg.seg_channels)
      throw Error("segmentation input is " + std::to_string(seg_pooled.rows()) + "x" +
                      std::to_string(seg_pooled.cols()) + ", expected 1 x " +
                      std::to_string(cfg.seg_channels),
                  3);
    nn::Mat<S> f_sem = semantic_adapter.forward(sem_tokens);
    nn::Mat<S> f_seg = segmentation_adapter.forward(seg_pooled);
    nn::Mat<S> fused = fusion.forward(f_sem, f_seg);
    return head.forward(fused)(0, 0);
  }

  // Must be called in reverse order of the matching forwards.
  void backward(S dscore) {
    nn::Mat<S> dy(1, 1);
    dy(0, 0) = dscore;
    nn::Mat<S> dfused = head.backward(dy);
    auto [df_sem, df_seg] = fusion.backward(dfused);
    semantic_adapter.backward(df_sem);
    segmentation_adapter.backward(df_seg);
  }

  // Branch outputs (Eval-style helpers; honor the current training flag).
  nn::Mat<S> semantic_branch(const nn::Mat<S>& tokens) {
    return semantic_adapter.forward(tokens);
  }
  nn::Mat<S> segmentation_branch(const FeatureMap& m) {
    return segmentation_adapter.forward(to_row_matrix<S>(gap(m)));
  }
};

// ---------------------------------------------------------------------------
// Checkpointing (float models): binary parameter blob + JSON sidecar.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string config_hash;
  int step = 0;
  double train_loss = 0;
  std::string metrics_json;  // snapshot, may be empty
};

void save_checkpoint(const std::string& path, QualityModel<float>& model,
                     const CheckpointMeta& meta);
// Loads parameters by name into an already-initialized model; throws on
// missing names or shape mismatches. Returns the sidecar.
CheckpointMeta load_checkpoint(const std::string& path, QualityModel<float>& model);

double parameter_checksum(const std::vector<nn::Param<float>*>& params);

}  // namespace segqa::model
