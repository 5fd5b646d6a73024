#pragma once
// Loss functions (MSE + weighted batch KL), AdamW with linear warmup then
// step decay, the mini-batch training loop, split evaluation and loss-curve
// export. Losses are evaluated in 64-bit regardless of the model's scalar
// type; model arithmetic stays 32-bit during training.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "segqa/core.hpp"
#include "segqa/dataset.hpp"
#include "segqa/metrics.hpp"
#include "segqa/model.hpp"

namespace segqa::training {

struct LossConfig {
  double alpha = 0.5;     // weight on the KL term
  double epsilon = 1e-8;  // smoothing for the batch distributions
};

// Mean squared error over a batch: (1/N) sum (s_i - q_i)^2.
double mse_loss(const std::vector<double>& scores, const std::vector<double>& preds);

// KL divergence between the epsilon-smoothed, batch-normalized score
// distributions: P = (S+eps)/sum, Q' = (Q+eps)/sum, sum_i P_i log(P_i/Q'_i).
// Requires a batch of at least two nonnegative entries.
double kl_loss(const std::vector<double>& scores, const std::vector<double>& preds,
               const LossConfig& cfg);

// L = L_MSE + alpha * L_KL.
double total_loss(const std::vector<double>& scores, const std::vector<double>& preds,
                  const LossConfig& cfg);

// Analytic d(total_loss)/d(preds); matches central finite differences.
std::vector<double> total_loss_grad(const std::vector<double>& scores,
                                    const std::vector<double>& preds,
                                    const LossConfig& cfg);

// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  int max_steps = 1000;
  int batch_size = 16;
  // Negative values resolve to the defaults: warmup 5% of max_steps, decay
  // every 40% of max_steps.
  int warmup_steps = -1;
  int decay_step_size = -1;
  double decay_gamma = 0.5;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  int resolved_warmup() const;
  int resolved_decay_step() const;
};

// Per-step learning rate: linear ramp 0 -> lr over the warmup steps, then
// multiplied by decay_gamma every decay_step_size steps. step is 1-based.
double lr_at_step(const TrainConfig& cfg, int step);

// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<nn::Param<float>*> params, const TrainConfig& cfg);
  // One update with the given rate; lr 0 leaves parameters bit-identical.
  void step(double lr);

 private:
  std::vector<nn::Param<float>*> params_;
  std::vector<nn::Mat<float>> m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

// Clips all gradients to a global L2 norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<nn::Param<float>*>& params, double max_norm);

// ---------------------------------------------------------------------------

// One training/eval sample with features already resolved and pooled.
struct Example {
  std::string patch_id;
  nn::Mat<float> sem_tokens;  // n_tok x d_sem
  nn::Mat<float> seg_pooled;  // 1 x c1
  double label = 0;
};

// Resolves features for every record of the split; labels must contain
// method_id for every record.
std::vector<Example> build_examples(const dataset::DatasetManifest& manifest,
                                    Split split, const std::string& method_id,
                                    const model::SemanticEncoder& encoder,
                                    const model::SegmentationFeatureProvider& seg,
                                    bool use_token_sequence);

struct CurvePoint {
  int step = 0;
  double lr = 0, mse = 0, kl = 0, total = 0;
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  double final_loss = 0;
};

// Mini-batch loop: shuffled epochs (tails shorter than batch_size are
// dropped and the order reshuffled), per-sample forward, batch loss, reverse
// backward, clip, AdamW. Aborts on a non-finite loss naming the step.
TrainResult train(model::QualityModel<float>& m, const std::vector<Example>& examples,
                  const TrainConfig& tcfg, const LossConfig& lcfg);

// Loss-curve CSV: "step,lr,mse,kl,total".
void write_loss_curve(const std::string& path, const std::vector<CurvePoint>& curve);

struct EvalResult {
  std::vector<std::string> patch_ids;
  std::vector<double> predictions;
  std::vector<double> labels;
  metrics::MetricBundle bundle;
};

// Eval-mode predictions for every example plus the metric bundle against the
// labels (metric bundle needs n >= 5).
EvalResult evaluate(model::QualityModel<float>& m, const std::vector<Example>& examples);

}  // namespace segqa::training
