#include "segqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace segqa::training {

namespace {

void require_batch(const std::vector<double>& s, const std::vector<double>& q,
                   size_t min_n, const char* who) {
  if (s.size() != q.size())
    throw Error(std::string(who) + ": length mismatch (" + std::to_string(s.size()) +
                    " vs " + std::to_string(q.size()) + ")",
                3);
  if (s.size() < min_n)
    throw Error(std::string(who) + " requires a batch of at least " +
                    std::to_string(min_n),
                3);
}

}  // namespace

double mse_loss(const std::vector<double>& scores, const std::vector<double>& preds) {
  require_batch(scores, preds, 1, "mse_loss");
  double acc = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - preds[i];
    acc += d * d;
  }
  return acc / static_cast<double>(scores.size());
}

double kl_loss(const std::vector<double>& scores, const std::vector<double>& preds,
               const LossConfig& cfg) {
  require_batch(scores, preds, 2, "KL");
  if (cfg.epsilon <= 0) throw Error("KL epsilon must be positive");
  double sum_s = 0, sum_q = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] < 0 || preds[i] < 0)
      throw Error("KL inputs must be nonnegative", 3);
    sum_s += scores[i] + cfg.epsilon;
    sum_q += preds[i] + cfg.epsilon;
  }
  double kl = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const double p = (scores[i] + cfg.epsilon) / sum_s;
    const double q = (preds[i] + cfg.epsilon) / sum_q;
    kl += p * std::log(p / q);
  }
  return kl;
}

double total_loss(const std::vector<double>& scores, const std::vector<double>& preds,
                  const LossConfig& cfg) {
  if (cfg.alpha < 0) throw Error("loss alpha must be nonnegative");
  return mse_loss(scores, preds) + cfg.alpha * kl_loss(scores, preds, cfg);
}

std::vector<double> total_loss_grad(const std::vector<double>& scores,
                                    const std::vector<double>& preds,
                                    const LossConfig& cfg) {
  require_batch(scores, preds, 2, "total_loss_grad");
  const size_t n = scores.size();
  double sum_s = 0, sum_q = 0;
  for (size_t i = 0; i < n; ++i) {
    sum_s += scores[i] + cfg.epsilon;
    sum_q += preds[i] + cfg.epsilon;
  }
  std::vector<double> grad(n);
  for (size_t j = 0; j < n; ++j) {
    const double d_mse = 2.0 * (preds[j] - scores[j]) / static_cast<double>(n);
    // d/dq_j of sum_i p_i log(p_i / q'_i) with q' = (q+eps)/sum_q and
    // sum_i p_i = 1:  -p_j/(q_j+eps) + 1/sum_q.
    const double p_j = (scores[j] + cfg.epsilon) / sum_s;
    const double d_kl = -p_j / (preds[j] + cfg.epsilon) + 1.0 / sum_q;
    grad[j] = d_mse + cfg.alpha * d_kl;
  }
  return grad;
}

// ---------------------------------------------------------------------------

int TrainConfig::resolved_warmup() const {
  if (warmup_steps >= 0) return warmup_steps;
  return static_cast<int>(std::llround(0.05 * max_steps));
}

int TrainConfig::resolved_decay_step() const {
  if (decay_step_size >= 0) return decay_step_size;
  return static_cast<int>(std::llround(0.40 * max_steps));
}

double lr_at_step(const TrainConfig& cfg, int step) {
  if (step < 1) throw Error("steps are 1-based");
  const int warmup = cfg.resolved_warmup();
  if (warmup > 0 && step <= warmup)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  const int decay = cfg.resolved_decay_step();
  if (decay <= 0 || cfg.decay_gamma == 1.0) return cfg.learning_rate;
  const int past = step - warmup;
  const int k = (past - 1) / decay;  // decays applied after each full window
  return cfg.learning_rate * std::pow(cfg.decay_gamma, k);
}

AdamW::AdamW(std::vector<nn::Param<float>*> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto* p : params_) {
    m_.push_back(nn::Mat<float>::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(nn::Mat<float>::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const float b1 = static_cast<float>(cfg_.adam_beta1);
  const float b2 = static_cast<float>(cfg_.adam_beta2);
  const float eps = static_cast<float>(cfg_.adam_eps);
  const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t_));
  const float rate = static_cast<float>(lr);
  const float wd = static_cast<float>(cfg_.weight_decay);

  for (size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    if (!p->trainable) continue;
    m_[i] = b1 * m_[i] + (1.0f - b1) * p->grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p->grad.cwiseProduct(p->grad);
    if (rate == 0.0f) continue;  // moments advance, weights untouched
    nn::Mat<float> mhat = m_[i] / bc1;
    nn::Mat<float> vhat = v_[i] / bc2;
    p->value -=
        rate * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    if (wd != 0.0f) p->value -= rate * wd * p->value;
  }
}

double clip_grad_norm(const std::vector<nn::Param<float>*>& params, double max_norm) {
  double sq = 0;
  for (const auto* p : params) sq += p->grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::vector<Example> build_examples(const dataset::DatasetManifest& manifest,
                                    Split split, const std::string& method_id,
                                    const model::SemanticEncoder& encoder,
                                    const model::SegmentationFeatureProvider& seg,
                                    bool use_token_sequence) {
  std::vector<Example> out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    auto it = r.labels.find(method_id);
    if (it == r.labels.end())
      throw Error("record '" + r.patch_id + "' has no label for method '" + method_id +
                      "'",
                  2);
    Example ex;
    ex.patch_id = r.patch_id;
    ex.label = it->second;
    if (use_token_sequence)
      ex.sem_tokens = model::to_token_matrix<float>(encoder.encode_tokens(r.patch_id));
    else
      ex.sem_tokens = model::to_row_matrix<float>(encoder.encode(r.patch_id));
    ex.seg_pooled = model::to_row_matrix<float>(model::gap(seg.features(r.patch_id)));
    out.push_back(std::move(ex));
  }
  if (out.empty())
    throw Error("split '" + to_string(split) + "' has no records", 2);
  return out;
}

TrainResult train(model::QualityModel<float>& m, const std::vector<Example>& examples,
                  const TrainConfig& tcfg, const LossConfig& lcfg) {
  if (examples.empty()) throw Error("no training examples", 2);
  if (tcfg.batch_size < 2) throw Error("batch_size must be >= 2 (KL needs a batch)");
  if (tcfg.learning_rate <= 0) throw Error("learning_rate must be positive");
  const size_t batch = std::min<size_t>(tcfg.batch_size, examples.size());
  if (batch < 2) throw Error("need at least 2 examples for the batch KL term", 2);

  Rng shuffle_rng = Rng(tcfg.seed).derive("batch-order");
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  size_t cursor = 0;

  auto params = m.params();
  AdamW opt(params, tcfg);
  m.set_training(true);

  TrainResult result;
  result.curve.reserve(tcfg.max_steps);

  std::vector<size_t> batch_idx(batch);
  std::vector<double> labels(batch), preds(batch);

  for (int step = 1; step <= tcfg.max_steps; ++step) {
    if (cursor + batch > order.size()) {
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    for (size_t b = 0; b < batch; ++b) batch_idx[b] = order[cursor + b];
    cursor += batch;

    m.zero_grad();
    for (size_t b = 0; b < batch; ++b) {
      const Example& ex = examples[batch_idx[b]];
      preds[b] = static_cast<double>(m.forward(ex.sem_tokens, ex.seg_pooled));
      labels[b] = ex.label;
    }

    const double mse = mse_loss(labels, preds);
    const double kl = kl_loss(labels, preds, lcfg);
    const double total = mse + lcfg.alpha * kl;
    if (!std::isfinite(total))
      throw Error("non-finite loss at step " + std::to_string(step), 3);

    const std::vector<double> grad = total_loss_grad(labels, preds, lcfg);
    for (size_t b = batch; b-- > 0;)  // reverse order of forwards
      m.backward(static_cast<float>(grad[b]));

    clip_grad_norm(params, tcfg.grad_clip_norm);
    const double lr = lr_at_step(tcfg, step);
    opt.step(lr);

    result.curve.push_back({step, lr, mse, kl, total});
  }

  m.set_training(false);
  result.final_loss = result.curve.empty() ? 0.0 : result.curve.back().total;
  return result;
}

void write_loss_curve(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing", 2);
  out << "step,lr,mse,kl,total\n";
  out.precision(17);
  for (const auto& p : curve)
    out << p.step << ',' << p.lr << ',' << p.mse << ',' << p.kl << ',' << p.total
        << '\n';
}

EvalResult evaluate(model::QualityModel<float>& m, const std::vector<Example>& examples) {
  if (examples.empty()) throw Error("empty evaluation split", 2);
  m.set_training(false);
  EvalResult res;
  for (const auto& ex : examples) {
    res.patch_ids.push_back(ex.patch_id);
    res.predictions.push_back(static_cast<double>(m.forward(ex.sem_tokens, ex.seg_pooled)));
    res.labels.push_back(ex.label);
  }
  res.bundle = metrics::metric_bundle(res.predictions, res.labels);
  return res;
}

}  // namespace segqa::training
