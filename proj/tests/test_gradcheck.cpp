// Central finite-difference checks (64-bit, h = 1e-5) of every analytic
// gradient path: the layers, the fusion block, the adapters, the quality
// head, the loss, and the assembled model.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "segqa/model.hpp"
#include "segqa/training.hpp"

using namespace segqa;
using namespace segqa::model;
using nn::Mat;

namespace {

constexpr double kH = 1e-5;
constexpr double kTol = 1e-4;

double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

Mat<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

// Compares analytic parameter gradients (already accumulated) plus optional
// input gradients against central differences of `eval`.
struct Checker {
  std::function<double()> eval;
  double max_err = 0;

  void check_slot(double& slot, double analytic) {
    const double orig = slot;
    slot = orig + kH;
    const double fp = eval();
    slot = orig - kH;
    const double fm = eval();
    slot = orig;
    const double fd = (fp - fm) / (2.0 * kH);
    max_err = std::max(max_err, rel_err(analytic, fd));
  }

  void check_params(const std::vector<nn::Param<double>*>& params) {
    for (auto* p : params)
      for (Eigen::Index k = 0; k < p->value.size(); ++k)
        check_slot(p->value.data()[k], p->grad.data()[k]);
  }

  void check_input(Mat<double>& input, const Mat<double>& analytic) {
    for (Eigen::Index k = 0; k < input.size(); ++k)
      check_slot(input.data()[k], analytic.data()[k]);
  }
};

}  // namespace

TEST_CASE("multi-head attention gradients (3 tokens, 2 heads)") {
  Rng rng(101);
  nn::MultiHeadAttention<double> mha;
  mha.init(Rng(1).derive("mha"), 4, 2, "mha");
  mha.set_training(true);

  Mat<double> x = random_mat(rng, 3, 4);
  Mat<double> c = random_mat(rng, 3, 4);  // loss weights

  std::vector<nn::Param<double>*> params;
  mha.collect(params);
  for (auto* p : params) p->zero_grad();

  Mat<double> out = mha.forward(x);
  const double base = (out.array() * c.array()).sum();
  CHECK(std::isfinite(base));
  Mat<double> dx = mha.backward(c);

  Checker chk;
  chk.eval = [&]() {
    return (mha.forward(x).array() * c.array()).sum();
  };
  chk.check_params(params);
  chk.check_input(x, dx);
  CHECK(chk.max_err < kTol);
}

TEST_CASE("layer norm gradients") {
  Rng rng(102);
  nn::LayerNorm<double> ln;
  ln.init(5, "ln");
  ln.training = true;
  // non-trivial scale/shift
  for (int k = 0; k < 5; ++k) {
    ln.gamma.value(k, 0) = 0.5 + 0.3 * k;
    ln.beta.value(k, 0) = -0.2 + 0.1 * k;
  }

  Mat<double> x = random_mat(rng, 2, 5);
  Mat<double> c = random_mat(rng, 2, 5);
  std::vector<nn::Param<double>*> params;
  ln.collect(params);
  for (auto* p : params) p->zero_grad();

  ln.forward(x);
  Mat<double> dx = ln.backward(c);

  Checker chk;
  chk.eval = [&]() { return (ln.forward(x).array() * c.array()).sum(); };
  chk.check_params(params);
  chk.check_input(x, dx);
  CHECK(chk.max_err < kTol);
}

TEST_CASE("scgb gradients at d=4") {
  Rng rng(103);
  Scgb<double> scgb;
  scgb.init(Rng(2).derive("scgb"), 4);
  scgb.set_training(true);

  Mat<double> f_sem = random_mat(rng, 1, 4);
  Mat<double> f_seg = random_mat(rng, 1, 4);
  Mat<double> c = random_mat(rng, 1, 4);

  std::vector<nn::Param<double>*> params;
  scgb.collect(params);
  for (auto* p : params) p->zero_grad();

  scgb.forward(f_sem, f_seg);
  auto [d_sem, d_seg] = scgb.backward(c);

  Checker chk;
  chk.eval = [&]() { return (scgb.forward(f_sem, f_seg).array() * c.array()).sum(); };
  chk.check_params(params);
  chk.check_input(f_sem, d_sem);
  chk.check_input(f_seg, d_seg);
  CHECK(chk.max_err < kTol);
}

TEST_CASE("semantic adapter gradients at d=4 (single token and sequence)") {
  for (const int n_tokens : {1, 3}) {
    CAPTURE(n_tokens);
    Rng rng(104 + n_tokens);
    ModelConfig cfg;
    cfg.d_sem = 4;
    cfg.d_fused = 4;
    cfg.heads = 2;
    cfg.adapter_blocks = 3;
    cfg.ffn_mult = 4;

    SemanticAdapter<double> adapter;
    adapter.init(Rng(3).derive("sem"), cfg);
    adapter.set_training(true);

    Mat<double> tokens = random_mat(rng, n_tokens, 4);
    Mat<double> c = random_mat(rng, 1, 4);

    std::vector<nn::Param<double>*> params;
    adapter.collect(params);
    for (auto* p : params) p->zero_grad();

    adapter.forward(tokens);
    Mat<double> dtokens = adapter.backward(c);

    Checker chk;
    chk.eval = [&]() { return (adapter.forward(tokens).array() * c.array()).sum(); };
    chk.check_params(params);
    chk.check_input(tokens, dtokens);
    CHECK(chk.max_err < kTol);
  }
}

TEST_CASE("segmentation adapter gradients at d=4") {
  Rng rng(106);
  ModelConfig cfg;
  cfg.seg_channels = 4;
  cfg.d_fused = 4;

  SegmentationAdapter<double> adapter;
  adapter.init(Rng(4).derive("seg"), cfg);
  adapter.set_training(true);

  Mat<double> pooled = random_mat(rng, 1, 4);
  Mat<double> c = random_mat(rng, 1, 4);

  std::vector<nn::Param<double>*> params;
  adapter.collect(params);
  for (auto* p : params) p->zero_grad();

  adapter.forward(pooled);
  Mat<double> dpooled = adapter.backward(c);

  Checker chk;
  chk.eval = [&]() { return (adapter.forward(pooled).array() * c.array()).sum(); };
  chk.check_params(params);
  chk.check_input(pooled, dpooled);
  CHECK(chk.max_err < kTol);
}

TEST_CASE("quality head gradients with dropout disabled and with frozen masks") {
  Rng rng(107);
  ModelConfig cfg;
  cfg.d_fused = 4;
  cfg.d_hidden = 4;

  SUBCASE("eval-path (rate 0)") {
    cfg.dropout = 0.0;
    QualityHead<double> head;
    head.init(Rng(5).derive("head"), cfg);
    head.set_training(true);

    Mat<double> x = random_mat(rng, 1, 4);
    std::vector<nn::Param<double>*> params;
    head.collect(params);
    for (auto* p : params) p->zero_grad();

    head.forward(x);
    Mat<double> dy(1, 1);
    dy(0, 0) = 1.0;
    Mat<double> dx = head.backward(dy);

    Checker chk;
    chk.eval = [&]() { return head.forward(x)(0, 0); };
    chk.check_params(params);
    chk.check_input(x, dx);
    CHECK(chk.max_err < kTol);
  }

  SUBCASE("training path (rate 0.1, masks pinned)") {
    cfg.dropout = 0.1;
    QualityHead<double> head;
    head.init(Rng(6).derive("head"), cfg);
    head.set_training(true);
    head.drop1.freeze_mask = true;
    head.drop2.freeze_mask = true;

    Mat<double> x = random_mat(rng, 1, 4);
    head.forward(x);  // samples and pins the masks

    std::vector<nn::Param<double>*> params;
    head.collect(params);
    for (auto* p : params) p->zero_grad();
    head.forward(x);
    Mat<double> dy(1, 1);
    dy(0, 0) = 1.0;
    Mat<double> dx = head.backward(dy);

    Checker chk;
    chk.eval = [&]() { return head.forward(x)(0, 0); };
    chk.check_params(params);
    chk.check_input(x, dx);
    CHECK(chk.max_err < kTol);
  }
}

TEST_CASE("total_loss gradient matches finite differences on batches of 8") {
  Rng rng(108);
  training::LossConfig lcfg;  // alpha 0.5, eps 1e-8
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> s(8), q(8);
    for (auto& v : s) v = rng.uniform(0.05, 0.95);
    for (auto& v : q) v = rng.uniform(0.05, 0.95);

    const auto grad = training::total_loss_grad(s, q, lcfg);
    double max_err = 0;
    for (size_t j = 0; j < q.size(); ++j) {
      const double orig = q[j];
      q[j] = orig + kH;
      const double fp = training::total_loss(s, q, lcfg);
      q[j] = orig - kH;
      const double fm = training::total_loss(s, q, lcfg);
      q[j] = orig;
      max_err = std::max(max_err, rel_err(grad[j], (fp - fm) / (2.0 * kH)));
    }
    CHECK(max_err < kTol);
  }
}

TEST_CASE("assembled model parameter gradients at d=4") {
  Rng rng(109);
  ModelConfig cfg;
  cfg.d_sem = 4;
  cfg.seg_channels = 4;
  cfg.d_fused = 4;
  cfg.d_hidden = 4;
  cfg.heads = 2;
  cfg.adapter_blocks = 3;
  cfg.dropout = 0.0;

  QualityModel<double> m;
  m.init(cfg, Rng(7).derive("model-init"));
  m.set_training(true);

  Mat<double> tokens = random_mat(rng, 1, 4);
  Mat<double> seg = random_mat(rng, 1, 4);

  auto params = m.params();
  m.zero_grad();
  m.forward(tokens, seg);
  m.backward(1.0);

  Checker chk;
  chk.eval = [&]() { return m.forward(tokens, seg); };
  chk.check_params(params);
  CHECK(chk.max_err < kTol);
}
