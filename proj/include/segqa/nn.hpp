#pragma once
// Minimal trainable-layer library used by the quality model: affine, layer
// norm, GELU, dropout, multi-head self-attention, feed-forward and the
// pre-norm transformer block. Each layer owns explicit forward/backward
// passes and caches activations on a LIFO stack, so a mini-batch is run as
// N forwards followed by N backwards in reverse order. Templated on the
// scalar type: float for training, double for finite-difference checks.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "segqa/core.hpp"

namespace segqa::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(); }
};

template <typename T>
T pop_cache(std::vector<T>& stack) {
  if (stack.empty()) throw Error("backward without matching forward", 3);
  T out = std::move(stack.back());
  stack.pop_back();
  return out;
}

// Truncated normal (clipped at 2 std) for weights, matching ViT-style init.
template <typename S>
void init_trunc_normal(Param<S>& p, Rng rng, int rows, int cols, double stddev,
                       const std::string& name) {
  p.name = name;
  p.value.resize(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      p.value(i, j) = static_cast<S>(rng.truncated_normal(stddev));
  p.grad = Mat<S>::Zero(rows, cols);
}

template <typename S>
void init_constant(Param<S>& p, int rows, int cols, S value, const std::string& name) {
  p.name = name;
  p.value = Mat<S>::Constant(rows, cols, value);
  p.grad = Mat<S>::Zero(rows, cols);
}

// ---------------------------------------------------------------------------

// y = x W^T + b, rows are independent samples/tokens.
template <typename S>
struct Linear {
  Param<S> weight;  // out x in
  Param<S> bias;    // out x 1
  bool training = false;
  std::vector<Mat<S>> cache_;

  void init(Rng rng, int in, int out, const std::string& name, double stddev = 0.02) {
    init_trunc_normal(weight, rng.derive("w"), out, in, stddev, name + ".weight");
    init_constant(bias, out, 1, S(0), name + ".bias");
  }

  int in_dim() const { return static_cast<int>(weight.value.cols()); }
  int out_dim() const { return static_cast<int>(weight.value.rows()); }

  Mat<S> forward(const Mat<S>& x) {
    if (training) cache_.push_back(x);
    Mat<S> y = x * weight.value.transpose();
    y.rowwise() += bias.value.col(0).transpose();
    return y;
  }

  Mat<S> backward(const Mat<S>& dy) {
    Mat<S> x = pop_cache(cache_);
    weight.grad += dy.transpose() * x;
    bias.grad += dy.colwise().sum().transpose();
    return dy * weight.value;
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

// Per-row normalization over the feature axis with learned scale/shift.
template <typename S>
struct LayerNorm {
  Param<S> gamma, beta;  // d x 1
  bool training = false;
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<S> xhat;
    Vec<S> inv_std;
  };
  std::vector<Cache> cache_;

  void init(int d, const std::string& name) {
    init_constant(gamma, d, 1, S(1), name + ".gamma");
    init_constant(beta, d, 1, S(0), name + ".beta");
  }

  Mat<S> forward(const Mat<S>& x) {
    const auto n = x.rows();
    const auto d = x.cols();
    Mat<S> xhat(n, d);
    Vec<S> inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const S mean = x.row(r).mean();
      const S var = (x.row(r).array() - mean).square().sum() / static_cast<S>(d);
      const S s = S(1) / std::sqrt(var + static_cast<S>(kEps));
      xhat.row(r) = (x.row(r).array() - mean).matrix() * s;
      inv_std(r) = s;
    }
    Mat<S> y = xhat.array().rowwise() * gamma.value.col(0).transpose().array();
    y.rowwise() += beta.value.col(0).transpose();
    if (training) cache_.push_back({xhat, inv_std});
    return y;
  }

  Mat<S> backward(const Mat<S>& dy) {
    Cache c = pop_cache(cache_);
    const auto n = dy.rows();
    const auto d = dy.cols();
    gamma.grad += (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
    beta.grad += dy.colwise().sum().transpose();

    Mat<S> g = dy.array().rowwise() * gamma.value.col(0).transpose().array();
    Mat<S> dx(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
      const S m1 = g.row(r).mean();
      const S m2 = (g.row(r).array() * c.xhat.row(r).array()).mean();
      dx.row(r) =
          ((g.row(r).array() - m1 - c.xhat.row(r).array() * m2) * c.inv_std(r)).matrix();
    }
    return dx;
  }

  void collect(std::vector<Param<S>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Exact (erf-based) GELU.
template <typename S>
struct Gelu {
  bool training = false;
  std::vector<Mat<S>> cache_;

  static S value(S x) {
    return x * S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  }
  static S derivative(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
    const S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);
    return cdf + x * pdf;
  }

  Mat<S> forward(const Mat<S>& x) {
    if (training) cache_.push_back(x);
    return x.unaryExpr([](S v) { return value(v); });
  }

  Mat<S> backward(const Mat<S>& dy) {
    Mat<S> x = pop_cache(cache_);
    return dy.cwiseProduct(x.unaryExpr([](S v) { return derivative(v); }));
  }
};

// Inverted dropout; identity in eval mode. freeze_mask pins the last sampled
// mask so finite-difference checks can re-run the same stochastic forward.
template <typename S>
struct Dropout {
  double rate = 0.1;
  bool training = false;
  bool freeze_mask = false;
  Rng rng{0};
  std::vector<Mat<S>> cache_;
  Mat<S> frozen_;

  void init(Rng r, double p) {
    rng = r;
    rate = p;
  }

  Mat<S> forward(const Mat<S>& x) {
    if (!training || rate <= 0.0) return x;
    Mat<S> mask;
    if (freeze_mask && frozen_.rows() == x.rows() && frozen_.cols() == x.cols()) {
      mask = frozen_;
    } else {
      mask.resize(x.rows(), x.cols());
      const S keep_scale = S(1.0 / (1.0 - rate));
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j)
          mask(i, j) = rng.uniform() < rate ? S(0) : keep_scale;
      if (freeze_mask) frozen_ = mask;
    }
    cache_.push_back(mask);
    return x.cwiseProduct(mask);
  }

  Mat<S> backward(const Mat<S>& dy) {
    if (!training || rate <= 0.0) return dy;
    Mat<S> mask = pop_cache(cache_);
    return dy.cwiseProduct(mask);
  }
};

// ---------------------------------------------------------------------------

template <typename S>
Mat<S> rowwise_softmax(const Mat<S>& logits) {
  Mat<S> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const S mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Standard multi-head self-attention over a token sequence (rows = tokens).
// A single-token sequence degenerates to the value/output projections.
template <typename S>
struct MultiHeadAttention {
  int d_model = 0, heads = 1, d_head = 0;
  Linear<S> wq, wk, wv, wo;

  struct Cache {
    Mat<S> q, k, v;
    std::vector<Mat<S>> attn;  // per head, n x n
  };
  std::vector<Cache> cache_;
  bool training_ = false;

  void init(Rng rng, int d, int n_heads, const std::string& name) {
    if (n_heads < 1 || d % n_heads != 0)
      throw Error("attention heads must divide the model dim");
    d_model = d;
    heads = n_heads;
    d_head = d / n_heads;
    wq.init(rng.derive("q"), d, d, name + ".wq");
    wk.init(rng.derive("k"), d, d, name + ".wk");
    wv.init(rng.derive("v"), d, d, name + ".wv");
    wo.init(rng.derive("o"), d, d, name + ".wo");
  }

  void set_training(bool t) {
    training_ = t;
    wq.training = wk.training = wv.training = wo.training = t;
  }

  Mat<S> forward(const Mat<S>& x) {
    Mat<S> q = wq.forward(x);
    Mat<S> k = wk.forward(x);
    Mat<S> v = wv.forward(x);
    const auto n = x.rows();
    const S scale = S(1) / std::sqrt(static_cast<S>(d_head));
    Mat<S> concat(n, d_model);
    Cache c;
    for (int h = 0; h < heads; ++h) {
      auto qh = q.middleCols(h * d_head, d_head);
      auto kh = k.middleCols(h * d_head, d_head);
      auto vh = v.middleCols(h * d_head, d_head);
      Mat<S> a = rowwise_softmax<S>(qh * kh.transpose() * scale);
      concat.middleCols(h * d_head, d_head) = a * vh;
      if (training_) c.attn.push_back(std::move(a));
    }
    if (training_) {
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      cache_.push_back(std::move(c));
    }
    return wo.forward(concat);
  }

  Mat<S> backward(const Mat<S>& dy) {
    Cache c = pop_cache(cache_);
    Mat<S> dconcat = wo.backward(dy);
    const auto n = dy.rows();
    const S scale = S(1) / std::sqrt(static_cast<S>(d_head));
    Mat<S> dq(n, d_model), dk(n, d_model), dv(n, d_model);
    for (int h = 0; h < heads; ++h) {
      auto qh = c.q.middleCols(h * d_head, d_head);
      auto kh = c.k.middleCols(h * d_head, d_head);
      auto vh = c.v.middleCols(h * d_head, d_head);
      const Mat<S>& a = c.attn[h];
      Mat<S> doh = dconcat.middleCols(h * d_head, d_head);
      Mat<S> da = doh * vh.transpose();
      dv.middleCols(h * d_head, d_head) = a.transpose() * doh;
      Mat<S> ds(n, n);
      for (Eigen::Index r = 0; r < n; ++r) {
        const S dot = (da.row(r).array() * a.row(r).array()).sum();
        ds.row(r) = (a.row(r).array() * (da.row(r).array() - dot)).matrix();
      }
      ds *= scale;
      dq.middleCols(h * d_head, d_head) = ds * kh;
      dk.middleCols(h * d_head, d_head) = ds.transpose() * qh;
    }
    Mat<S> dx = wq.backward(dq);
    dx += wk.backward(dk);
    dx += wv.backward(dv);
    return dx;
  }

  void collect(std::vector<Param<S>*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }
};

// Linear(d, mult*d) -> GELU -> Linear(mult*d, d).
template <typename S>
struct FeedForward {
  Linear<S> fc1, fc2;
  Gelu<S> act;

  void init(Rng rng, int d, int mult, const std::string& name) {
    fc1.init(rng.derive("fc1"), d, d * mult, name + ".fc1");
    fc2.init(rng.derive("fc2"), d * mult, d, name + ".fc2");
  }

  void set_training(bool t) { fc1.training = fc2.training = act.training = t; }

  Mat<S> forward(const Mat<S>& x) { return fc2.forward(act.forward(fc1.forward(x))); }
  Mat<S> backward(const Mat<S>& dy) {
    return fc1.backward(act.backward(fc2.backward(dy)));
  }

  void collect(std::vector<Param<S>*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

// Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  FeedForward<S> ffn;

  void init(Rng rng, int d, int heads, int ffn_mult, const std::string& name) {
    ln1.init(d, name + ".ln1");
    ln2.init(d, name + ".ln2");
    attn.init(rng.derive("attn"), d, heads, name + ".attn");
    ffn.init(rng.derive("ffn"), d, ffn_mult, name + ".ffn");
  }

  void set_training(bool t) {
    ln1.training = ln2.training = t;
    attn.set_training(t);
    ffn.set_training(t);
  }

  Mat<S> forward(const Mat<S>& x) {
    Mat<S> a = x + attn.forward(ln1.forward(x));
    return a + ffn.forward(ln2.forward(a));
  }

  Mat<S> backward(const Mat<S>& dy) {
    Mat<S> da = dy + ln2.backward(ffn.backward(dy));
    return da + ln1.backward(attn.backward(da));
  }

  void collect(std::vector<Param<S>*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    attn.collect(out);
    ffn.collect(out);
  }
};

}  // namespace segqa::nn
