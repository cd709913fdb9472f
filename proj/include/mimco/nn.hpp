#pragma once

#include <string>

#include "mimco/linalg.hpp"

namespace mimco {

// Row-wise affine layer. forward/backward pairs are explicit so gradient flow
// is under the caller's control (teacher and momentum paths simply never call
// backward).
template <typename S>
struct Linear {
  Param<S> w;  // in x out
  Param<S> b;  // 1 x out

  void init(Eigen::Index in, Eigen::Index out, Rng& rng, double init_std = 0.02) {
    w.resize(in, out);
    b.resize(1, out);
    b.decay = false;
    trunc_normal_fill(w.v, init_std, rng);
  }

  void init_identity(Eigen::Index dim) {
    w.resize(dim, dim);
    b.resize(1, dim);
    b.decay = false;
    w.v.setIdentity();
  }

  Eigen::Index in_dim() const { return w.v.rows(); }
  Eigen::Index out_dim() const { return w.v.cols(); }

  Mat<S> forward(const Mat<S>& x) const {
    Mat<S> y = x * w.v;
    y.rowwise() += b.v.row(0);
    return y;
  }

  // Accumulates parameter grads, returns dL/dx.
  Mat<S> backward(const Mat<S>& x, const Mat<S>& dy) {
    w.g.noalias() += x.transpose() * dy;
    b.g.row(0) += dy.colwise().sum();
    return dy * w.v.transpose();
  }

  void collect(const std::string& prefix, ParamRegistry<S>& reg) {
    reg.push_back({prefix + ".weight", &w});
    reg.push_back({prefix + ".bias", &b});
  }
};

template <typename S>
struct LayerNorm {
  Param<S> gamma;  // 1 x dim
  Param<S> beta;   // 1 x dim
  S eps = static_cast<S>(1e-5);

  struct Cache {
    Mat<S> xhat;
    Vec<S> invstd;
  };

  void init(Eigen::Index dim, double epsilon = 1e-5) {
    gamma.resize(1, dim);
    beta.resize(1, dim);
    gamma.v.setOnes();
    gamma.decay = false;
    beta.decay = false;
    eps = static_cast<S>(epsilon);
  }

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Mat<S> xhat(n, d);
    Vec<S> invstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S mu = x.row(i).mean();
      const auto centered = x.row(i).array() - mu;
      const S var = centered.square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      invstd(i) = is;
      xhat.row(i) = centered * is;
    }
    Mat<S> y = xhat.array().rowwise() * gamma.v.row(0).array();
    y.array().rowwise() += beta.v.row(0).array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->invstd = std::move(invstd);
    }
    return y;
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) {
    const Eigen::Index n = dy.rows();
    const Eigen::Index d = dy.cols();
    gamma.g.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    beta.g.row(0) += dy.colwise().sum();
    Mat<S> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto dxhat = (dy.row(i).array() * gamma.v.row(0).array()).eval();
      const S m1 = dxhat.mean();
      const S m2 = (dxhat * cache.xhat.row(i).array()).mean();
      dx.row(i) = (cache.invstd(i) * (dxhat - m1 - cache.xhat.row(i).array() * m2)).matrix();
    }
    return dx;
  }

  void collect(const std::string& prefix, ParamRegistry<S>& reg) {
    reg.push_back({prefix + ".weight", &gamma});
    reg.push_back({prefix + ".bias", &beta});
  }
};

template <typename S>
Mat<S> gelu_forward(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return gelu(v); });
}

template <typename S>
Mat<S> gelu_backward(const Mat<S>& x_pre, const Mat<S>& dy) {
  return dy.cwiseProduct(x_pre.unaryExpr([](S v) { return gelu_grad(v); }));
}

}  // namespace mimco
