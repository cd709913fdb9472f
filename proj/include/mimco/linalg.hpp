#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "mimco/rng.hpp"

namespace mimco {

// Row-major matrices throughout: a row is one token / one embedding, and the
// checkpoint payload is a straight row-major dump.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// A learnable tensor with its gradient buffer. `decay` marks participation in
// decoupled weight decay (off for biases, norm scales, mask token, pos embed).
template <typename S>
struct Param {
  Mat<S> v;
  Mat<S> g;
  bool decay = true;

  void resize(Eigen::Index rows, Eigen::Index cols) {
    v.setZero(rows, cols);
    g.setZero(rows, cols);
  }
};

template <typename S>
struct ParamRef {
  std::string name;
  Param<S>* p = nullptr;
};

template <typename S>
using ParamRegistry = std::vector<ParamRef<S>>;

template <typename S>
void zero_grads(const ParamRegistry<S>& reg) {
  for (const auto& r : reg) r.p->g.setZero();
}

template <typename S>
void trunc_normal_fill(Mat<S>& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<S>(rng.trunc_normal(stddev));
}

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

template <typename S>
S row_norm(const Mat<S>& m, Eigen::Index i) {
  return m.row(i).norm();
}

// Rows scaled to unit L2 norm; zero rows are left untouched via the epsilon
// floor so downstream cosine math stays finite.
template <typename S>
Mat<S> normalized_rows(const Mat<S>& m, S eps = static_cast<S>(1e-12)) {
  Mat<S> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const S n = out.row(i).norm();
    out.row(i) /= std::max(n, eps);
  }
  return out;
}

template <typename S>
inline S gelu(S x) {
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
}

template <typename S>
inline S gelu_grad(S x) {
  const S cdf = static_cast<S>(0.5) * (static_cast<S>(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
  const S pdf = std::exp(static_cast<S>(-0.5) * x * x) * static_cast<S>(0.3989422804014326779);
  return cdf + x * pdf;
}

}  // namespace mimco
