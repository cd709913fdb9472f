#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mimco/linalg.hpp"

namespace mimco {

namespace detail {

// InfoNCE over row-aligned query/positive pairs with a shared negative set.
// Inputs are unnormalized; normalization happens here, and the returned
// gradient is with respect to the raw queries (chain rule through the
// normalization included). Row i of d_q is the gradient of that row's own
// loss; callers apply their aggregation weights afterwards. Keys and
// negatives are treated as constants (stop-gradient).
template <typename S>
void info_nce_rows(const Mat<S>& q, const Mat<S>& k, const Mat<S>& negs, S tau, Vec<S>& losses,
                   Mat<S>* d_q) {
  const Eigen::Index n = q.rows();
  const Eigen::Index m = negs.rows();
  if (k.rows() != n || k.cols() != q.cols())
    throw std::invalid_argument("info_nce: key shape does not match queries");
  if (m > 0 && negs.cols() != q.cols())
    throw std::invalid_argument("info_nce: negative dim does not match queries");
  if (tau <= S(0)) throw std::invalid_argument("info_nce: temperature must be positive");

  const S eps = static_cast<S>(1e-12);
  Mat<S> qn = normalized_rows(q);
  Mat<S> kn = normalized_rows(k);
  Mat<S> nn;
  if (m > 0) nn = normalized_rows(negs);

  Vec<S> pos = (qn.array() * kn.array()).rowwise().sum().matrix() / tau;
  Mat<S> neg_logits;
  if (m > 0) neg_logits.noalias() = (qn * nn.transpose()) / tau;

  losses.resize(n);
  Mat<S> probs_neg;  // softmax mass on each negative, per row
  if (d_q && m > 0) probs_neg.resize(n, m);
  if (d_q) d_q->resize(n, q.cols());

  for (Eigen::Index i = 0; i < n; ++i) {
    S mx = pos(i);
    if (m > 0) mx = std::max(mx, neg_logits.row(i).maxCoeff());
    const S e_pos = std::exp(pos(i) - mx);
    S denom = e_pos;
    if (m > 0) {
      for (Eigen::Index j = 0; j < m; ++j) denom += std::exp(neg_logits(i, j) - mx);
    }
    losses(i) = mx + std::log(denom) - pos(i);

    if (d_q) {
      const S p0 = e_pos / denom;
      // d(loss)/d(qn) = ((p0 - 1) * kn + sum_j p_j * nn_j) / tau
      Vec<S> g = ((p0 - S(1)) / tau) * kn.row(i).transpose();
      if (m > 0) {
        for (Eigen::Index j = 0; j < m; ++j)
          probs_neg(i, j) = std::exp(neg_logits(i, j) - mx) / denom;
      }
      // negative part is folded in below via one GEMM over all rows
      d_q->row(i) = g.transpose();
    }
  }

  if (d_q) {
    if (m > 0) d_q->noalias() += (probs_neg * nn) / tau;
    // project through the normalization: dL/dq = (g - (qn . g) qn) / |q|
    for (Eigen::Index i = 0; i < n; ++i) {
      const S qdotg = qn.row(i).dot(d_q->row(i));
      const S norm = std::max(q.row(i).norm(), eps);
      d_q->row(i) = (d_q->row(i) - qdotg * qn.row(i)) / norm;
    }
  }
}

// Splits flat token rows by image, averages the selected rows per image, then
// averages over images. Returns scalar loss + per-image means, and fills
// row_weight with each selected row's weight in the scalar.
template <typename S>
S mean_per_image(const Vec<S>& row_losses, const std::vector<Eigen::Index>& row_image,
                 const std::vector<Eigen::Index>& rows_in_image, int batch, Vec<S>& per_image,
                 std::vector<S>& row_weight) {
  per_image = Vec<S>::Zero(batch);
  for (Eigen::Index i = 0; i < row_losses.size(); ++i) per_image(row_image[i]) += row_losses(i);
  for (int b = 0; b < batch; ++b) per_image(b) /= static_cast<S>(rows_in_image[b]);
  row_weight.resize(static_cast<std::size_t>(row_losses.size()));
  for (Eigen::Index i = 0; i < row_losses.size(); ++i)
    row_weight[static_cast<std::size_t>(i)] =
        S(1) / (static_cast<S>(rows_in_image[row_image[i]]) * static_cast<S>(batch));
  return per_image.mean();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Patch-level reconstruction
// ---------------------------------------------------------------------------

template <typename S>
struct PatchLossResult {
  S loss = S(0);        // mean over images of the per-image mean over positions
  Vec<S> per_image;     // batch entries
  Mat<S> d_queries;     // gradient w.r.t. the full query map; zero off-position
};

// InfoNCE between student predictions and teacher keys at the flagged token
// positions (normally the masked ones). positions holds batch*tokens flags.
// Every image must flag at least one position, otherwise its mean is
// undefined.
template <typename S>
PatchLossResult<S> patch_reconstruction_loss(const Mat<S>& queries, const Mat<S>& keys,
                                             const std::vector<std::uint8_t>& positions,
                                             const Mat<S>& negatives, double tau, int batch,
                                             int tokens) {
  if (batch <= 0 || tokens <= 0)
    throw std::invalid_argument("patch_loss: batch and tokens must be positive");
  const Eigen::Index rows = static_cast<Eigen::Index>(batch) * tokens;
  if (queries.rows() != rows || keys.rows() != rows)
    throw std::invalid_argument("patch_loss: feature rows must equal batch * tokens");
  if (static_cast<Eigen::Index>(positions.size()) != rows)
    throw std::invalid_argument("patch_loss: positions length must equal batch * tokens");

  std::vector<Eigen::Index> sel;
  std::vector<Eigen::Index> sel_image;
  std::vector<Eigen::Index> count(batch, 0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (positions[static_cast<std::size_t>(r)]) {
      sel.push_back(r);
      sel_image.push_back(r / tokens);
      ++count[static_cast<std::size_t>(r / tokens)];
    }
  }
  for (int b = 0; b < batch; ++b)
    if (count[static_cast<std::size_t>(b)] == 0)
      throw std::invalid_argument("patch_loss: an image has no flagged positions");

  Mat<S> q_sel(static_cast<Eigen::Index>(sel.size()), queries.cols());
  Mat<S> k_sel(static_cast<Eigen::Index>(sel.size()), keys.cols());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    q_sel.row(static_cast<Eigen::Index>(i)) = queries.row(sel[i]);
    k_sel.row(static_cast<Eigen::Index>(i)) = keys.row(sel[i]);
  }

  Vec<S> row_losses;
  Mat<S> d_sel;
  detail::info_nce_rows(q_sel, k_sel, negatives, static_cast<S>(tau), row_losses, &d_sel);

  PatchLossResult<S> out;
  std::vector<S> weight;
  out.loss = detail::mean_per_image(row_losses, sel_image, count, batch, out.per_image, weight);
  out.d_queries = Mat<S>::Zero(rows, queries.cols());
  for (std::size_t i = 0; i < sel.size(); ++i)
    out.d_queries.row(sel[i]) = d_sel.row(static_cast<Eigen::Index>(i)) * weight[i];
  return out;
}

// ---------------------------------------------------------------------------
// Image-level reconstruction
// ---------------------------------------------------------------------------

template <typename S>
struct ImageLossResult {
  S loss = S(0);     // batch mean
  Vec<S> per_image;  // one InfoNCE term per image
  Mat<S> d_queries;  // batch x dim
};

// InfoNCE between pooled student predictions and pooled teacher keys, one
// row per image.
template <typename S>
ImageLossResult<S> image_reconstruction_loss(const Mat<S>& queries, const Mat<S>& keys,
                                             const Mat<S>& negatives, double tau) {
  if (queries.rows() == 0) throw std::invalid_argument("image_loss: empty batch");
  Vec<S> row_losses;
  Mat<S> d_q;
  detail::info_nce_rows(queries, keys, negatives, static_cast<S>(tau), row_losses, &d_q);
  ImageLossResult<S> out;
  out.per_image = row_losses;
  out.loss = row_losses.mean();
  out.d_queries = d_q / static_cast<S>(queries.rows());
  return out;
}

// ---------------------------------------------------------------------------
// Ablation losses
// ---------------------------------------------------------------------------

template <typename S>
struct ElementLossResult {
  S loss = S(0);
  Vec<S> per_image;
  Mat<S> d_pred;  // gradient w.r.t. the full prediction map; zero off-position
};

// Mean absolute difference between L2-normalized feature rows at the flagged
// positions, per-image mean then batch mean. Replaces the patch InfoNCE term
// in the regression ablation, so it runs on the same normalized geometry.
template <typename S>
ElementLossResult<S> l1_feature_loss(const Mat<S>& pred, const Mat<S>& target,
                                     const std::vector<std::uint8_t>& positions, int batch,
                                     int tokens) {
  if (batch <= 0 || tokens <= 0)
    throw std::invalid_argument("l1_loss: batch and tokens must be positive");
  const Eigen::Index rows = static_cast<Eigen::Index>(batch) * tokens;
  if (pred.rows() != rows || target.rows() != rows || pred.cols() != target.cols())
    throw std::invalid_argument("l1_loss: prediction and target shapes must match batch * tokens");
  if (static_cast<Eigen::Index>(positions.size()) != rows)
    throw std::invalid_argument("l1_loss: positions length must equal batch * tokens");

  const S eps = static_cast<S>(1e-12);
  const Eigen::Index dim = pred.cols();
  std::vector<Eigen::Index> count(batch, 0);
  for (Eigen::Index r = 0; r < rows; ++r)
    if (positions[static_cast<std::size_t>(r)]) ++count[static_cast<std::size_t>(r / tokens)];
  for (int b = 0; b < batch; ++b)
    if (count[static_cast<std::size_t>(b)] == 0)
      throw std::invalid_argument("l1_loss: an image has no flagged positions");

  ElementLossResult<S> out;
  out.per_image = Vec<S>::Zero(batch);
  out.d_pred = Mat<S>::Zero(rows, dim);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!positions[static_cast<std::size_t>(r)]) continue;
    const int b = static_cast<int>(r / tokens);
    const S norm = std::max(pred.row(r).norm(), eps);
    Vec<S> pn = pred.row(r).transpose() / norm;
    Vec<S> tn = target.row(r).transpose() / std::max(target.row(r).norm(), eps);
    Vec<S> diff = pn - tn;
    out.per_image(b) += diff.cwiseAbs().mean();
    // d mean|pn - tn| / d pred, through the normalization of pred
    Vec<S> sign = diff.unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
    sign /= static_cast<S>(dim);
    const S pdots = pn.dot(sign);
    out.d_pred.row(r) = ((sign - pdots * pn) / norm).transpose();
  }
  for (int b = 0; b < batch; ++b) {
    out.per_image(b) /= static_cast<S>(count[static_cast<std::size_t>(b)]);
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!positions[static_cast<std::size_t>(r)]) continue;
    const int b = static_cast<int>(r / tokens);
    out.d_pred.row(r) /=
        static_cast<S>(count[static_cast<std::size_t>(b)]) * static_cast<S>(batch);
  }
  out.loss = out.per_image.mean();
  return out;
}

// Mean absolute pixel error at the flagged token positions, per-image mean
// then batch mean. pred and target are raw patch pixels (no normalization).
template <typename S>
ElementLossResult<S> pixel_reconstruction_loss(const Mat<S>& pred, const Mat<S>& target,
                                               const std::vector<std::uint8_t>& positions,
                                               int batch, int tokens) {
  if (batch <= 0 || tokens <= 0)
    throw std::invalid_argument("pixel_loss: batch and tokens must be positive");
  const Eigen::Index rows = static_cast<Eigen::Index>(batch) * tokens;
  if (pred.rows() != rows || target.rows() != rows || pred.cols() != target.cols())
    throw std::invalid_argument("pixel_loss: prediction and target shapes must match");
  if (static_cast<Eigen::Index>(positions.size()) != rows)
    throw std::invalid_argument("pixel_loss: positions length must equal batch * tokens");

  const Eigen::Index dim = pred.cols();
  std::vector<Eigen::Index> count(batch, 0);
  for (Eigen::Index r = 0; r < rows; ++r)
    if (positions[static_cast<std::size_t>(r)]) ++count[static_cast<std::size_t>(r / tokens)];
  for (int b = 0; b < batch; ++b)
    if (count[static_cast<std::size_t>(b)] == 0)
      throw std::invalid_argument("pixel_loss: an image has no flagged positions");

  ElementLossResult<S> out;
  out.per_image = Vec<S>::Zero(batch);
  out.d_pred = Mat<S>::Zero(rows, dim);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!positions[static_cast<std::size_t>(r)]) continue;
    const int b = static_cast<int>(r / tokens);
    const auto diff = (pred.row(r) - target.row(r)).eval();
    out.per_image(b) += diff.cwiseAbs().mean();
    const S w = S(1) / (static_cast<S>(dim) * static_cast<S>(count[static_cast<std::size_t>(b)]) *
                        static_cast<S>(batch));
    out.d_pred.row(r) =
        diff.unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); }) * w;
  }
  for (int b = 0; b < batch; ++b) out.per_image(b) /= static_cast<S>(count[static_cast<std::size_t>(b)]);
  out.loss = out.per_image.mean();
  return out;
}

// Weighted combination of the two reconstruction terms.
template <typename S>
S total_loss(S patch_term, S image_term, double w_patch = 1.0, double w_image = 1.0) {
  return static_cast<S>(w_patch) * patch_term + static_cast<S>(w_image) * image_term;
}

}  // namespace mimco
