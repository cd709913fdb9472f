#pragma once

#include <stdexcept>
#include <string>
#include <type_traits>

#include "mimco/linalg.hpp"
#include "mimco/nn.hpp"
#include "mimco/vit.hpp"

namespace mimco {

enum class HeadActivation { gelu, identity };

// Two affine layers with an optional nonlinearity between them, applied
// row-wise. Serves both the per-token heads (each token row is one sample)
// and the pooled image heads.
template <typename S>
struct MlpHead {
  Linear<S> fc1;
  Linear<S> fc2;
  HeadActivation act = HeadActivation::gelu;

  struct Cache {
    Mat<S> x;
    Mat<S> h_pre;
    Mat<S> h_act;
  };

  void init(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng,
            HeadActivation activation = HeadActivation::gelu) {
    if (in <= 0 || hidden <= 0 || out <= 0)
      throw std::invalid_argument("head: dimensions must be positive");
    fc1.init(in, hidden, rng);
    fc2.init(hidden, out, rng);
    act = activation;
  }

  // Exact pass-through; handy for tests that need heads out of the way.
  void init_identity(Eigen::Index dim) {
    fc1.init_identity(dim);
    fc2.init_identity(dim);
    act = HeadActivation::identity;
  }

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    Mat<S> h_pre = fc1.forward(x);
    Mat<S> h_act = act == HeadActivation::gelu ? gelu_forward(h_pre) : h_pre;
    Mat<S> y = fc2.forward(h_act);
    if (cache) {
      cache->x = x;
      cache->h_pre = std::move(h_pre);
      cache->h_act = std::move(h_act);
    }
    return y;
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) {
    Mat<S> d_act = fc2.backward(cache.h_act, dy);
    Mat<S> d_pre = act == HeadActivation::gelu ? gelu_backward(cache.h_pre, d_act) : std::move(d_act);
    return fc1.backward(cache.x, d_pre);
  }

  void collect(const std::string& prefix, ParamRegistry<S>& reg) {
    fc1.collect(prefix + ".fc1", reg);
    fc2.collect(prefix + ".fc2", reg);
  }
};

// Online projector + predictor plus a momentum projector that shadows the
// online projector by EMA. Only projector and predictor receive gradients;
// the momentum projector is updated out-of-band.
template <typename S>
struct HeadTriplet {
  MlpHead<S> projector;
  MlpHead<S> predictor;
  MlpHead<S> momentum_projector;

  void init(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng,
            HeadActivation activation = HeadActivation::gelu) {
    projector.init(in, hidden, out, rng, activation);
    predictor.init(out, hidden, out, rng, activation);
    momentum_projector.init(in, hidden, out, rng, activation);
    sync_momentum();
  }

  // Makes the momentum projector an exact copy of the online one.
  void sync_momentum() {
    momentum_projector.fc1.w.v = projector.fc1.w.v;
    momentum_projector.fc1.b.v = projector.fc1.b.v;
    momentum_projector.fc2.w.v = projector.fc2.w.v;
    momentum_projector.fc2.b.v = projector.fc2.b.v;
    momentum_projector.act = projector.act;
  }

  void collect_online(const std::string& prefix, ParamRegistry<S>& reg) {
    projector.collect(prefix + ".projector", reg);
    predictor.collect(prefix + ".predictor", reg);
  }

  void collect_momentum(const std::string& prefix, ParamRegistry<S>& reg) {
    momentum_projector.collect(prefix + ".momentum_projector", reg);
  }
};

// One triplet works per token position, the other on pooled image vectors.
// Same parameter shapes, different call sites.
template <typename S>
using PatchHeadParams = HeadTriplet<S>;
template <typename S>
using ImageHeadParams = HeadTriplet<S>;

template <typename S>
struct OnlineHeadCache {
  typename MlpHead<S>::Cache proj;
  typename MlpHead<S>::Cache pred;
};

// q = predictor(projector(x)). Unnormalized: L2 normalization lives inside
// the losses, so heads stay plain feature maps.
template <typename S>
Mat<S> online_head_forward(HeadTriplet<S>& h, const Mat<S>& x,
                           std::type_identity_t<OnlineHeadCache<S>*> cache = nullptr) {
  Mat<S> proj = h.projector.forward(x, cache ? &cache->proj : nullptr);
  return h.predictor.forward(proj, cache ? &cache->pred : nullptr);
}

template <typename S>
Mat<S> online_head_backward(HeadTriplet<S>& h, const OnlineHeadCache<S>& cache, const Mat<S>& dq) {
  Mat<S> d_proj = h.predictor.backward(cache.pred, dq);
  return h.projector.backward(cache.proj, d_proj);
}

// k = momentum_projector(x); never part of the gradient graph.
template <typename S>
Mat<S> momentum_head_forward(const HeadTriplet<S>& h, const Mat<S>& x) {
  return h.momentum_projector.forward(x, nullptr);
}

// Per-token online path over a feature map; rows stay in feature-map order.
template <typename S>
Mat<S> patch_online_head(PatchHeadParams<S>& h, const FeatureMap<S>& fm,
                         OnlineHeadCache<S>* cache = nullptr) {
  return online_head_forward(h, fm.values, cache);
}

template <typename S>
Mat<S> patch_momentum_head(const PatchHeadParams<S>& h, const FeatureMap<S>& fm) {
  return momentum_head_forward(h, fm.values);
}

// Pooled image path; one row per image.
template <typename S>
Mat<S> image_online_head(ImageHeadParams<S>& h, const Mat<S>& pooled,
                         OnlineHeadCache<S>* cache = nullptr) {
  return online_head_forward(h, pooled, cache);
}

template <typename S>
Mat<S> image_momentum_head(const ImageHeadParams<S>& h, const Mat<S>& pooled) {
  return momentum_head_forward(h, pooled);
}

// dst <- m * dst + (1 - m) * src over name-congruent registries.
template <typename S>
void ema_update(ParamRegistry<S>& dst, const ParamRegistry<S>& src, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
  if (dst.size() != src.size())
    throw std::invalid_argument("ema_update: registries differ in size");
  const S mm = static_cast<S>(m);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Param<S>& d = *dst[i].p;
    const Param<S>& s = *src[i].p;
    if (d.v.rows() != s.v.rows() || d.v.cols() != s.v.cols())
      throw std::invalid_argument("ema_update: shape mismatch at " + dst[i].name);
    d.v = mm * d.v + (S(1) - mm) * s.v;
  }
}

// EMA step for one triplet: momentum projector tracks the online projector.
template <typename S>
void ema_update(HeadTriplet<S>& h, double m) {
  ParamRegistry<S> dst;
  h.momentum_projector.collect("m", dst);
  ParamRegistry<S> src;
  h.projector.collect("o", src);
  ema_update(dst, src, m);
}

}  // namespace mimco
