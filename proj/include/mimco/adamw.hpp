#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mimco/linalg.hpp"

namespace mimco {

// AdamW with decoupled weight decay. Decay is skipped for params whose decay
// flag is off (biases, norm affines, mask token, position embeddings). The
// registry order fixes the slot order, so the same collect calls must be
// replayed before restoring optimizer state from a checkpoint.
template <typename S>
class AdamW {
 public:
  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw std::invalid_argument("adamw: betas must lie in [0, 1)");
    if (eps <= 0.0) throw std::invalid_argument("adamw: eps must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("adamw: weight decay must be nonnegative");
  }

  void attach(const ParamRegistry<S>& reg) {
    m_.clear();
    v_.clear();
    m_.reserve(reg.size());
    v_.reserve(reg.size());
    for (const auto& ref : reg) {
      m_.push_back(Mat<S>::Zero(ref.p->v.rows(), ref.p->v.cols()));
      v_.push_back(Mat<S>::Zero(ref.p->v.rows(), ref.p->v.cols()));
    }
    step_ = 0;
  }

  // One update over the registry the moments were attached to.
  void step(ParamRegistry<S>& reg, double lr) {
    if (reg.size() != m_.size()) throw std::invalid_argument("adamw: registry does not match state");
    ++step_;
    const S b1 = static_cast<S>(beta1_);
    const S b2 = static_cast<S>(beta2_);
    const S corr1 = S(1) - static_cast<S>(std::pow(beta1_, static_cast<double>(step_)));
    const S corr2 = S(1) - static_cast<S>(std::pow(beta2_, static_cast<double>(step_)));
    const S slr = static_cast<S>(lr);
    const S eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < reg.size(); ++i) {
      Param<S>& p = *reg[i].p;
      if (p.v.rows() != m_[i].rows() || p.v.cols() != m_[i].cols())
        throw std::invalid_argument("adamw: shape drift at " + reg[i].name);
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p.g.cwiseProduct(p.g);
      if (p.decay && weight_decay_ > 0.0)
        p.v -= slr * static_cast<S>(weight_decay_) * p.v;
      const auto m_hat = (m_[i] / corr1).eval();
      const auto v_hat = (v_[i] / corr2).eval();
      p.v.array() -= slr * m_hat.array() / (v_hat.array().sqrt() + eps);
    }
  }

  std::uint64_t steps_taken() const { return step_; }
  std::size_t slots() const { return m_.size(); }
  double weight_decay() const { return weight_decay_; }

  // Checkpoint plumbing: moments are exposed slot by slot.
  const Mat<S>& moment1(std::size_t i) const { return m_.at(i); }
  const Mat<S>& moment2(std::size_t i) const { return v_.at(i); }
  void restore_slot(std::size_t i, const Mat<S>& m, const Mat<S>& v) {
    if (i >= m_.size()) throw std::invalid_argument("adamw: restore slot out of range");
    if (m.rows() != m_[i].rows() || m.cols() != m_[i].cols() || v.rows() != v_[i].rows() ||
        v.cols() != v_[i].cols())
      throw std::invalid_argument("adamw: restore shape mismatch");
    m_[i] = m;
    v_[i] = v;
  }
  void restore_steps(std::uint64_t s) { step_ = s; }

 private:
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double weight_decay_ = 0.0;
  std::uint64_t step_ = 0;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
};

}  // namespace mimco
