#ifndef TAINTRADAR_OPTIM_HPP_
#define TAINTRADAR_OPTIM_HPP_

#include <cmath>
#include <vector>

#include "taintradar/tensor.hpp"

namespace taintradar {

/// Adam over a fixed list of parameter slots. Descends: param -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename S>
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void begin_step() { ++t_; }

  void update(std::size_t slot, Tensor<S>& param, const Tensor<S>& grad) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    if (m_[slot].size() != param.size()) {
      m_[slot] = Vec<S>::Zero(param.size());
      v_[slot] = Vec<S>::Zero(param.size());
    }
    m_[slot] = S(beta1_) * m_[slot] + S(1 - beta1_) * grad.flat();
    v_[slot] = S(beta2_) * v_[slot] + S(1 - beta2_) * grad.flat().cwiseAbs2();
    const S bias1 = S(1 - std::pow(beta1_, t_));
    const S bias2 = S(1 - std::pow(beta2_, t_));
    param.flat().array() -=
        S(lr_) * (m_[slot].array() / bias1) / ((v_[slot].array() / bias2).sqrt() + S(eps_));
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Vec<S>> m_, v_;
};

}  // namespace taintradar

#endif  // TAINTRADAR_OPTIM_HPP_
