#pragma once

// Minimal dense training utilities shared by the encoder heads and the MLP classifier.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace chunkpd::optim {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;

inline double cosine_lr(double base, long step, long total) {
  if (total <= 1) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

/// Adam with bias correction over a fixed list of parameter blocks.
class Adam {
 public:
  explicit Adam(std::vector<Matrix*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<const Matrix*>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    const auto step_size = static_cast<float>(lr / c1);
    const auto eps = static_cast<float>(eps_);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Matrix& g = *grads[i];
      m_[i] = b1 * m_[i] + (1.0f - b1) * g;
      v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
      params_[i]->array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

/// Row-wise softmax in place; returns the summed negative log-likelihood of `labels`.
inline double softmax_nll(Matrix& logits, const std::vector<int>& labels) {
  double loss = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const float mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    const float sum = row.sum();
    row /= sum;
    loss -= std::log(std::max(static_cast<double>(row(labels[static_cast<std::size_t>(r)])), 1e-30));
  }
  return loss;
}

}  // namespace chunkpd::optim
