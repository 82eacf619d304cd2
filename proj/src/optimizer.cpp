#include "oar/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace oar {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::step() {
  ++t_;
  const Real bc1 = 1.0 - std::pow(config_.beta1, static_cast<Real>(t_));
  const Real bc2 = 1.0 - std::pow(config_.beta2, static_cast<Real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const Matrix& g = p.grad();
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw std::invalid_argument("AdamW::step: gradient/parameter shape mismatch");
    }
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i].array().matrix() +
            (1.0 - config_.beta2) * g.cwiseProduct(g);
    const Matrix mhat = m_[i] / bc1;
    const Matrix vhat = v_[i] / bc2;
    p.value().array() -=
        config_.lr * (mhat.array() / (vhat.array().sqrt() + config_.eps) +
                      config_.weight_decay * p.value().array());
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace oar
