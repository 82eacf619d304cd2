#pragma once

#include <vector>

#include "oar/tensor.hpp"

namespace oar {

struct AdamWConfig {
  Real lr = 3e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  /// One update from the gradients currently accumulated on the parameters.
  void step();

  void zero_grad();

  std::int64_t t() const { return t_; }
  AdamWConfig& config() { return config_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Matrix>& moment1() { return m_; }
  std::vector<Matrix>& moment2() { return v_; }
  void set_t(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  std::vector<Matrix> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace oar
