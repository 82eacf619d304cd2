#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

#include "oar/rng.hpp"

namespace oar {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorNode {
  Matrix value;
  Matrix grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Shared handle to a 2-D value (vectors are 1xN). Values are treated as
/// immutable once produced by an op; gradients accumulate in place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = false) {
    return Tensor(Matrix::Zero(rows, cols), requires_grad);
  }
  static Tensor scalar(Real v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Tensor(m);
  }

  bool defined() const { return node_ != nullptr; }
  // The handle is shared; const-ness of a Tensor copy does not protect the
  // node, so accessors mutate through it freely (as closures require).
  Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Real item() const { return node_->value(0, 0); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  Matrix& grad() const {
    if (node_->grad.size() == 0) node_->grad = Matrix::Zero(rows(), cols());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() const { node_->grad.resize(0, 0); }

  void accumulate_grad(const Matrix& g) const { grad() += g; }

  TensorNode* node() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Records one backward closure per differentiable op, in forward order.
/// Forward order is topological by construction, so replaying in reverse
/// visits every node exactly once.
class Tape {
 public:
  void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse.
  /// `loss` must be a 1x1 tensor.
  void backward(Tensor loss);

 private:
  std::vector<std::function<void()>> ops_;
};

// ---- differentiable ops (record onto the tape when any input tracks) ----

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape& tape, const Tensor& a, Real s);
Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& row);  // row broadcast
Tensor sum(Tape& tape, const Tensor& a);                            // -> 1x1
Tensor gelu(Tape& tape, const Tensor& a);

/// Row-wise softmax with max-subtraction.
Tensor softmax_last(Tape& tape, const Tensor& x);

/// Weighted mean of -log softmax(logits)[target] over rows.
Tensor cross_entropy_logits(Tape& tape, const Tensor& logits,
                            const std::vector<int>& targets,
                            const std::vector<Real>& weights);

/// Per-row standardization followed by the affine (gain, bias), both 1xd.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, Real eps = 1e-5);

/// Inverted dropout; identity when !training or p == 0.
Tensor dropout(Tape& tape, const Tensor& x, Real p, SeededStream& stream, bool training);

/// Gather rows of `table` at `indices`; gradient scatter-adds back.
Tensor embedding_rows(Tape& tape, const Tensor& table, const std::vector<int>& indices);

/// Contiguous row / column slices (gradient scatters into the source).
Tensor rows(Tape& tape, const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor cols(Tape& tape, const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b);
Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b);

/// a * b^T, for attention scores.
Tensor matmul_bt(Tape& tape, const Tensor& a, const Tensor& b);

/// Adds -1e30 to entries (i, j) with j > i. Gradient passes through.
Tensor add_causal_mask(Tape& tape, const Tensor& scores);

}  // namespace oar
