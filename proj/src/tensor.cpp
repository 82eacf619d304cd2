#include "oar/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace oar {

namespace {

void check_finite_precondition(const Tensor& t, const char* op) {
  if (!t.value().allFinite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite input");
  }
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  std::ostringstream os;
  os << op << ": shape mismatch (" << a.rows() << "x" << a.cols() << ") vs ("
     << b.rows() << "x" << b.cols() << ")";
  throw std::invalid_argument(os.str());
}

bool tracking(const Tensor& a) { return a.requires_grad(); }

Tensor make_out(Matrix v, bool track) { return Tensor(std::move(v), track); }

}  // namespace

void Tape::backward(Tensor loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw std::invalid_argument("backward: loss must be scalar (1x1)");
  }
  loss.grad()(0, 0) += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  check_finite_precondition(a, "matmul");
  check_finite_precondition(b, "matmul");
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(a.value() * b.value(), track);
  if (track) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.grad().noalias() += out.grad() * b.value().transpose();
      if (b.requires_grad()) b.grad().noalias() += a.value().transpose() * out.grad();
    });
  }
  return out;
}

Tensor matmul_bt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_error("matmul_bt", a, b);
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(a.value() * b.value().transpose(), track);
  if (track) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.grad().noalias() += out.grad() * b.value();
      if (b.requires_grad()) b.grad().noalias() += out.grad().transpose() * a.value();
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a, b);
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(a.value() + b.value(), track);
  if (track) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.grad() += out.grad();
      if (b.requires_grad()) b.grad() += out.grad();
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("sub", a, b);
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(a.value() - b.value(), track);
  if (track) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.grad() += out.grad();
      if (b.requires_grad()) b.grad() -= out.grad();
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mul", a, b);
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(a.value().cwiseProduct(b.value()), track);
  if (track) {
    tape.record([a, b, out]() mutable {
      if (a.requires_grad()) a.grad() += out.grad().cwiseProduct(b.value());
      if (b.requires_grad()) b.grad() += out.grad().cwiseProduct(a.value());
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, Real s) {
  const bool track = tracking(a);
  Tensor out = make_out(a.value() * s, track);
  if (track) {
    tape.record([a, out, s]() mutable { a.grad() += out.grad() * s; });
  }
  return out;
}

Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error("add_rowvec", a, row);
  const bool track = tracking(a) || tracking(row);
  Tensor out = make_out(a.value().rowwise() + row.value().row(0), track);
  if (track) {
    tape.record([a, row, out]() mutable {
      if (a.requires_grad()) a.grad() += out.grad();
      if (row.requires_grad()) row.grad().row(0) += out.grad().colwise().sum();
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  const bool track = tracking(a);
  Tensor out = make_out(Matrix::Constant(1, 1, a.value().sum()), track);
  if (track) {
    tape.record([a, out]() mutable {
      a.grad().array() += out.grad()(0, 0);
    });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& a) {
  // tanh approximation
  const Real c = std::sqrt(2.0 / M_PI);
  Matrix x = a.value();
  Matrix inner = (c * (x.array() + 0.044715 * x.array().cube())).matrix();
  Matrix t = inner.array().tanh().matrix();
  Matrix y = (0.5 * x.array() * (1.0 + t.array())).matrix();
  const bool track = tracking(a);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    tape.record([a, out, x, t, c]() mutable {
      auto xa = x.array();
      auto ta = t.array();
      auto dinner = c * (1.0 + 3.0 * 0.044715 * xa.square());
      Matrix d = (0.5 * (1.0 + ta) + 0.5 * xa * (1.0 - ta.square()) * dinner).matrix();
      a.grad() += out.grad().cwiseProduct(d);
    });
  }
  return out;
}

Tensor softmax_last(Tape& tape, const Tensor& x) {
  check_finite_precondition(x, "softmax_last");
  Matrix y = x.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const Real m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  const bool track = tracking(x);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    tape.record([x, out]() mutable {
      const Matrix& p = out.value();
      const Matrix& g = out.grad();
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const Real dot = p.row(i).dot(g.row(i));
        x.grad().row(i).array() +=
            p.row(i).array() * (g.row(i).array() - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(Tape& tape, const Tensor& logits,
                            const std::vector<int>& targets,
                            const std::vector<Real>& weights) {
  const Eigen::Index B = logits.rows();
  const Eigen::Index V = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != B ||
      static_cast<Eigen::Index>(weights.size()) != B) {
    throw std::invalid_argument("cross_entropy_logits: batch size mismatch");
  }
  for (int t : targets) {
    if (t < 0 || t >= V) {
      throw std::out_of_range("cross_entropy_logits: target " + std::to_string(t) +
                              " outside [0, " + std::to_string(V) + ")");
    }
  }
  Real total_w = 0;
  for (Real w : weights) {
    if (w < 0) throw std::invalid_argument("cross_entropy_logits: negative weight");
    total_w += w;
  }
  if (total_w <= 0) throw std::invalid_argument("cross_entropy_logits: zero total weight");

  // log-softmax via log-sum-exp with max subtraction
  Matrix logp(B, V);
  for (Eigen::Index i = 0; i < B; ++i) {
    const Real m = logits.value().row(i).maxCoeff();
    const Real lse = std::log((logits.value().row(i).array() - m).exp().sum()) + m;
    logp.row(i) = logits.value().row(i).array() - lse;
  }
  Real loss = 0;
  for (Eigen::Index i = 0; i < B; ++i) loss -= weights[i] * logp(i, targets[i]);
  loss /= total_w;

  const bool track = tracking(logits);
  Tensor out = make_out(Matrix::Constant(1, 1, loss), track);
  if (track) {
    tape.record([logits, out, logp, targets, weights, total_w]() mutable {
      const Real go = out.grad()(0, 0);
      for (Eigen::Index i = 0; i < logp.rows(); ++i) {
        const Real w = weights[i] / total_w * go;
        logits.grad().row(i).array() += w * logp.row(i).array().exp();
        logits.grad()(i, targets[i]) -= w;
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, Real eps) {
  const Eigen::Index d = x.cols();
  if (gain.cols() != d || bias.cols() != d || gain.rows() != 1 || bias.rows() != 1) {
    shape_error("layer_norm", x, gain);
  }
  Matrix xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Real mu = x.value().row(i).mean();
    const Real var = (x.value().row(i).array() - mu).square().mean();
    const Real is = 1.0 / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = (x.value().row(i).array() - mu) * is;
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
             bias.value().row(0).array();
  const bool track = tracking(x) || tracking(gain) || tracking(bias);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    tape.record([x, gain, bias, out, xhat, inv_std]() mutable {
      const Eigen::Index d = xhat.cols();
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        Eigen::RowVectorXd dy = out.grad().row(i);
        if (gain.requires_grad())
          gain.grad().row(0).array() += dy.array() * xhat.row(i).array();
        if (bias.requires_grad()) bias.grad().row(0) += dy;
        if (x.requires_grad()) {
          Eigen::RowVectorXd dxhat = dy.array() * gain.value().row(0).array();
          const Real m1 = dxhat.mean();
          const Real m2 = (dxhat.array() * xhat.row(i).array()).mean();
          x.grad().row(i).array() +=
              inv_std(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
          (void)d;
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape& tape, const Tensor& x, Real p, SeededStream& stream, bool training) {
  if (p < 0 || p >= 1) {
    throw std::invalid_argument("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0) return x;
  const Real keep = 1.0 - p;
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      mask(i, j) = stream.next_double() < p ? 0.0 : 1.0 / keep;
    }
  }
  const bool track = tracking(x);
  Tensor out = make_out(x.value().cwiseProduct(mask), track);
  if (track) {
    tape.record([x, out, mask]() mutable {
      x.grad() += out.grad().cwiseProduct(mask);
    });
  }
  return out;
}

Tensor embedding_rows(Tape& tape, const Tensor& table, const std::vector<int>& indices) {
  const Eigen::Index n = static_cast<Eigen::Index>(indices.size());
  Matrix y(n, table.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int r = indices[i];
    if (r < 0 || r >= table.rows()) {
      throw std::out_of_range("embedding_rows: index " + std::to_string(r) +
                              " outside [0, " + std::to_string(table.rows()) + ")");
    }
    y.row(i) = table.value().row(r);
  }
  const bool track = tracking(table);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    tape.record([table, out, indices]() mutable {
      for (std::size_t i = 0; i < indices.size(); ++i) {
        table.grad().row(indices[i]) += out.grad().row(static_cast<Eigen::Index>(i));
      }
    });
  }
  return out;
}

Tensor rows(Tape& tape, const Tensor& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.rows()) {
    throw std::out_of_range("rows: slice outside tensor");
  }
  const bool track = tracking(x);
  Tensor out = make_out(x.value().middleRows(start, count), track);
  if (track) {
    tape.record([x, out, start, count]() mutable {
      x.grad().middleRows(start, count) += out.grad();
    });
  }
  return out;
}

Tensor cols(Tape& tape, const Tensor& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.cols()) {
    throw std::out_of_range("cols: slice outside tensor");
  }
  const bool track = tracking(x);
  Tensor out = make_out(x.value().middleCols(start, count), track);
  if (track) {
    tape.record([x, out, start, count]() mutable {
      x.grad().middleCols(start, count) += out.grad();
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) shape_error("concat_cols", a, b);
  Matrix y(a.rows(), a.cols() + b.cols());
  y << a.value(), b.value();
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    const Eigen::Index ac = a.cols();
    tape.record([a, b, out, ac]() mutable {
      if (a.requires_grad()) a.grad() += out.grad().leftCols(ac);
      if (b.requires_grad()) b.grad() += out.grad().rightCols(out.cols() - ac);
    });
  }
  return out;
}

Tensor concat_rows(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_error("concat_rows", a, b);
  Matrix y(a.rows() + b.rows(), a.cols());
  y << a.value(), b.value();
  const bool track = tracking(a) || tracking(b);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    const Eigen::Index ar = a.rows();
    tape.record([a, b, out, ar]() mutable {
      if (a.requires_grad()) a.grad() += out.grad().topRows(ar);
      if (b.requires_grad()) b.grad() += out.grad().bottomRows(out.rows() - ar);
    });
  }
  return out;
}

Tensor add_causal_mask(Tape& tape, const Tensor& scores) {
  Matrix y = scores.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < y.cols(); ++j) y(i, j) -= 1e30;
  }
  const bool track = tracking(scores);
  Tensor out = make_out(std::move(y), track);
  if (track) {
    tape.record([scores, out]() mutable { scores.grad() += out.grad(); });
  }
  return out;
}

}  // namespace oar
