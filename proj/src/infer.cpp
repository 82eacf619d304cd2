#include "oar/infer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oar {

namespace {

using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

RowVec layer_norm_row(const RowVec& x, const Tensor& gain, const Tensor& bias,
                      Real eps = 1e-5) {
  const Real mu = x.mean();
  const Real var = (x.array() - mu).square().mean();
  const Real inv = 1.0 / std::sqrt(var + eps);
  return ((x.array() - mu) * inv * gain.value().row(0).array() +
          bias.value().row(0).array())
      .matrix();
}

Real gelu_scalar(Real x) {
  const Real c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

KVCachePrimary::KVCachePrimary(const ModelConfig& config)
    : depth(config.depth), dim(config.dim) {
  k.assign(depth, Matrix(0, dim));
  v.assign(depth, Matrix(0, dim));
}

void KVCachePrimary::reserve(int rows) {
  if (k[0].rows() >= rows) return;
  for (int l = 0; l < depth; ++l) {
    k[l].conservativeResize(rows, dim);
    v[l].conservativeResize(rows, dim);
  }
}

void KVCachePrimary::append(const TokenKV& kv) {
  if (committed >= k[0].rows()) {
    reserve(std::max(16, committed * 2));
  }
  for (int l = 0; l < depth; ++l) {
    k[l].row(committed) = kv.k.row(l);
    v[l].row(committed) = kv.v.row(l);
  }
  ++committed;
}

Matrix embed_step_value(const StepInput& step, const TransformerWeights& w) {
  const ModelConfig& c = w.config;
  const int half = c.dim / 2;
  RowVec e = w.tok_emb.value().row(step.token);
  const Position* prev = step.prev ? &*step.prev : nullptr;
  const RelativeIndex rel = relative_index(prev, step.next, c.grid);
  if (prev) {
    e.segment(0, half) +=
        w.abs_row.value().row(prev->row) + w.abs_col.value().row(prev->col);
  }
  e.segment(half, half) +=
      w.rel_row.value().row(rel.row) + w.rel_col.value().row(rel.col);
  return e;
}

Matrix embed_condition_value(int token, int pos, const TransformerWeights& w) {
  if (token < 0 || token >= w.config.cond_vocab) {
    throw std::invalid_argument("embed_condition_value: token out of range");
  }
  return w.cond_emb.value().row(token) + w.cond_pos.value().row(pos);
}

InferResult forward_incremental(const Matrix& emb, const KVCachePrimary& cache,
                                const TransformerWeights& w) {
  const ModelConfig& c = w.config;
  if (cache.depth != c.depth || cache.dim != c.dim) {
    throw std::runtime_error("forward_incremental: cache does not match model config");
  }
  const int dh = c.head_dim();
  const Real att_scale = 1.0 / std::sqrt(static_cast<Real>(dh));

  InferResult out;
  out.kv.k = Matrix(c.depth, c.dim);
  out.kv.v = Matrix(c.depth, c.dim);

  RowVec x = emb.row(0);
  for (int l = 0; l < c.depth; ++l) {
    const LayerWeights& lw = w.layers[l];
    const RowVec h = layer_norm_row(x, lw.ln1_gain, lw.ln1_bias);
    const RowVec q = h * lw.wq.value();
    const RowVec kk = h * lw.wk.value();
    const RowVec vv = h * lw.wv.value();
    out.kv.k.row(l) = kk;
    out.kv.v.row(l) = vv;

    const Matrix& kc = cache.k[l];
    const Matrix& vc = cache.v[l];
    const int prefix = cache.committed;
    RowVec ctx(c.dim);
    for (int hd = 0; hd < c.heads; ++hd) {
      const int off = hd * dh;
      // scores over [prefix rows, self], fixed order
      Eigen::VectorXd scores(prefix + 1);
      for (int j = 0; j < prefix; ++j) {
        scores(j) = q.segment(off, dh).dot(kc.row(j).segment(off, dh)) * att_scale;
      }
      scores(prefix) = q.segment(off, dh).dot(kk.segment(off, dh)) * att_scale;
      const Real m = scores.maxCoeff();
      Eigen::VectorXd p = (scores.array() - m).exp();
      p /= p.sum();
      RowVec acc = RowVec::Zero(dh);
      for (int j = 0; j < prefix; ++j) acc += p(j) * vc.row(j).segment(off, dh);
      acc += p(prefix) * vv.segment(off, dh);
      ctx.segment(off, dh) = acc;
    }
    x += ctx * lw.wo.value();

    const RowVec h2 = layer_norm_row(x, lw.ln2_gain, lw.ln2_bias);
    RowVec f = h2 * lw.ff_w1.value() + lw.ff_b1.value().row(0);
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = gelu_scalar(f(i));
    x += (f * lw.ff_w2.value() + lw.ff_b2.value().row(0)).eval();
  }
  const RowVec hf = layer_norm_row(x, w.lnf_gain, w.lnf_bias);
  out.logits = hf * w.head.value();
  return out;
}

InferResult forward_incremental(const StepInput& step, const KVCachePrimary& cache,
                                const TransformerWeights& w) {
  return forward_incremental(embed_step_value(step, w), cache, w);
}

void prefill_condition(const std::vector<int>& condition, const TransformerWeights& w,
                       KVCachePrimary& cache) {
  if (static_cast<int>(condition.size()) != w.config.cond_len) {
    throw std::invalid_argument("prefill_condition: condition length mismatch");
  }
  for (std::size_t i = 0; i < condition.size(); ++i) {
    const Matrix e = embed_condition_value(condition[i], static_cast<int>(i), w);
    cache.append(forward_incremental(e, cache, w).kv);
  }
}

}  // namespace oar
