#pragma once

#include <vector>

#include "oar/model.hpp"

namespace oar {

/// Per-layer key/value rows for a single sequence element.
struct TokenKV {
  Matrix k;  // depth x D
  Matrix v;  // depth x D
};

/// Committed per-layer K/V state. Append-only; one row per sequence element
/// (condition prefix plus promoted generation steps).
struct KVCachePrimary {
  explicit KVCachePrimary(const ModelConfig& config);

  int depth;
  int dim;
  std::vector<Matrix> k;  // per layer; rows beyond `committed` are capacity
  std::vector<Matrix> v;
  int committed = 0;

  void reserve(int rows);
  void append(const TokenKV& kv);
};

struct InferResult {
  Eigen::Matrix<Real, 1, Eigen::Dynamic> logits;  // 1 x V
  TokenKV kv;
};

/// Embedding of one generation step, identical math to the training path but
/// without gradient tracking. Used by every decoding regime so that results
/// are bit-identical across them.
Matrix embed_step_value(const StepInput& step, const TransformerWeights& w);

/// Embedding of condition token `token` at condition slot `pos`.
Matrix embed_condition_value(int token, int pos, const TransformerWeights& w);

/// One token through the transformer against the committed prefix. Returns
/// the next-token logits and this element's K/V rows; does not mutate the
/// cache. All reductions run in fixed index order, so the same (embedding,
/// prefix) pair always produces bitwise identical results.
InferResult forward_incremental(const Matrix& emb, const KVCachePrimary& cache,
                                const TransformerWeights& w);

/// Convenience overload taking a StepInput directly.
InferResult forward_incremental(const StepInput& step, const KVCachePrimary& cache,
                                const TransformerWeights& w);

/// Runs the condition tokens through the model, committing their K/V rows.
void prefill_condition(const std::vector<int>& condition, const TransformerWeights& w,
                       KVCachePrimary& cache);

}  // namespace oar
