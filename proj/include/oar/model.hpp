#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oar/grid.hpp"
#include "oar/tensor.hpp"

namespace oar {

struct ModelConfig {
  int dim = 128;        // embedding width D (even: absolute/relative halves)
  int depth = 4;
  int heads = 4;
  Real dropout = 0.2;
  int vocab = 64;       // codebook size V
  int cond_vocab = 16;  // condition token vocabulary
  int cond_len = 4;     // condition tokens per sample
  GridShape grid{8, 8};
  Real img_loss_weight = 7.0;

  int head_dim() const { return dim / heads; }
  int patches() const { return grid.size(); }
  int start_token() const { return vocab; }  // extra row in the token table

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// One generation step: the token just placed, where it sits, and where the
/// next token will go. `prev` is empty only for the start step.
struct StepInput {
  int token = 0;  // codebook index, or start token
  std::optional<Position> prev;
  Position next;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct TransformerWeights {
  ModelConfig config;

  Tensor tok_emb;    // (V+1) x D, last row = start token
  Tensor cond_emb;   // V_c x D
  Tensor cond_pos;   // T_c x D, learned positions for condition tokens
  // Axial position tables; absolute and relative sets are disjoint parameters.
  Tensor abs_row;    // S_h x D/2
  Tensor abs_col;    // S_w x D/2
  Tensor rel_row;    // 2*S_h x D/2, row 0 = start offset
  Tensor rel_col;    // 2*S_w x D/2, row 0 = start offset
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor head;       // D x V, zero-initialized

  /// All trainable tensors in the fixed checkpoint order.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

TransformerWeights init_weights(const ModelConfig& config, SeededStream stream,
                                Real init_std = 0.02);

/// Token embedding plus [absolute(prev) || relative(prev -> next)], each half
/// the sum of its row and column axial vectors. The absolute half is zero at
/// the start step.
Tensor embed_step(Tape& tape, const StepInput& step, const TransformerWeights& w);

enum class ForwardMode { train, eval };

/// Teacher-forced causal forward over [condition || steps]. Row j of the
/// result depends only on rows <= j; the row carrying next-position l
/// predicts the token at l. Returns logits (cond_len + steps.size()) x V.
Tensor forward_sequence(Tape& tape, const std::vector<int>& condition,
                        const std::vector<StepInput>& steps,
                        const TransformerWeights& w, ForwardMode mode,
                        SeededStream* dropout_stream = nullptr);

// ---- checkpoint io (binary, little-endian, magic "OARCKPT1") ----

void save_weights(const std::string& path, const TransformerWeights& w);
TransformerWeights load_weights(const std::string& path);

void write_weights(std::ostream& out, const TransformerWeights& w);
TransformerWeights read_weights(std::istream& in);

}  // namespace oar
