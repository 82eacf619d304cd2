#include "oar/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace oar {

void ModelConfig::validate() const {
  grid.validate();
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("ModelConfig: dim must be even");
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("ModelConfig: heads must divide dim");
  if (depth < 1) throw std::invalid_argument("ModelConfig: depth must be >= 1");
  if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab must be >= 2");
  if (cond_vocab < 1 || cond_len < 1)
    throw std::invalid_argument("ModelConfig: condition vocab/length must be >= 1");
  if (dropout < 0 || dropout >= 1)
    throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
  if (img_loss_weight <= 0)
    throw std::invalid_argument("ModelConfig: img_loss_weight must be > 0");
}

std::vector<Tensor> TransformerWeights::parameters() const {
  std::vector<Tensor> p{tok_emb, cond_emb, cond_pos, abs_row, abs_col, rel_row, rel_col};
  for (const LayerWeights& l : layers) {
    p.insert(p.end(), {l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo,
                       l.ln2_gain, l.ln2_bias, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2});
  }
  p.insert(p.end(), {lnf_gain, lnf_bias, head});
  return p;
}

std::size_t TransformerWeights::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += static_cast<std::size_t>(t.value().size());
  return n;
}

namespace {

Tensor gaussian(SeededStream& s, Eigen::Index r, Eigen::Index c, Real std) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = std * s.next_gaussian();
  return Tensor(std::move(m), true);
}

Tensor ones_row(Eigen::Index c) { return Tensor(Matrix::Ones(1, c), true); }
Tensor zeros_param(Eigen::Index r, Eigen::Index c) {
  return Tensor(Matrix::Zero(r, c), true);
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& config, SeededStream stream,
                                Real init_std) {
  config.validate();
  TransformerWeights w;
  w.config = config;
  const int d = config.dim;
  const int half = d / 2;
  const int ffd = 4 * d;
  w.tok_emb = gaussian(stream, config.vocab + 1, d, init_std);
  w.cond_emb = gaussian(stream, config.cond_vocab, d, init_std);
  w.cond_pos = gaussian(stream, config.cond_len, d, init_std);
  w.abs_row = gaussian(stream, config.grid.rows, half, init_std);
  w.abs_col = gaussian(stream, config.grid.cols, half, init_std);
  w.rel_row = gaussian(stream, 2 * config.grid.rows, half, init_std);
  w.rel_col = gaussian(stream, 2 * config.grid.cols, half, init_std);
  w.layers.resize(config.depth);
  for (LayerWeights& l : w.layers) {
    l.ln1_gain = ones_row(d);
    l.ln1_bias = zeros_param(1, d);
    l.wq = gaussian(stream, d, d, init_std);
    l.wk = gaussian(stream, d, d, init_std);
    l.wv = gaussian(stream, d, d, init_std);
    l.wo = gaussian(stream, d, d, init_std);
    l.ln2_gain = ones_row(d);
    l.ln2_bias = zeros_param(1, d);
    l.ff_w1 = gaussian(stream, d, ffd, init_std);
    l.ff_b1 = zeros_param(1, ffd);
    l.ff_w2 = gaussian(stream, ffd, d, init_std);
    l.ff_b2 = zeros_param(1, d);
  }
  w.lnf_gain = ones_row(d);
  w.lnf_bias = zeros_param(1, d);
  w.head = zeros_param(d, config.vocab);
  return w;
}

namespace {

/// Positional addend [absolute(prev) || relative(prev -> next)] for a list of
/// steps, as one (n x D) tensor. The absolute half is masked to zero on start
/// rows (no previous position exists there).
Tensor positional_block(Tape& tape, const std::vector<StepInput>& steps,
                        const TransformerWeights& w) {
  const GridShape& g = w.config.grid;
  const std::size_t n = steps.size();
  std::vector<int> ar(n), ac(n), rr(n), rc(n);
  Matrix abs_mask(static_cast<Eigen::Index>(n), w.config.dim / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const StepInput& s = steps[i];
    const Position* prev = s.prev ? &*s.prev : nullptr;
    const RelativeIndex rel = relative_index(prev, s.next, g);
    rr[i] = rel.row;
    rc[i] = rel.col;
    if (prev) {
      if (!prev->on_grid(g))
        throw std::invalid_argument("positional_block: previous position off grid");
      ar[i] = prev->row;
      ac[i] = prev->col;
      abs_mask.row(static_cast<Eigen::Index>(i)).setOnes();
    } else {
      ar[i] = 0;
      ac[i] = 0;
      abs_mask.row(static_cast<Eigen::Index>(i)).setZero();
    }
  }
  Tensor abs_half = add(tape, embedding_rows(tape, w.abs_row, ar),
                        embedding_rows(tape, w.abs_col, ac));
  abs_half = mul(tape, abs_half, Tensor(abs_mask));
  Tensor rel_half = add(tape, embedding_rows(tape, w.rel_row, rr),
                        embedding_rows(tape, w.rel_col, rc));
  return concat_cols(tape, abs_half, rel_half);
}

Tensor transformer_blocks(Tape& tape, Tensor x, const TransformerWeights& w,
                          ForwardMode mode, SeededStream* dropout_stream) {
  const bool training = mode == ForwardMode::train;
  if (training && w.config.dropout > 0 && dropout_stream == nullptr) {
    throw std::invalid_argument("forward: training with dropout needs a stream");
  }
  const int dh = w.config.head_dim();
  const Real att_scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  SeededStream dummy(0, 0);
  SeededStream& ds = dropout_stream ? *dropout_stream : dummy;
  for (const LayerWeights& l : w.layers) {
    Tensor h = layer_norm(tape, x, l.ln1_gain, l.ln1_bias);
    Tensor q = matmul(tape, h, l.wq);
    Tensor k = matmul(tape, h, l.wk);
    Tensor v = matmul(tape, h, l.wv);
    Tensor ctx;
    for (int hd = 0; hd < w.config.heads; ++hd) {
      Tensor qh = cols(tape, q, hd * dh, dh);
      Tensor kh = cols(tape, k, hd * dh, dh);
      Tensor vh = cols(tape, v, hd * dh, dh);
      Tensor scores = scale(tape, matmul_bt(tape, qh, kh), att_scale);
      Tensor probs = softmax_last(tape, add_causal_mask(tape, scores));
      Tensor ch = matmul(tape, probs, vh);
      ctx = hd == 0 ? ch : concat_cols(tape, ctx, ch);
    }
    Tensor att = matmul(tape, ctx, l.wo);
    att = dropout(tape, att, w.config.dropout, ds, training);
    x = add(tape, x, att);
    Tensor h2 = layer_norm(tape, x, l.ln2_gain, l.ln2_bias);
    Tensor f = add_rowvec(tape, matmul(tape, h2, l.ff_w1), l.ff_b1);
    f = gelu(tape, f);
    f = add_rowvec(tape, matmul(tape, f, l.ff_w2), l.ff_b2);
    f = dropout(tape, f, w.config.dropout, ds, training);
    x = add(tape, x, f);
  }
  return layer_norm(tape, x, w.lnf_gain, w.lnf_bias);
}

}  // namespace

Tensor embed_step(Tape& tape, const StepInput& step, const TransformerWeights& w) {
  Tensor tok = embedding_rows(tape, w.tok_emb, {step.token});
  return add(tape, tok, positional_block(tape, {step}, w));
}

Tensor forward_sequence(Tape& tape, const std::vector<int>& condition,
                        const std::vector<StepInput>& steps,
                        const TransformerWeights& w, ForwardMode mode,
                        SeededStream* dropout_stream) {
  if (static_cast<int>(condition.size()) != w.config.cond_len) {
    throw std::invalid_argument("forward_sequence: condition length mismatch");
  }
  std::set<int> seen;
  for (const StepInput& s : steps) {
    if (!seen.insert(s.next.linear(w.config.grid)).second) {
      throw std::invalid_argument("forward_sequence: duplicate next position in order");
    }
  }
  Tensor cond_block = add(tape, embedding_rows(tape, w.cond_emb, condition),
                          rows(tape, w.cond_pos, 0, w.config.cond_len));
  Tensor x = cond_block;
  if (!steps.empty()) {
    std::vector<int> tokens(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) tokens[i] = steps[i].token;
    Tensor step_block = add(tape, embedding_rows(tape, w.tok_emb, tokens),
                            positional_block(tape, steps, w));
    x = concat_rows(tape, cond_block, step_block);
  }
  Tensor h = transformer_blocks(tape, x, w, mode, dropout_stream);
  return matmul(tape, h, w.head);
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[8] = {'O', 'A', 'R', 'C', 'K', 'P', 'T', '1'};

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void write_weights(std::ostream& out, const TransformerWeights& w) {
  out.write(kMagic, sizeof(kMagic));
  const ModelConfig& c = w.config;
  for (std::int32_t v : {c.grid.rows, c.grid.cols, c.vocab, c.cond_vocab, c.cond_len,
                         c.dim, c.depth, c.heads}) {
    write_pod(out, v);
  }
  write_pod(out, c.dropout);
  write_pod(out, c.img_loss_weight);
  const auto params = w.parameters();
  write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const Tensor& p : params) {
    write_pod(out, static_cast<std::uint32_t>(p.rows()));
    write_pod(out, static_cast<std::uint32_t>(p.cols()));
    out.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(sizeof(Real) * p.value().size()));
  }
}

TransformerWeights read_weights(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  ModelConfig c;
  c.grid.rows = read_pod<std::int32_t>(in);
  c.grid.cols = read_pod<std::int32_t>(in);
  c.vocab = read_pod<std::int32_t>(in);
  c.cond_vocab = read_pod<std::int32_t>(in);
  c.cond_len = read_pod<std::int32_t>(in);
  c.dim = read_pod<std::int32_t>(in);
  c.depth = read_pod<std::int32_t>(in);
  c.heads = read_pod<std::int32_t>(in);
  c.dropout = read_pod<Real>(in);
  c.img_loss_weight = read_pod<Real>(in);
  c.validate();
  TransformerWeights w = init_weights(c, SeededStream(0, 0));
  auto params = w.parameters();
  const auto n = read_pod<std::uint32_t>(in);
  if (n != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (Tensor& p : params) {
    const auto r = read_pod<std::uint32_t>(in);
    const auto cc = read_pod<std::uint32_t>(in);
    if (static_cast<Eigen::Index>(r) != p.rows() || static_cast<Eigen::Index>(cc) != p.cols()) {
      throw std::runtime_error("checkpoint: parameter shape mismatch");
    }
    in.read(reinterpret_cast<char*>(p.value().data()),
            static_cast<std::streamsize>(sizeof(Real) * p.value().size()));
    if (!in) throw std::runtime_error("checkpoint: truncated parameter data");
  }
  return w;
}

void save_weights(const std::string& path, const TransformerWeights& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_weights(out, w);
}

TransformerWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_weights(in);
}

}  // namespace oar
