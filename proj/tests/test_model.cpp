#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <sstream>

#include "doctest.h"
#include "oar/infer.hpp"
#include "oar/model.hpp"

using namespace oar;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.vocab = 10;
  cfg.cond_vocab = 4;
  cfg.cond_len = 3;
  cfg.grid = GridShape{3, 4};
  cfg.dropout = 0.0;
  return cfg;
}

using Order = std::vector<int>;

// the output head starts at zero by design; logit-sensitivity tests need it live
void randomize_head(TransformerWeights& w, std::uint64_t seed) {
  SeededStream s(seed, 0xF00D);
  Matrix& h = w.head.value();
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    for (Eigen::Index j = 0; j < h.cols(); ++j) h(i, j) = 0.05 * s.next_gaussian();
}

std::vector<StepInput> steps_for_order(const std::vector<int>& grid_tokens,
                                       const Order& order, const ModelConfig& cfg) {
  std::vector<StepInput> steps(order.size());
  steps[0] = {cfg.start_token(), std::nullopt, Position::from_linear(order[0], cfg.grid)};
  for (std::size_t i = 1; i < order.size(); ++i) {
    steps[i] = {grid_tokens[order[i - 1]], Position::from_linear(order[i - 1], cfg.grid),
                Position::from_linear(order[i], cfg.grid)};
  }
  return steps;
}

}  // namespace

TEST_CASE("relative_index per-axis formula") {
  GridShape wide{16, 16};
  Position prev{2, 5}, next{2, 6};
  RelativeIndex r = relative_index(&prev, next, wide);
  CHECK(r.col == 17);  // 16 + 1
  CHECK(r.row == 16);  // zero row offset

  GridShape g{3, 4};
  Position p{1, 2};
  RelativeIndex same = relative_index(&p, p, g);
  CHECK(same.row == 3);
  CHECK(same.col == 4);

  Position origin{0, 0}, corner{2, 3};
  RelativeIndex max = relative_index(&origin, corner, g);
  CHECK(max.row == 2 * 3 - 1);
  CHECK(max.col == 2 * 4 - 1);

  RelativeIndex start = relative_index(nullptr, origin, g);
  CHECK(start.row == 0);
  CHECK(start.col == 0);
}

TEST_CASE("relative_index rejects off-grid positions") {
  GridShape g{3, 4};
  Position prev{0, 0};
  CHECK_THROWS_AS(relative_index(&prev, Position{3, 0}, g), std::invalid_argument);
  CHECK_THROWS_AS(relative_index(&prev, Position{0, 4}, g), std::invalid_argument);
}

TEST_CASE("relative lookups over random orders stay in [1, 2S-1]") {
  GridShape g{5, 7};
  SeededStream s(1, 0);
  for (int trial = 0; trial < 200; ++trial) {
    Position a{static_cast<int>(s.next_below(5)), static_cast<int>(s.next_below(7))};
    Position b{static_cast<int>(s.next_below(5)), static_cast<int>(s.next_below(7))};
    RelativeIndex r = relative_index(&a, b, g);
    CHECK(r.row >= 1);
    CHECK(r.row <= 2 * 5 - 1);
    CHECK(r.col >= 1);
    CHECK(r.col <= 2 * 7 - 1);
  }
}

TEST_CASE("embed_step equals hand-assembled sum and concat") {
  ModelConfig cfg = tiny_config();
  cfg.grid = GridShape{2, 2};
  TransformerWeights w = init_weights(cfg, SeededStream(3, 0));
  const int half = cfg.dim / 2;

  StepInput step{5, Position{0, 1}, Position{1, 0}};
  Tape tape;
  Matrix got = embed_step(tape, step, w).value();

  RelativeIndex rel = relative_index(&*step.prev, step.next, cfg.grid);
  Matrix want = w.tok_emb.value().row(5);
  want.leftCols(half) +=
      w.abs_row.value().row(step.prev->row) + w.abs_col.value().row(step.prev->col);
  want.rightCols(half) += w.rel_row.value().row(rel.row) + w.rel_col.value().row(rel.col);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("start step uses the start-offset rows and no absolute half") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(4, 0));
  const int half = cfg.dim / 2;
  StepInput start{cfg.start_token(), std::nullopt, Position{1, 2}};
  Tape tape;
  Matrix got = embed_step(tape, start, w).value();
  Matrix want = w.tok_emb.value().row(cfg.start_token());
  want.rightCols(half) += w.rel_row.value().row(0) + w.rel_col.value().row(0);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("changing only the next position changes only the relative half") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(5, 0));
  const int half = cfg.dim / 2;
  Tape tape;
  StepInput a{2, Position{1, 1}, Position{0, 3}};
  StepInput b{2, Position{1, 1}, Position{2, 0}};
  Matrix ea = embed_step(tape, a, w).value();
  Matrix eb = embed_step(tape, b, w).value();
  CHECK(ea.leftCols(half) == eb.leftCols(half));
  CHECK(ea.rightCols(half) != eb.rightCols(half));
}

TEST_CASE("absolute and relative tables are independent parameters") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(6, 0));
  randomize_head(w, 61);
  std::vector<StepInput> steps = steps_for_order({1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2},
                                                 {3, 0, 7, 1, 2, 4, 5, 6, 8, 9, 10, 11},
                                                 cfg);
  Tape tape;
  Matrix base = forward_sequence(tape, {0, 1, 2}, steps, w, ForwardMode::eval).value();

  Matrix abs_saved = w.abs_row.value();
  w.abs_row.value().setZero();
  Matrix no_abs = forward_sequence(tape, {0, 1, 2}, steps, w, ForwardMode::eval).value();
  w.abs_row.value() = abs_saved;
  CHECK(base != no_abs);

  Matrix rel_saved = w.rel_row.value();
  w.rel_row.value().setZero();
  Matrix no_rel = forward_sequence(tape, {0, 1, 2}, steps, w, ForwardMode::eval).value();
  w.rel_row.value() = rel_saved;
  CHECK(base != no_rel);
}

TEST_CASE("forward_sequence shape and duplicate-position rejection") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(7, 0));
  std::vector<StepInput> one{{cfg.start_token(), std::nullopt, Position{0, 0}},
                             {4, Position{0, 0}, Position{0, 1}}};
  Tape tape;
  Tensor logits = forward_sequence(tape, {0, 1, 2}, one, w, ForwardMode::eval);
  CHECK(logits.rows() == cfg.cond_len + 2);
  CHECK(logits.cols() == cfg.vocab);

  std::vector<StepInput> dup{{cfg.start_token(), std::nullopt, Position{0, 0}},
                             {4, Position{0, 0}, Position{0, 0}}};
  CHECK_THROWS_AS(forward_sequence(tape, {0, 1, 2}, dup, w, ForwardMode::eval),
                  std::invalid_argument);
}

TEST_CASE("causality: rows before a perturbed index are bitwise unchanged") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(8, 0));
  randomize_head(w, 81);
  std::vector<int> grid{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8};
  Order order{5, 2, 8, 0, 1, 3, 4, 6, 7, 9, 10, 11};
  std::vector<StepInput> steps = steps_for_order(grid, order, cfg);
  Tape tape;
  Matrix base = forward_sequence(tape, {0, 1, 2}, steps, w, ForwardMode::eval).value();

  // perturb the token carried by step 6 (sequence row cond_len + 6)
  std::vector<StepInput> bumped = steps;
  bumped[6].token = (bumped[6].token + 1) % cfg.vocab;
  Matrix changed =
      forward_sequence(tape, {0, 1, 2}, bumped, w, ForwardMode::eval).value();
  const int j = cfg.cond_len + 6;
  for (int r = 0; r < j; ++r) CHECK(base.row(r) == changed.row(r));
  CHECK(base.row(j) != changed.row(j));
}

TEST_CASE("incremental decoding matches teacher-forced logits") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(9, 0));
  std::vector<int> cond{2, 0, 3};
  std::vector<int> grid{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8};
  Order order{7, 3, 0, 11, 5, 1, 2, 4, 6, 8, 9, 10};
  std::vector<StepInput> steps = steps_for_order(grid, order, cfg);

  Tape tape;
  Matrix batch = forward_sequence(tape, cond, steps, w, ForwardMode::eval).value();

  KVCachePrimary cache(cfg);
  prefill_condition(cond, w, cache);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    InferResult r = forward_incremental(steps[i], cache, w);
    const Eigen::Index row = cfg.cond_len + static_cast<Eigen::Index>(i);
    CHECK((r.logits - batch.row(row)).cwiseAbs().maxCoeff() < 1e-10);
    cache.append(r.kv);
  }
}

TEST_CASE("incremental condition prefill reproduces the first batch row") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(10, 0));
  std::vector<int> cond{1, 2, 3};
  std::vector<StepInput> steps{{cfg.start_token(), std::nullopt, Position{1, 1}}};
  Tape tape;
  Matrix batch = forward_sequence(tape, cond, steps, w, ForwardMode::eval).value();

  KVCachePrimary cache(cfg);
  prefill_condition(cond, w, cache);
  InferResult r = forward_incremental(steps[0], cache, w);
  CHECK((r.logits - batch.row(cfg.cond_len)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("same prefix, different next positions: same K/V for cached rows") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(11, 0));
  randomize_head(w, 111);
  KVCachePrimary cache(cfg);
  prefill_condition({0, 1, 2}, w, cache);
  InferResult start = forward_incremental(
      StepInput{cfg.start_token(), std::nullopt, Position{1, 1}}, cache, w);
  cache.append(start.kv);
  Matrix k_before = cache.k[0].topRows(cache.committed);
  InferResult a =
      forward_incremental(StepInput{4, Position{1, 1}, Position{0, 0}}, cache, w);
  InferResult b =
      forward_incremental(StepInput{4, Position{1, 1}, Position{2, 3}}, cache, w);
  CHECK(a.logits != b.logits);
  CHECK(cache.k[0].topRows(cache.committed) == k_before);
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = tiny_config();
  TransformerWeights w = init_weights(cfg, SeededStream(12, 0));
  std::stringstream buf;
  write_weights(buf, w);
  TransformerWeights r = read_weights(buf);
  CHECK(r.config == cfg);
  std::vector<Tensor> pa = w.parameters(), pb = r.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value() == pb[i].value());

  // and the serialized form itself is canonical
  std::stringstream buf2;
  write_weights(buf2, r);
  CHECK(buf.str() == buf2.str());
}

TEST_CASE("checkpoint rejects bad magic") {
  std::stringstream buf;
  buf << "NOTACKPT garbage";
  CHECK_THROWS(read_weights(buf));
}

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.dim = 15;  // odd: cannot split positional halves
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.heads = 3;  // does not divide dim
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.vocab = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("parameter count is a pure function of config") {
  ModelConfig cfg = tiny_config();
  TransformerWeights a = init_weights(cfg, SeededStream(1, 1));
  TransformerWeights b = init_weights(cfg, SeededStream(2, 2));
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.parameter_count() > 0);
}
