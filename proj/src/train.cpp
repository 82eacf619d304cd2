#include "oar/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace oar {

namespace {

// substream channels under the training seed
constexpr std::uint64_t kOrderChannel = 0x04De4;
constexpr std::uint64_t kShuffleChannel = 0x5481F;
constexpr std::uint64_t kDropChannel = 0xD409;
constexpr std::uint64_t kValChannel = 0x7A1;

std::vector<StepInput> order_to_steps(const Sample& sample, const Order& order,
                                      const GridShape& grid) {
  const int n = static_cast<int>(order.size());
  std::vector<StepInput> steps(n);
  steps[0] = StepInput{-1 /* set by caller */, std::nullopt,
                       Position::from_linear(order[0], grid)};
  for (int i = 1; i < n; ++i) {
    steps[i] = StepInput{sample.grid[order[i - 1]],
                         Position::from_linear(order[i - 1], grid),
                         Position::from_linear(order[i], grid)};
  }
  return steps;
}

}  // namespace

void write_train_log_csv(std::ostream& out, const TrainLog& log) {
  out << "epoch,train_loss,val_loss,lr,mean_order_distance,seconds\n";
  char buf[256];
  for (const EpochLog& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", e.epoch,
                  e.train_loss, e.val_loss, e.lr, e.mean_order_distance, e.seconds);
    out << buf;
  }
}

Tensor permuted_loss(Tape& tape, const std::vector<const Sample*>& batch,
                     const std::vector<Order>& orders, const TransformerWeights& w,
                     ForwardMode mode, std::vector<SeededStream>* dropout_streams,
                     LossBreakdown* breakdown) {
  if (batch.empty()) throw std::invalid_argument("permuted_loss: empty batch");
  if (orders.size() != batch.size()) {
    throw std::invalid_argument("permuted_loss: one order per sample required");
  }
  const ModelConfig& c = w.config;
  const int n = c.patches();
  const int tc = c.cond_len;
  if (c.cond_vocab > c.vocab) {
    throw std::invalid_argument("permuted_loss: condition vocab exceeds codebook");
  }
  Tensor total;
  Real img_nll_sum = 0, cond_nll_sum = 0;
  std::int64_t img_terms = 0, cond_terms = 0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const Sample& s = *batch[bi];
    const Order& order = orders[bi];
    if (!is_permutation_order(order, n)) {
      throw std::invalid_argument("permuted_loss: invalid order");
    }
    std::vector<StepInput> steps = order_to_steps(s, order, c.grid);
    steps[0].token = c.start_token();
    SeededStream* ds = dropout_streams ? &(*dropout_streams)[bi] : nullptr;
    Tensor logits = forward_sequence(tape, s.condition, steps, w, mode, ds);

    // row j < tc-1 predicts the next condition token; the step rows predict
    // the image token at their next-position input
    std::vector<int> targets;
    std::vector<Real> weights;
    Tensor used;
    if (tc > 1) {
      used = rows(tape, logits, 0, tc - 1);
      for (int j = 0; j + 1 < tc; ++j) {
        targets.push_back(s.condition[j + 1]);
        weights.push_back(1.0);
      }
      used = concat_rows(tape, used, rows(tape, logits, tc, n));
    } else {
      used = rows(tape, logits, tc, n);
    }
    for (int i = 0; i < n; ++i) {
      targets.push_back(s.grid[order[i]]);
      weights.push_back(c.img_loss_weight);
    }
    Tensor loss = cross_entropy_logits(tape, used, targets, weights);
    total = bi == 0 ? loss : add(tape, total, loss);

    if (breakdown) {
      const Matrix& lv = used.value();
      const std::size_t cond_rows = targets.size() - static_cast<std::size_t>(n);
      for (std::size_t r = 0; r < targets.size(); ++r) {
        const auto row = lv.row(static_cast<Eigen::Index>(r));
        const Real m = row.maxCoeff();
        const Real lse = std::log((row.array() - m).exp().sum()) + m;
        const Real nll = lse - row(targets[r]);
        if (r < cond_rows) {
          cond_nll_sum += nll;
          ++cond_terms;
        } else {
          img_nll_sum += nll;
          ++img_terms;
        }
      }
    }
  }
  if (breakdown) {
    breakdown->image_nll = img_terms ? img_nll_sum / img_terms : 0;
    breakdown->cond_nll = cond_terms ? cond_nll_sum / cond_terms : 0;
  }
  return scale(tape, total, 1.0 / static_cast<Real>(batch.size()));
}

Real reduce_lr_on_plateau(PlateauState& state, Real val_loss, Real factor, int patience,
                          Real min_delta) {
  if (factor <= 0 || factor >= 1) throw std::invalid_argument("plateau: factor in (0,1)");
  if (patience < 1) throw std::invalid_argument("plateau: patience >= 1");
  if (val_loss < state.best - min_delta) {
    state.best = val_loss;
    state.since_improve = 0;
  } else if (state.cooldown > 0) {
    --state.cooldown;
    state.since_improve = 0;
  } else if (++state.since_improve >= patience) {
    state.lr *= factor;
    state.since_improve = 0;
    state.cooldown = 1;
  }
  return state.lr;
}

namespace {

Real evaluate_loss(const Dataset& set, const TransformerWeights& w,
                   const std::vector<Order>& orders) {
  if (set.samples.empty()) return 0;
  Real total = 0;
  Tape tape;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    std::vector<const Sample*> one{&set.samples[i]};
    std::vector<Order> o{orders[i]};
    total += permuted_loss(tape, one, o, w, ForwardMode::eval, nullptr).item();
    tape.clear();
  }
  return total / static_cast<Real>(set.samples.size());
}

std::vector<Order> orders_for(const Dataset& set, OrderPolicy policy, SeededStream base,
                              int n) {
  std::vector<Order> orders(set.samples.size());
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    switch (policy) {
      case OrderPolicy::raster: {
        orders[i].resize(n);
        std::iota(orders[i].begin(), orders[i].end(), 0);
        break;
      }
      case OrderPolicy::random: {
        SeededStream s = base.derive(i);
        orders[i] = sample_uniform_order(n, s);
        break;
      }
      case OrderPolicy::labeled: {
        if (!set.samples[i].order_label) {
          throw std::invalid_argument("train: labeled policy but sample " +
                                      std::to_string(i) + " has no order label");
        }
        orders[i] = *set.samples[i].order_label;
        break;
      }
    }
  }
  return orders;
}

}  // namespace

TrainLog train_model(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                     const Dataset& train_set, const Dataset& val_set,
                     const TrainConfig& cfg, int start_epoch) {
  if (train_set.samples.empty()) throw std::invalid_argument("train: empty training set");
  const int n = w.config.patches();
  SeededStream base(cfg.seed, 0x7EA17);
  TrainLog log;

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.config().lr = plateau.lr;
    opt.config().weight_decay = cfg.weight_decay;

    const std::vector<Order> orders =
        orders_for(train_set, cfg.policy, base.derive(kOrderChannel, epoch), n);
    std::vector<int> idx(train_set.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    SeededStream shuffle_stream = base.derive(kShuffleChannel, epoch);
    shuffle_stream.shuffle(idx);

    Real loss_sum = 0;
    std::int64_t loss_terms = 0;
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch) {
      const std::size_t end = std::min(idx.size(), b + cfg.batch);
      std::vector<const Sample*> batch;
      std::vector<Order> batch_orders;
      std::vector<SeededStream> drops;
      for (std::size_t i = b; i < end; ++i) {
        batch.push_back(&train_set.samples[idx[i]]);
        batch_orders.push_back(orders[idx[i]]);
        drops.push_back(base.derive(kDropChannel, epoch).derive(idx[i]));
      }
      Tape tape;
      opt.zero_grad();
      Tensor loss = permuted_loss(tape, batch, batch_orders, w, ForwardMode::train,
                                  w.config.dropout > 0 ? &drops : nullptr);
      const Real lv = loss.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch + 1) + ", batch " +
                                 std::to_string(b / cfg.batch));
      }
      loss_sum += lv * static_cast<Real>(batch.size());
      loss_terms += static_cast<std::int64_t>(batch.size());
      tape.backward(loss);
      opt.step();
    }

    const std::vector<Order> val_orders =
        orders_for(val_set, cfg.policy == OrderPolicy::labeled ? OrderPolicy::labeled
                                                               : cfg.policy,
                   base.derive(kValChannel, epoch), n);
    const Real val_loss = evaluate_loss(val_set, w, val_orders);

    Real dist_sum = 0;
    for (const Order& o : orders) dist_sum += average_order_distance(o, w.config.grid);

    EpochLog e;
    e.epoch = epoch + 1;
    e.train_loss = loss_sum / static_cast<Real>(loss_terms);
    e.val_loss = val_loss;
    e.mean_order_distance = dist_sum / static_cast<Real>(orders.size());
    e.lr = plateau.lr;
    e.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(e);

    reduce_lr_on_plateau(plateau, val_loss, cfg.plateau_factor, cfg.plateau_patience,
                         cfg.plateau_min_delta);
  }
  return log;
}

TrainLog train_any_order(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                         const Dataset& train_set, const Dataset& val_set,
                         TrainConfig cfg) {
  return train_model(w, opt, plateau, train_set, val_set, cfg);
}

TrainLog finetune_ordered(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                          const Dataset& train_set, const Dataset& val_set,
                          TrainConfig cfg) {
  for (std::size_t i = 0; i < train_set.samples.size(); ++i) {
    if (!train_set.samples[i].order_label) {
      throw std::invalid_argument("finetune_ordered: sample " + std::to_string(i) +
                                  " has no order label");
    }
  }
  cfg.policy = OrderPolicy::labeled;
  return train_model(w, opt, plateau, train_set, val_set, cfg);
}

Order extract_order(const Sample& sample, const TransformerWeights& w,
                    const DecodePolicy& policy) {
  const ModelConfig& c = w.config;
  const int n = c.patches();
  KVCachePrimary primary(c);
  primary.reserve(c.cond_len + n);
  prefill_condition(sample.condition, w, primary);
  std::vector<bool> filled(n, false);
  Order order;
  order.reserve(n);
  for (int step = 1; step <= n; ++step) {
    int last_token = c.start_token();
    std::optional<Position> prev;
    if (!order.empty()) {
      last_token = sample.grid[order.back()];
      prev = Position::from_linear(order.back(), c.grid);
    }
    int best_loc = -1;
    Real best_score = 0;
    TokenKV best_kv;
    for (int loc = 0; loc < n; ++loc) {
      if (filled[loc]) continue;
      const Position pos = Position::from_linear(loc, c.grid);
      InferResult r = forward_incremental(StepInput{last_token, prev, pos}, primary, w);
      const auto row = r.logits;
      const Real m = row.maxCoeff();
      const Real lse = std::log((row.array() - m).exp().sum()) + m;
      const Real logp = row(sample.grid[loc]) - lse;
      const int d = prev ? linf_distance(*prev, pos) : 0;
      const Real dn = policy.normalize_distance
                          ? static_cast<Real>(d) / std::max(c.grid.rows, c.grid.cols)
                          : static_cast<Real>(d);
      const Real lik = policy.domain == ScoreDomain::log_prob ? logp : std::exp(logp);
      const Real score = lik - policy.lambda * dn;
      if (best_loc < 0 || score > best_score) {
        best_loc = loc;
        best_score = score;
        best_kv = r.kv;
      }
    }
    primary.append(best_kv);
    filled[best_loc] = true;
    order.push_back(best_loc);
  }
  return order;
}

std::vector<Order> extract_orders(const Dataset& dataset, const TransformerWeights& w,
                                  const DecodePolicy& policy) {
  std::vector<Order> orders;
  orders.reserve(dataset.samples.size());
  for (const Sample& s : dataset.samples) {
    orders.push_back(extract_order(s, w, policy));
  }
  return orders;
}

// ---- train checkpoints ----

namespace {

constexpr char kTrailerMagic[8] = {'O', 'A', 'R', 'T', 'R', 'N', '1', '\0'};

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated trailer");
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_pod(out, static_cast<std::uint32_t>(m.rows()));
  write_pod(out, static_cast<std::uint32_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(Real) * m.size()));
}

Matrix read_matrix(std::istream& in) {
  const auto r = read_pod<std::uint32_t>(in);
  const auto c = read_pod<std::uint32_t>(in);
  Matrix m(r, c);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(Real) * m.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated matrix");
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerWeights& w,
                     const AdamW& opt, int epoch, const PlateauState& plateau,
                     std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_weights(out, w);
  out.write(kTrailerMagic, sizeof(kTrailerMagic));
  write_pod(out, static_cast<std::int32_t>(epoch));
  write_pod(out, seed);
  write_pod(out, opt.t());
  const AdamWConfig& oc = opt.config();
  for (Real v : {oc.lr, oc.beta1, oc.beta2, oc.eps, oc.weight_decay}) write_pod(out, v);
  for (Real v : {plateau.lr, plateau.best}) write_pod(out, v);
  write_pod(out, static_cast<std::int32_t>(plateau.since_improve));
  write_pod(out, static_cast<std::int32_t>(plateau.cooldown));
  auto& mm = const_cast<AdamW&>(opt).moment1();
  auto& vv = const_cast<AdamW&>(opt).moment2();
  write_pod(out, static_cast<std::uint32_t>(mm.size()));
  for (std::size_t i = 0; i < mm.size(); ++i) {
    write_matrix(out, mm[i]);
    write_matrix(out, vv[i]);
  }
}

TrainCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  TrainCheckpoint ck;
  ck.weights = read_weights(in);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTrailerMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: missing training trailer");
  }
  ck.epoch = read_pod<std::int32_t>(in);
  ck.seed = read_pod<std::uint64_t>(in);
  ck.t = read_pod<std::int64_t>(in);
  ck.opt_config.lr = read_pod<Real>(in);
  ck.opt_config.beta1 = read_pod<Real>(in);
  ck.opt_config.beta2 = read_pod<Real>(in);
  ck.opt_config.eps = read_pod<Real>(in);
  ck.opt_config.weight_decay = read_pod<Real>(in);
  ck.plateau.lr = read_pod<Real>(in);
  ck.plateau.best = read_pod<Real>(in);
  ck.plateau.since_improve = read_pod<std::int32_t>(in);
  ck.plateau.cooldown = read_pod<std::int32_t>(in);
  const auto count = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    ck.m.push_back(read_matrix(in));
    ck.v.push_back(read_matrix(in));
  }
  return ck;
}

}  // namespace oar
