#include "oar/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace oar {

namespace {

using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

// substream channels under the generation stream
constexpr std::uint64_t kCandidateChannel = 1;
constexpr std::uint64_t kOrderChannel = 2;

RowVec log_softmax_row(const RowVec& logits) {
  const Real m = logits.maxCoeff();
  const Real lse = std::log((logits.array() - m).exp().sum()) + m;
  return (logits.array() - lse).matrix();
}

std::string format_real(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Real likelihood_term(Real logp, ScoreDomain domain) {
  return domain == ScoreDomain::log_prob ? logp : std::exp(logp);
}

Real distance_term(int d, const DecodePolicy& policy, const GridShape& grid) {
  const Real dn = static_cast<Real>(d);
  return policy.normalize_distance ? dn / std::max(grid.rows, grid.cols) : dn;
}

}  // namespace

bool is_permutation_order(const Order& order, int n) {
  if (static_cast<int>(order.size()) != n) return false;
  std::vector<bool> seen(n, false);
  for (int l : order) {
    if (l < 0 || l >= n || seen[l]) return false;
    seen[l] = true;
  }
  return true;
}

Order sample_uniform_order(int n, SeededStream& stream) {
  if (n < 1) throw std::invalid_argument("sample_uniform_order: n must be >= 1");
  Order order(n);
  std::iota(order.begin(), order.end(), 0);
  stream.shuffle(order);
  return order;
}

Real average_order_distance(const Order& order, const GridShape& grid) {
  if (order.size() < 2) {
    throw std::invalid_argument("average_order_distance: needs at least 2 positions");
  }
  Real total = 0;
  for (std::size_t i = 1; i < order.size(); ++i) {
    total += linf_distance(Position::from_linear(order[i - 1], grid),
                           Position::from_linear(order[i], grid));
  }
  return total / static_cast<Real>(order.size() - 1);
}

GumbelSample gumbel_topk_sample(const RowVec& logits, int k, SeededStream& stream) {
  const int v = static_cast<int>(logits.size());
  if (k < 1 || k > v) {
    throw std::invalid_argument("gumbel_topk_sample: k must be in [1, vocab]");
  }
  // one draw per vocabulary entry, always, to keep substreams aligned
  std::vector<Real> noise(v);
  for (int t = 0; t < v; ++t) noise[t] = stream.next_gumbel();

  std::vector<int> idx(v);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return logits(a) > logits(b); });
  int best = -1;
  Real best_score = 0;
  for (int r = 0; r < k; ++r) {
    const int t = idx[r];
    const Real s = logits(t) + noise[t];
    if (best < 0 || s > best_score || (s == best_score && t < best)) {
      best = t;
      best_score = s;
    }
  }
  const RowVec logp = log_softmax_row(logits);
  return GumbelSample{best, logp(best)};
}

void KVCacheSecondary::begin_step(int depth, int dim, int capacity) {
  if (static_cast<int>(k.size()) != depth || (capacity > 0 && k[0].rows() < capacity)) {
    k.assign(depth, Matrix(capacity, dim));
    v.assign(depth, Matrix(capacity, dim));
  }
  locations.clear();
  locations.reserve(capacity);
  count = 0;
  active = true;
}

void KVCacheSecondary::add(int location, const TokenKV& kv) {
  if (!active) throw std::runtime_error("KVCacheSecondary: add outside a step");
  if (count >= k[0].rows()) throw std::runtime_error("KVCacheSecondary: capacity exceeded");
  for (std::size_t l = 0; l < k.size(); ++l) {
    k[l].row(count) = kv.k.row(static_cast<Eigen::Index>(l));
    v[l].row(count) = kv.v.row(static_cast<Eigen::Index>(l));
  }
  locations.push_back(location);
  ++count;
}

int KVCacheSecondary::index_of(int location) const {
  for (int i = 0; i < count; ++i) {
    if (locations[i] == location) return i;
  }
  return -1;
}

void KVCacheSecondary::release() {
  locations.clear();
  count = 0;
  active = false;
}

std::vector<CandidateScore> candidate_batch_eval(
    const KVCachePrimary& primary, int last_token, const std::optional<Position>& prev,
    const std::vector<int>& candidates, const TransformerWeights& w,
    const DecodePolicy& policy, const SeededStream& gen_stream, int step_index,
    KVCacheSecondary& secondary, std::int64_t& forward_count) {
  if (candidates.empty()) {
    throw std::invalid_argument("candidate_batch_eval: empty candidate set");
  }
  {
    std::vector<int> sorted = candidates;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw std::invalid_argument("candidate_batch_eval: duplicate candidate location");
    }
  }
  if (!secondary.active) {
    throw std::runtime_error("candidate_batch_eval: secondary cache not started");
  }
  const int k = policy.effective_topk(w.config.vocab);
  std::vector<CandidateScore> scores;
  scores.reserve(candidates.size());
  for (int loc : candidates) {
    const Position pos = Position::from_linear(loc, w.config.grid);
    StepInput step{last_token, prev, pos};
    InferResult r = forward_incremental(step, primary, w);
    ++forward_count;
    secondary.add(loc, r.kv);
    SeededStream sub = gen_stream.derive(static_cast<std::uint64_t>(step_index),
                                         static_cast<std::uint64_t>(loc));
    const GumbelSample sample = gumbel_topk_sample(r.logits, k, sub);
    CandidateScore cs;
    cs.location = loc;
    cs.token = sample.token;
    cs.logp = sample.logp;
    cs.distance = prev ? linf_distance(*prev, pos) : 0;
    cs.combined = likelihood_term(cs.logp, policy.domain) -
                  policy.lambda * distance_term(cs.distance, policy, w.config.grid);
    scores.push_back(cs);
  }
  return scores;
}

CandidateScore select_location(const std::vector<CandidateScore>& scores, Real lambda,
                               const DecodePolicy& policy, const GridShape& grid) {
  if (scores.empty()) throw std::invalid_argument("select_location: empty score list");
  const CandidateScore* best = nullptr;
  Real best_score = 0;
  for (const CandidateScore& cs : scores) {
    const Real s = likelihood_term(cs.logp, policy.domain) -
                   lambda * distance_term(cs.distance, policy, grid);
    if (!best || s > best_score || (s == best_score && cs.location < best->location)) {
      best = &cs;
      best_score = s;
    }
  }
  CandidateScore chosen = *best;
  chosen.combined = best_score;
  return chosen;
}

CandidateScore joint_topk_select(const std::vector<int>& locations,
                                 const Matrix& all_logits, int k,
                                 const std::optional<Position>& prev, Real lambda,
                                 const DecodePolicy& policy, const GridShape& grid,
                                 const SeededStream& gen_stream, int step_index) {
  const int c = static_cast<int>(locations.size());
  const int v = static_cast<int>(all_logits.cols());
  if (c == 0 || all_logits.rows() != c) {
    throw std::invalid_argument("joint_topk_select: logits/location mismatch");
  }
  const int total = c * v;
  if (k < 1 || k > total) {
    throw std::invalid_argument("joint_topk_select: k must be in [1, pair count]");
  }
  // global top-k pairs by logit; ties resolved by (candidate, token) index
  std::vector<int> pair(total);
  std::iota(pair.begin(), pair.end(), 0);
  std::stable_sort(pair.begin(), pair.end(), [&](int a, int b) {
    return all_logits(a / v, a % v) > all_logits(b / v, b % v);
  });
  std::vector<std::vector<bool>> eligible(c, std::vector<bool>(v, false));
  for (int r = 0; r < k; ++r) eligible[pair[r] / v][pair[r] % v] = true;

  std::vector<CandidateScore> scores;
  for (int ci = 0; ci < c; ++ci) {
    SeededStream sub = gen_stream.derive(static_cast<std::uint64_t>(step_index),
                                         static_cast<std::uint64_t>(locations[ci]));
    std::vector<Real> noise(v);
    for (int t = 0; t < v; ++t) noise[t] = sub.next_gumbel();
    int best = -1;
    Real best_score = 0;
    for (int t = 0; t < v; ++t) {
      if (!eligible[ci][t]) continue;
      const Real s = all_logits(ci, t) + noise[t];
      if (best < 0 || s > best_score) {
        best = t;
        best_score = s;
      }
    }
    if (best < 0) continue;  // every token of this location was masked
    const RowVec logp = log_softmax_row(all_logits.row(ci));
    const Position pos = Position::from_linear(locations[ci], grid);
    CandidateScore cs;
    cs.location = locations[ci];
    cs.token = best;
    cs.logp = logp(best);
    cs.distance = prev ? linf_distance(*prev, pos) : 0;
    scores.push_back(cs);
  }
  return select_location(scores, lambda, policy, grid);
}

void promote_candidate(KVCacheSecondary& secondary, int location,
                       KVCachePrimary& primary) {
  const int idx = secondary.index_of(location);
  if (idx < 0) {
    throw std::runtime_error("promote_candidate: location " + std::to_string(location) +
                             " not in secondary cache");
  }
  TokenKV kv;
  kv.k = Matrix(primary.depth, primary.dim);
  kv.v = Matrix(primary.depth, primary.dim);
  for (int l = 0; l < primary.depth; ++l) {
    kv.k.row(l) = secondary.k[l].row(idx);
    kv.v.row(l) = secondary.v[l].row(idx);
  }
  primary.append(kv);
  secondary.release();
}

namespace {

KVCachePrimary build_prefix(const std::vector<int>& condition,
                            const std::vector<StepInput>& committed,
                            const TransformerWeights& w) {
  KVCachePrimary cache(w.config);
  cache.reserve(w.config.cond_len + static_cast<int>(committed.size()));
  prefill_condition(condition, w, cache);
  for (const StepInput& s : committed) {
    cache.append(forward_incremental(s, cache, w).kv);
  }
  return cache;
}

}  // namespace

GenerationRecord generate(const std::vector<int>& condition, const TransformerWeights& w,
                          const DecodePolicy& policy, const SeededStream& stream,
                          CacheRegime regime) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& c = w.config;
  const int n = c.patches();
  GenerationRecord rec;
  rec.grid = c.grid;
  rec.policy = policy;
  rec.seed = stream.seed();
  rec.tokens.assign(n, -1);

  Order forced;
  if (policy.mode == DecodeMode::raster) {
    forced.resize(n);
    std::iota(forced.begin(), forced.end(), 0);
  } else if (policy.mode == DecodeMode::random) {
    SeededStream order_stream = stream.derive(kOrderChannel);
    forced = sample_uniform_order(n, order_stream);
  }
  const SeededStream cand_stream = stream.derive(kCandidateChannel);

  std::vector<StepInput> committed;
  committed.reserve(n);
  KVCachePrimary primary(c);
  if (regime == CacheRegime::cached) {
    primary.reserve(c.cond_len + n);
    prefill_condition(condition, w, primary);
  }
  KVCacheSecondary secondary;
  std::vector<bool> filled(n, false);

  for (int step = 1; step <= n; ++step) {
    int last_token = c.start_token();
    std::optional<Position> prev;
    if (step > 1) {
      const int last_loc = rec.order.back();
      last_token = rec.tokens[last_loc];
      prev = Position::from_linear(last_loc, c.grid);
    }
    std::vector<int> candidates;
    if (!forced.empty()) {
      const int loc = forced[step - 1];
      if (filled[loc]) throw std::runtime_error("generate: forced order revisits a location");
      candidates = {loc};
    } else {
      for (int l = 0; l < n; ++l) {
        if (!filled[l]) candidates.push_back(l);
      }
    }

    KVCachePrimary rebuilt(c);
    const KVCachePrimary* prefix = &primary;
    if (regime == CacheRegime::parallel_nocache) {
      rebuilt = build_prefix(condition, committed, w);
      prefix = &rebuilt;
    }

    secondary.begin_step(c.depth, c.dim, static_cast<int>(candidates.size()));
    std::vector<CandidateScore> scores;
    Matrix all_logits;
    const bool want_logits = policy.mode == DecodeMode::joint_topk;
    if (want_logits) all_logits = Matrix(static_cast<int>(candidates.size()), c.vocab);

    if (regime == CacheRegime::naive) {
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        rebuilt = build_prefix(condition, committed, w);
        auto one = candidate_batch_eval(rebuilt, last_token, prev, {candidates[i]}, w,
                                        policy, cand_stream, step, secondary,
                                        rec.forward_count);
        if (want_logits) {
          StepInput si{last_token, prev, Position::from_linear(candidates[i], c.grid)};
          all_logits.row(static_cast<int>(i)) =
              forward_incremental(si, rebuilt, w).logits;
        }
        scores.push_back(one[0]);
      }
    } else {
      if (want_logits) {
        // joint mode needs the raw logits; evaluate with a visible row buffer
        for (std::size_t i = 0; i < candidates.size(); ++i) {
          StepInput si{last_token, prev, Position::from_linear(candidates[i], c.grid)};
          InferResult r = forward_incremental(si, *prefix, w);
          ++rec.forward_count;
          secondary.add(candidates[i], r.kv);
          all_logits.row(static_cast<int>(i)) = r.logits;
        }
      } else {
        scores = candidate_batch_eval(*prefix, last_token, prev, candidates, w, policy,
                                      cand_stream, step, secondary, rec.forward_count);
      }
    }

    CandidateScore chosen;
    if (policy.mode == DecodeMode::joint_topk) {
      const int pool = static_cast<int>(candidates.size()) * c.vocab;
      const int k = policy.topk > 0 ? std::min(policy.topk, pool)
                                    : std::max(1, c.vocab / 2);
      chosen = joint_topk_select(candidates, all_logits, k, prev, policy.lambda, policy,
                                 c.grid, cand_stream, step);
    } else if (policy.mode == DecodeMode::ordered) {
      chosen = select_location(scores, policy.lambda, policy, c.grid);
    } else {
      chosen = scores[0];
    }

    if (regime == CacheRegime::cached) {
      promote_candidate(secondary, chosen.location, primary);
    } else {
      secondary.release();
    }
    committed.push_back(
        StepInput{last_token, prev, Position::from_linear(chosen.location, c.grid)});
    filled[chosen.location] = true;
    rec.order.push_back(chosen.location);
    rec.tokens[chosen.location] = chosen.token;
    rec.step_logp.push_back(chosen.logp);
    rec.step_distance.push_back(chosen.distance);
  }

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---- record serialization ----

void write_record(std::ostream& out, const GenerationRecord& rec) {
  out << "OARGEN1\n";
  out << "grid " << rec.grid.rows << " " << rec.grid.cols << "\n";
  out << "policy " << to_string(rec.policy.mode) << " lambda "
      << format_real(rec.policy.lambda) << " topk " << rec.policy.topk << " domain "
      << to_string(rec.policy.domain) << " norm "
      << (rec.policy.normalize_distance ? 1 : 0) << "\n";
  out << "seed " << rec.seed << "\n";
  out << "forwards " << rec.forward_count << "\n";
  out << "steps " << rec.order.size() << "\n";
  out << "step,location,token,logp,d\n";
  for (std::size_t i = 0; i < rec.order.size(); ++i) {
    out << (i + 1) << "," << rec.order[i] << "," << rec.tokens[rec.order[i]] << ","
        << format_real(rec.step_logp[i]) << "," << rec.step_distance[i] << "\n";
  }
  for (int r = 0; r < rec.grid.rows; ++r) {
    for (int cc = 0; cc < rec.grid.cols; ++cc) {
      if (cc) out << " ";
      out << rec.tokens[r * rec.grid.cols + cc];
    }
    out << "\n";
  }
}

std::string record_to_string(const GenerationRecord& rec) {
  std::ostringstream os;
  write_record(os, rec);
  return os.str();
}

GenerationRecord read_record(std::istream& in) {
  auto fail = [](const std::string& what) -> void {
    throw std::runtime_error("record: " + what);
  };
  std::string line, word;
  if (!std::getline(in, line) || line != "OARGEN1") fail("bad magic");
  GenerationRecord rec;
  in >> word >> rec.grid.rows >> rec.grid.cols;
  if (word != "grid") fail("expected grid line");
  std::string mode, domain;
  int topk = 0, norm = 1;
  Real lambda = 0;
  in >> word >> mode;
  if (word != "policy") fail("expected policy line");
  in >> word >> lambda >> word >> topk >> word >> domain >> word >> norm;
  rec.policy.mode = decode_mode_from_string(mode);
  rec.policy.lambda = lambda;
  rec.policy.topk = topk;
  rec.policy.domain = score_domain_from_string(domain);
  rec.policy.normalize_distance = norm != 0;
  in >> word >> rec.seed;
  if (word != "seed") fail("expected seed line");
  in >> word >> rec.forward_count;
  if (word != "forwards") fail("expected forwards line");
  std::size_t steps = 0;
  in >> word >> steps;
  if (word != "steps") fail("expected steps line");
  in >> word;  // header row
  const int n = rec.grid.size();
  rec.tokens.assign(n, -1);
  for (std::size_t i = 0; i < steps; ++i) {
    std::string row;
    in >> row;
    int step = 0, loc = 0, tok = 0, d = 0;
    Real logp = 0;
    if (std::sscanf(row.c_str(), "%d,%d,%d,%lf,%d", &step, &loc, &tok, &logp, &d) != 5) {
      fail("bad step row: " + row);
    }
    rec.order.push_back(loc);
    rec.tokens[loc] = tok;
    rec.step_logp.push_back(logp);
    rec.step_distance.push_back(d);
  }
  for (int i = 0; i < n; ++i) {
    int t = 0;
    if (!(in >> t)) fail("truncated grid");
    if (t != rec.tokens[i]) fail("grid/steps token mismatch");
  }
  return rec;
}

std::string to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::raster: return "raster";
    case DecodeMode::random: return "random";
    case DecodeMode::ordered: return "ordered";
    case DecodeMode::joint_topk: return "joint_topk";
  }
  return "?";
}

std::string to_string(ScoreDomain domain) {
  return domain == ScoreDomain::log_prob ? "log_prob" : "prob";
}

DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "raster") return DecodeMode::raster;
  if (s == "random") return DecodeMode::random;
  if (s == "ordered") return DecodeMode::ordered;
  if (s == "joint_topk") return DecodeMode::joint_topk;
  throw std::invalid_argument("unknown decode mode: " + s);
}

ScoreDomain score_domain_from_string(const std::string& s) {
  if (s == "log_prob") return ScoreDomain::log_prob;
  if (s == "prob") return ScoreDomain::prob;
  throw std::invalid_argument("unknown score domain: " + s);
}

}  // namespace oar
