#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "oar/infer.hpp"
#include "oar/rng.hpp"

namespace oar {

/// A generation order: permutation of the linear grid positions.
using Order = std::vector<int>;

bool is_permutation_order(const Order& order, int n);

/// Unbiased Fisher-Yates permutation of [0, n).
Order sample_uniform_order(int n, SeededStream& stream);

/// Mean L-inf distance over the n-1 consecutive pairs of the order.
Real average_order_distance(const Order& order, const GridShape& grid);

enum class DecodeMode { raster, random, ordered, joint_topk };
enum class ScoreDomain { log_prob, prob };

struct DecodePolicy {
  DecodeMode mode = DecodeMode::ordered;
  Real lambda = 0.0;
  int topk = 0;  // 0 = full vocabulary (joint mode: half the pooled pairs)
  ScoreDomain domain = ScoreDomain::log_prob;
  bool normalize_distance = true;

  int effective_topk(int vocab) const { return topk > 0 ? topk : vocab; }
};

struct CandidateScore {
  int location = 0;   // linear position
  int token = 0;
  Real logp = 0;      // noiseless log-softmax over the full vocabulary
  int distance = 0;   // L-inf to the previous location (0 at the first step)
  Real combined = 0;  // likelihood term minus the lambda penalty
};

struct GumbelSample {
  int token;
  Real logp;
};

/// Restricts to the k highest logits, adds standard Gumbel noise, takes the
/// argmax. Always consumes one noise draw per vocabulary entry so substreams
/// stay aligned across k and across the joint variant.
GumbelSample gumbel_topk_sample(const Eigen::Matrix<Real, 1, Eigen::Dynamic>& logits,
                                int k, SeededStream& stream);

/// Transient per-candidate K/V block for the current step. Candidate-major,
/// storage reused across steps; discarded after one candidate is promoted.
struct KVCacheSecondary {
  std::vector<Matrix> k, v;  // per layer, capacity x D
  std::vector<int> locations;
  int count = 0;
  bool active = false;

  void begin_step(int depth, int dim, int capacity);
  void add(int location, const TokenKV& kv);
  int index_of(int location) const;  // -1 if absent
  void release();
};

/// Evaluates every candidate location against the committed prefix: one
/// incremental forward per candidate, token sampled from a per-(step,
/// location) substream, K/V rows captured in the secondary cache. Results do
/// not depend on the order candidates are listed in.
std::vector<CandidateScore> candidate_batch_eval(
    const KVCachePrimary& primary, int last_token, const std::optional<Position>& prev,
    const std::vector<int>& candidates, const TransformerWeights& w,
    const DecodePolicy& policy, const SeededStream& gen_stream, int step_index,
    KVCacheSecondary& secondary, std::int64_t& forward_count);

/// Argmax of likelihood_term - lambda * distance; ties break toward the
/// smallest linear position. `lambda` overrides the policy value so the
/// penalty can be swept on a fixed score set.
CandidateScore select_location(const std::vector<CandidateScore>& scores, Real lambda,
                               const DecodePolicy& policy, const GridShape& grid);

/// Joint variant: pools all (location, token) pairs, keeps the global top-k
/// by logit, samples per location among surviving tokens, then applies the
/// lambda penalty as in select_location.
CandidateScore joint_topk_select(const std::vector<int>& locations,
                                 const Matrix& all_logits, int k,
                                 const std::optional<Position>& prev, Real lambda,
                                 const DecodePolicy& policy, const GridShape& grid,
                                 const SeededStream& gen_stream, int step_index);

/// Moves the chosen candidate's K/V rows into the primary cache and releases
/// the secondary cache.
void promote_candidate(KVCacheSecondary& secondary, int location,
                       KVCachePrimary& primary);

/// How the committed prefix is (re)computed during generation. All regimes
/// produce bit-identical results; they differ only in recomputation.
enum class CacheRegime { cached, parallel_nocache, naive };

struct GenerationRecord {
  GridShape grid;
  DecodePolicy policy;
  std::uint64_t seed = 0;
  std::vector<int> tokens;  // row-major grid
  Order order;
  std::vector<Real> step_logp;
  std::vector<int> step_distance;
  std::int64_t forward_count = 0;
  double wall_seconds = 0;  // not serialized
};

GenerationRecord generate(const std::vector<int>& condition, const TransformerWeights& w,
                          const DecodePolicy& policy, const SeededStream& stream,
                          CacheRegime regime = CacheRegime::cached);

/// Line-oriented text form; bit-stable for a fixed seed (wall time excluded).
void write_record(std::ostream& out, const GenerationRecord& record);
std::string record_to_string(const GenerationRecord& record);
GenerationRecord read_record(std::istream& in);

std::string to_string(DecodeMode mode);
std::string to_string(ScoreDomain domain);
DecodeMode decode_mode_from_string(const std::string& s);
ScoreDomain score_domain_from_string(const std::string& s);

}  // namespace oar
