#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "oar/train.hpp"

namespace oar {

enum class EvalOrderPolicy { raster, random, labeled, model_extracted };

std::string to_string(EvalOrderPolicy policy);
EvalOrderPolicy eval_order_policy_from_string(const std::string& s);

/// Teacher-forced mean NLL per image token over the set, under orders chosen
/// by `policy`. The model-extracted policy runs greedy order discovery on
/// each sample first; random orders come from per-sample substreams of
/// `stream`, so two runs with the same seed agree exactly.
Real heldout_nll(const TransformerWeights& w, const Dataset& set,
                 EvalOrderPolicy policy, SeededStream stream,
                 const DecodePolicy& extract_policy = {});

/// Per-sample summed image-token cross-entropy under a fixed order.
Real sample_order_nll(const TransformerWeights& w, const Sample& sample,
                      const Order& order);

/// Difference of summed per-token cross-entropies: NLL under `baseline`
/// orders minus NLL under `learned` orders. Positive means the learned
/// orders make the tokens more predictable. Antisymmetric under swap.
Real v_information_gap(const TransformerWeights& w, const Dataset& set,
                       const std::vector<Order>& baseline,
                       const std::vector<Order>& learned);

struct ForwardAudit {
  bool pass = false;
  std::int64_t expected = 0;
  std::int64_t actual = 0;
};

/// Checks the record's forward count against the law for its decode mode:
/// ordered/joint use N(N+1)/2 candidate forwards, raster/random use N.
ForwardAudit audit_forward_count(const GenerationRecord& record);

struct TimingReport {
  double naive_seconds = 0;     // medians over the repetitions
  double parallel_seconds = 0;
  double cached_seconds = 0;
  GenerationRecord record;      // the (identical) output of every regime
};

/// Runs one generation per regime per repetition with the same seed and
/// reports median wall times. Throws if the regimes' records disagree —
/// timings for mismatched outputs are meaningless.
TimingReport timing_comparison(const std::vector<int>& condition,
                               const TransformerWeights& w, const DecodePolicy& policy,
                               const SeededStream& stream, int repetitions);

struct Stats {
  Real mean = 0;
  Real stddev = 0;  // population
};
Stats mean_stddev(const std::vector<Real>& xs);

// ---- image artifacts (binary portable pixmap, P6) ----

struct RgbImage {
  int width = 0, height = 0;
  std::vector<unsigned char> pixels;  // rgb, row-major

  unsigned char* at(int x, int y) { return pixels.data() + 3 * (y * width + x); }
};

void write_ppm(const std::string& path, const RgbImage& image);

/// Generation-rank heatmap: rank 0 renders (255, 230, 0), rank N-1 renders
/// (110, 0, 160), linear in between. One upscaled cell per grid position.
RgbImage order_heatmap(const Order& order, const GridShape& grid, int cell_px = 16);
void render_order_heatmap(const Order& order, const GridShape& grid,
                          const std::string& path, int cell_px = 16);

/// Token grid through a fixed vocab-sized palette (distinct hues, id-keyed).
RgbImage sample_grid_image(const std::vector<int>& tokens, const GridShape& grid,
                           int vocab, int cell_px = 16);
void render_sample_grid(const std::vector<int>& tokens, const GridShape& grid,
                        int vocab, const std::string& path, int cell_px = 16);

// ---- reports ----

struct MetricRow {
  std::string metric;
  std::string policy;
  Real value;
};
using MetricsReport = std::vector<MetricRow>;

/// CSV with header `metric,policy,value`.
void write_metrics_csv(std::ostream& out, const MetricsReport& report);

}  // namespace oar
