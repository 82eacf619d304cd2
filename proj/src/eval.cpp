#include "oar/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace oar {

std::string to_string(EvalOrderPolicy policy) {
  switch (policy) {
    case EvalOrderPolicy::raster: return "raster";
    case EvalOrderPolicy::random: return "random";
    case EvalOrderPolicy::labeled: return "labeled";
    case EvalOrderPolicy::model_extracted: return "model-extracted";
  }
  throw std::invalid_argument("bad eval order policy");
}

EvalOrderPolicy eval_order_policy_from_string(const std::string& s) {
  if (s == "raster") return EvalOrderPolicy::raster;
  if (s == "random") return EvalOrderPolicy::random;
  if (s == "labeled") return EvalOrderPolicy::labeled;
  if (s == "model-extracted") return EvalOrderPolicy::model_extracted;
  throw std::invalid_argument("unknown eval order policy: " + s);
}

Real sample_order_nll(const TransformerWeights& w, const Sample& sample,
                      const Order& order) {
  Tape tape;
  LossBreakdown b;
  std::vector<const Sample*> one{&sample};
  std::vector<Order> o{order};
  permuted_loss(tape, one, o, w, ForwardMode::eval, nullptr, &b);
  return b.image_nll * static_cast<Real>(w.config.patches());
}

namespace {

std::vector<Order> eval_orders(const TransformerWeights& w, const Dataset& set,
                               EvalOrderPolicy policy, SeededStream& stream,
                               const DecodePolicy& extract_policy) {
  const int n = w.config.patches();
  std::vector<Order> orders(set.samples.size());
  switch (policy) {
    case EvalOrderPolicy::raster:
      for (auto& o : orders) {
        o.resize(n);
        std::iota(o.begin(), o.end(), 0);
      }
      break;
    case EvalOrderPolicy::random:
      for (std::size_t i = 0; i < orders.size(); ++i) {
        SeededStream s = stream.derive(i);
        orders[i] = sample_uniform_order(n, s);
      }
      break;
    case EvalOrderPolicy::labeled:
      for (std::size_t i = 0; i < orders.size(); ++i) {
        if (!set.samples[i].order_label) {
          throw std::invalid_argument("heldout_nll: sample " + std::to_string(i) +
                                      " has no order label");
        }
        orders[i] = *set.samples[i].order_label;
      }
      break;
    case EvalOrderPolicy::model_extracted:
      orders = extract_orders(set, w, extract_policy);
      break;
  }
  return orders;
}

}  // namespace

Real heldout_nll(const TransformerWeights& w, const Dataset& set,
                 EvalOrderPolicy policy, SeededStream stream,
                 const DecodePolicy& extract_policy) {
  if (set.samples.empty()) throw std::invalid_argument("heldout_nll: empty set");
  const std::vector<Order> orders =
      eval_orders(w, set, policy, stream, extract_policy);
  Real total = 0;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    total += sample_order_nll(w, set.samples[i], orders[i]);
  }
  return total / static_cast<Real>(set.samples.size() * w.config.patches());
}

Real v_information_gap(const TransformerWeights& w, const Dataset& set,
                       const std::vector<Order>& baseline,
                       const std::vector<Order>& learned) {
  if (baseline.size() != set.samples.size() || learned.size() != set.samples.size()) {
    throw std::invalid_argument("v_information_gap: one order per sample per side");
  }
  Real gap = 0;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    gap += sample_order_nll(w, set.samples[i], baseline[i]) -
           sample_order_nll(w, set.samples[i], learned[i]);
  }
  return gap;
}

ForwardAudit audit_forward_count(const GenerationRecord& record) {
  const std::int64_t n = record.grid.size();
  ForwardAudit a;
  a.actual = record.forward_count;
  const bool ordered = record.policy.mode == DecodeMode::ordered ||
                       record.policy.mode == DecodeMode::joint_topk;
  a.expected = ordered ? n * (n + 1) / 2 : n;
  a.pass = a.expected == a.actual;
  return a;
}

TimingReport timing_comparison(const std::vector<int>& condition,
                               const TransformerWeights& w, const DecodePolicy& policy,
                               const SeededStream& stream, int repetitions) {
  if (repetitions < 1) throw std::invalid_argument("timing: repetitions >= 1");
  const CacheRegime regimes[] = {CacheRegime::naive, CacheRegime::parallel_nocache,
                                 CacheRegime::cached};
  std::vector<double> times[3];
  std::string reference;
  GenerationRecord reference_record;
  for (int rep = 0; rep < repetitions; ++rep) {
    for (int r = 0; r < 3; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      GenerationRecord rec = generate(condition, w, policy, stream, regimes[r]);
      const double dt =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      times[r].push_back(dt);
      const std::string s = record_to_string(rec);
      if (reference.empty()) {
        reference = s;
        reference_record = rec;
      } else if (s != reference) {
        throw std::runtime_error(
            "timing_comparison: regimes disagree; timings would be meaningless");
      }
    }
  }
  auto median = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  TimingReport report;
  report.naive_seconds = median(times[0]);
  report.parallel_seconds = median(times[1]);
  report.cached_seconds = median(times[2]);
  report.record = reference_record;
  return report;
}

Stats mean_stddev(const std::vector<Real>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_stddev: empty");
  Stats s;
  s.mean = std::accumulate(xs.begin(), xs.end(), Real(0)) / xs.size();
  Real var = 0;
  for (Real x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / xs.size());
  return s;
}

void write_ppm(const std::string& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ppm: cannot open " + path + " for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("ppm: write failed for " + path);
}

namespace {

constexpr int kRampFrom[3] = {255, 230, 0};  // rank 0
constexpr int kRampTo[3] = {110, 0, 160};    // rank N-1

RgbImage cells_image(const GridShape& grid, int cell_px) {
  if (cell_px < 1) throw std::invalid_argument("cell_px >= 1");
  RgbImage img;
  img.width = grid.cols * cell_px;
  img.height = grid.rows * cell_px;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  return img;
}

void fill_cell(RgbImage& img, const GridShape& grid, int cell_px, int linear,
               const unsigned char rgb[3]) {
  const Position p = Position::from_linear(linear, grid);
  for (int dy = 0; dy < cell_px; ++dy) {
    for (int dx = 0; dx < cell_px; ++dx) {
      unsigned char* px = img.at(p.col * cell_px + dx, p.row * cell_px + dy);
      px[0] = rgb[0];
      px[1] = rgb[1];
      px[2] = rgb[2];
    }
  }
}

}  // namespace

RgbImage order_heatmap(const Order& order, const GridShape& grid, int cell_px) {
  const int n = grid.size();
  if (!is_permutation_order(order, n)) {
    throw std::invalid_argument("order_heatmap: invalid order");
  }
  RgbImage img = cells_image(grid, cell_px);
  for (int rank = 0; rank < n; ++rank) {
    const double t = n > 1 ? static_cast<double>(rank) / (n - 1) : 0.0;
    unsigned char rgb[3];
    for (int c = 0; c < 3; ++c) {
      rgb[c] = static_cast<unsigned char>(
          std::lround(kRampFrom[c] + t * (kRampTo[c] - kRampFrom[c])));
    }
    fill_cell(img, grid, cell_px, order[rank], rgb);
  }
  return img;
}

void render_order_heatmap(const Order& order, const GridShape& grid,
                          const std::string& path, int cell_px) {
  write_ppm(path, order_heatmap(order, grid, cell_px));
}

RgbImage sample_grid_image(const std::vector<int>& tokens, const GridShape& grid,
                           int vocab, int cell_px) {
  if (static_cast<int>(tokens.size()) != grid.size()) {
    throw std::invalid_argument("sample_grid_image: token count != grid size");
  }
  RgbImage img = cells_image(grid, cell_px);
  for (int i = 0; i < grid.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab) {
      throw std::invalid_argument("sample_grid_image: token out of vocab");
    }
    // odd multiplier: injective on 24-bit color space, so distinct token ids
    // always get distinct colors
    const std::uint32_t c =
        (static_cast<std::uint32_t>(tokens[i]) * 2654435761u + 0x345678u) & 0xFFFFFFu;
    const unsigned char rgb[3] = {static_cast<unsigned char>(c >> 16),
                                  static_cast<unsigned char>((c >> 8) & 0xFF),
                                  static_cast<unsigned char>(c & 0xFF)};
    fill_cell(img, grid, cell_px, i, rgb);
  }
  return img;
}

void render_sample_grid(const std::vector<int>& tokens, const GridShape& grid,
                        int vocab, const std::string& path, int cell_px) {
  write_ppm(path, sample_grid_image(tokens, grid, vocab, cell_px));
}

void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
  out << "metric,policy,value\n";
  char buf[128];
  for (const MetricRow& r : report) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.metric << "," << r.policy << "," << buf << "\n";
  }
}

}  // namespace oar
