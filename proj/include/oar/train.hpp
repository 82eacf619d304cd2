#pragma once

#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "oar/data.hpp"
#include "oar/decode.hpp"
#include "oar/optimizer.hpp"

namespace oar {

enum class OrderPolicy { raster, random, labeled };

struct TrainConfig {
  Real lr = 3e-4;
  int batch = 16;
  int epochs = 10;
  Real plateau_factor = 0.8;
  int plateau_patience = 3;
  Real plateau_min_delta = 1e-4;
  Real weight_decay = 0.01;
  OrderPolicy policy = OrderPolicy::random;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch;  // 1-based
  Real train_loss;
  Real val_loss;
  Real lr;
  Real mean_order_distance;
  double seconds;
};
using TrainLog = std::vector<EpochLog>;

/// CSV with header `epoch,train_loss,val_loss,lr,mean_order_distance,seconds`.
void write_train_log_csv(std::ostream& out, const TrainLog& log);

struct LossBreakdown {
  Real image_nll = 0;  // mean over image-token terms
  Real cond_nll = 0;   // mean over condition-token terms
};

/// Teacher-forced loss over the permuted sequences of a batch, image-token
/// terms weighted by img_loss_weight and the whole normalized by total
/// weight. With identity orders this is exactly the raster next-token loss.
Tensor permuted_loss(Tape& tape, const std::vector<const Sample*>& batch,
                     const std::vector<Order>& orders, const TransformerWeights& w,
                     ForwardMode mode,
                     std::vector<SeededStream>* dropout_streams = nullptr,
                     LossBreakdown* breakdown = nullptr);

struct PlateauState {
  Real lr = 3e-4;
  Real best = std::numeric_limits<Real>::infinity();
  int since_improve = 0;
  int cooldown = 0;
};

/// ReduceLROnPlateau step: multiply lr by `factor` after `patience` epochs
/// without improving `best` by at least `min_delta`, then cool down one
/// epoch. Returns the (possibly reduced) learning rate.
Real reduce_lr_on_plateau(PlateauState& state, Real val_loss, Real factor, int patience,
                          Real min_delta);

/// Epoch loop shared by all order policies. Orders are resampled per epoch
/// under the random policy, fixed under raster/labeled. Runs epochs
/// [start_epoch, cfg.epochs); aborts with a diagnostic on NaN loss.
TrainLog train_model(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                     const Dataset& train_set, const Dataset& val_set,
                     const TrainConfig& cfg, int start_epoch = 0);

TrainLog train_any_order(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                         const Dataset& train_set, const Dataset& val_set,
                         TrainConfig cfg);

/// Fine-tuning on the stored order labels; every sample must carry one.
TrainLog finetune_ordered(TransformerWeights& w, AdamW& opt, PlateauState& plateau,
                          const Dataset& train_set, const Dataset& val_set,
                          TrainConfig cfg);

/// Greedy order discovery with teacher-forced content: candidate locations
/// are scored by the model's log-probability of the sample's true token
/// there, minus the policy's lambda penalty.
Order extract_order(const Sample& sample, const TransformerWeights& w,
                    const DecodePolicy& policy);
std::vector<Order> extract_orders(const Dataset& dataset, const TransformerWeights& w,
                                  const DecodePolicy& policy);

// ---- resumable checkpoints (model checkpoint plus a training trailer) ----

struct TrainCheckpoint {
  TransformerWeights weights;
  AdamWConfig opt_config;
  std::vector<Matrix> m, v;
  std::int64_t t = 0;
  int epoch = 0;  // epochs completed
  PlateauState plateau;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const TransformerWeights& w,
                     const AdamW& opt, int epoch, const PlateauState& plateau,
                     std::uint64_t seed);
TrainCheckpoint load_checkpoint(const std::string& path);

}  // namespace oar
