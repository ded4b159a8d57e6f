#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "stm3/backbone.hpp"
#include "stm3/datakit.hpp"
#include "stm3/objectives.hpp"
#include "stm3/tensor.hpp"

namespace stm3 {

struct TrainConfig {
  double lr = 3e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  std::size_t halve_every = 25;
  /// Halve at every multiple of halve_every (true) or only once.
  bool repeat_halving = true;
  std::size_t patience = 15;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient norm; 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 uses the machine's parallelism

  void validate() const;
};

std::string to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

/// Learning rate for a 0-based epoch: lr0 * 0.5^floor(epoch / halve_every),
/// or a single halving from epoch halve_every on.
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One AdamW update at 1-based step t: every parameter first decays by
/// (1 - lr * weight_decay), then takes the bias-corrected Adam step.
/// Throws NumericError naming the parameter when a gradient is not finite.
void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
                const TrainConfig& cfg, double lr, std::size_t t);

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records a validation loss; returns true when it is a new best.
  bool update(std::size_t epoch, double value);
  /// True once `patience` epochs have passed without improvement.
  bool should_stop() const;
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  std::size_t last_epoch_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_prediction = 0.0;
  double train_contrastive = 0.0;
  double val_loss = 0.0;  // prediction loss, normalized scale
  Metrics val_metrics;    // denormalized scale
  std::vector<std::vector<std::size_t>> assignments;  // per layer, per node (STM3 only)
  std::vector<std::size_t> assignment_changes;        // per layer, vs previous epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::vector<std::size_t>> initial_assignments;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool diverged = false;
  std::string stop_reason;

  /// Sum of assignment changes over epochs [from, to) and all layers.
  std::size_t total_changes(std::size_t from, std::size_t to) const;
};

void save_history_csv(const std::filesystem::path& path, const TrainHistory& history);

struct TrainResult {
  ModelParams best;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minibatch AdamW training on the dataset's train split with per-epoch
/// validation on the prediction loss; returns the best-validation parameters.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const WindowedDataset& data,
                  const EpochCallback& on_epoch = {});

struct EvalResult {
  Metrics metrics;    // denormalized scale
  double loss = 0.0;  // mean prediction loss, normalized scale
  double mse = 0.0;   // denormalized mean squared error
  std::size_t windows = 0;
};

/// Eval-mode forward (no routing noise) over every window of a split.
EvalResult evaluate(const ModelParams& params, const ModelConfig& cfg, const WindowedDataset& data, Split split,
                    std::size_t threads = 0);

/// Last-value persistence forecast scored like evaluate().
EvalResult evaluate_persistence(const WindowedDataset& data, Split split);

/// Eval-mode routing of every node on one window, per layer.
std::vector<std::vector<std::size_t>> probe_assignments(const ModelParams& params, const ModelConfig& cfg,
                                                        const Tensor& X);

/// Cluster purity: for each ground-truth cluster, the largest fraction of its
/// nodes sent to a single expert.
std::vector<double> routing_purity(const std::vector<std::size_t>& assignment, const std::vector<std::size_t>& labels,
                                   std::size_t experts);

struct SeparationReport {
  bool available = false;
  std::string notice;
  std::vector<std::vector<double>> purity;  // per layer, per cluster
  double mean_purity = 0.0;
  double intra_cosine = 0.0;  // same expert, same scale
  double inter_cosine = 0.0;  // different experts, same scale
  std::vector<std::vector<std::size_t>> expert_load;  // per layer, nodes per expert
};

/// Routing purity against the dataset's cluster labels plus mean pooled
/// feature cosine within and across experts on up to `windows` test windows.
SeparationReport expert_separation(const ModelParams& params, const ModelConfig& cfg, const WindowedDataset& data,
                                   std::size_t windows = 16);

}  // namespace stm3
