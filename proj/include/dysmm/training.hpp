#pragma once

// Losses, Adam, the plateau/early-stopping schedule and the epoch loop.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dysmm/model.hpp"

namespace dysmm {

enum class LossKind { bce, cce };

struct TrainConfig {
  double lr = 1e-4;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 3;
  double min_delta = 1e-4;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::bce;
  double validation_fraction = 0.1;
  bool class_weighting = false;  // inverse-frequency sample weights

  bool is_reference() const;
  void validate() const;
};

LossKind loss_for(Task task);

/// Mean binary cross-entropy of probabilities p [B, 1] against labels in {0, 1}.
/// p is clamped to [1e-7, 1 - 1e-7]; clamped entries pass no gradient.
/// Optional weights are per-sample and the result is their weighted mean.
Var bce_loss(Var p, std::span<const int> labels, std::span<const double> weights = {});

/// Mean of -log probs[y] for probs [B, K]; same clamp and weighting rules.
Var cce_loss(Var probs, std::span<const int> labels, std::span<const double> weights = {});

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimizerState make_optimizer_state(const ParameterStore& params);

/// Bias-corrected Adam update. Throws NonFiniteError on a non-finite gradient
/// and ShapeError when grads do not mirror params.
void adam_step(ParameterStore& params, const std::vector<Tensor>& grads, OptimizerState& state, double lr);

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;
  std::size_t reductions = 0;
};

/// One epoch of ReduceOnPlateau. An epoch improves when best - val >= min_delta.
/// After `patience` consecutive non-improving epochs the returned lr is
/// lr * factor and the counter restarts.
double reduce_on_plateau(double val_loss, double lr, PlateauState& state, const TrainConfig& config);

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_epoch = 0;  // 1-based
  double best_loss = std::numeric_limits<double>::infinity();
};

/// Early stopping over a whole validation-loss log (epoch i at index i-1):
/// stop once `patience` consecutive epochs fail to improve by min_delta.
EarlyStopDecision early_stop_check(std::span<const double> val_losses, std::size_t patience, double min_delta);

enum class EpochAction { proceed, lr_reduced, stop };

/// The schedule used by train_model. ReduceOnPlateau runs from the first
/// epoch; early stopping is armed by the first lr reduction and then stops
/// after `early_stop_patience` epochs without improvement since that
/// reduction. A constant loss therefore reduces at epoch 6 and stops at 9.
class TrainingController {
 public:
  explicit TrainingController(const TrainConfig& config);

  EpochAction observe(double val_loss);

  double lr() const { return lr_; }
  std::size_t epoch() const { return epoch_; }
  /// Epoch with the lowest validation loss so far (strict minimum, first wins).
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  bool armed() const { return plateau_.reductions > 0; }

 private:
  TrainConfig config_;
  double lr_;
  std::size_t epoch_ = 0;
  PlateauState plateau_;
  std::size_t stop_wait_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
};

/// One training or evaluation item. Features are borrowed.
struct Example {
  const Tensor* features = nullptr;  // [frames, n_mels]
  TokenSequence tokens;
  int label = 0;
  std::string speaker;
};

struct BatchData {
  SpeechBatch speech;
  TextBatch text;
  std::vector<int> labels;
};

BatchData make_batch(std::span<const Example* const> items);

/// Forward pass plus loss for one batch.
Var batch_loss(Model& model, Tape& tape, const BatchData& batch, LossKind loss, Mode mode, Rng& rng,
               std::span<const double> weights = {});

/// Speaker-stratified hold-out: each speaker contributes round(fraction * n)
/// of its examples (at least one when it has two or more). Deterministic in seed.
struct ValidationSplit {
  std::vector<Example> train;
  std::vector<Example> validation;
};
ValidationSplit split_validation(const std::vector<Example>& examples, double fraction, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;

  /// epoch,train_loss,val_loss,val_acc,lr,seconds
  void write_csv(const std::filesystem::path& path) const;
};

struct Snapshot {
  std::vector<Tensor> params;
  std::vector<BatchNormState> batchnorm;

  static Snapshot of(const Model& model);
  void restore(Model& model) const;
};

struct EvalResult {
  std::vector<int> predictions;
  std::vector<std::vector<double>> scores;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Eval-mode predictions in fixed order.
EvalResult evaluate(Model& model, const std::vector<Example>& examples, std::size_t batch_size);

/// Trains on `train`, early-stops on `validation`, and leaves the model holding
/// the parameters of the best validation epoch. Throws NonFiniteError naming
/// the epoch when the loss diverges.
TrainLog train_model(Model& model, const std::vector<Example>& train, const std::vector<Example>& validation,
                     const TrainConfig& config);

}  // namespace dysmm
