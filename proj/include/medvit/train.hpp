#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "medvit/data.hpp"
#include "medvit/model.hpp"

namespace medvit::train {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double decay = 0.1;
  std::vector<std::size_t> milestones{50, 75};
  AdamWHyper adamw;
  std::uint64_t seed = 0;
  std::size_t resolution = 224;
  /// Stop once an epoch's train accuracy reaches this; 0 disables.
  double target_train_accuracy = 0.0;

  /// 100 epochs, batch 128, lr 1e-3 decayed ×0.1 at epochs 50 and 75.
  static TrainConfig medmnist();
  /// 150 epochs, batch 64, lr 1e-4, no decay.
  static TrainConfig nonmnist();
  static TrainConfig preset(const std::string& name);
  void validate() const;
};

/// Piecewise-constant step schedule.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

/// One AdamW update of a flat parameter block with step count t ≥ 1.
/// Throws NumericError before touching anything if a gradient is not
/// finite.
void adamw_step(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                std::uint64_t t, double lr, const AdamWHyper& hyper);

class AdamW {
 public:
  AdamW(ParameterList params, AdamWHyper hyper);

  /// Updates every parameter holding a gradient. Parameters without a
  /// gradient are skipped.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  void set_steps(std::uint64_t t) { step_ = t; }
  const ParameterList& params() const { return params_; }
  /// First and second moments, parallel to params().
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  ParameterList params_;
  AdamWHyper hyper_;
  std::vector<Tensor> m_, v_;
  std::uint64_t step_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;  // zero-based
  double lr = 0.0;
  double loss = 0.0;  // sample-weighted mean over the epoch
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct EvalMetrics {
  std::size_t samples = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> auc;  // absent when only one class is present
  double bacc = 0.0;
};

/// Trapezoidal ROC area over all score thresholds; ties count half.
/// Empty when either class is missing.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> positive);
/// Binary: AUC of the class-1 probability. Multi-class: mean one-vs-rest
/// AUC over classes that have both positives and negatives.
std::optional<double> macro_auc(const Tensor& probabilities, std::span<const int> labels);

struct Predictions {
  Tensor probabilities;  // [N, classes]
  std::vector<int> predicted;
  double loss = 0.0;
};

/// Eval-mode, gradient-free inference; restores the previous mode.
Predictions predict(MedViTModel& model, const data::Dataset& dataset, std::size_t batch_size = 64);
EvalMetrics evaluate(MedViTModel& model, const data::Dataset& dataset, std::size_t batch_size = 64);

/// Mini-batch training with a per-epoch seeded shuffle, so a run resumed
/// from a checkpoint at epoch k continues exactly as the uninterrupted one.
class Trainer {
 public:
  Trainer(MedViTModel& model, TrainConfig cfg);

  EpochLog run_epoch(const data::Dataset& train, const data::Dataset* val = nullptr);
  /// Runs the remaining epochs, stopping early at the accuracy target.
  std::vector<EpochLog> fit(const data::Dataset& train, const data::Dataset* val = nullptr,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

  /// Batches of one epoch in visiting order. A trailing single sample joins
  /// the previous batch since batch statistics need two.
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t epoch) const;

  std::size_t epoch() const { return epoch_; }
  void set_epoch(std::size_t epoch) { epoch_ = epoch; }
  AdamW& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return cfg_; }
  MedViTModel& model() { return model_; }

 private:
  MedViTModel& model_;
  TrainConfig cfg_;
  AdamW optimizer_;
  std::size_t epoch_ = 0;
};

void write_log_header(std::ostream& os);
void write_log(std::ostream& os, const EpochLog& log);

}  // namespace medvit::train
