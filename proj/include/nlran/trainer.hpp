#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlran/data.hpp"
#include "nlran/metrics.hpp"
#include "nlran/model.hpp"

namespace nlran {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 6;
  std::size_t patience = 50;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  double momentum = 0.0;
  /// Wall-clock cap in seconds; 0 disables it. Logged wall-clock never
  /// affects the checkpoint bytes.
  double time_budget = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Fills fields present in `j` over `base`; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
};

/// w <- w - lr * g, elementwise.
template <typename T>
void sgd_step(Tensor<T>& weights, const Tensor<T>& grads, double lr);

/// Plain or heavy-ball SGD over a parameter store. With momentum m the
/// update is v <- m v + g, w <- w - lr v. Parameters without a gradient are
/// left untouched.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(ParameterStore<T>& params, double lr, double momentum = 0.0);
  void step();

 private:
  ParameterStore<T>* params_;
  double lr_, momentum_;
  std::vector<Tensor<T>> velocity_;
};

/// Tracks the selection metric. An epoch improves when its metric is
/// strictly higher than the best so far, or equal with a strictly lower
/// tie-break loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);
  /// Returns true when this epoch became the new best.
  bool update(std::size_t epoch, double metric, double tie_loss = 0.0);
  bool should_stop() const noexcept { return stale_ >= patience_; }
  std::optional<std::size_t> best_epoch() const noexcept { return best_epoch_; }
  double best_metric() const noexcept { return best_metric_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  std::optional<std::size_t> best_epoch_;
  double best_metric_ = 0.0, best_loss_ = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_f1 = 0.0;
  double seconds = 0.0;
  bool improved = false;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::string stop_reason;  // patience, max_epochs, time_budget
  std::string best_checkpoint;

  /// One JSON object per epoch line.
  std::string to_jsonl() const;
};

struct TrainOptions {
  std::string checkpoint_path;  // best checkpoint, written on every improvement
  std::string log_path;         // JSON lines, appended per epoch
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains in place and leaves the best-validation parameters in `model`.
/// Batches come from a seeded shuffle per epoch; a short final batch is
/// kept. Throws NumericError naming epoch and batch on a non-finite loss.
template <typename T>
TrainLog train(Model<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
               const TrainConfig& cfg, const TrainOptions& options = {});

struct Evaluation {
  MetricsReport report;
  std::vector<std::vector<double>> scores;  // softmax rows
  std::vector<int> labels;
  std::vector<int> predicted;
  std::vector<std::string> ids;
  double mean_loss = 0.0;
};

/// Batched inference and metrics over a split.
template <typename T>
Evaluation evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t batch_size = 6);

/// Stacks samples [first, first+count) of `order` into [B,1,D,H,W].
template <typename T>
Tensor<T> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                     std::size_t count);

}  // namespace nlran
