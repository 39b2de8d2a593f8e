#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixssm/data.hpp"
#include "mixssm/network.hpp"

namespace mixssm {

/// Mean over the batch of -log(max(p[label], 1e-12)). probs is (K) or (B, K);
/// throws ConfigError when a label is out of range.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, const std::vector<std::size_t>& labels);

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, std::size_t label) {
  return cross_entropy_loss(probs, std::vector<std::size_t>{label});
}

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update of every parameter from its grad (absent
/// grads count as zero). Moments are created on the first call. A non-finite
/// grad throws NumericError before anything is modified.
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, OptimState<T>& state);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 5e-5;
  std::uint64_t seed = 0;
  /// 0 means no limit; otherwise training stops after this many updates.
  std::size_t max_steps = 0;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
};

/// Seeded shuffle each epoch, then per batch: forward, loss, backward, Adam.
/// Reported accuracy uses the training-mode forward of each batch. A
/// non-finite value anywhere throws TrainingAborted with the batch index.
TrainResult train(Model<float>& model, const Dataset& data, const TrainOptions& options);

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

/// Macro-averaged over `classes`; a class whose precision, recall, or F1 has a
/// zero denominator contributes 0 to that average. Throws DataError when empty.
Metrics metrics_from_predictions(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels,
                                 std::size_t classes);

/// Evaluation-mode forward over the dataset; predictions are argmax (lowest index on ties).
Metrics evaluate(const Model<float>& model, const Dataset& data, std::size_t batch_size = 64);

/// "acc=", "prec=", "rec=", "f1=" lines, then "matrix=" with rows joined by ';'.
std::string format_metrics(const Metrics& m);

std::string format_epoch_csv(const std::vector<EpochLog>& epochs);

}  // namespace mixssm
