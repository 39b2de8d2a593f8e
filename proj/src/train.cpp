#include "mixssm/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "mixssm/errors.hpp"
#include "mixssm/ops.hpp"
#include "mixssm/random.hpp"

namespace mixssm {

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, const std::vector<std::size_t>& labels) {
  const bool single = probs.rank() == 1;
  if (probs.rank() != 1 && probs.rank() != 2) {
    throw ShapeError("cross_entropy_loss: expected (K) or (B, K) probabilities, got " + shape_string(probs.shape()));
  }
  const std::size_t batch = single ? 1 : probs.dim(0);
  const std::size_t classes = probs.shape().back();
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(batch) +
                     " rows");
  }
  std::vector<T> pick(batch * classes, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ConfigError("cross_entropy_loss: label " + std::to_string(labels[b]) + " out of range for " +
                        std::to_string(classes) + " classes");
    }
    pick[b * classes + labels[b]] = T(-1) / T(batch);
  }
  const Tensor<T> mask(probs.shape(), std::move(pick));
  return sum_all(mul(log(clamp_min(probs, T(1e-12))), mask));
}

template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, OptimState<T>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    for (auto g : params[i].grad()) {
      if (!std::isfinite(double(g))) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
  }
  if (s.m.size() != params.size()) throw ShapeError("adam_step: optimizer state was built for other parameters");
  ++s.step;
  const auto& o = s.options;
  const double c1 = 1.0 - std::pow(o.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, double(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    if (s.m[i].size() != p.numel()) throw ShapeError("adam_step: optimizer state size mismatch");
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const T>{};
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? double(g[k]) : 0.0;
      const double m = o.beta1 * double(s.m[i][k]) + (1.0 - o.beta1) * gk;
      const double v = o.beta2 * double(s.v[i][k]) + (1.0 - o.beta2) * gk * gk;
      s.m[i][k] = T(m);
      s.v[i][k] = T(v);
      const double update = o.lr * (m / c1) / (std::sqrt(v / c2) + o.eps);
      w[k] = T(double(w[k]) - update);
    }
  }
}

TrainResult train(Model<float>& model, const Dataset& data, const TrainOptions& options) {
  const auto& cfg = model.config;
  if (data.size() == 0) throw DataError("train: dataset is empty");
  if (data.height != cfg.image_height || data.width != cfg.image_width) {
    throw ConfigError("train: dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                      ", model expects " + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
  }
  for (auto l : data.labels) {
    if (l >= cfg.num_classes) {
      throw ConfigError("train: label " + std::to_string(l) + " out of range for " + std::to_string(cfg.num_classes) +
                        " classes");
    }
  }
  if (options.batch_size == 0) throw ConfigError("train: batch size must be positive");

  const auto params = model_parameters(model);
  OptimState<float> state;
  state.options.lr = options.lr;
  Rng shuffle_rng(options.seed);
  Rng pool_rng = shuffle_rng.fork(1);
  const PoolContext ctx{true, &pool_rng};

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::size_t batch_index = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    if (options.max_steps && result.steps >= options.max_steps) break;
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      if (options.max_steps && result.steps >= options.max_steps) break;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + options.batch_size)));
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);
      double loss_value = NAN;
      try {
        const auto probs = forward_classify(model, data.batch(idx), ctx);
        const auto loss = cross_entropy_loss(probs, labels);
        loss_value = loss.item();
        loss.backward();
        adam_step(params, state);
        const auto pv = probs.data();
        const std::size_t k = cfg.num_classes;
        for (std::size_t b = 0; b < idx.size(); ++b) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < k; ++c) {
            if (pv[b * k + c] > pv[b * k + best]) best = c;
          }
          correct += best == labels[b];
        }
      } catch (const NumericError& e) {
        throw TrainingAborted(batch_index, loss_value,
                              "training aborted at batch " + std::to_string(batch_index) + " (epoch " +
                                  std::to_string(epoch) + "), loss " + std::to_string(loss_value) + ": " + e.what());
      }
      for (const auto& p : params) {
        auto h = p;
        h.zero_grad();
      }
      loss_sum += loss_value * double(idx.size());
      seen += idx.size();
      ++result.steps;
      ++batch_index;
    }
    if (seen == 0) break;
    EpochLog log{epoch, loss_sum / double(seen), double(correct) / double(seen)};
    result.epochs.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }
  return result;
}

Metrics metrics_from_predictions(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels,
                                 std::size_t classes) {
  if (labels.empty()) throw DataError("evaluate: dataset is empty");
  if (predicted.size() != labels.size()) throw ShapeError("evaluate: prediction and label counts differ");
  Metrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predicted[i] >= classes) throw DataError("evaluate: class index out of range");
    ++m.confusion[labels[i]][predicted[i]];
    correct += labels[i] == predicted[i];
  }
  m.accuracy = double(correct) / double(labels.size());
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t col = 0, row = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      col += m.confusion[k][c];
      row += m.confusion[c][k];
    }
    const double tp = double(m.confusion[c][c]);
    const double p = col ? tp / double(col) : 0.0;
    const double r = row ? tp / double(row) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  m.precision /= double(classes);
  m.recall /= double(classes);
  m.f1 /= double(classes);
  return m;
}

Metrics evaluate(const Model<float>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluate: dataset is empty");
  if (data.height != model.config.image_height || data.width != model.config.image_width) {
    throw ConfigError("evaluate: dataset images do not match the model input size");
  }
  NoGradGuard guard;
  const std::size_t k = model.config.num_classes;
  std::vector<std::size_t> predicted;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto logits = forward_logits(model, data.batch(idx));
    const auto lv = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (lv[b * k + c] > lv[b * k + best]) best = c;
      }
      predicted.push_back(best);
    }
  }
  return metrics_from_predictions(predicted, data.labels, k);
}

namespace {
std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

std::string format_metrics(const Metrics& m) {
  std::string out = "acc=" + fixed(m.accuracy) + "\nprec=" + fixed(m.precision) + "\nrec=" + fixed(m.recall) +
                    "\nf1=" + fixed(m.f1) + "\nmatrix=";
  for (std::size_t r = 0; r < m.confusion.size(); ++r) {
    if (r) out += ';';
    for (std::size_t c = 0; c < m.confusion[r].size(); ++c) {
      if (c) out += ',';
      out += std::to_string(m.confusion[r][c]);
    }
  }
  return out + "\n";
}

std::string format_epoch_csv(const std::vector<EpochLog>& epochs) {
  std::string out = "epoch,mean_loss,train_acc\n";
  for (const auto& e : epochs) out += std::to_string(e.epoch) + "," + fixed(e.mean_loss) + "," + fixed(e.train_acc) + "\n";
  return out;
}

template Tensor<float> cross_entropy_loss(const Tensor<float>&, const std::vector<std::size_t>&);
template Tensor<double> cross_entropy_loss(const Tensor<double>&, const std::vector<std::size_t>&);
template void adam_step(const std::vector<Tensor<float>>&, OptimState<float>&);
template void adam_step(const std::vector<Tensor<double>>&, OptimState<double>&);

}  // namespace mixssm
