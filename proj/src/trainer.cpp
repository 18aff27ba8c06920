#include "nlran/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nlran/random.hpp"

namespace nlran {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
  if (time_budget < 0.0) throw ConfigError("train.time_budget must be >= 0");
}

json TrainConfig::to_json() const {
  return json{{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"patience", patience},
              {"max_epochs", max_epochs},       {"seed", seed},             {"momentum", momentum},
              {"time_budget", time_budget}};
}

TrainConfig TrainConfig::from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train section must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "patience") c.patience = value.get<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "time_budget") c.time_budget = value.get<double>();
      else throw ConfigError("unknown key train." + key);
    } catch (const json::exception& e) {
      throw ConfigError("train." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

template <typename T>
void sgd_step(Tensor<T>& weights, const Tensor<T>& grads, double lr) {
  if (weights.shape() != grads.shape()) {
    throw ShapeError("sgd_step: weight " + to_string(weights.shape()) + " vs grad " + to_string(grads.shape()));
  }
  if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be > 0");
  const T step = static_cast<T>(lr);
  T* w = weights.data();
  const T* g = grads.data();
  for (std::size_t i = 0; i < weights.size(); ++i) w[i] -= step * g[i];
}

template <typename T>
SgdOptimizer<T>::SgdOptimizer(ParameterStore<T>& params, double lr, double momentum)
    : params_(&params), lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (momentum_ > 0.0) {
    for (const auto& p : params) velocity_.emplace_back(p->value.shape());
  }
}

template <typename T>
void SgdOptimizer<T>::step() {
  for (std::size_t i = 0; i < params_->size(); ++i) {
    auto& p = (*params_)[i];
    if (p.grad.empty()) continue;
    if (momentum_ == 0.0) {
      sgd_step(p.value, p.grad, lr_);
      continue;
    }
    auto& v = velocity_[i];
    const T m = static_cast<T>(momentum_);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = m * v[k] + p.grad[k];
    sgd_step(p.value, v, lr_);
  }
}

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

bool EarlyStopping::update(std::size_t epoch, double metric, double tie_loss) {
  const bool better = !best_epoch_ || metric > best_metric_ || (metric == best_metric_ && tie_loss < best_loss_);
  if (better) {
    best_epoch_ = epoch;
    best_metric_ = metric;
    best_loss_ = tie_loss;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return better;
}

json EpochRecord::to_json() const {
  return json{{"epoch", epoch},       {"train_loss", train_loss}, {"val_loss", val_loss}, {"val_accuracy", val_accuracy},
              {"val_f1", val_f1},     {"seconds", seconds},       {"improved", improved}};
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) out += e.to_json().dump() + "\n";
  return out;
}

template <typename T>
Tensor<T> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                     std::size_t count) {
  if (count == 0 || first + count > order.size()) throw InternalError("make_batch: range outside the order");
  const Shape& s = samples[order[first]].input.shape();
  Shape shape{count};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor<T> batch(shape);
  const std::size_t stride = numel(s);
  for (std::size_t b = 0; b < count; ++b) {
    const auto& in = samples[order[first + b]].input;
    if (in.shape() != s) throw ShapeError("make_batch: samples differ in shape");
    std::copy(in.data(), in.data() + stride, batch.data() + b * stride);
  }
  return batch;
}

namespace {

std::vector<int> labels_of(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t first,
                           std::size_t count) {
  std::vector<int> out(count);
  for (std::size_t b = 0; b < count; ++b) out[b] = samples[order[first + b]].label;
  return out;
}

template <typename T>
std::vector<Tensor<T>> snapshot(const ParameterStore<T>& store) {
  std::vector<Tensor<T>> out;
  out.reserve(store.size());
  for (const auto& p : store) out.push_back(p->value);
  return out;
}

}  // namespace

template <typename T>
Evaluation evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw DataError("evaluate: empty split");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be >= 1");
  const std::size_t k = model.config().num_classes;
  Evaluation ev;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, samples.size() - first);
    const auto logits = model.predict_logits(make_batch<T>(samples, order, first, count));
    const auto probs = softmax_rows(logits);
    for (std::size_t b = 0; b < count; ++b) {
      const auto& sample = samples[first + b];
      std::vector<double> row(k);
      for (std::size_t c = 0; c < k; ++c) row[c] = static_cast<double>(probs[b * k + c]);
      if (sample.label < 0 || static_cast<std::size_t>(sample.label) >= k) {
        throw DataError("evaluate: label of " + sample.id + " outside [0," + std::to_string(k) + ")");
      }
      loss_sum -= std::log(std::max(row[static_cast<std::size_t>(sample.label)], 1e-300));
      ev.predicted.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      ev.scores.push_back(std::move(row));
      ev.labels.push_back(sample.label);
      ev.ids.push_back(sample.id);
    }
  }
  ev.mean_loss = loss_sum / double(samples.size());
  ev.report = evaluate_scores(ev.scores, ev.labels, k);
  return ev;
}

template <typename T>
TrainLog train(Model<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
               const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  if (val_set.empty()) throw DataError("train: empty validation split");

  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  Rng rng(cfg.seed ^ 0x7261696e5f6f7264ULL);
  SgdOptimizer<T> optimizer(model.parameters(), cfg.learning_rate, cfg.momentum);
  EarlyStopping stopper(cfg.patience);
  TrainLog log;
  std::vector<Tensor<T>> best = snapshot(model.parameters());
  std::ofstream log_file;
  if (!options.log_path.empty()) {
    log_file.open(options.log_path, std::ios::trunc);
    if (!log_file) throw Error("cannot write training log " + options.log_path);
  }

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto epoch_start = clock::now();
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch_index) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      model.parameters().zero_grad();
      Tape<T> tape;
      try {
        auto x = tape.constant(make_batch<T>(train_set, order, first, count));
        auto loss = ops::softmax_cross_entropy(model.forward(tape, x), labels_of(train_set, order, first, count));
        tape.backward(loss);
        loss_sum += static_cast<double>(loss.value().item()) * double(count);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
      optimizer.step();
    }

    const auto ev = evaluate(model, val_set, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(order.size());
    rec.val_loss = ev.mean_loss;
    rec.val_accuracy = ev.report.accuracy;
    rec.val_f1 = ev.report.f1;
    rec.improved = stopper.update(epoch, ev.report.f1, ev.mean_loss);
    rec.seconds = std::chrono::duration<double>(clock::now() - epoch_start).count();
    if (rec.improved) {
      best = snapshot(model.parameters());
      if (!options.checkpoint_path.empty()) save_checkpoint(model, options.checkpoint_path, std::int64_t(epoch), rec.val_f1);
    }
    log.epochs.push_back(rec);
    if (log_file) log_file << rec.to_json().dump() << "\n" << std::flush;
    if (options.on_epoch) options.on_epoch(rec);

    if (stopper.should_stop()) {
      log.stop_reason = "patience";
      break;
    }
    const double elapsed = std::chrono::duration<double>(clock::now() - started).count();
    if (cfg.time_budget > 0.0 && elapsed >= cfg.time_budget) {
      log.stop_reason = "time_budget";
      break;
    }
  }
  if (log.stop_reason.empty()) log.stop_reason = "max_epochs";

  auto& store = model.parameters();
  for (std::size_t i = 0; i < store.size(); ++i) store[i].value = best[i];
  store.zero_grad();
  log.best_epoch = *stopper.best_epoch();
  log.best_metric = stopper.best_metric();
  log.best_checkpoint = options.checkpoint_path;
  return log;
}

template void sgd_step(Tensor<float>&, const Tensor<float>&, double);
template void sgd_step(Tensor<double>&, const Tensor<double>&, double);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;
template Tensor<float> make_batch(const std::vector<Sample>&, const std::vector<std::size_t>&, std::size_t, std::size_t);
template Tensor<double> make_batch(const std::vector<Sample>&, const std::vector<std::size_t>&, std::size_t,
                                   std::size_t);
template Evaluation evaluate(const Model<float>&, const std::vector<Sample>&, std::size_t);
template Evaluation evaluate(const Model<double>&, const std::vector<Sample>&, std::size_t);
template TrainLog train(Model<float>&, const std::vector<Sample>&, const std::vector<Sample>&, const TrainConfig&,
                        const TrainOptions&);
template TrainLog train(Model<double>&, const std::vector<Sample>&, const std::vector<Sample>&, const TrainConfig&,
                        const TrainOptions&);

}  // namespace nlran
