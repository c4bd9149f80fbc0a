#include "dysmm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include "dysmm/error.hpp"

namespace dysmm {

namespace {

constexpr double kProbFloor = 1e-7;

std::vector<double> resolve_weights(std::span<const double> weights, std::size_t n) {
  if (weights.empty()) return std::vector<double>(n, 1.0);
  if (weights.size() != n) throw ShapeError("loss: weight count does not match batch");
  return {weights.begin(), weights.end()};
}

}  // namespace

bool TrainConfig::is_reference() const {
  return lr == 1e-4 && plateau_patience == 5 && early_stop_patience == 3;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train: lr must be positive");
  if (plateau_patience < 1 || early_stop_patience < 1) throw ConfigError("train: patiences must be at least 1");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("train: plateau_factor must be in (0, 1)");
  if (min_delta < 0) throw ConfigError("train: min_delta must be non-negative");
  if (max_epochs < 1 || batch_size < 1) throw ConfigError("train: max_epochs and batch_size must be positive");
  if (!(validation_fraction > 0 && validation_fraction < 1))
    throw ConfigError("train: validation_fraction must be in (0, 1)");
}

LossKind loss_for(Task task) { return task == Task::detection ? LossKind::bce : LossKind::cce; }

Var bce_loss(Var p, std::span<const int> labels, std::span<const double> weights) {
  const std::size_t B = labels.size();
  if (p.value().rank() != 2 || p.dim(0) != B || p.dim(1) != 1)
    throw ShapeError("bce_loss: expected [" + std::to_string(B) + ", 1], got " + shape_str(p.shape()));
  for (int y : labels)
    if (y != 0 && y != 1) throw InvariantError("bce_loss: label " + std::to_string(y) + " outside {0, 1}");
  auto w = resolve_weights(weights, B);
  double wsum = 0, loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double q = std::clamp(p.value()[b], kProbFloor, 1 - kProbFloor);
    loss -= w[b] * (labels[b] ? std::log(q) : std::log(1 - q));
    wsum += w[b];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  const std::size_t ip = p.id();
  return p.tape().record("bce_loss", Tensor::scalar(loss / wsum), {p},
                         [ip, ys = std::move(ys), w = std::move(w), wsum](const Tensor& g, const Tensor&, Tape& tp) {
                           const Tensor& pv = tp.value(ip);
                           Tensor& gp = tp.grad_slot(ip);
                           for (std::size_t b = 0; b < ys.size(); ++b) {
                             const double q = pv[b];
                             if (q < kProbFloor || q > 1 - kProbFloor) continue;
                             const double d = ys[b] ? -1.0 / q : 1.0 / (1 - q);
                             gp[b] += g[0] * w[b] * d / wsum;
                           }
                         });
}

Var cce_loss(Var probs, std::span<const int> labels, std::span<const double> weights) {
  const std::size_t B = labels.size();
  if (probs.value().rank() != 2 || probs.dim(0) != B)
    throw ShapeError("cce_loss: expected [" + std::to_string(B) + ", K], got " + shape_str(probs.shape()));
  const std::size_t K = probs.dim(1);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw InvariantError("cce_loss: class " + std::to_string(y) + " outside 0.." + std::to_string(K - 1));
  auto w = resolve_weights(weights, B);
  double wsum = 0, loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    loss -= w[b] * std::log(std::clamp(probs.value()[b * K + labels[b]], kProbFloor, 1 - kProbFloor));
    wsum += w[b];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  const std::size_t ip = probs.id();
  return probs.tape().record("cce_loss", Tensor::scalar(loss / wsum), {probs},
                             [ip, K, ys = std::move(ys), w = std::move(w), wsum](const Tensor& g, const Tensor&, Tape& tp) {
                               const Tensor& pv = tp.value(ip);
                               Tensor& gp = tp.grad_slot(ip);
                               for (std::size_t b = 0; b < ys.size(); ++b) {
                                 const double q = pv[b * K + ys[b]];
                                 if (q < kProbFloor || q > 1 - kProbFloor) continue;
                                 gp[b * K + ys[b]] -= g[0] * w[b] / (q * wsum);
                               }
                             });
}

// ---------------------------------------------------------------------------

OptimizerState make_optimizer_state(const ParameterStore& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape(), 0.0);
    s.v.emplace_back(p.value.shape(), 0.0);
  }
  return s;
}

void adam_step(ParameterStore& params, const std::vector<Tensor>& grads, OptimizerState& s, double lr) {
  if (grads.size() != params.size() || s.m.size() != params.size())
    throw ShapeError("adam_step: gradient/state count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape())
      throw ShapeError("adam_step: gradient shape mismatch for " + params[i].name);
    if (!grads[i].all_finite()) throw NonFiniteError("adam_step: non-finite gradient for " + params[i].name);
  }
  ++s.step;
  const double c1 = 1 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    const auto g = grads[i].data();
    auto m = s.m[i].data();
    auto v = s.v[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1 - s.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------

double reduce_on_plateau(double val_loss, double lr, PlateauState& s, const TrainConfig& c) {
  if (s.best - val_loss >= c.min_delta) {
    s.best = val_loss;
    s.wait = 0;
    return lr;
  }
  if (++s.wait >= c.plateau_patience) {
    s.wait = 0;
    ++s.reductions;
    return lr * c.plateau_factor;
  }
  return lr;
}

EarlyStopDecision early_stop_check(std::span<const double> losses, std::size_t patience, double min_delta) {
  EarlyStopDecision d;
  std::size_t wait = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    if (d.best_loss - losses[e] >= min_delta) {
      d.best_loss = losses[e];
      d.best_epoch = e + 1;
      wait = 0;
    } else if (++wait >= patience) {
      d.stop = true;
      break;
    }
  }
  return d;
}

TrainingController::TrainingController(const TrainConfig& config) : config_(config), lr_(config.lr) {
  config_.validate();
}

EpochAction TrainingController::observe(double val_loss) {
  ++epoch_;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch_;
  }
  const bool improved = plateau_.best - val_loss >= config_.min_delta;
  const double before = lr_;
  lr_ = reduce_on_plateau(val_loss, lr_, plateau_, config_);
  if (lr_ != before) {
    stop_wait_ = 0;
    return EpochAction::lr_reduced;
  }
  if (improved) {
    stop_wait_ = 0;
  } else if (armed() && ++stop_wait_ >= config_.early_stop_patience) {
    return EpochAction::stop;
  }
  return EpochAction::proceed;
}

// ---------------------------------------------------------------------------

BatchData make_batch(std::span<const Example* const> items) {
  std::vector<const Tensor*> mels;
  std::vector<const TokenSequence*> words;
  BatchData b;
  for (const Example* e : items) {
    mels.push_back(e->features);
    words.push_back(&e->tokens);
    b.labels.push_back(e->label);
  }
  b.speech = make_speech_batch(mels);
  b.text = make_text_batch(words);
  return b;
}

Var batch_loss(Model& model, Tape& tape, const BatchData& batch, LossKind loss, Mode mode, Rng& rng,
               std::span<const double> weights) {
  auto out = model.forward(tape, batch.speech, batch.text, mode, rng);
  return loss == LossKind::bce ? bce_loss(out.scores, batch.labels, weights)
                               : cce_loss(out.scores, batch.labels, weights);
}

ValidationSplit split_validation(const std::vector<Example>& examples, double fraction, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < examples.size(); ++i) by_speaker[examples[i].speaker].push_back(i);
  std::vector<bool> held(examples.size(), false);
  Rng rng = Rng(seed).split("validation");
  for (auto& [speaker, idx] : by_speaker) {
    rng.shuffle(idx.begin(), idx.end());
    std::size_t n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (n == 0 && idx.size() >= 2) n = 1;
    for (std::size_t k = 0; k < n; ++k) held[idx[k]] = true;
  }
  ValidationSplit s;
  for (std::size_t i = 0; i < examples.size(); ++i) (held[i] ? s.validation : s.train).push_back(examples[i]);
  return s;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "epoch,train_loss,val_loss,val_acc,lr,seconds\n";
  os.precision(10);
  for (const auto& r : epochs)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_acc << ',' << r.lr << ',' << r.seconds
       << '\n';
}

Snapshot Snapshot::of(const Model& model) {
  Snapshot s;
  for (const auto& p : model.parameters()) s.params.push_back(p.value);
  s.batchnorm = model.batchnorm_states();
  return s;
}

void Snapshot::restore(Model& model) const {
  for (std::size_t i = 0; i < params.size(); ++i) model.parameters()[i].value = params[i];
  model.batchnorm_states() = batchnorm;
}

EvalResult evaluate(Model& model, const std::vector<Example>& examples, std::size_t batch_size) {
  EvalResult r;
  if (examples.empty()) return r;
  const Task task = model.config().task;
  Rng unused(0);
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<const Example*> items;
    for (std::size_t i = start; i < end; ++i) items.push_back(&examples[i]);
    BatchData batch = make_batch(items);
    Tape tape;
    auto out = model.forward(tape, batch.speech, batch.text, Mode::eval, unused);
    Var loss = task == Task::detection ? bce_loss(out.scores, batch.labels) : cce_loss(out.scores, batch.labels);
    loss_sum += loss.value().item() * static_cast<double>(items.size());
    const auto& sc = out.scores.value();
    const std::size_t U = sc.dim(1);
    auto decisions = decide(sc, task);
    for (std::size_t b = 0; b < items.size(); ++b) {
      r.predictions.push_back(decisions[b]);
      r.scores.emplace_back(sc.data().begin() + b * U, sc.data().begin() + (b + 1) * U);
      if (decisions[b] == batch.labels[b]) ++correct;
    }
  }
  r.loss = loss_sum / static_cast<double>(examples.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
  return r;
}

TrainLog train_model(Model& model, const std::vector<Example>& train, const std::vector<Example>& validation,
                     const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw InvariantError("train_model: empty training set");
  if (validation.empty()) throw InvariantError("train_model: empty validation set");
  if (config.loss != loss_for(model.config().task)) throw ConfigError("train_model: loss does not match the task");

  std::vector<double> class_weight;
  if (config.class_weighting) {
    std::map<int, std::size_t> counts;
    for (const auto& e : train) ++counts[e.label];
    class_weight.assign(model.config().n_classes(), 0.0);
    for (auto [label, n] : counts)
      class_weight.at(static_cast<std::size_t>(label)) =
          static_cast<double>(train.size()) / static_cast<double>(counts.size() * n);
  }

  const Rng root(config.seed);
  OptimizerState opt = make_optimizer_state(model.parameters());
  TrainingController control(config);
  TrainLog log;
  Snapshot best = Snapshot::of(model);
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler = root.split("shuffle", epoch);
    shuffler.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Example*> items;
      std::vector<double> weights;
      for (std::size_t i = start; i < end; ++i) {
        items.push_back(&train[order[i]]);
        if (!class_weight.empty()) weights.push_back(class_weight[static_cast<std::size_t>(train[order[i]].label)]);
      }
      BatchData batch = make_batch(items);
      Rng dropout_rng = root.split("dropout", epoch * 1000003ULL + batch_index);
      Tape tape;
      try {
        Var loss = batch_loss(model, tape, batch, config.loss, Mode::train, dropout_rng, weights);
        tape.backward(loss);
        adam_step(model.parameters(), tape.parameter_grads(model.parameters()), opt, control.lr());
        loss_sum += loss.value().item() * static_cast<double>(items.size());
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
    }

    EvalResult val = evaluate(model, validation, config.batch_size);
    if (!std::isfinite(val.loss))
      throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ": validation loss");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_loss = val.loss;
    rec.val_acc = val.accuracy;
    rec.lr = control.lr();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);

    const auto action = control.observe(val.loss);
    if (control.best_epoch() == epoch) best = Snapshot::of(model);
    if (action == EpochAction::stop) {
      log.stopped_early = true;
      break;
    }
  }
  best.restore(model);
  log.best_epoch = control.best_epoch();
  log.best_val_loss = control.best_loss();
  return log;
}

}  // namespace dysmm
