// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <limits>
#include <numbers>

#include "sgr/config.hpp"
#include "sgr/dataio.hpp"

namespace sgr {

struct SgdState {
  std::vector<Tensor> velocity;
};

// v ← m·v + (g + wd·p); p ← p − lr·v. Velocity slots are created on first use.
inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, SgdState& state, double lr,
                     double momentum, double weight_decay) {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: parameter and gradient counts differ");
  if (state.velocity.size() < params.size()) state.velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    require_same_shape(p, g, "sgd_step");
    Tensor& v = state.velocity[i];
    if (!v.same_shape(p)) v = Tensor(p.shape());
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + (g[j] + weight_decay * p[j]);
      p[j] -= lr * v[j];
    }
    require_finite(p, "sgd_step");
  }
}

// Learning rate for `epoch` (0-based); cosine anneals to 0 over cfg.epochs.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.schedule == Schedule::Constant || cfg.epochs == 0) return cfg.lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Backbone plus the last module's head.
inline EvalResult evaluate(const Network& net, const Dataset& ds, std::size_t chunk = 1024) {
  validate(ds);
  if (ds.classes != net.classes) throw std::invalid_argument("evaluate: dataset class count differs from network");
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = network_logits(net, gather_rows(ds.features, idx));
    std::span<const std::size_t> y(ds.labels.data() + start, end - start);
    loss += softmax_cross_entropy(logits, y) * static_cast<double>(end - start);
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == y[i];
  }
  const auto n = static_cast<double>(ds.size());
  return {loss / n, static_cast<double>(correct) / n};
}

struct StageSpan {
  std::size_t stage = 0;
  std::size_t batch = 0;
  double start = 0.0;  // seconds since run start
  double end = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  double sgr_mean = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> sgr;  // modules 2..K; NaN when not measured
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<StageSpan> spans;  // pipeline runs only
};

// State visible to a per-batch observer after every module has updated.
struct BatchTrace {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  const Tensor* batch = nullptr;
  std::span<const std::size_t> labels;
  std::span<const Tensor> module_inputs;  // input each module consumed on this batch
};

using BatchObserver = std::function<void(const Network&, const BatchTrace&)>;

inline StepOptions step_options(const TrainConfig& cfg, std::size_t k) {
  StepOptions o;
  o.lambda = cfg.lambda;
  o.normalize = cfg.normalize_deltas;
  o.sgr = k == 0 ? SgrUse::Off : (cfg.mode == TrainMode::Sgr ? SgrUse::Optimize : SgrUse::Measure);
  return o;
}

// module_local_step followed by the SGD update of module k.
inline StepResult local_update(LocalModule& m, SgdState& state, const Tensor& input,
                               std::span<const std::size_t> labels, const std::optional<Tensor>& delta_pre,
                               const TrainConfig& cfg, std::size_t k, double lr) {
  StepResult r = module_local_step(m, input, labels, delta_pre, step_options(cfg, k));
  const auto ps = parameters(m);
  sgd_step(ps, r.grads, state, lr, cfg.momentum, cfg.weight_decay);
  m.delta_out = r.delta_out;
  return r;
}

struct GlobalStepResult {
  double loss = 0.0;
  Tensor logits;
};

// End-to-end backpropagation through every block and the last head only.
inline GlobalStepResult global_update(Network& net, std::vector<SgdState>& states, const Tensor& input,
                                      std::span<const std::size_t> labels, const TrainConfig& cfg, double lr) {
  Tape tape;
  Var h = tape.constant(input);
  std::vector<Var> params;
  std::vector<std::size_t> owner;
  for (std::size_t k = 0; k < net.modules.size(); ++k) {
    h = record_block(tape, net.modules[k].block, h, true, params);
    owner.resize(params.size(), k);
  }
  Var logits = record_head(tape, net.modules.back().head, h, true, params);
  owner.resize(params.size(), net.modules.size() - 1);
  Var loss = softmax_cross_entropy(logits, labels);
  GlobalStepResult r{loss.value().item(), logits.value()};
  std::vector<Tensor> grads = tape.grad(loss, params);
  std::size_t at = 0;
  for (std::size_t k = 0; k < net.modules.size(); ++k) {
    std::size_t n = 0;
    while (at + n < owner.size() && owner[at + n] == k) ++n;
    auto ps = parameters(net.modules[k]);
    ps.resize(n);
    sgd_step(ps, std::span<const Tensor>(grads.data() + at, n), states[k], lr, cfg.momentum, cfg.weight_decay);
    at += n;
  }
  return r;
}

namespace detail {

inline void check_setup(const Network& net, const Dataset& train, const Dataset& test, const TrainConfig& cfg) {
  validate(cfg);
  validate(train);
  validate(test);
  if (net.modules.empty()) throw ConfigError("network has no modules");
  if (net.modules.size() != cfg.modules)
    throw ConfigError("config modules = " + std::to_string(cfg.modules) + " but network has " +
                      std::to_string(net.modules.size()));
  if (train.classes != net.classes || test.classes != net.classes)
    throw ConfigError("dataset class count differs from the network heads");
  if (train.dim() != net.in_width() || test.dim() != net.in_width())
    throw ConfigError("dataset feature width differs from the network input");
}

// Running sums for one epoch of training statistics.
struct EpochAccumulator {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t samples = 0;
  std::vector<double> sgr;
  std::size_t batches = 0;

  explicit EpochAccumulator(std::size_t K) : sgr(K > 0 ? K - 1 : 0, 0.0) {}

  void add_batch(double batch_loss, const Tensor& logits, std::span<const std::size_t> y) {
    loss += batch_loss * static_cast<double>(y.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
    samples += y.size();
  }

  EpochRecord finish(std::size_t epoch, bool sgr_measured) const {
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = loss / static_cast<double>(samples);
    r.train_acc = static_cast<double>(correct) / static_cast<double>(samples);
    r.sgr.assign(sgr.size(), std::numeric_limits<double>::quiet_NaN());
    if (sgr_measured && !sgr.empty()) {
      double s = 0.0;
      for (std::size_t k = 0; k < sgr.size(); ++k) {
        r.sgr[k] = sgr[k] / static_cast<double>(batches);
        s += r.sgr[k];
      }
      r.sgr_mean = s / static_cast<double>(sgr.size());
    }
    return r;
  }
};

}  // namespace detail

// Mini-batch order for one epoch, drawn from the run's shuffling stream.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

inline TrainReport train(Network& net, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                         const BatchObserver& observer = {}) {
  detail::check_setup(net, train_set, test_set, cfg);
  const std::size_t K = net.modules.size();
  std::vector<SgdState> states(K);
  auto rng = make_rng(cfg.seed, 0x5A4D);
  TrainReport report;
  std::size_t iteration = 0;
  std::vector<Tensor> inputs(K);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = scheduled_lr(cfg, e);
    const auto perm = epoch_order(train_set.size(), rng);
    detail::EpochAccumulator acc(K);
    for (std::size_t start = 0; start < perm.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(perm.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(perm.data() + start, end - start);
      Tensor x = gather_rows(train_set.features, idx);
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(train_set.labels[i]);

      if (cfg.mode == TrainMode::GlobalBp) {
        inputs[0] = x;
        GlobalStepResult g = global_update(net, states, x, y, cfg, lr);
        acc.add_batch(g.loss, g.logits, y);
      } else {
        std::optional<Tensor> delta;
        inputs[0] = x;
        for (std::size_t k = 0; k < K; ++k) {
          StepResult r = local_update(net.modules[k], states[k], inputs[k], y, delta, cfg, k, lr);
          if (k > 0) acc.sgr[k - 1] += r.loss.sgr;
          if (k + 1 < K) {
            inputs[k + 1] =
                cfg.mode == TrainMode::Reforward ? forward_module(net.modules[k], inputs[k]) : std::move(r.output);
            delta = std::move(r.delta_out);
          } else {
            acc.add_batch(r.loss.local, r.logits, y);
          }
        }
      }
      ++acc.batches;
      if (observer) observer(net, BatchTrace{e, iteration, &x, y, inputs});
      ++iteration;
    }
    EpochRecord rec = acc.finish(e, cfg.mode != TrainMode::GlobalBp);
    const EvalResult te = evaluate(net, test_set);
    rec.test_loss = te.loss;
    rec.test_acc = te.accuracy;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(std::move(rec));
  }
  return report;
}

// Each module's output is recomputed at its post-update parameters before
// feeding the next module.
inline TrainReport train_reforward(Network& net, const Dataset& train_set, const Dataset& test_set,
                                   TrainConfig cfg, const BatchObserver& observer = {}) {
  cfg.mode = TrainMode::Reforward;
  return train(net, train_set, test_set, cfg, observer);
}

struct AblationRow {
  double lambda = 0.0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::vector<double> accs;
};

// One fresh network per (λ, seed); final test accuracy aggregated per λ.
inline std::vector<AblationRow> ablate_lambda(const std::function<Network(std::uint64_t seed)>& make_network,
                                              const Dataset& train_set, const Dataset& test_set,
                                              const std::vector<double>& lambdas,
                                              const std::vector<std::uint64_t>& seeds, TrainConfig cfg) {
  if (lambdas.empty()) throw std::invalid_argument("ablate_lambda needs at least one lambda");
  if (seeds.empty()) throw std::invalid_argument("ablate_lambda needs at least one seed");
  cfg.mode = TrainMode::Sgr;
  std::vector<AblationRow> rows;
  for (double lam : lambdas) {
    AblationRow row;
    row.lambda = lam;
    for (std::uint64_t s : seeds) {
      TrainConfig c = cfg;
      c.lambda = lam;
      c.seed = s;
      Network net = make_network(s);
      TrainReport rep = train(net, train_set, test_set, c);
      row.accs.push_back(rep.epochs.empty() ? evaluate(net, test_set).accuracy : rep.epochs.back().test_acc);
    }
    const auto n = static_cast<double>(row.accs.size());
    for (double a : row.accs) row.mean_acc += a / n;
    for (double a : row.accs) row.std_acc += (a - row.mean_acc) * (a - row.mean_acc);
    row.std_acc = row.accs.size() > 1 ? std::sqrt(row.std_acc / (n - 1.0)) : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace sgr
