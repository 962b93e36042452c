// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <barrier>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

#include "sgr/train.hpp"

namespace sgr {

// Bounded queue with one producer and one consumer. close() wakes both sides;
// push on a closed queue returns false, pop returns nullopt once drained.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ < 1) throw std::invalid_argument("BoundedQueue capacity must be >= 1");
  }

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

enum class PipelineMode : std::uint8_t { Lockstep, Async };

// What stage k hands to stage k+1: the detached activation, the labels, and
// the delta the receiving stage reconciles against. `end` marks shutdown.
struct StageMessage {
  Tensor activation;
  std::shared_ptr<const std::vector<std::size_t>> labels;
  std::optional<Tensor> delta;
  std::size_t epoch = 0;
  std::size_t batch = 0;
  bool last_in_epoch = false;
  bool end = false;
};

// Stage k owns module k and runs on its own thread. Lockstep advances all
// stages one tick at a time (stage k handles batch τ−k at tick τ), which
// reproduces sequential training bit-for-bit. Async lets stages run ahead.
inline TrainReport pipeline_train(Network& net, const Dataset& train_set, const Dataset& test_set,
                                  const TrainConfig& cfg, PipelineMode mode, std::size_t queue_depth = 1) {
  detail::check_setup(net, train_set, test_set, cfg);
  const std::size_t K = net.modules.size();
  if (cfg.mode == TrainMode::GlobalBp) throw ConfigError("pipeline training needs a local mode");
  if (mode == PipelineMode::Lockstep) queue_depth = 1;

  const std::size_t per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;

  std::vector<std::unique_ptr<BoundedQueue<StageMessage>>> queues;
  for (std::size_t k = 0; k + 1 < K; ++k) queues.push_back(std::make_unique<BoundedQueue<StageMessage>>(queue_depth));

  std::vector<std::vector<LocalModule>> snapshots(cfg.epochs, std::vector<LocalModule>(K));
  std::vector<std::vector<double>> sgr_sums(cfg.epochs, std::vector<double>(K, 0.0));
  std::vector<detail::EpochAccumulator> last_stage(cfg.epochs, detail::EpochAccumulator(K));
  std::vector<std::vector<StageSpan>> spans(K);
  std::vector<std::exception_ptr> errors(K);
  std::barrier sync(static_cast<std::ptrdiff_t>(K));
  const auto t0 = std::chrono::steady_clock::now();
  auto now = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto stage = [&](std::size_t k) {
    const bool lockstep = mode == PipelineMode::Lockstep;
    bool dropped = false;
    auto leave_barrier = [&] {
      if (lockstep && !dropped) {
        dropped = true;
        sync.arrive_and_drop();
      }
    };
    try {
      LocalModule& m = net.modules[k];
      SgdState state;
      auto rng = make_rng(cfg.seed, 0x5A4D);
      std::vector<std::size_t> perm;

      // Next input for this stage; nullopt means shut down.
      auto next_input = [&](std::size_t t) -> std::optional<StageMessage> {
        if (k > 0) {
          auto got = queues[k - 1]->pop();
          if (!got || got->end) return std::nullopt;
          return got;
        }
        StageMessage in;
        const std::size_t e = t / per_epoch, b = t % per_epoch;
        if (b == 0) perm = epoch_order(train_set.size(), rng);
        const std::size_t start = b * cfg.batch_size;
        const std::size_t end = std::min(perm.size(), start + cfg.batch_size);
        std::span<const std::size_t> idx(perm.data() + start, end - start);
        in.activation = gather_rows(train_set.features, idx);
        auto y = std::make_shared<std::vector<std::size_t>>();
        for (std::size_t i : idx) y->push_back(train_set.labels[i]);
        in.labels = std::move(y);
        in.epoch = e;
        in.batch = t;
        in.last_in_epoch = b + 1 == per_epoch;
        return in;
      };

      auto process = [&](StageMessage& in) -> bool {
        const double lr = scheduled_lr(cfg, in.epoch);
        const double s0 = now();
        StepResult r = local_update(m, state, in.activation, *in.labels, in.delta, cfg, k, lr);
        spans[k].push_back({k, in.batch, s0, now()});
        if (k > 0) sgr_sums[in.epoch][k] += r.loss.sgr;
        if (in.last_in_epoch) {
          snapshots[in.epoch][k].block = m.block;
          snapshots[in.epoch][k].head = m.head;
        }
        if (k + 1 == K) {
          last_stage[in.epoch].add_batch(r.loss.local, r.logits, *in.labels);
          return true;
        }
        StageMessage out;
        out.activation = cfg.mode == TrainMode::Reforward ? forward_module(m, in.activation) : std::move(r.output);
        out.labels = in.labels;
        out.delta = std::move(r.delta_out);
        out.epoch = in.epoch;
        out.batch = in.batch;
        out.last_in_epoch = in.last_in_epoch;
        return queues[k]->push(std::move(out));
      };

      if (lockstep) {
        for (std::size_t tick = 0; tick < total + K - 1; ++tick) {
          if (tick >= k && tick - k < total) {
            auto in = next_input(tick - k);
            if (!in || !process(*in)) break;
          }
          sync.arrive_and_wait();
        }
      } else {
        for (std::size_t t = 0; k > 0 || t < total; ++t) {
          auto in = next_input(t);
          if (!in || !process(*in)) break;
        }
      }
      if (k > 0) queues[k - 1]->close();
      if (k + 1 < K) {
        StageMessage end;
        end.end = true;
        queues[k]->push(std::move(end));
      }
      leave_barrier();
    } catch (...) {
      errors[k] = std::current_exception();
      if (k + 1 < K) queues[k]->close();
      if (k > 0) queues[k - 1]->close();
      leave_barrier();
    }
  };

  {
    std::vector<std::jthread> threads;
    for (std::size_t k = 0; k < K; ++k) threads.emplace_back(stage, k);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  TrainReport report;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    detail::EpochAccumulator acc = last_stage[e];
    acc.batches = per_epoch;
    for (std::size_t k = 1; k < K; ++k) acc.sgr[k - 1] = sgr_sums[e][k];
    EpochRecord rec = acc.finish(e, true);
    Network snap;
    snap.classes = net.classes;
    snap.modules = snapshots[e];
    const EvalResult te = evaluate(snap, test_set);
    rec.test_loss = te.loss;
    rec.test_acc = te.accuracy;
    report.epochs.push_back(std::move(rec));
  }
  for (auto& s : spans) report.spans.insert(report.spans.end(), s.begin(), s.end());
  return report;
}

// Fraction of wall time during which at least two stages were busy.
inline double stage_overlap(const std::vector<StageSpan>& spans) {
  if (spans.empty()) return 0.0;
  std::vector<std::pair<double, int>> ev;
  for (const StageSpan& s : spans) {
    ev.emplace_back(s.start, 1);
    ev.emplace_back(s.end, -1);
  }
  std::sort(ev.begin(), ev.end());
  double overlap = 0.0, prev = ev.front().first;
  int busy = 0;
  for (const auto& [t, d] : ev) {
    if (busy >= 2) overlap += t - prev;
    busy += d;
    prev = t;
  }
  const double span = ev.back().first - ev.front().first;
  return span > 0.0 ? overlap / span : 0.0;
}

}  // namespace sgr
