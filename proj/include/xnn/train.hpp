#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "xnn/autodiff.hpp"
#include "xnn/common.hpp"
#include "xnn/gpdata.hpp"
#include "xnn/models.hpp"
#include "xnn/rng.hpp"

namespace xnn {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  int epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;
  double train_seconds = 0.0, val_seconds = 0.0;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
};

inline void write_metrics_csv(const Metrics& m, const std::string& path) {
  std::ofstream os(path);
  require(bool(os), "write_metrics_csv: cannot open ", path);
  os << "epoch,split,loss,accuracy,seconds\n";
  for (const auto& e : m.epochs) {
    os << e.epoch << ",train," << e.train_loss << "," << e.train_acc << "," << e.train_seconds
       << "\n";
    os << e.epoch << ",val," << e.val_loss << "," << e.val_acc << "," << e.val_seconds << "\n";
  }
  require(bool(os), "write_metrics_csv: write failed");
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

struct AdamState {
  ParamStore m, v;
  long t = 0;
};

inline AdamState make_adam_state(const ParamStore& params) {
  return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

inline void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state,
                      const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, w] = params.item(p);
    const Tensor& g = grads.at(name);
    require(g.same_shape(w), "adam_step: gradient shape mismatch for ", name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation / training loop
// ---------------------------------------------------------------------------

inline Tensor model_input(const Model& m, const Tensor& x) {
  return m.cfg.kind == ModelKind::cnn3d ? adapt_input_cnn3d(x, m.cfg) : x;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean loss and accuracy; a sigmoid output of exactly 0.5 counts as class 1.
inline EvalResult evaluate(const Model& m, const GPSampleSet& set) {
  require(!set.samples.empty(), "evaluate: empty sample set");
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& s : set.samples) {
    const double z = forward_logit(m, model_input(m, s.x));
    loss += bce_from_logit_value(z, static_cast<double>(s.label));
    const int pred = z >= 0.0 ? 1 : 0;
    if (pred == s.label) correct++;
  }
  EvalResult r;
  r.loss = loss / static_cast<double>(set.samples.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(set.samples.size());
  return r;
}

/// Shuffled minibatches (last partial batch kept),
/// per-sample tapes, gradients averaged over the batch, Adam updates.  Train
/// metrics are accumulated from the training passes themselves.
inline Metrics train_model(Model& model, const GPSampleSet& train_set, const GPSampleSet& val_set,
                           const TrainConfig& cfg) {
  require(!train_set.samples.empty(), "train_model: empty training set");
  AdamState state = make_adam_state(model.params);
  Metrics metrics;

  std::vector<std::size_t> order(train_set.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    CounterRng shuffle_rng(cfg.seed, 0x5u + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_correct = 0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t bs = std::min(cfg.batch_size, order.size() - done);
      ParamStore grad_sum = model.params.zeros_like();
      for (std::size_t b = 0; b < bs; ++b) {
        const GPSample& s = train_set.samples[order[done + b]];
        Tape tape;
        TapeCtx ctx{&tape, &model.params, {}, {}};
        Var x = ctx.lift_input(model_input(model, s.x));
        Var logit = model_forward(model.cfg, ctx, x);
        Var loss = bce_from_logit(logit, static_cast<double>(s.label));
        const double lv = loss.value().as_scalar();
        require(std::isfinite(lv), "train_model: non-finite loss at epoch ", epoch, ", sample ",
                order[done + b]);
        epoch_loss += lv;
        const int pred = logit.value().as_scalar() >= 0.0 ? 1 : 0;
        if (pred == s.label) epoch_correct++;
        tape.backward(loss);
        ParamStore g = ctx.gradients();
        for (std::size_t p = 0; p < g.size(); ++p) {
          const auto& [name, gt] = g.item(p);
          Tensor& acc = grad_sum.at(name);
          for (std::size_t i = 0; i < gt.numel(); ++i) acc[i] += gt[i];
        }
      }
      const double inv = 1.0 / static_cast<double>(bs);
      for (std::size_t p = 0; p < grad_sum.size(); ++p) {
        auto& [name, gt] = grad_sum.item(p);
        for (std::size_t i = 0; i < gt.numel(); ++i) gt[i] *= inv;
      }
      adam_step(model.params, grad_sum, state, cfg);
      done += bs;
    }
    const auto t1 = std::chrono::steady_clock::now();

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = epoch_loss / static_cast<double>(order.size());
    em.train_acc = static_cast<double>(epoch_correct) / static_cast<double>(order.size());
    em.train_seconds = std::chrono::duration<double>(t1 - t0).count();
    if (!val_set.samples.empty()) {
      const EvalResult vr = evaluate(model, val_set);
      em.val_loss = vr.loss;
      em.val_acc = vr.accuracy;
      em.val_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
    }
    metrics.epochs.push_back(em);
  }
  return metrics;
}

}  // namespace xnn
