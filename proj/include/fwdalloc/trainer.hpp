#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fwdalloc/allocator.hpp"
#include "fwdalloc/data.hpp"
#include "fwdalloc/estimators.hpp"
#include "fwdalloc/linalg.hpp"
#include "fwdalloc/model.hpp"
#include "fwdalloc/optim.hpp"
#include "fwdalloc/rng.hpp"

namespace fwdalloc {

enum class AllocatorKind { equal, bernoulli, gaussian, deterministic_oracle };
enum class GradientSource { forward, backprop };

struct TrainConfig {
  ModelSpec model;
  GradientSource gradient_source = GradientSource::forward;
  EstimatorFamily family = EstimatorFamily::spsa_antithetic;
  double sigma = 1e-2;
  std::vector<std::pair<std::string, double>> sigma_overrides;  // layer name -> sigma
  std::vector<std::string> noise_layers;                         // empty: every affine layer
  bool clean_baseline = true;
  bool perturb_all_sites = false;

  AllocatorKind allocator = AllocatorKind::gaussian;
  double bernoulli_p = 0.5;
  bool bernoulli_loss_aware = false;  // only prune data whose clean loss is below the batch mean
  std::size_t mean_budget = 20;       // queries per datum
  std::size_t batch_size = 32;
  std::size_t initial_queries = 4;    // n0, spent on trace estimation and reused in the mean
  AllocatorOptions allocator_options;
  std::size_t allocator_interval = 1;  // re-optimize lambda every M steps, warm-started

  OptimizerConfig optimizer;
  std::size_t epochs = 1;
  double attention_grad_clip = 0.0;  // 0 disables; L2 norm cap on the attention block
  bool cycle_modules = false;        // update one affine layer per step, in order

  std::size_t trace_subset_cap = 512;
  double trace_extrapolation = 1.0;
  std::size_t cosine_every = 10;  // 0 disables the oracle comparison
  std::vector<std::string> cosine_scopes{"all"};
  std::size_t metrics_every = 1;
  std::size_t threads = 1;
  std::uint64_t seed = 0;

  // Test hook: replaces the estimated per-datum traces.
  std::optional<Vector> synthetic_traces;

  [[nodiscard]] bool needs_traces() const noexcept {
    return allocator == AllocatorKind::gaussian || allocator == AllocatorKind::deterministic_oracle;
  }
};

class TrainingBlowup : public std::runtime_error {
 public:
  TrainingBlowup(std::size_t step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

inline EstimatorKind estimator_for(const TrainConfig& cfg, const Model& model) {
  std::vector<std::size_t> layers;
  for (const auto& name : cfg.noise_layers) layers.push_back(model.layer_index(name));
  EstimatorKind kind = make_estimator(cfg.family, model, cfg.sigma, layers);
  for (const auto& [name, sigma] : cfg.sigma_overrides) {
    const std::size_t l = model.layer_index(name);
    for (auto& site : kind.sites)
      if (site.layer == l) site.sigma = sigma;
  }
  kind.clean_baseline = cfg.clean_baseline;
  kind.perturb_all_sites = cfg.perturb_all_sites;
  kind.validate(model);
  return kind;
}

inline void validate_config(const TrainConfig& cfg, const Model& model) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (cfg.batch_size == 0) fail("batch_size must be positive");
  if (cfg.mean_budget == 0) fail("mean_budget must be positive");
  if (!(cfg.optimizer.lr > 0.0)) fail("learning rate must be positive");
  if (cfg.allocator_interval == 0) fail("allocator_interval must be positive");
  if (cfg.gradient_source == GradientSource::backprop) return;
  const std::size_t pps = estimator_for(cfg, model).passes_per_sample();
  if (cfg.mean_budget % pps != 0) fail("mean_budget must be a multiple of " + std::to_string(pps));
  if (cfg.initial_queries % pps != 0) fail("initial_queries must be a multiple of " + std::to_string(pps));
  if (cfg.initial_queries >= cfg.mean_budget) fail("initial_queries * B must stay below the budget A0");
  if (cfg.needs_traces() && !cfg.synthetic_traces && cfg.initial_queries < 2 * pps)
    fail("allocator needs at least two initial samples per datum for trace estimation");
  if (cfg.allocator == AllocatorKind::bernoulli) {
    if (cfg.mean_budget % 2 != 0 || (cfg.mean_budget / 2) % pps != 0)
      fail("bernoulli allocator needs mean_budget / 2 to be a multiple of " + std::to_string(pps));
    if (cfg.mean_budget / 2 < cfg.initial_queries) fail("bernoulli allocator needs mean_budget / 2 >= initial_queries");
    if (!(cfg.bernoulli_p >= 0.0 && cfg.bernoulli_p <= 1.0)) fail("bernoulli p must be in [0, 1]");
  }
}

struct TrainState {
  Vector theta;
  Optimizer optimizer;
  std::optional<AllocatorParams> lambda;
  std::size_t step = 0;
};

inline TrainState init_state(const TrainConfig& cfg, const Model& model) {
  return TrainState{model.init_params(RngStream(cfg.seed).child(Purpose::init)),
                    Optimizer(cfg.optimizer, model.num_params()), std::nullopt, 0};
}

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double clean_loss = 0.0;
  std::vector<std::size_t> counts;
  double J = std::numeric_limits<double>::quiet_NaN();    // sum_j tr_j / counts_j
  double gap = std::numeric_limits<double>::quiet_NaN();  // J(equal) - J(det) on the traces
  std::vector<double> cosine;                             // per scope; NaN when not computed
  std::optional<double> accuracy;
  std::size_t budget = 0;          // A0
  std::size_t forward_passes = 0;  // clean passes plus every query
  bool allocator_safeguard = false;
  bool allocation_fallback = false;
};

/// Cosine between two gradients restricted to a named parameter block; NaN
/// when the oracle block is zero (undefined).
inline double cosine_to_oracle(const Model& model, std::span<const double> estimate, std::span<const double> oracle,
                               std::string_view scope) {
  require_same_size(estimate.size(), oracle.size(), "cosine_to_oracle");
  const auto idx = scope_indices(model, scope);
  const auto c = cosine_similarity(gather(estimate, idx), gather(oracle, idx));
  if (c.degenerate && norm(gather(oracle, idx)) == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return c.value;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` threads with static chunks.
/// Callers write results into per-index slots, so output order never depends
/// on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t * n / threads; i < (t + 1) * n / threads; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Computes the batch gradient and allocation for one step without touching
/// the parameters.
struct StepEstimate {
  Vector gradient;
  StepMetrics metrics;
};

inline StepEstimate estimate_step(const Model& model, TrainState& state, std::span<const Datum> batch,
                                  const TrainConfig& cfg) {
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("train_step: empty batch");
  const std::size_t t = state.step;
  const RngStream step_rng = RngStream(cfg.seed).at(Purpose::step, t);
  StepEstimate out;
  auto& m = out.metrics;
  m.step = t;
  m.budget = cfg.mean_budget * B;

  if (cfg.gradient_source == GradientSource::backprop) {
    double loss = 0.0;
    for (const auto& d : batch) loss += model.loss(state.theta, d);
    m.clean_loss = loss / static_cast<double>(B);
    m.forward_passes = B;
    out.gradient = model.oracle_gradient(state.theta, batch);
    return out;
  }

  const EstimatorKind kind = estimator_for(cfg, model);
  const std::size_t pps = kind.passes_per_sample();
  const std::size_t n0 = cfg.initial_queries;
  const std::size_t A0 = m.budget;
  const std::size_t remaining = A0 - n0 * B;
  CoordinateSubset subset = default_trace_subset(model, cfg.trace_subset_cap);
  subset.extrapolation = cfg.trace_extrapolation;

  // Clean pass and initial queries per datum.
  Vector losses(B);
  std::vector<Vector> embeddings(B);
  std::vector<GradientAccumulator> acc(B, GradientAccumulator(model.num_params(), subset.indices, pps));
  Vector traces(B, std::numeric_limits<double>::quiet_NaN());
  detail::parallel_for(B, cfg.threads, [&](std::size_t j) {
    const auto clean = model.forward(state.theta, batch[j]);
    losses[j] = clean.loss;
    embeddings[j] = clean.embedding;
    accumulate_queries(acc[j], kind, model, state.theta, batch[j], clean.loss, step_rng.at(j), 0, n0 / pps);
    if (acc[j].samples() >= 2) traces[j] = estimate_trace(acc[j].estimate(), subset.extrapolation);
  });
  if (cfg.synthetic_traces) {
    require_same_size(cfg.synthetic_traces->size(), B, "synthetic traces");
    traces = *cfg.synthetic_traces;
  }
  const bool have_traces = std::all_of(traces.begin(), traces.end(), [](double v) { return std::isfinite(v); });

  // Split the remaining budget.
  Allocation extra;
  switch (cfg.allocator) {
    case AllocatorKind::equal: extra = equal_allocation(B, remaining, pps); break;
    case AllocatorKind::bernoulli: {
      auto rng = step_rng.child(Purpose::bernoulli);
      Allocation full;
      if (cfg.bernoulli_loss_aware) {
        double mean = 0.0;
        for (double l : losses) mean += l;
        mean /= static_cast<double>(B);
        std::unique_ptr<bool[]> eligible(new bool[B]);
        for (std::size_t j = 0; j < B; ++j) eligible[j] = losses[j] < mean;
        full = sample_bernoulli_allocation(cfg.bernoulli_p, cfg.mean_budget, B, rng,
                                           std::span<const bool>(eligible.get(), B), pps);
      } else {
        full = sample_bernoulli_allocation(cfg.bernoulli_p, cfg.mean_budget, B, rng, {}, pps);
      }
      extra.raw = full.raw;
      extra.counts.resize(B);
      for (std::size_t j = 0; j < B; ++j) extra.counts[j] = full.counts[j] - n0;
      break;
    }
    case AllocatorKind::deterministic_oracle: {
      // Closed-form totals, less what each datum already spent.
      const Vector det = deterministic_optimal(traces, static_cast<double>(A0));
      Vector w(B);
      for (std::size_t j = 0; j < B; ++j) w[j] = std::max(det[j] - static_cast<double>(n0), 0.0);
      extra = realize_allocation(w, remaining, pps);
      break;
    }
    case AllocatorKind::gaussian: {
      const auto features = BatchFeatures::from_losses(losses, embeddings, static_cast<double>(cfg.mean_budget));
      const Matrix distance = embedding_distances(features.embeddings);
      if (!state.lambda || t % cfg.allocator_interval == 0) {
        AllocatorOptions opts = cfg.allocator_options;
        opts.target = AllocationTarget{static_cast<double>(n0), static_cast<double>(remaining)};
        const auto init = state.lambda.value_or(AllocatorParams::initial(static_cast<double>(cfg.mean_budget)));
        const auto res = optimize_allocator(init, traces, features, opts, step_rng.child(Purpose::allocator_grad));
        state.lambda = res.params;
        m.allocator_safeguard = res.safeguard_triggered || res.aborted;
      }
      const auto alloc = GaussianAllocator::make(*state.lambda, features.phi, distance);
      auto rng = step_rng.child(Purpose::allocation);
      extra = realize_allocation(alloc.sample_raw(rng), remaining, pps);
      break;
    }
  }
  m.allocation_fallback = extra.fallback_equal;
  m.counts.resize(B);
  for (std::size_t j = 0; j < B; ++j) m.counts[j] = n0 + extra.counts[j];

  // Remaining queries, then the batch mean in datum order.
  std::vector<Vector> means(B);
  detail::parallel_for(B, cfg.threads, [&](std::size_t j) {
    accumulate_queries(acc[j], kind, model, state.theta, batch[j], losses[j], step_rng.at(j), n0 / pps,
                       m.counts[j] / pps);
    means[j] = acc[j].estimate().mean;
  });
  out.gradient.assign(model.num_params(), 0.0);
  for (const auto& g : means) axpy(1.0 / static_cast<double>(B), g, out.gradient);

  double loss = 0.0;
  for (double l : losses) loss += l;
  m.clean_loss = loss / static_cast<double>(B);
  std::size_t queries = 0;
  for (std::size_t j = 0; j < B; ++j) queries += acc[j].queries();
  m.forward_passes = B + queries;
  if (have_traces) {
    m.J = objective_J(std::span<const std::size_t>(m.counts), traces);
    m.gap = theorem2_gap(traces, static_cast<double>(A0));
  }
  return out;
}

/// One training step at state.step: estimate, record metrics, update theta.
inline StepMetrics train_step(const Model& model, TrainState& state, std::span<const Datum> batch,
                              const TrainConfig& cfg, std::size_t total_steps = 0) {
  StepEstimate est;
  try {
    est = estimate_step(model, state, batch, cfg);
  } catch (const NumericalBlowup& e) {
    throw TrainingBlowup(state.step, e.what());
  }
  auto& m = est.metrics;
  m.cosine.assign(cfg.cosine_scopes.size(), std::numeric_limits<double>::quiet_NaN());
  if (cfg.cosine_every > 0 && state.step % cfg.cosine_every == 0) {
    const Vector oracle = model.oracle_gradient(state.theta, batch);
    for (std::size_t s = 0; s < cfg.cosine_scopes.size(); ++s)
      m.cosine[s] = cosine_to_oracle(model, est.gradient, oracle, cfg.cosine_scopes[s]);
  }

  if (cfg.attention_grad_clip > 0.0 && model.spec().kind == ModelKind::attention_block) {
    const auto idx = scope_indices(model, "attn");
    const double n = norm(gather(est.gradient, idx));
    if (n > cfg.attention_grad_clip)
      for (auto i : idx) est.gradient[i] *= cfg.attention_grad_clip / n;
  }

  const double lr = scheduled_lr(cfg.optimizer, state.step, total_steps);
  if (cfg.cycle_modules) {
    const auto& layer = model.layers()[state.step % model.layers().size()];
    const Vector before = state.theta;
    state.optimizer.step(state.theta, est.gradient, lr);
    for (std::size_t i = 0; i < before.size(); ++i)
      if (i < layer.first_param() || i >= layer.end_param()) state.theta[i] = before[i];
  } else {
    state.optimizer.step(state.theta, est.gradient, lr);
  }
  if (!detail::all_finite(state.theta)) throw TrainingBlowup(state.step, "non-finite parameters after update");
  ++state.step;
  return m;
}

inline double accuracy(const Model& model, std::span<const double> theta, std::span<const Datum> data) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hits = 0;
  for (const auto& d : data) hits += model.predict(theta, d.x) == d.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct TrainResult {
  Vector theta;
  std::vector<StepMetrics> history;
  double final_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t total_forward_passes = 0;
  std::size_t steps = 0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

/// epochs * ceil(N / B) steps over reshuffled, non-overlapping batches. Test
/// accuracy (train accuracy when there is no test split) is attached to the
/// last step of every epoch.
inline TrainResult train(const Model& model, const TrainConfig& cfg, const Dataset& data,
                         const MetricsSink& sink = {}) {
  if (data.train.empty()) throw std::invalid_argument("train: empty training set");
  validate_config(cfg, model);
  TrainState state = init_state(cfg, model);
  TrainResult result;
  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const auto& eval = data.test.empty() ? data.train : data.test;
  std::vector<std::size_t> order(n);
  std::vector<Datum> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto rng = RngStream(cfg.seed).at(Purpose::shuffle, epoch);
    shuffle(order, rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      batch.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i)
        batch.push_back(data.train[order[i]]);
      StepMetrics m = train_step(model, state, batch, cfg, total_steps);
      m.epoch = epoch;
      result.total_forward_passes += m.forward_passes;
      const bool last = b + 1 == steps_per_epoch;
      if (last) m.accuracy = accuracy(model, state.theta, eval);
      if (last || m.step % std::max<std::size_t>(1, cfg.metrics_every) == 0) {
        if (sink) sink(m);
        result.history.push_back(std::move(m));
      }
    }
  }
  result.theta = state.theta;
  result.steps = state.step;
  result.final_accuracy = accuracy(model, result.theta, eval);
  return result;
}

}  // namespace fwdalloc
