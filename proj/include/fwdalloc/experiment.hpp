#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fwdalloc/config.hpp"
#include "fwdalloc/data.hpp"
#include "fwdalloc/metrics.hpp"
#include "fwdalloc/trainer.hpp"

namespace fwdalloc {

struct AblationConfig {
  std::size_t seeds = 10;
  std::size_t pretrain_epochs = 5;  // backprop epochs before the gradient is frozen
  std::size_t batches = 20;         // fixed-theta batches per seed
  std::vector<std::size_t> budgets{20, 60, 120, 240};
  std::vector<AllocatorKind> allocators{AllocatorKind::equal, AllocatorKind::bernoulli, AllocatorKind::gaussian};
};

struct ExperimentConfig {
  TrainConfig train;
  DatasetSpec data;
  std::uint64_t data_seed = 0;
  std::string output_dir = "runs";
  std::string run_id = "run";
  AblationConfig ablation;
};

inline constexpr const char* output_dir_env = "FWDALLOC_OUTPUT_DIR";

namespace detail {

template <typename E>
E parse_enum(const FlatConfig& cfg, const std::string& key, E fallback,
             const std::vector<std::pair<std::string, E>>& names) {
  if (!cfg.has(key)) {
    (void)cfg.get_string(key, "");
    return fallback;
  }
  const std::string v = cfg.get_string(key, "");
  std::string options;
  for (const auto& [name, value] : names) {
    if (name == v) return value;
    options += (options.empty() ? "" : ", ") + name;
  }
  throw ConfigError(cfg.where(key) + ": '" + key + "' must be one of {" + options + "}, got '" + v + "'");
}

inline const std::vector<std::pair<std::string, AllocatorKind>>& allocator_names() {
  static const std::vector<std::pair<std::string, AllocatorKind>> names{
      {"equal", AllocatorKind::equal},
      {"ea", AllocatorKind::equal},
      {"bernoulli", AllocatorKind::bernoulli},
      {"ba", AllocatorKind::bernoulli},
      {"gaussian", AllocatorKind::gaussian},
      {"ga", AllocatorKind::gaussian},
      {"deterministic_oracle", AllocatorKind::deterministic_oracle},
      {"det", AllocatorKind::deterministic_oracle}};
  return names;
}

}  // namespace detail

inline AllocatorKind parse_allocator(const std::string& name) {
  for (const auto& [n, v] : detail::allocator_names())
    if (n == name) return v;
  throw ConfigError("unknown allocator '" + name + "' (expected ea, ba, ga or det)");
}

inline std::string allocator_label(AllocatorKind k) {
  switch (k) {
    case AllocatorKind::equal: return "ea";
    case AllocatorKind::bernoulli: return "ba";
    case AllocatorKind::gaussian: return "ga";
    case AllocatorKind::deterministic_oracle: return "det";
  }
  return "?";
}

/// Maps the flat key space onto the typed configs. Every key must be known.
inline ExperimentConfig experiment_from_flat(const FlatConfig& f) {
  ExperimentConfig e;
  auto& t = e.train;

  t.seed = f.get_u64("run.seed", 0);
  e.data_seed = f.get_u64("data.seed", t.seed);
  const char* env = std::getenv(output_dir_env);
  e.output_dir = f.get_string("run.output_dir", env && *env ? env : "runs");
  e.run_id = f.get_string("run.id", "run");
  if (e.run_id.empty() || e.run_id.find('/') != std::string::npos)
    throw ConfigError(f.where("run.id") + ": run id must be a nonempty name without '/'");
  t.threads = f.get_size("run.threads", 1);

  auto& d = e.data;
  d.kind = detail::parse_enum<DatasetKind>(f, "data.kind", DatasetKind::two_moons,
                                           {{"two_moons", DatasetKind::two_moons},
                                            {"blobs", DatasetKind::blobs},
                                            {"xor", DatasetKind::xor_clusters},
                                            {"csv", DatasetKind::csv}});
  d.n = f.get_size("data.n", d.n);
  d.noise = f.get_double("data.noise", d.noise);
  d.classes = f.get_size("data.classes", d.classes);
  d.spread = f.get_double("data.spread", d.spread);
  d.path = f.get_string("data.path", "");
  d.label_column = f.get_string("data.label_column", d.label_column);
  d.test_fraction = f.get_double("data.test_fraction", d.test_fraction);
  if (d.kind == DatasetKind::csv) {
    if (d.path.empty()) throw ConfigError("data.path is required for csv datasets");
    if (!std::filesystem::exists(d.path)) throw ConfigError(f.where("data.path") + ": no such file '" + d.path + "'");
  }

  auto& m = t.model;
  m.kind = detail::parse_enum<ModelKind>(f, "model.kind", ModelKind::mlp,
                                         {{"mlp", ModelKind::mlp}, {"attention_block", ModelKind::attention_block}});
  m.layer_sizes = f.get_size_list("model.layers", {2, 16, 2});
  m.activation = detail::parse_enum<Activation>(
      f, "model.activation", Activation::tanh,
      {{"tanh", Activation::tanh}, {"relu", Activation::relu}, {"identity", Activation::identity}});
  m.loss = detail::parse_enum<LossKind>(f, "model.loss", LossKind::cross_entropy,
                                        {{"cross_entropy", LossKind::cross_entropy}, {"mse", LossKind::mse}});
  m.bias = f.get_bool("model.bias", true);
  m.seq_len = f.get_size("model.seq_len", 1);
  m.num_heads = f.get_size("model.num_heads", 1);
  m.layer_norm = f.get_bool("model.layer_norm", false);

  const std::string family = f.get_string("estimator.family", "spsa_antithetic");
  if (family == "backprop") {
    t.gradient_source = GradientSource::backprop;
  } else if (family == "spsa_antithetic") {
    t.family = EstimatorFamily::spsa_antithetic;
  } else if (family == "spsa") {
    t.family = EstimatorFamily::spsa;
  } else if (family == "lr_activation") {
    t.family = EstimatorFamily::lr_activation;
  } else {
    throw ConfigError(f.where("estimator.family") +
                      ": 'estimator.family' must be one of {spsa_antithetic, spsa, lr_activation, backprop}, got '" +
                      family + "'");
  }
  t.sigma = f.get_double("estimator.sigma", t.sigma);
  t.noise_layers = f.get_list("estimator.noise_layers", {});
  for (const auto& item : f.get_list("estimator.sigma_overrides", {})) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError(f.where("estimator.sigma_overrides") + ": expected 'layer:sigma', got '" + item + "'");
    try {
      t.sigma_overrides.emplace_back(item.substr(0, colon), std::stod(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ConfigError(f.where("estimator.sigma_overrides") + ": bad sigma in '" + item + "'");
    }
  }
  t.clean_baseline = f.get_bool("estimator.clean_baseline", t.clean_baseline);
  t.perturb_all_sites = f.get_bool("estimator.perturb_all_sites", t.perturb_all_sites);
  t.initial_queries = f.get_size("estimator.initial_queries", t.initial_queries);
  t.trace_subset_cap = f.get_size("estimator.trace_subset_cap", t.trace_subset_cap);
  t.trace_extrapolation = f.get_double("estimator.trace_extrapolation", t.trace_extrapolation);

  if (f.has("allocator.kind")) t.allocator = parse_allocator(f.get_string("allocator.kind", "ga"));
  t.mean_budget = f.get_size("allocator.mean_budget", t.mean_budget);
  t.bernoulli_p = f.get_double("allocator.p", t.bernoulli_p);
  t.bernoulli_loss_aware = f.get_bool("allocator.loss_aware", t.bernoulli_loss_aware);
  t.allocator_interval = f.get_size("allocator.interval", t.allocator_interval);
  auto& ao = t.allocator_options;
  ao.lr = f.get_double("allocator.lr", ao.lr);
  ao.max_iters = f.get_size("allocator.max_iters", ao.max_iters);
  ao.samples = f.get_size("allocator.samples", ao.samples);
  ao.tolerance = f.get_double("allocator.tolerance", ao.tolerance);
  ao.momentum = f.get_double("allocator.momentum", ao.momentum);
  ao.window = f.get_size("allocator.window", ao.window);
  if (ao.samples == 0) throw ConfigError(f.where("allocator.samples") + ": need at least one sample");

  t.batch_size = f.get_size("train.batch_size", t.batch_size);
  t.epochs = f.get_size("train.epochs", t.epochs);
  t.optimizer.kind = detail::parse_enum<OptimizerKind>(f, "train.optimizer", OptimizerKind::adam,
                                                       {{"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd}});
  t.optimizer.lr = f.get_double("train.lr", t.optimizer.lr);
  t.optimizer.schedule = detail::parse_enum<LrSchedule>(
      f, "train.schedule", LrSchedule::constant, {{"constant", LrSchedule::constant}, {"cosine", LrSchedule::cosine}});
  t.attention_grad_clip = f.get_double("train.attention_grad_clip", t.attention_grad_clip);
  t.cycle_modules = f.get_bool("train.cycle_modules", t.cycle_modules);

  t.cosine_every = f.get_size("metrics.cosine_every", t.cosine_every);
  t.cosine_scopes = f.get_list("metrics.cosine_scopes", t.cosine_scopes);
  t.metrics_every = f.get_size("metrics.every", t.metrics_every);

  auto& a = e.ablation;
  a.seeds = f.get_size("ablate.seeds", a.seeds);
  a.pretrain_epochs = f.get_size("ablate.pretrain_epochs", a.pretrain_epochs);
  a.batches = f.get_size("ablate.batches", a.batches);
  a.budgets = f.get_size_list("ablate.budgets", a.budgets);
  if (f.has("ablate.allocators")) {
    a.allocators.clear();
    for (const auto& name : f.get_list("ablate.allocators", {})) a.allocators.push_back(parse_allocator(name));
  }

  f.require_known();
  return e;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_from_flat(FlatConfig::load(path));
}

/// Checks the model against the data and the trainer constraints; config
/// problems surface as ConfigError.
inline void check_experiment(const ExperimentConfig& e, const Dataset& data, const Model& model) {
  const auto& m = e.train.model;
  const std::size_t in = m.kind == ModelKind::mlp ? m.layer_sizes.front() : m.layer_sizes.front() * m.seq_len;
  if (in != data.num_features)
    throw ConfigError("model input size " + std::to_string(in) + " does not match the " +
                      std::to_string(data.num_features) + " dataset features");
  if (m.layer_sizes.back() != data.num_classes)
    throw ConfigError("model output size " + std::to_string(m.layer_sizes.back()) + " does not match the " +
                      std::to_string(data.num_classes) + " dataset classes");
  try {
    validate_config(e.train, model);
    for (const auto& s : e.train.cosine_scopes) (void)scope_indices(model, s);
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
}

inline Model build_model(const ModelSpec& spec) {
  try {
    return Model(spec);
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("model: ") + err.what());
  }
}

/// Loads the configured dataset; an mse model regresses one-hot labels.
inline Dataset load_experiment_data(const ExperimentConfig& e) {
  Dataset data;
  try {
    data = load_dataset(e.data, e.data_seed);
  } catch (const DatasetError& err) {
    throw ConfigError(err.what());
  }
  if (e.train.model.loss == LossKind::mse)
    for (auto* split : {&data.train, &data.test})
      for (auto& d : *split) {
        d.target.assign(data.num_classes, 0.0);
        d.target[static_cast<std::size_t>(d.label)] = 1.0;
      }
  return data;
}

struct RunOptions {
  bool overwrite = false;
  std::optional<std::size_t> threads;
  std::FILE* log = stdout;
};

struct RunSummary {
  std::string metrics_path;
  double accuracy = 0.0;
  std::size_t forward_passes = 0;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
};

/// Trains per the config and writes <output_dir>/<run_id>.csv row by row.
/// Throws ConfigError for bad configs and TrainingBlowup for divergence.
inline RunSummary run_experiment(ExperimentConfig e, const RunOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (opts.threads) e.train.threads = *opts.threads;
  const Dataset data = load_experiment_data(e);
  if (opts.log)
    for (const auto& w : data.warnings) std::fprintf(opts.log, "warning: %s\n", w.c_str());
  const Model model = build_model(e.train.model);
  check_experiment(e, data, model);

  std::filesystem::create_directories(e.output_dir);
  const std::string path = (std::filesystem::path(e.output_dir) / (e.run_id + ".csv")).string();
  if (std::filesystem::exists(path) && !opts.overwrite)
    throw ConfigError("run id '" + e.run_id + "' already has metrics in " + e.output_dir + " (use --force to replace)");
  MetricsWriter writer(path, e.train.cosine_scopes);
  std::size_t fallbacks = 0;
  const auto result = train(model, e.train, data, [&](const StepMetrics& m) {
    fallbacks += m.allocation_fallback ? 1 : 0;
    writer.write(m);
  });
  if (opts.log && fallbacks > 0)
    std::fprintf(opts.log, "note: %zu emitted steps fell back to equal allocation\n", fallbacks);

  RunSummary s;
  s.metrics_path = path;
  s.accuracy = result.final_accuracy;
  s.forward_passes = result.total_forward_passes;
  s.steps = result.steps;
  s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

struct AblationRow {
  std::uint64_t seed = 0;
  AllocatorKind allocator = AllocatorKind::equal;
  std::size_t budget = 0;
  std::string scope;
  double mean_cosine = 0.0;
  double mean_J = 0.0;
  std::size_t batches = 0;
};

/// Cosine-to-oracle grid over allocators and budgets. For each seed the model
/// is pretrained with the oracle gradient, then frozen; every (allocator,
/// budget) cell sees the same batches and the same per-step random streams.
inline std::vector<AblationRow> run_ablation(ExperimentConfig e, const RunOptions& opts = {}) {
  if (opts.threads) e.train.threads = *opts.threads;
  const auto& a = e.ablation;
  if (a.budgets.empty() || a.allocators.empty()) throw ConfigError("ablation needs budgets and allocators");
  if (a.seeds == 0 || a.batches == 0) throw ConfigError("ablation needs at least one seed and one batch");
  const Model model = build_model(e.train.model);
  std::vector<AblationRow> rows;

  for (std::size_t s = 0; s < a.seeds; ++s) {
    const std::uint64_t seed = e.train.seed + s;
    ExperimentConfig es = e;
    es.data_seed = e.data_seed + s;
    const Dataset data = load_experiment_data(es);
    TrainConfig pre = e.train;
    pre.seed = seed;
    pre.gradient_source = GradientSource::backprop;
    pre.epochs = a.pretrain_epochs;
    pre.cosine_every = 0;
    check_experiment(es, data, model);
    const Vector theta = a.pretrain_epochs > 0 ? train(model, pre, data).theta
                                               : model.init_params(RngStream(seed).child(Purpose::init));

    const std::size_t B = std::min(e.train.batch_size, data.train.size());
    std::vector<std::vector<Datum>> batches(a.batches);
    std::vector<Vector> oracles(a.batches);
    for (std::size_t k = 0; k < a.batches; ++k) {
      std::vector<std::size_t> idx(data.train.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      auto rng = RngStream(seed, {static_cast<std::uint64_t>(Purpose::data), 7, k});
      shuffle(idx, rng);
      for (std::size_t i = 0; i < B; ++i) batches[k].push_back(data.train[idx[i]]);
      oracles[k] = model.oracle_gradient(theta, batches[k]);
    }

    for (auto alloc : a.allocators) {
      for (auto budget : a.budgets) {
        TrainConfig c = e.train;
        c.seed = seed;
        c.allocator = alloc;
        c.mean_budget = budget;
        try {
          validate_config(c, model);
        } catch (const std::invalid_argument& err) {
          throw ConfigError("ablation cell " + allocator_label(alloc) + "/" + std::to_string(budget) + ": " +
                            err.what());
        }
        std::vector<double> cos_sum(c.cosine_scopes.size(), 0.0);
        double j_sum = 0.0;
        for (std::size_t k = 0; k < a.batches; ++k) {
          TrainState st{theta, Optimizer(c.optimizer, model.num_params()), std::nullopt, k};
          const auto est = estimate_step(model, st, batches[k], c);
          for (std::size_t q = 0; q < c.cosine_scopes.size(); ++q)
            cos_sum[q] += cosine_to_oracle(model, est.gradient, oracles[k], c.cosine_scopes[q]);
          j_sum += est.metrics.J;
        }
        for (std::size_t q = 0; q < c.cosine_scopes.size(); ++q) {
          rows.push_back({seed, alloc, budget, c.cosine_scopes[q], cos_sum[q] / static_cast<double>(a.batches),
                          j_sum / static_cast<double>(a.batches), a.batches});
        }
      }
    }
    if (opts.log) std::fprintf(opts.log, "ablate: seed %llu done\n", static_cast<unsigned long long>(seed));
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::out | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "seed,allocator,budget,scope,mean_cosine,mean_J,batches\n";
  for (const auto& r : rows)
    out << r.seed << ',' << allocator_label(r.allocator) << ',' << r.budget << ',' << r.scope << ','
        << format_number(r.mean_cosine) << ',' << format_number(r.mean_J) << ',' << r.batches << '\n';
}

/// Mean over seeds of the per-seed cosine for one (allocator, budget, scope).
inline double ablation_mean(const std::vector<AblationRow>& rows, AllocatorKind alloc, std::size_t budget,
                            const std::string& scope) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.allocator == alloc && r.budget == budget && r.scope == scope) {
      sum += r.mean_cosine;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

}  // namespace fwdalloc
