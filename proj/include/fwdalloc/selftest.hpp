#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "fwdalloc/allocator.hpp"
#include "fwdalloc/estimators.hpp"
#include "fwdalloc/linalg.hpp"
#include "fwdalloc/model.hpp"
#include "fwdalloc/rng.hpp"
#include "fwdalloc/stats.hpp"

namespace fwdalloc {

// ---------------------------------------------------------------------------
// Reference problems with known gradients.

struct ReferenceProblem {
  Model model;
  Datum datum;
  Vector theta;
  Vector gradient;  // analytic
};

/// L(theta) = 0.5 * ||theta - target||^2: a bias-free linear layer fed x = [1]
/// with the mse loss, so theta is the weight column.
inline ReferenceProblem make_quadratic(std::size_t d, RngStream rng, bool at_optimum = false) {
  ModelSpec spec;
  spec.layer_sizes = {1, d};
  spec.activation = Activation::identity;
  spec.loss = LossKind::mse;
  spec.bias = false;
  ReferenceProblem p{Model(spec), {}, rng.normal_vector(d), {}};
  p.datum.x = {1.0};
  p.datum.target = at_optimum ? p.theta : rng.normal_vector(d);
  p.gradient.resize(d);
  for (std::size_t i = 0; i < d; ++i) p.gradient[i] = p.theta[i] - p.datum.target[i];
  return p;
}

/// One affine layer with mse loss; in * out + out parameters.
inline ReferenceProblem make_linear(std::size_t in, std::size_t out, RngStream rng) {
  ModelSpec spec;
  spec.layer_sizes = {in, out};
  spec.activation = Activation::identity;
  spec.loss = LossKind::mse;
  Model model(spec);
  ReferenceProblem p{model, {}, rng.normal_vector(model.num_params()), {}};
  p.datum.x = rng.normal_vector(in);
  p.datum.target = rng.normal_vector(out);
  const std::vector<Datum> batch{p.datum};
  p.gradient = p.model.oracle_gradient(p.theta, batch);
  return p;
}

using QuerySampler = std::function<Vector(const RngStream&)>;

inline QuerySampler query_sampler(const EstimatorKind& kind, const ReferenceProblem& p) {
  const double baseline = p.model.loss(p.theta, p.datum);
  return [&kind, &p, baseline](const RngStream& rng) {
    return sample_query(kind, p.model, p.theta, p.datum, baseline, rng);
  };
}

/// ||mean of n samples - truth|| / ||truth||.
inline double monte_carlo_relative_error(const QuerySampler& sample, std::span<const double> truth, std::size_t n,
                                         const RngStream& rng) {
  Vector sum(truth.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0, sample(rng.at(Purpose::query, i)), sum);
  double err = 0.0, ref = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const double m = sum[k] / static_cast<double>(n);
    err += (m - truth[k]) * (m - truth[k]);
    ref += truth[k] * truth[k];
  }
  return std::sqrt(err / ref);
}

/// Slope of log(total variance of the query mean) against log(forward passes).
inline double variance_law_slope(const EstimatorKind& kind, const ReferenceProblem& p,
                                 std::span<const std::size_t> budgets, std::size_t repetitions, const RngStream& rng) {
  const auto subset = layer_subset(p.model, std::vector<std::size_t>{0});
  Vector log_a, log_v;
  for (std::size_t a : budgets) {
    std::vector<Vector> means;
    for (std::size_t r = 0; r < repetitions; ++r)
      means.push_back(
          estimate_gradient(kind, p.model, p.theta, p.datum, a, rng.at(a, r), subset, {}).mean);
    double total = 0.0;
    for (std::size_t k = 0; k < p.theta.size(); ++k) {
      Vector col(repetitions);
      for (std::size_t r = 0; r < repetitions; ++r) col[r] = means[r][k];
      total += sample_variance(col);
    }
    log_a.push_back(std::log(static_cast<double>(a)));
    log_v.push_back(std::log(total));
  }
  return fit_slope(log_a, log_v);
}

/// Random point on the simplex scaled to `total` (flat Dirichlet).
inline Vector random_simplex_point(std::size_t n, double total, RngStream& rng) {
  Vector w(n);
  double s = 0.0;
  for (auto& v : w) {
    v = -std::log(rng.uniform());
    s += v;
  }
  for (auto& v : w) v *= total / s;
  return w;
}

using AllocationRule = std::function<Vector(std::span<const double> traces, double total)>;

/// Brute-force minimum of J over the simplex grid with `steps` cells per unit
/// of total; returns the minimizer.
inline Vector simplex_grid_minimizer(std::span<const double> traces, double total, std::size_t steps) {
  const std::size_t n = traces.size();
  Vector best, cur(n);
  double best_j = std::numeric_limits<double>::infinity();
  const double h = total / static_cast<double>(steps);
  // Enumerate compositions of `steps` into n parts; the last part is implied.
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t k, std::size_t left) {
    if (k + 1 == n) {
      cur[k] = static_cast<double>(left) * h;
      double j = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (cur[i] <= 0.0) {
          if (traces[i] > 0.0) return;
          continue;
        }
        j += traces[i] / cur[i];
      }
      if (j < best_j) {
        best_j = j;
        best = cur;
      }
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      cur[k] = static_cast<double>(c) * h;
      rec(k + 1, left - c);
    }
  };
  rec(0, steps);
  return best;
}

// ---------------------------------------------------------------------------
// Property suite.

struct SelftestHooks {
  bool flip_spsa_sign = false;  // mutation: negate every spsa sample
  double det_exponent = 0.5;    // mutation: wrong power in the closed-form allocation
};

struct PropertyResult {
  std::string name;
  bool passed = false;
  bool gating = true;  // expected-trend checks are reported without failing the run
  std::string detail;
};

namespace detail {

inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

inline Matrix random_spd(std::size_t n, RngStream& rng) {
  Matrix q(n, n);
  for (auto& v : q.data()) v = rng.normal();
  Matrix m = q.transposed() * q;
  for (std::size_t i = 0; i < n; ++i) m(i, i) += 1.0;
  return m;
}

inline QuerySampler hooked_sampler(QuerySampler s, const SelftestHooks& hooks) {
  if (!hooks.flip_spsa_sign) return s;
  return [s](const RngStream& rng) {
    Vector g = s(rng);
    for (auto& v : g) v = -v;
    return g;
  };
}

}  // namespace detail

inline PropertyResult property_rng(std::uint64_t seed) {
  RngStream a(seed, {1, 2, 3}), b(seed, {1, 2, 3}), c(seed, {1, 2, 4});
  bool same = true;
  Vector x, y;
  for (int i = 0; i < 10000; ++i) {
    const double va = a.normal();
    same = same && va == b.normal();
    x.push_back(va);
    y.push_back(c.normal());
  }
  const double r = pearson(x, y);
  return {"rng: identical paths repeat, different paths uncorrelated", same && std::abs(r) < 0.05, true,
          detail::fmt("|r| = %.4f", std::abs(r))};
}

inline PropertyResult property_cholesky(std::uint64_t seed) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 1});
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(32);
    const Matrix m = detail::random_spd(n, rng);
    const auto chol = cholesky(SymMatrix::from(m));
    const Matrix r = chol.reconstruct();
    double err = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) err = std::max(err, std::abs(r.data()[i] - m.data()[i]));
    worst = std::max(worst, err / m.max_abs());
  }
  return {"cholesky: L L^T reconstructs SPD matrices", worst <= 1e-10, true, detail::fmt("max rel err %.3g", worst)};
}

inline PropertyResult property_mvn_scaling(std::uint64_t seed) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 2});
  const std::size_t n = 6;
  const Matrix m = detail::random_spd(n, rng);
  const auto chol = cholesky(SymMatrix::from(m));
  Matrix scaled = chol.lower;
  for (auto& v : scaled.data()) v *= 3.0;
  const Vector mu = rng.normal_vector(n);
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    RngStream r1(seed, {7, k}), r2(seed, {7, k});
    const Vector a = sample_mvn(mu, chol.lower, r1);
    const Vector b = sample_mvn(mu, scaled, r2);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs((b[i] - mu[i]) - 3.0 * (a[i] - mu[i])));
  }
  return {"sample_mvn: scaling the factor scales deviations", worst < 1e-12, true, detail::fmt("max dev %.3g", worst)};
}

inline PropertyResult property_unbiased(std::uint64_t seed, EstimatorFamily family, const SelftestHooks& hooks,
                                        std::size_t n = 100000) {
  const RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 3, static_cast<std::uint64_t>(family)});
  const bool lr = family == EstimatorFamily::lr_activation;
  const ReferenceProblem p = lr ? make_linear(4, 10, rng.child(1)) : make_quadratic(50, rng.child(1));
  const EstimatorKind kind = make_estimator(family, p.model, 1e-2);
  QuerySampler s = query_sampler(kind, p);
  if (family != EstimatorFamily::lr_activation) s = detail::hooked_sampler(s, hooks);
  const double err = monte_carlo_relative_error(s, p.gradient, n, rng.child(2));
  const char* names[] = {"lr_activation", "spsa", "spsa_antithetic"};
  return {std::string("unbiasedness: ") + names[static_cast<int>(family)] + " mean within 3% of the gradient",
          err < 0.03, true, detail::fmt("rel L2 err %.4f over %.0f queries", err, static_cast<double>(n))};
}

inline PropertyResult property_variance_law(std::uint64_t seed) {
  const RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 4});
  const ReferenceProblem p = make_quadratic(10, rng.child(1));
  const EstimatorKind kind = make_estimator(EstimatorFamily::spsa_antithetic, p.model, 1e-2);
  const std::vector<std::size_t> budgets{8, 16, 32, 64, 128};
  const double slope = variance_law_slope(kind, p, budgets, 200, rng.child(2));
  return {"variance law: log Var(mean) vs log A has slope -1", std::abs(slope + 1.0) <= 0.1, true,
          detail::fmt("slope %.4f", slope)};
}

inline PropertyResult property_antithetic_dominance(std::uint64_t seed) {
  std::size_t wins = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 5, s});
    const ReferenceProblem p = make_quadratic(10, rng.child(1));
    EstimatorKind plain = make_estimator(EstimatorFamily::spsa, p.model, 1e-2);
    plain.clean_baseline = false;
    const EstimatorKind anti = make_estimator(EstimatorFamily::spsa_antithetic, p.model, 1e-2);
    const auto subset = layer_subset(p.model, std::vector<std::size_t>{0});
    // Equal forward passes: 200 one-sided samples vs 100 pairs.
    const auto ep = estimate_gradient(plain, p.model, p.theta, p.datum, 200, rng.child(2), subset);
    const auto ea = estimate_gradient(anti, p.model, p.theta, p.datum, 200, rng.child(3), subset);
    // Per-pass variance of the mean: plain var / 200 vs pair var / 100.
    if (mean(ea.per_coord_variance) / 100.0 < mean(ep.per_coord_variance) / 200.0) ++wins;
  }
  return {"antithetic dominance: lower variance than one-sided spsa at equal passes", wins == 20, true,
          detail::fmt("%.0f/20 seeds", static_cast<double>(wins))};
}

inline PropertyResult property_deep_layer_trend(std::uint64_t seed) {
  std::size_t hits = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 6, s});
    ModelSpec spec;
    spec.layer_sizes = {4, 16, 16, 2};
    const Model model(spec);
    const Vector theta = model.init_params(rng.child(1));
    const Datum datum{rng.child(2).normal_vector(4), static_cast<int>(s % 2), {}};
    const EstimatorKind kind = make_estimator(EstimatorFamily::spsa_antithetic, model, 1e-2);
    const auto first = layer_subset(model, std::vector<std::size_t>{0});
    const auto last = layer_subset(model, std::vector<std::size_t>{2});
    const auto e1 = estimate_gradient(kind, model, theta, datum, 400, rng.child(3), first);
    const auto e3 = estimate_gradient(kind, model, theta, datum, 400, rng.child(3), last);
    if (estimate_trace(e1) >= estimate_trace(e3)) ++hits;
  }
  return {"trend: first-layer trace >= last-layer trace (3-layer MLP)", hits >= 8, false,
          detail::fmt("%.0f/10 seeds", static_cast<double>(hits))};
}

inline PropertyResult property_budget_conservation(std::uint64_t seed, std::size_t samples = 100000) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 7});
  const std::size_t B = 16, mean_budget = 20, total = B * mean_budget;
  Vector phi(B);
  std::vector<Vector> emb(B);
  for (std::size_t j = 0; j < B; ++j) {
    phi[j] = std::tanh(rng.normal());
    emb[j] = rng.normal_vector(3);
  }
  const auto g = GaussianAllocator::make(AllocatorParams::initial(mean_budget), phi, embedding_distances(emb));
  std::size_t bad = 0;
  for (std::size_t k = 0; k < samples; ++k) {
    auto r = rng.at(k);
    if (realize_allocation(g.sample_raw(r), total).total() != total) ++bad;
    if (sample_bernoulli_allocation(0.5, mean_budget, B, r).total() != total) ++bad;
  }
  return {"budget conservation: every GA and BA sample sums to A0", bad == 0, true,
          detail::fmt("%.0f violations in %.0f samples", static_cast<double>(bad), 2.0 * samples)};
}

inline PropertyResult property_identity(std::uint64_t seed, std::size_t instances = 1000) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 8});
  double worst_identity = 0.0, worst_gap = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t B = 2 + rng.below(63);
    Vector tr(B);
    // Budgets of 20..100 per datum keep every closed-form allocation far above
    // the objective floor, where J is the plain sum of Tr / A.
    for (auto& t : tr) t = 0.1 + 9.9 * rng.uniform();
    double sum = 0.0, sum_sqrt = 0.0, pairs = 0.0;
    for (double t : tr) {
      sum += t;
      sum_sqrt += std::sqrt(t);
    }
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = i + 1; j < B; ++j) pairs += (std::sqrt(tr[i]) - std::sqrt(tr[j])) * (std::sqrt(tr[i]) - std::sqrt(tr[j]));
    const double lhs = static_cast<double>(B) * sum - sum_sqrt * sum_sqrt;
    worst_identity = std::max(worst_identity, std::abs(lhs - pairs) / std::max(1.0, std::abs(pairs)));
    const double total = static_cast<double>(B) * (20.0 + static_cast<double>(rng.below(81)));
    const double j_eq = objective_J(Vector(B, total / static_cast<double>(B)), tr);
    const double j_det = objective_J(deterministic_optimal(tr, total), tr);
    const double gap = theorem2_gap(tr, total);
    worst_gap = std::max(worst_gap, std::abs(gap - (j_eq - j_det)) / std::max(1.0, std::abs(gap)));
  }
  return {"identity: B sum Tr - (sum sqrt Tr)^2 equals the pairwise sum; gap = J(eq) - J(det)",
          worst_identity <= 1e-10 && worst_gap <= 1e-10, true,
          detail::fmt("identity err %.3g, gap err %.3g", worst_identity, worst_gap)};
}

inline PropertyResult property_optimality(std::uint64_t seed, const SelftestHooks& hooks) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 9});
  const AllocationRule rule = [&hooks](std::span<const double> tr, double total) {
    return power_allocation(tr, total, hooks.det_exponent);
  };
  std::size_t violations = 0;
  for (std::size_t k = 0; k < 50; ++k) {
    const std::size_t B = 2 + rng.below(5);
    Vector tr(B);
    for (auto& t : tr) t = std::exp(1.5 * rng.normal());
    const double total = 100.0;
    const double j_det = objective_J(rule(tr, total), tr);
    for (std::size_t s = 0; s < 10000; ++s) {
      const Vector a = random_simplex_point(B, total, rng);
      if (objective_J(a, tr) < j_det - 1e-12 * j_det) ++violations;
    }
  }
  return {"optimality: closed form beats random simplex points", violations == 0, true,
          detail::fmt("%.0f points beat it", static_cast<double>(violations))};
}

inline PropertyResult property_gap_nonnegative(std::uint64_t seed) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 10});
  bool ok = true;
  for (std::size_t k = 0; k < 1000; ++k) {
    const std::size_t B = 2 + rng.below(20);
    Vector tr(B);
    for (auto& t : tr) t = rng.uniform() * 10.0;
    ok = ok && theorem2_gap(tr, 100.0) > 1e-12;
    const Vector same(B, tr[0]);
    ok = ok && std::abs(theorem2_gap(same, 100.0)) <= 1e-12;
  }
  return {"gap: positive for distinct traces, zero for equal ones", ok, true, ""};
}

inline PropertyResult property_score(std::uint64_t seed, std::size_t instances = 100) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 11});
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t B = 5;
    Vector phi(B);
    std::vector<Vector> emb(B);
    for (std::size_t j = 0; j < B; ++j) {
      phi[j] = std::tanh(rng.normal());
      emb[j] = rng.normal_vector(3);
    }
    const Matrix dist = embedding_distances(emb);
    AllocatorParams p{10.0 + 5.0 * rng.normal(), 5.0 * rng.normal(), std::log(2.0) + 0.3 * rng.normal(),
                      0.3 * rng.normal()};
    const auto g = GaussianAllocator::make(p, phi, dist);
    const Vector a = g.sample_raw(rng);
    const auto score = g.log_density_grad(a);
    for (std::size_t c = 0; c < 4; ++c) {
      const double h = 1e-5;
      AllocatorParams up = p, down = p;
      double* fu[] = {&up.beta0, &up.beta1, &up.log_sigma, &up.log_gamma};
      double* fd[] = {&down.beta0, &down.beta1, &down.log_sigma, &down.log_gamma};
      *fu[c] += h;
      *fd[c] -= h;
      const double num =
          (GaussianAllocator::make(up, phi, dist).log_density(a) - GaussianAllocator::make(down, phi, dist).log_density(a)) /
          (2.0 * h);
      worst = std::max(worst, std::abs(score[c] - num) / std::max(std::abs(num), 1e-3));
    }
  }
  return {"score: log-density gradient matches finite differences", worst < 1e-5, true,
          detail::fmt("max rel err %.3g", worst)};
}

inline PropertyResult property_scale_invariance(std::uint64_t seed) {
  RngStream rng(seed, {static_cast<std::uint64_t>(Purpose::selftest), 12});
  bool exact = true;
  bool argmin_same = true;
  for (std::size_t k = 0; k < 200; ++k) {
    const std::size_t B = 2 + rng.below(6);
    Vector tr(B), scaled(B);
    for (auto& t : tr) t = rng.uniform() * 5.0;
    for (double c : {4.0, 0.25, 1024.0}) {
      for (std::size_t j = 0; j < B; ++j) scaled[j] = c * tr[j];
      exact = exact && deterministic_optimal(tr, 60.0) == deterministic_optimal(scaled, 60.0);
    }
  }
  for (std::size_t k = 0; k < 5; ++k) {
    Vector tr{rng.uniform(), rng.uniform(), rng.uniform()};
    Vector scaled = tr;
    const double c = 0.1 + 10.0 * rng.uniform();
    for (auto& t : scaled) t *= c;
    argmin_same = argmin_same && simplex_grid_minimizer(tr, 30.0, 200) == simplex_grid_minimizer(scaled, 30.0, 200);
  }
  return {"scale invariance: scaling traces leaves the allocation and the grid argmin unchanged",
          exact && argmin_same, true, ""};
}

struct AllocatorBenchmark {
  Vector traces;
  BatchFeatures features;
};

/// Traces [1, 4, 9, 16] tiled to B, losses tied to the traces, one embedding
/// direction per trace group plus noise.
inline AllocatorBenchmark make_allocator_benchmark(std::size_t B, double mean_budget, RngStream rng) {
  AllocatorBenchmark b;
  Vector losses(B);
  std::vector<Vector> emb(B);
  for (std::size_t j = 0; j < B; ++j) {
    const std::size_t group = j % 4;
    b.traces.push_back(static_cast<double>((group + 1) * (group + 1)));
    losses[j] = 0.25 * std::sqrt(b.traces.back());
    emb[j].assign(4, 0.0);
    emb[j][group] = 1.0;
    for (auto& v : emb[j]) v += 0.1 * rng.normal();
  }
  b.features = BatchFeatures::from_losses(losses, std::move(emb), mean_budget);
  return b;
}

struct AllocatorImprovement {
  std::size_t below_equal = 0;
  std::size_t near_det = 0;
  std::size_t positive_rank = 0;
  double worst_ratio = 0.0;  // J(mean at lambda*) / J(det)
};

inline AllocatorImprovement allocator_improvement(std::uint64_t seed, std::size_t seeds = 10) {
  AllocatorImprovement out;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const RngStream rng(seed + s, {static_cast<std::uint64_t>(Purpose::selftest), 13});
    const double mean_budget = 20.0;
    const auto b = make_allocator_benchmark(32, mean_budget, rng.child(1));
    const double total = b.features.total_budget();
    const AllocationTarget target{0.0, total};
    const auto res = optimize_allocator(AllocatorParams::initial(mean_budget), b.traces, b.features, {}, rng.child(2));
    const double j = mean_allocation_objective(res.params, b.features.phi, b.traces, target);
    const double j_eq = objective_J(Vector(b.traces.size(), mean_budget), b.traces);
    const double j_det = objective_J(deterministic_optimal(b.traces, total), b.traces);
    out.below_equal += j <= j_eq ? 1 : 0;
    out.near_det += j <= 1.1 * j_det ? 1 : 0;
    out.worst_ratio = std::max(out.worst_ratio, j / j_det);
    const auto alloc = GaussianAllocator::make(res.params, b.features.phi, embedding_distances(b.features.embeddings));
    auto r = rng.child(3);
    const auto counts = realize_allocation(alloc.sample_raw(r), static_cast<std::size_t>(total)).counts;
    const Vector c(counts.begin(), counts.end());
    out.positive_rank += spearman(c, b.traces) > 0.0 ? 1 : 0;
  }
  return out;
}

inline std::vector<PropertyResult> property_allocator(std::uint64_t seed) {
  const auto r = allocator_improvement(seed);
  return {{"allocator: optimized mean allocation beats equal (10/10) and is near the optimum (>= 8/10)",
           r.below_equal == 10 && r.near_det >= 8, true,
           detail::fmt("%.0f/10 <= J(eq), %.0f/10 within 10%% of J(det)", static_cast<double>(r.below_equal),
                       static_cast<double>(r.near_det))},
          {"allocator: realized counts rank-correlate with traces", r.positive_rank >= 9, true,
           detail::fmt("%.0f/10 seeds with Spearman > 0", static_cast<double>(r.positive_rank))}};
}

inline std::vector<PropertyResult> run_selftest(std::uint64_t seed, const SelftestHooks& hooks = {}) {
  std::vector<PropertyResult> out;
  out.push_back(property_rng(seed));
  out.push_back(property_cholesky(seed));
  out.push_back(property_mvn_scaling(seed));
  for (auto f : {EstimatorFamily::spsa, EstimatorFamily::spsa_antithetic, EstimatorFamily::lr_activation})
    out.push_back(property_unbiased(seed, f, hooks));
  out.push_back(property_variance_law(seed));
  out.push_back(property_antithetic_dominance(seed));
  out.push_back(property_deep_layer_trend(seed));
  out.push_back(property_budget_conservation(seed));
  out.push_back(property_identity(seed));
  out.push_back(property_optimality(seed, hooks));
  out.push_back(property_gap_nonnegative(seed));
  out.push_back(property_score(seed));
  out.push_back(property_scale_invariance(seed));
  for (auto& r : property_allocator(seed)) out.push_back(std::move(r));
  return out;
}

}  // namespace fwdalloc
