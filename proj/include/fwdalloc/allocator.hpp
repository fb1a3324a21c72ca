#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwdalloc/linalg.hpp"
#include "fwdalloc/rng.hpp"

namespace fwdalloc {

/// Reparameterized Gaussian allocator state (beta0, beta1, sigma, gamma).
/// sigma and gamma are stored as logs so every point of R^4 is feasible.
struct AllocatorParams {
  double beta0 = 0.0;
  double beta1 = 0.0;
  double log_sigma = 0.0;
  double log_gamma = 0.0;

  static AllocatorParams initial(double mean_budget) {
    return {mean_budget, mean_budget / 2.0, std::log(mean_budget / 5.0), 0.0};
  }

  [[nodiscard]] double sigma() const noexcept { return std::exp(log_sigma); }
  [[nodiscard]] double gamma() const noexcept { return std::exp(log_gamma); }
};

/// Gradients and steps over (beta0, beta1, log_sigma, log_gamma).
using LambdaVector = std::array<double, 4>;

struct BatchFeatures {
  Vector phi;                      // tanh of the clean per-datum loss
  std::vector<Vector> embeddings;  // one per datum, for the kernel distances
  double mean_budget = 0.0;        // queries per datum; total budget is mean_budget * B

  [[nodiscard]] std::size_t batch_size() const noexcept { return phi.size(); }
  [[nodiscard]] double total_budget() const noexcept { return mean_budget * static_cast<double>(phi.size()); }

  static BatchFeatures from_losses(std::span<const double> clean_losses, std::vector<Vector> embeddings,
                                   double mean_budget) {
    BatchFeatures f;
    f.phi.reserve(clean_losses.size());
    for (double l : clean_losses) f.phi.push_back(std::tanh(l));
    f.embeddings = std::move(embeddings);
    f.mean_budget = mean_budget;
    f.validate();
    return f;
  }

  void validate() const {
    if (phi.empty()) throw std::invalid_argument("BatchFeatures: empty batch");
    if (!embeddings.empty()) require_same_size(embeddings.size(), phi.size(), "BatchFeatures embeddings");
    for (double p : phi)
      if (!(p >= -1.0 && p <= 1.0)) throw std::invalid_argument("BatchFeatures: phi outside [-1, 1]");
    if (!(mean_budget > 0.0)) throw std::invalid_argument("BatchFeatures: mean budget must be positive");
  }
};

inline Vector build_mean(std::span<const double> phi, double beta0, double beta1) {
  Vector mu(phi.size());
  for (std::size_t j = 0; j < phi.size(); ++j) mu[j] = beta0 + beta1 * phi[j];
  return mu;
}

/// d(i, j) = 1 - cosine similarity, zero on the diagonal.
inline Matrix embedding_distances(std::span<const Vector> embeddings) {
  const std::size_t n = embeddings.size();
  Matrix d(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const double v = 1.0 - cosine_similarity(embeddings[i], embeddings[j]).value;
      d(i, j) = v;
      d(j, i) = v;
    }
  return d;
}

class CovarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sigma = sigma^2 (K + jitter I), K(i, j) = exp(-d(i, j) / (2 gamma^2)).
struct RbfCovariance {
  SymMatrix matrix;
  Matrix kernel;    // K without jitter
  Matrix distance;  // d(i, j)
  double jitter = 0.0;  // relative to sigma^2, after escalation
  Cholesky chol;
  double sigma = 0.0;
  double gamma = 0.0;
};

inline RbfCovariance build_covariance(const Matrix& distance, double sigma, double gamma,
                                      double jitter = 1e-6) {
  if (!(sigma > 0.0) || !(gamma > 0.0)) throw std::invalid_argument("build_covariance: sigma and gamma must be > 0");
  const std::size_t n = distance.rows();
  RbfCovariance cov;
  cov.distance = distance;
  cov.kernel = Matrix(n, n);
  cov.sigma = sigma;
  cov.gamma = gamma;
  const double inv = 1.0 / (2.0 * gamma * gamma);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cov.kernel(i, j) = i == j ? 1.0 : std::exp(-distance(i, j) * inv);
  const double s2 = sigma * sigma;
  double rel = jitter;
  for (int attempt = 0; attempt <= 3; ++attempt, rel *= 2.0) {
    cov.matrix = SymMatrix(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) cov.matrix.set(i, j, s2 * cov.kernel(i, j));
    cov.matrix.add_diagonal(s2 * rel);
    try {
      cov.chol = cholesky(cov.matrix);
      cov.jitter = rel;
      return cov;
    } catch (const NotPositiveDefinite&) {
    }
  }
  throw CovarianceError("build_covariance: kernel matrix not positive definite after jitter escalation");
}

inline RbfCovariance build_covariance(std::span<const Vector> embeddings, double sigma, double gamma,
                                      double jitter = 1e-6) {
  return build_covariance(embedding_distances(embeddings), sigma, gamma, jitter);
}

struct Allocation {
  Vector raw;                       // relative allocation that produced the counts
  std::vector<std::size_t> counts;  // integer queries per datum
  bool fallback_equal = false;      // every raw entry was <= 0

  [[nodiscard]] std::size_t total() const noexcept {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  }
};

/// Hare-Niemeyer rounding of total * w / sum(w); leftover units go to the
/// largest fractional parts, ties to the lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total) {
  const std::size_t n = weights.size();
  std::vector<std::size_t> out(n, 0);
  if (n == 0) return out;
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw std::invalid_argument("largest_remainder: weights must have a positive sum");
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double quota = static_cast<double>(total) * weights[j] / sum;
    const double fl = std::floor(quota);
    out[j] = static_cast<std::size_t>(fl);
    frac[j] = quota - fl;
    assigned += out[j];
  }
  // Floating error can push the floors one unit over; take it back from the
  // smallest remainders.
  while (assigned > total) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j)
      if (out[j] > 0 && (best == n || frac[j] < frac[best])) best = j;
    --out[best];
    frac[best] += 1.0;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
    if (weights[order[k]] > 0.0) {
      ++out[order[k]];
      ++assigned;
    }
  }
  return out;
}

/// Clamps negatives to zero and splits `total` proportionally in units of
/// `granularity` queries. Falls back to an equal split when nothing is positive.
inline Allocation realize_allocation(std::span<const double> raw, std::size_t total, std::size_t granularity = 1) {
  if (granularity == 0 || total % granularity != 0)
    throw std::invalid_argument("realize_allocation: budget " + std::to_string(total) +
                                " is not a multiple of the query granularity");
  Allocation a;
  a.raw.assign(raw.begin(), raw.end());
  Vector w(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) w[j] = std::max(raw[j], 0.0);
  if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) {
    a.fallback_equal = true;
    w.assign(raw.size(), 1.0);
  }
  a.counts = largest_remainder(w, total / granularity);
  for (auto& c : a.counts) c *= granularity;
  return a;
}

inline Allocation equal_allocation(std::size_t batch_size, std::size_t total, std::size_t granularity = 1) {
  const Vector ones(batch_size, 1.0);
  return realize_allocation(ones, total, granularity);
}

inline Allocation sample_allocation(std::span<const double> mu, const RbfCovariance& cov, std::size_t total,
                                    RngStream& rng, std::size_t granularity = 1) {
  const Vector raw = sample_mvn(mu, cov.chol.lower, rng);
  return realize_allocation(raw, total, granularity);
}

/// Each eligible datum is pruned to mean_budget / 2 with probability p; the
/// freed queries are spread equally over the unpruned data. If everything is
/// pruned, conservation puts every datum back at mean_budget.
inline Allocation sample_bernoulli_allocation(double p, std::size_t mean_budget, std::size_t batch_size,
                                              RngStream& rng, std::span<const bool> eligible = {},
                                              std::size_t granularity = 1) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bernoulli allocator: p outside [0, 1]");
  if (mean_budget % 2 != 0 || (mean_budget / 2) % granularity != 0)
    throw std::invalid_argument("bernoulli allocator: half the mean budget must be a multiple of the granularity");
  if (!eligible.empty()) require_same_size(eligible.size(), batch_size, "bernoulli eligibility");
  Allocation a;
  std::vector<bool> pruned(batch_size, false);
  std::size_t num_pruned = 0;
  for (std::size_t j = 0; j < batch_size; ++j) {
    const bool draw = rng.bernoulli(p);
    if (draw && (eligible.empty() || eligible[j])) {
      pruned[j] = true;
      ++num_pruned;
    }
  }
  a.counts.assign(batch_size, mean_budget);
  if (num_pruned > 0 && num_pruned < batch_size) {
    const std::size_t half = mean_budget / 2;
    const std::size_t freed = num_pruned * half;
    Vector w(batch_size, 0.0);
    for (std::size_t j = 0; j < batch_size; ++j) w[j] = pruned[j] ? 0.0 : 1.0;
    const auto extra = largest_remainder(w, freed / granularity);
    for (std::size_t j = 0; j < batch_size; ++j)
      a.counts[j] = pruned[j] ? half : mean_budget + extra[j] * granularity;
  }
  a.raw.assign(a.counts.begin(), a.counts.end());
  return a;
}

/// Smallest allocation used inside the objective, so Tr / A stays finite.
inline constexpr double objective_floor = 0.5;

/// sum_j traces[j] / max(A[j], 0.5)
inline double objective_J(std::span<const double> allocation, std::span<const double> traces) {
  require_same_size(allocation.size(), traces.size(), "objective_J");
  double s = 0.0;
  for (std::size_t j = 0; j < traces.size(); ++j) s += traces[j] / std::max(allocation[j], objective_floor);
  return s;
}

inline double objective_J(std::span<const std::size_t> counts, std::span<const double> traces) {
  const Vector a(counts.begin(), counts.end());
  return objective_J(a, traces);
}

/// Real-valued allocation floor + budget * max(raw, 0) / sum(max(raw, 0)).
inline Vector normalized_allocation(std::span<const double> raw, double floor, double budget) {
  Vector w(raw.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < raw.size(); ++j) sum += (w[j] = std::max(raw[j], 0.0));
  if (!(sum > 0.0)) {
    w.assign(raw.size(), 1.0);
    sum = static_cast<double>(raw.size());
  }
  for (auto& v : w) v = floor + budget * v / sum;
  return w;
}

/// Closed-form minimizer family A_j ∝ Tr_j^exponent over a fixed budget; the
/// square root is the optimum of objective_J.
inline Vector power_allocation(std::span<const double> traces, double total, double exponent) {
  Vector a(traces.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < traces.size(); ++j) {
    if (traces[j] < 0.0) throw std::invalid_argument("deterministic_optimal: negative trace");
    // sqrt keeps the optimum exactly invariant to power-of-4 trace scaling.
    sum += (a[j] = exponent == 0.5 ? std::sqrt(traces[j]) : std::pow(traces[j], exponent));
  }
  if (!(sum > 0.0)) return Vector(traces.size(), total / static_cast<double>(traces.size()));
  for (auto& v : a) v = total * v / sum;
  return a;
}

inline Vector deterministic_optimal(std::span<const double> traces, double total) {
  return power_allocation(traces, total, 0.5);
}

/// J(equal) - J(optimal) = (1 / A0) sum_{j<k} (sqrt Tr_j - sqrt Tr_k)^2.
inline double theorem2_gap(std::span<const double> traces, double total) {
  double s = 0.0;
  for (std::size_t j = 0; j < traces.size(); ++j) {
    const double rj = std::sqrt(traces[j]);
    for (std::size_t k = j + 1; k < traces.size(); ++k) {
      const double d = rj - std::sqrt(traces[k]);
      s += d * d;
    }
  }
  return s / total;
}

/// Log-density of N(mu, Sigma) at A.
inline double log_density(std::span<const double> a, std::span<const double> mu, const Cholesky& chol) {
  require_same_size(a.size(), mu.size(), "log_density");
  Vector diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - mu[i];
  const Vector y = chol.solve_lower(diff);
  const double n = static_cast<double>(a.size());
  return -0.5 * dot(y, y) - 0.5 * chol.log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

/// Derivatives of (mu, Sigma) with respect to one scalar parameter. An empty
/// dsigma means Sigma does not depend on it; trace_inv_dsigma caches
/// tr(Sigma^-1 dSigma), which does not depend on the sample.
struct MvnDerivative {
  Vector dmu;
  Matrix dsigma;
  double trace_inv_dsigma = 0.0;
};

inline MvnDerivative make_mvn_derivative(Vector dmu, Matrix dsigma, const Cholesky& chol) {
  MvnDerivative d{std::move(dmu), std::move(dsigma), 0.0};
  if (d.dsigma.rows() > 0) {
    const Matrix inv = chol.inverse();
    for (std::size_t i = 0; i < inv.rows(); ++i)
      for (std::size_t j = 0; j < inv.cols(); ++j) d.trace_inv_dsigma += inv(i, j) * d.dsigma(j, i);
  }
  return d;
}

/// d ln N(A; mu, Sigma) / d lambda_k for each derivative in `derivs`:
/// dmu_k . r + (r^T dSigma_k r - tr(Sigma^-1 dSigma_k)) / 2 with r = Sigma^-1 (A - mu).
inline Vector mvn_score(std::span<const double> a, std::span<const double> mu, const Cholesky& chol,
                        std::span<const MvnDerivative> derivs) {
  require_same_size(a.size(), mu.size(), "mvn_score");
  Vector diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - mu[i];
  const Vector r = chol.solve(diff);
  Vector out(derivs.size(), 0.0);
  for (std::size_t k = 0; k < derivs.size(); ++k) {
    const auto& d = derivs[k];
    double s = d.dmu.empty() ? 0.0 : dot(d.dmu, r);
    if (d.dsigma.rows() > 0) {
      double quad = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (r[i] == 0.0) continue;
        const auto row = d.dsigma.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) acc += row[j] * r[j];
        quad += r[i] * acc;
      }
      s += 0.5 * (quad - d.trace_inv_dsigma);
    }
    out[k] = s;
  }
  return out;
}

/// Gaussian allocator materialized at one parameter point: mean, covariance,
/// and the reparameterization derivatives used by the score.
struct GaussianAllocator {
  AllocatorParams params;
  Vector mu;
  RbfCovariance cov;
  std::array<MvnDerivative, 4> derivs;

  static GaussianAllocator make(const AllocatorParams& params, std::span<const double> phi, const Matrix& distance,
                                double jitter = 1e-6) {
    GaussianAllocator g;
    g.params = params;
    g.mu = build_mean(phi, params.beta0, params.beta1);
    g.cov = build_covariance(distance, params.sigma(), params.gamma(), jitter);
    const std::size_t n = phi.size();
    g.derivs[0] = MvnDerivative{Vector(n, 1.0), Matrix(), 0.0};
    g.derivs[1] = MvnDerivative{Vector(phi.begin(), phi.end()), Matrix(), 0.0};
    // Sigma is proportional to sigma^2 (jitter included): dSigma/dlog(sigma) = 2 Sigma,
    // so tr(Sigma^-1 dSigma) = 2n without an inverse.
    g.derivs[2] = MvnDerivative{{}, Matrix(n, n), 2.0 * static_cast<double>(n)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g.derivs[2].dsigma(i, j) = 2.0 * g.cov.matrix(i, j);
    // dK/dlog(gamma) = K * d / gamma^2 off the diagonal.
    Matrix dgamma(n, n, 0.0);
    const double s2 = g.cov.sigma * g.cov.sigma;
    const double inv_g2 = 1.0 / (g.cov.gamma * g.cov.gamma);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) dgamma(i, j) = s2 * g.cov.kernel(i, j) * distance(i, j) * inv_g2;
    g.derivs[3] = make_mvn_derivative({}, std::move(dgamma), g.cov.chol);
    return g;
  }

  [[nodiscard]] double log_density(std::span<const double> a) const { return fwdalloc::log_density(a, mu, cov.chol); }

  /// Score over (beta0, beta1, log_sigma, log_gamma).
  [[nodiscard]] LambdaVector log_density_grad(std::span<const double> a) const {
    const Vector s = mvn_score(a, mu, cov.chol, derivs);
    return {s[0], s[1], s[2], s[3]};
  }

  [[nodiscard]] Vector sample_raw(RngStream& rng) const { return sample_mvn(mu, cov.chol.lower, rng); }
};

/// How a relative allocation maps to real queries: floor + budget * proportion.
struct AllocationTarget {
  double floor = 0.0;
  double budget = 0.0;
};

struct AllocatorGradient {
  LambdaVector grad{};
  double mean_objective = 0.0;
};

/// Score-function estimate of dE[J]/dlambda from K allocation samples, with a
/// leave-one-out mean of the other objective values as the baseline.
inline AllocatorGradient allocator_grad(const GaussianAllocator& alloc, std::span<const double> traces,
                                        const AllocationTarget& target, std::size_t num_samples,
                                        const RngStream& rng) {
  if (num_samples == 0) throw std::invalid_argument("allocator_grad: K must be >= 1");
  require_same_size(traces.size(), alloc.mu.size(), "allocator_grad traces");
  std::vector<double> objective(num_samples);
  std::vector<LambdaVector> scores(num_samples);
  for (std::size_t k = 0; k < num_samples; ++k) {
    auto stream = rng.at(Purpose::allocator_grad, k);
    const Vector raw = alloc.sample_raw(stream);
    objective[k] = objective_J(normalized_allocation(raw, target.floor, target.budget), traces);
    scores[k] = alloc.log_density_grad(raw);
  }
  const double total = std::accumulate(objective.begin(), objective.end(), 0.0);
  AllocatorGradient out;
  out.mean_objective = total / static_cast<double>(num_samples);
  for (std::size_t k = 0; k < num_samples; ++k) {
    const double baseline =
        num_samples > 1 ? (total - objective[k]) / static_cast<double>(num_samples - 1) : 0.0;
    const double w = (objective[k] - baseline) / static_cast<double>(num_samples);
    for (std::size_t c = 0; c < 4; ++c) out.grad[c] += w * scores[k][c];
  }
  return out;
}

inline AllocatorGradient allocator_grad(const AllocatorParams& params, std::span<const double> traces,
                                        const BatchFeatures& features, std::size_t num_samples,
                                        const RngStream& rng, std::optional<AllocationTarget> target = {}) {
  const auto alloc = GaussianAllocator::make(params, features.phi, embedding_distances(features.embeddings));
  return allocator_grad(alloc, traces, target.value_or(AllocationTarget{0.0, features.total_budget()}),
                        num_samples, rng);
}

struct AllocatorOptions {
  double lr = 0.05;
  std::size_t max_iters = 50;
  std::size_t samples = 16;     // K
  double tolerance = 1e-3;      // relative change of the windowed objective
  double momentum = 0.9;        // gradient averaging before normalization
  std::size_t window = 10;      // iterations per moving-average window
  double safeguard_tolerance = 1e-6;
  std::optional<AllocationTarget> target;  // defaults to {0, A0}
};

struct OptimizeResult {
  AllocatorParams params;
  std::vector<double> objective_trace;  // mean sampled J per iteration, relative to J(equal)
  std::size_t iterations = 0;
  bool safeguard_triggered = false;
  bool aborted = false;  // non-finite objective
};

/// J at the (normalized) mean allocation of the Gaussian allocator.
inline double mean_allocation_objective(const AllocatorParams& params, std::span<const double> phi,
                                        std::span<const double> traces, const AllocationTarget& target) {
  const Vector mu = build_mean(phi, params.beta0, params.beta1);
  return objective_J(normalized_allocation(mu, target.floor, target.budget), traces);
}

/// Normalized gradient descent on lambda: every step has length opts.lr in
/// coordinates where beta0, beta1 are measured in units of the mean budget,
/// along a momentum average of the score-function gradient. Stops when J at
/// the mean allocation, averaged over the last window, moves by less than
/// opts.tolerance relative to the window before, and falls back to `init` when
/// the mean allocation ends up worse than where it started.
inline OptimizeResult optimize_allocator(const AllocatorParams& init, std::span<const double> traces,
                                         const BatchFeatures& features, const AllocatorOptions& opts,
                                         const RngStream& rng) {
  features.validate();
  require_same_size(traces.size(), features.batch_size(), "optimize_allocator traces");
  const AllocationTarget target = opts.target.value_or(AllocationTarget{0.0, features.total_budget()});
  const double unit = features.mean_budget;
  OptimizeResult result{init, {}, 0, false, false};

  const Vector equal = normalized_allocation(Vector(traces.size(), 1.0), target.floor, target.budget);
  const double j_equal = objective_J(equal, traces);
  if (!(j_equal > 0.0) || opts.max_iters == 0) return result;

  const Matrix distance = embedding_distances(features.embeddings);
  std::array<double, 4> x{init.beta0 / unit, init.beta1 / unit, init.log_sigma, init.log_gamma};
  auto to_params = [&](const std::array<double, 4>& v) { return AllocatorParams{v[0] * unit, v[1] * unit, v[2], v[3]}; };

  std::array<double, 4> velocity{};
  Vector mean_trace;
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    GaussianAllocator alloc;
    try {
      alloc = GaussianAllocator::make(to_params(x), features.phi, distance);
    } catch (const CovarianceError&) {
      result.aborted = true;
      result.params = init;
      return result;
    }
    const auto g = allocator_grad(alloc, traces, target, opts.samples, rng.at(it));
    const double rel = g.mean_objective / j_equal;
    if (!std::isfinite(rel)) {
      result.aborted = true;
      result.params = init;
      return result;
    }
    result.objective_trace.push_back(rel);
    result.iterations = it + 1;

    std::array<double, 4> step{g.grad[0] * unit / j_equal, g.grad[1] * unit / j_equal, g.grad[2] / j_equal,
                               g.grad[3] / j_equal};
    double n2 = 0.0;
    for (double s : step) n2 += s * s;
    const double gnorm = std::sqrt(n2);
    if (!std::isfinite(gnorm)) {
      result.aborted = true;
      result.params = init;
      return result;
    }
    // Fixed-length steps along a momentum average: the score-function
    // gradient's magnitude tracks sampling noise more than distance to the
    // optimum, and its direction is noisy from one iteration to the next.
    for (std::size_t c = 0; c < 4; ++c) velocity[c] = opts.momentum * velocity[c] + step[c];
    double vn2 = 0.0;
    for (double v : velocity) vn2 += v * v;
    if (vn2 > 0.0)
      for (std::size_t c = 0; c < 4; ++c) x[c] -= opts.lr * velocity[c] / std::sqrt(vn2);

    // Convergence is judged on J at the mean allocation, which is free of the
    // sampling noise in the score-function estimate.
    mean_trace.push_back(mean_allocation_objective(to_params(x), features.phi, traces, target) / j_equal);
    const auto& tr = mean_trace;
    const std::size_t w = opts.window;
    if (w > 0 && tr.size() >= 2 * w) {
      double recent = 0.0, previous = 0.0;
      for (std::size_t k = 0; k < w; ++k) {
        recent += tr[tr.size() - 1 - k];
        previous += tr[tr.size() - 1 - w - k];
      }
      if (std::abs(recent - previous) <= opts.tolerance * std::abs(previous)) break;
    }
  }

  result.params = to_params(x);
  const double j_init = mean_allocation_objective(init, features.phi, traces, target);
  const double j_final = mean_allocation_objective(result.params, features.phi, traces, target);
  if (!std::isfinite(j_final) || j_final > j_init + opts.safeguard_tolerance) {
    result.safeguard_triggered = true;
    result.params = init;
  }
  return result;
}

}  // namespace fwdalloc
