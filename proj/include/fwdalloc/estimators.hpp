#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwdalloc/linalg.hpp"
#include "fwdalloc/model.hpp"
#include "fwdalloc/rng.hpp"

namespace fwdalloc {

enum class EstimatorFamily { lr_activation, spsa, spsa_antithetic };
enum class SiteKind { pre_activation_output, parameters };

struct NoiseSite {
  std::size_t layer = 0;
  SiteKind site = SiteKind::parameters;
  double sigma = 1e-2;  // std of the injected Gaussian
};

/// Which perturbation estimator to run and where the noise goes.
///
/// One-sided families (lr_activation, spsa) weight (L(perturbed) - baseline)
/// by the noise score; the baseline is the clean loss when clean_baseline is
/// set and zero otherwise. Since the score has zero mean, both are unbiased.
struct EstimatorKind {
  EstimatorFamily family = EstimatorFamily::spsa_antithetic;
  std::vector<NoiseSite> sites;
  bool clean_baseline = true;
  // lr_activation only: perturb every site in each query rather than one
  // uniformly chosen site (whose sample is then scaled by the site count).
  bool perturb_all_sites = false;

  [[nodiscard]] std::size_t passes_per_sample() const noexcept {
    return family == EstimatorFamily::spsa_antithetic ? 2 : 1;
  }

  [[nodiscard]] std::size_t min_queries() const noexcept { return passes_per_sample(); }

  void validate(const Model& model) const {
    if (sites.empty()) throw std::invalid_argument("estimator needs at least one noise site");
    const SiteKind expected =
        family == EstimatorFamily::lr_activation ? SiteKind::pre_activation_output : SiteKind::parameters;
    for (const auto& s : sites) {
      if (s.site != expected) throw std::invalid_argument("noise site kind does not match estimator family");
      if (s.layer >= model.layers().size())
        throw std::invalid_argument("noise site layer " + std::to_string(s.layer) + " out of range");
      if (!(s.sigma > 0.0)) throw std::invalid_argument("noise sigma must be positive");
    }
  }
};

/// Sites on every affine layer (or only `layers` when given) with one sigma.
inline EstimatorKind make_estimator(EstimatorFamily family, const Model& model, double sigma,
                                    std::span<const std::size_t> layers = {}) {
  EstimatorKind kind;
  kind.family = family;
  const SiteKind site =
      family == EstimatorFamily::lr_activation ? SiteKind::pre_activation_output : SiteKind::parameters;
  if (layers.empty()) {
    for (std::size_t l = 0; l < model.layers().size(); ++l) kind.sites.push_back({l, site, sigma});
  } else {
    for (auto l : layers) kind.sites.push_back({l, site, sigma});
  }
  kind.validate(model);
  return kind;
}

/// Coordinates whose per-query variance feeds the trace estimate.
struct CoordinateSubset {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> layers;  // affine layers the indices were drawn from
  double extrapolation = 1.0;
};

/// Last hidden layer plus output head, capped by even striding.
inline CoordinateSubset default_trace_subset(const Model& model, std::size_t cap = 512) {
  CoordinateSubset subset;
  const std::size_t n = model.layers().size();
  subset.layers = n >= 2 ? std::vector<std::size_t>{n - 2, n - 1} : std::vector<std::size_t>{0};
  std::vector<std::size_t> all;
  for (auto l : subset.layers)
    for (std::size_t i = model.layers()[l].first_param(); i < model.layers()[l].end_param(); ++i) all.push_back(i);
  if (all.size() <= cap) {
    subset.indices = std::move(all);
  } else {
    for (std::size_t k = 0; k < cap; ++k) subset.indices.push_back(all[k * all.size() / cap]);
  }
  return subset;
}

inline CoordinateSubset layer_subset(const Model& model, std::span<const std::size_t> layers) {
  CoordinateSubset subset;
  subset.layers.assign(layers.begin(), layers.end());
  for (auto l : layers)
    for (std::size_t i = model.layers()[l].first_param(); i < model.layers()[l].end_param(); ++i)
      subset.indices.push_back(i);
  return subset;
}

/// One i.i.d. gradient sample. Consumes kind.passes_per_sample() forward
/// evaluations; `baseline` is ignored by the antithetic family.
inline Vector sample_query(const EstimatorKind& kind, const Model& model, std::span<const double> theta,
                           const Datum& datum, double baseline, RngStream rng) {
  const std::size_t d = model.num_params();
  const auto& layers = model.layers();
  Vector g(d, 0.0);
  const double b = kind.clean_baseline ? baseline : 0.0;

  if (kind.family == EstimatorFamily::lr_activation) {
    Perturbation noise;
    noise.activation.resize(layers.size());
    std::vector<std::size_t> active;
    if (kind.perturb_all_sites || kind.sites.size() == 1) {
      for (std::size_t s = 0; s < kind.sites.size(); ++s) active.push_back(s);
    } else {
      active.push_back(static_cast<std::size_t>(rng.below(kind.sites.size())));
    }
    const double site_scale = kind.perturb_all_sites ? 1.0 : static_cast<double>(kind.sites.size());
    std::vector<Vector> unit(kind.sites.size());
    for (auto s : active) {
      const auto& site = kind.sites[s];
      unit[s] = rng.normal_vector(layers[site.layer].noise_dim());
      Vector& z = noise.activation[site.layer];
      if (z.empty()) z.assign(layers[site.layer].noise_dim(), 0.0);
      for (std::size_t k = 0; k < z.size(); ++k) z[k] += site.sigma * unit[s][k];
    }
    const auto res = model.forward(theta, datum, &noise);
    const double delta = res.loss - b;
    // grad wrt the layer output is delta * z / sigma^2 = delta * u / sigma; the
    // local Jacobian spreads it over W as an outer product with the input rows.
    for (auto s : active) {
      const auto& site = kind.sites[s];
      const auto& layer = layers[site.layer];
      const double w = site_scale * delta / site.sigma;
      const auto& in = res.inputs[site.layer];
      for (std::size_t r = 0; r < layer.rows; ++r) {
        for (std::size_t o = 0; o < layer.out; ++o) {
          const double score = w * unit[s][r * layer.out + o];
          double* gw = g.data() + layer.weight_offset + o * layer.in;
          const double* x = in.data() + r * layer.in;
          for (std::size_t i = 0; i < layer.in; ++i) gw[i] += score * x[i];
          if (layer.has_bias) g[layer.bias_offset + o] += score;
        }
      }
    }
    return g;
  }

  Perturbation noise;
  noise.parameters.assign(d, 0.0);
  Vector unit(d, 0.0);
  Vector inv_sigma(d, 0.0);
  for (const auto& site : kind.sites) {
    const auto& layer = layers[site.layer];
    for (std::size_t i = layer.first_param(); i < layer.end_param(); ++i) {
      unit[i] = rng.normal();
      noise.parameters[i] = site.sigma * unit[i];
      inv_sigma[i] = 1.0 / site.sigma;
    }
  }
  if (kind.family == EstimatorFamily::spsa) {
    const double delta = model.forward(theta, datum, &noise).loss - b;
    for (std::size_t i = 0; i < d; ++i) g[i] = delta * unit[i] * inv_sigma[i];
    return g;
  }
  const double plus = model.forward(theta, datum, &noise).loss;
  for (auto& z : noise.parameters) z = -z;
  const double minus = model.forward(theta, datum, &noise).loss;
  const double half_diff = 0.5 * (plus - minus);
  for (std::size_t i = 0; i < d; ++i) g[i] = half_diff * unit[i] * inv_sigma[i];
  return g;
}

struct GradientEstimate {
  Vector mean;                      // query average over num_samples i.i.d. samples
  Vector per_coord_variance;        // unbiased sample variance on the subset coordinates
  bool variance_available = false;  // needs at least two samples
  std::size_t num_samples = 0;
  std::size_t num_queries = 0;      // forward passes consumed by the samples
};

/// Running sum over the full vector plus Welford statistics on a subset.
class GradientAccumulator {
 public:
  GradientAccumulator(std::size_t dim, std::vector<std::size_t> subset, std::size_t passes_per_sample)
      : sum_(dim, 0.0),
        subset_(std::move(subset)),
        mean_(subset_.size(), 0.0),
        m2_(subset_.size(), 0.0),
        passes_per_sample_(passes_per_sample) {}

  void add(std::span<const double> g) {
    require_same_size(g.size(), sum_.size(), "GradientAccumulator::add");
    for (std::size_t i = 0; i < g.size(); ++i) sum_[i] += g[i];
    ++n_;
    const double inv_n = 1.0 / static_cast<double>(n_);
    for (std::size_t k = 0; k < subset_.size(); ++k) {
      const double x = g[subset_[k]];
      const double delta = x - mean_[k];
      mean_[k] += delta * inv_n;
      m2_[k] += delta * (x - mean_[k]);
    }
  }

  [[nodiscard]] std::size_t samples() const noexcept { return n_; }
  [[nodiscard]] std::size_t queries() const noexcept { return n_ * passes_per_sample_; }

  [[nodiscard]] GradientEstimate estimate() const {
    GradientEstimate est;
    est.num_samples = n_;
    est.num_queries = queries();
    est.mean.assign(sum_.size(), 0.0);
    if (n_ > 0)
      for (std::size_t i = 0; i < sum_.size(); ++i) est.mean[i] = sum_[i] / static_cast<double>(n_);
    est.per_coord_variance.assign(subset_.size(), 0.0);
    if (n_ >= 2) {
      est.variance_available = true;
      for (std::size_t k = 0; k < subset_.size(); ++k)
        est.per_coord_variance[k] = std::max(0.0, m2_[k] / static_cast<double>(n_ - 1));
    }
    return est;
  }

 private:
  Vector sum_;
  std::vector<std::size_t> subset_;
  Vector mean_;
  Vector m2_;
  std::size_t n_ = 0;
  std::size_t passes_per_sample_;
};

struct EstimateOptions {
  std::optional<double> clean_loss;  // computed on demand when the baseline needs it
  bool forced_draw = false;          // test hook: every sample reuses the first draw
};

/// Adds samples [first, last) to `acc`; sample i uses rng.at(query, i).
inline void accumulate_queries(GradientAccumulator& acc, const EstimatorKind& kind, const Model& model,
                               std::span<const double> theta, const Datum& datum, double baseline,
                               const RngStream& rng, std::size_t first, std::size_t last,
                               bool forced_draw = false) {
  for (std::size_t i = first; i < last; ++i) {
    const auto stream = rng.at(Purpose::query, forced_draw ? 0 : i);
    acc.add(sample_query(kind, model, theta, datum, baseline, stream));
  }
}

/// Query-averaged gradient with `queries` forward passes (pairs count twice).
inline GradientEstimate estimate_gradient(const EstimatorKind& kind, const Model& model,
                                          std::span<const double> theta, const Datum& datum,
                                          std::size_t queries, const RngStream& rng,
                                          const CoordinateSubset& subset, const EstimateOptions& opts = {}) {
  const std::size_t pps = kind.passes_per_sample();
  if (queries < kind.min_queries() || queries % pps != 0)
    throw std::invalid_argument("estimate_gradient: " + std::to_string(queries) + " queries is below the minimum " +
                                "or not a multiple of " + std::to_string(pps) + " for this estimator");
  double baseline = 0.0;
  if (kind.clean_baseline && kind.family != EstimatorFamily::spsa_antithetic)
    baseline = opts.clean_loss ? *opts.clean_loss : model.loss(theta, datum);
  GradientAccumulator acc(model.num_params(), subset.indices, pps);
  accumulate_queries(acc, kind, model, theta, datum, baseline, rng, 0, queries / pps, opts.forced_draw);
  return acc.estimate();
}

/// Sum of the per-coordinate sample variances, times the extrapolation factor.
inline double estimate_trace(const GradientEstimate& est, double scale = 1.0) {
  if (!est.variance_available)
    throw std::invalid_argument("estimate_trace: needs at least two samples per datum");
  double s = 0.0;
  for (double v : est.per_coord_variance) s += v;
  return s * scale;
}

}  // namespace fwdalloc
