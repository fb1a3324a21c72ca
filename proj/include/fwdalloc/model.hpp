#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fwdalloc/linalg.hpp"
#include "fwdalloc/rng.hpp"

namespace fwdalloc {

enum class ModelKind { mlp, attention_block };
enum class Activation { tanh, relu, identity };
enum class LossKind { cross_entropy, mse };

/// Architecture description.
///
/// mlp:             layer_sizes = [input, hidden..., output]
/// attention_block: layer_sizes = [token_dim, d_model, d_ff, output], input is
///                  seq_len tokens of token_dim values each, flattened row-major.
struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::tanh;
  LossKind loss = LossKind::cross_entropy;
  bool bias = true;
  std::size_t seq_len = 1;
  std::size_t num_heads = 1;
  bool layer_norm = false;
};

/// One affine map y = W x + b applied independently to `rows` input rows.
struct AffineLayer {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t rows = 1;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
  bool has_bias = true;

  [[nodiscard]] std::size_t param_count() const noexcept { return in * out + (has_bias ? out : 0); }
  [[nodiscard]] std::size_t noise_dim() const noexcept { return rows * out; }
  [[nodiscard]] std::size_t first_param() const noexcept { return weight_offset; }
  [[nodiscard]] std::size_t end_param() const noexcept { return weight_offset + param_count(); }
};

struct LayerParams {
  Matrix weight;  // out x in
  Vector bias;    // out, empty when the layer has no bias
};

struct Datum {
  Vector x;
  int label = 0;
  Vector target;  // used by the mse loss
};

/// Additive noise for one forward evaluation.
struct Perturbation {
  // Indexed by affine layer; an empty entry leaves that layer's output clean.
  // Non-empty entries hold rows * out values added before the nonlinearity.
  std::vector<Vector> activation;
  // Empty, or num_params values added to theta.
  Vector parameters;
};

struct ForwardResult {
  double loss = 0.0;
  std::vector<Vector> inputs;   // per affine layer, rows x in as consumed
  std::vector<Vector> outputs;  // per affine layer, rows x out after noise
  Vector logits;
  Vector embedding;
};

class NumericalBlowup : public std::runtime_error {
 public:
  NumericalBlowup(std::size_t layer, const std::string& where)
      : std::runtime_error("numerical blowup in " + where + " (layer " + std::to_string(layer) + ")"),
        layer_(layer) {}
  [[nodiscard]] std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

namespace detail {

inline double activate(Activation a, double v) noexcept {
  switch (a) {
    case Activation::tanh: return std::tanh(v);
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::identity: return v;
  }
  return v;
}

// Derivative expressed through the pre-activation value.
inline double activate_grad(Activation a, double pre, double post) noexcept {
  switch (a) {
    case Activation::tanh: return 1.0 - post * post;
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline constexpr double layer_norm_eps = 1e-5;

}  // namespace detail

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) { build_layers(); }

  [[nodiscard]] const ModelSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::size_t num_params() const noexcept { return num_params_; }
  [[nodiscard]] const std::vector<AffineLayer>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::size_t input_dim() const noexcept { return input_dim_; }
  [[nodiscard]] std::size_t output_dim() const noexcept { return layers_.back().out; }

  [[nodiscard]] std::size_t embedding_dim() const noexcept {
    if (spec_.kind == ModelKind::attention_block) return spec_.layer_sizes[1];
    return layers_.size() >= 2 ? layers_[layers_.size() - 2].out : input_dim_;
  }

  [[nodiscard]] std::size_t layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].name == name) return i;
    throw std::invalid_argument("unknown layer '" + std::string(name) + "'");
  }

  /// Gaussian weights with std 1/sqrt(fan_in), zero biases.
  [[nodiscard]] Vector init_params(RngStream rng) const {
    Vector theta(num_params_, 0.0);
    for (const auto& layer : layers_) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in));
      for (std::size_t k = 0; k < layer.in * layer.out; ++k) theta[layer.weight_offset + k] = scale * rng.normal();
    }
    return theta;
  }

  [[nodiscard]] std::vector<LayerParams> unflatten(std::span<const double> theta) const {
    require_same_size(theta.size(), num_params_, "unflatten");
    std::vector<LayerParams> out;
    out.reserve(layers_.size());
    for (const auto& layer : layers_) {
      LayerParams p{Matrix(layer.out, layer.in), {}};
      std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(layer.weight_offset), layer.in * layer.out,
                  p.weight.data().begin());
      if (layer.has_bias)
        p.bias.assign(theta.begin() + static_cast<std::ptrdiff_t>(layer.bias_offset),
                      theta.begin() + static_cast<std::ptrdiff_t>(layer.bias_offset + layer.out));
      out.push_back(std::move(p));
    }
    return out;
  }

  [[nodiscard]] Vector flatten(const std::vector<LayerParams>& params) const {
    require_same_size(params.size(), layers_.size(), "flatten");
    Vector theta(num_params_, 0.0);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      require_same_size(params[l].weight.rows() * params[l].weight.cols(), layer.in * layer.out, "flatten");
      std::copy(params[l].weight.data().begin(), params[l].weight.data().end(),
                theta.begin() + static_cast<std::ptrdiff_t>(layer.weight_offset));
      if (layer.has_bias) {
        require_same_size(params[l].bias.size(), layer.out, "flatten");
        std::copy(params[l].bias.begin(), params[l].bias.end(),
                  theta.begin() + static_cast<std::ptrdiff_t>(layer.bias_offset));
      }
    }
    return theta;
  }

  /// Loss of one datum, optionally with additive noise at activations or
  /// parameters. A zero perturbation reproduces the clean loss bit for bit.
  [[nodiscard]] ForwardResult forward(std::span<const double> theta, const Datum& datum,
                                      const Perturbation* noise = nullptr) const {
    require_same_size(theta.size(), num_params_, "forward(theta)");
    require_same_size(datum.x.size(), input_dim_, "forward(x)");
    Vector perturbed;
    std::span<const double> params = theta;
    if (noise != nullptr && !noise->parameters.empty()) {
      require_same_size(noise->parameters.size(), num_params_, "forward(parameter noise)");
      perturbed.assign(theta.begin(), theta.end());
      for (std::size_t i = 0; i < num_params_; ++i) perturbed[i] += noise->parameters[i];
      params = perturbed;
    }
    if (noise != nullptr && !noise->activation.empty()) {
      require_same_size(noise->activation.size(), layers_.size(), "forward(activation noise)");
      for (std::size_t l = 0; l < layers_.size(); ++l)
        if (!noise->activation[l].empty())
          require_same_size(noise->activation[l].size(), layers_[l].noise_dim(), "forward(activation noise)");
    }

    ForwardResult res;
    res.inputs.resize(layers_.size());
    res.outputs.resize(layers_.size());
    if (spec_.kind == ModelKind::mlp)
      forward_mlp(params, datum.x, noise, res);
    else
      forward_attention(params, datum.x, noise, res, nullptr);
    res.loss = loss_from_logits(res.logits, datum);
    if (!std::isfinite(res.loss)) throw NumericalBlowup(layers_.size(), "loss");
    return res;
  }

  [[nodiscard]] double loss(std::span<const double> theta, const Datum& datum) const {
    return forward(theta, datum).loss;
  }

  /// Final hidden representation before the classification head.
  [[nodiscard]] Vector embedding(std::span<const double> theta, const Vector& x) const {
    Datum d{x, 0, Vector(output_dim(), 0.0)};
    return forward(theta, d).embedding;
  }

  [[nodiscard]] int predict(std::span<const double> theta, const Vector& x) const {
    Datum d{x, 0, Vector(output_dim(), 0.0)};
    const auto res = forward(theta, d);
    return static_cast<int>(std::max_element(res.logits.begin(), res.logits.end()) - res.logits.begin());
  }

  /// Analytic gradient of the mean loss over `batch`. Verification only.
  [[nodiscard]] Vector oracle_gradient(std::span<const double> theta, std::span<const Datum> batch) const {
    require_same_size(theta.size(), num_params_, "oracle_gradient");
    if (batch.empty()) throw std::invalid_argument("oracle_gradient: empty batch");
    Vector grad(num_params_, 0.0);
    for (const auto& datum : batch) {
      if (spec_.kind == ModelKind::mlp)
        backward_mlp(theta, datum, grad);
      else
        backward_attention(theta, datum, grad);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& g : grad) g *= inv;
    return grad;
  }

 private:
  struct AttentionCache {
    ForwardResult* res = nullptr;
    Vector probs;   // heads x T x T
    Vector mixed;   // T x d_model, attention-weighted values (input to attn_o)
    Vector h1;      // T x d_model
    Vector ffn_act; // T x d_ff
    Vector h2;      // T x d_model
    Vector normed;  // T x d_model (== h2 without layer norm)
    Vector inv_std; // T
  };

  void add_layer(std::string name, std::size_t in, std::size_t out, std::size_t rows, std::size_t& offset) {
    AffineLayer layer{std::move(name), in, out, rows, offset, 0, spec_.bias};
    offset += in * out;
    if (layer.has_bias) {
      layer.bias_offset = offset;
      offset += out;
    }
    layers_.push_back(std::move(layer));
  }

  void build_layers() {
    const auto& sz = spec_.layer_sizes;
    for (auto s : sz)
      if (s == 0) throw std::invalid_argument("layer sizes must be positive");
    std::size_t offset = 0;
    if (spec_.kind == ModelKind::mlp) {
      if (sz.size() < 2) throw std::invalid_argument("mlp needs at least input and output sizes");
      input_dim_ = sz.front();
      for (std::size_t l = 0; l + 1 < sz.size(); ++l)
        add_layer("layer" + std::to_string(l), sz[l], sz[l + 1], 1, offset);
    } else {
      if (sz.size() != 4) throw std::invalid_argument("attention_block needs [token_dim, d_model, d_ff, output]");
      if (spec_.seq_len == 0 || spec_.num_heads == 0 || sz[1] % spec_.num_heads != 0)
        throw std::invalid_argument("attention_block: d_model must be divisible by num_heads");
      const std::size_t T = spec_.seq_len;
      const std::size_t dm = sz[1];
      input_dim_ = T * sz[0];
      add_layer("embed", sz[0], dm, T, offset);
      add_layer("attn_q", dm, dm, T, offset);
      add_layer("attn_k", dm, dm, T, offset);
      add_layer("attn_v", dm, dm, T, offset);
      add_layer("attn_o", dm, dm, T, offset);
      add_layer("ffn1", dm, sz[2], T, offset);
      add_layer("ffn2", sz[2], dm, T, offset);
      add_layer("head", dm, sz[3], 1, offset);
    }
    num_params_ = offset;
  }

  // y[r] = W x[r] + b (+ noise) for every row; checks finiteness.
  void affine(std::size_t l, std::span<const double> theta, std::span<const double> in, const Perturbation* noise,
              ForwardResult& res) const {
    const auto& layer = layers_[l];
    res.inputs[l].assign(in.begin(), in.end());
    Vector& out = res.outputs[l];
    out.assign(layer.rows * layer.out, 0.0);
    const double* W = theta.data() + layer.weight_offset;
    for (std::size_t r = 0; r < layer.rows; ++r) {
      const double* x = in.data() + r * layer.in;
      double* y = out.data() + r * layer.out;
      for (std::size_t o = 0; o < layer.out; ++o) {
        double s = layer.has_bias ? theta[layer.bias_offset + o] : 0.0;
        const double* w = W + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) s += w[i] * x[i];
        y[o] = s;
      }
    }
    if (noise != nullptr && !noise->activation.empty() && !noise->activation[l].empty()) {
      const auto& z = noise->activation[l];
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += z[k];
    }
    if (!detail::all_finite(out)) throw NumericalBlowup(l, layer.name);
  }

  // Accumulates dW, db into grad and returns d(input) when requested.
  void affine_backward(std::size_t l, std::span<const double> theta, std::span<const double> in,
                       std::span<const double> dout, Vector& grad, Vector* din) const {
    const auto& layer = layers_[l];
    const double* W = theta.data() + layer.weight_offset;
    if (din != nullptr) din->assign(layer.rows * layer.in, 0.0);
    for (std::size_t r = 0; r < layer.rows; ++r) {
      const double* x = in.data() + r * layer.in;
      const double* dy = dout.data() + r * layer.out;
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double g = dy[o];
        if (g == 0.0) continue;
        double* gw = grad.data() + layer.weight_offset + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) gw[i] += g * x[i];
        if (layer.has_bias) grad[layer.bias_offset + o] += g;
        if (din != nullptr) {
          const double* w = W + o * layer.in;
          double* dx = din->data() + r * layer.in;
          for (std::size_t i = 0; i < layer.in; ++i) dx[i] += g * w[i];
        }
      }
    }
  }

  void forward_mlp(std::span<const double> theta, const Vector& x, const Perturbation* noise,
                   ForwardResult& res) const {
    Vector h = x;
    const std::size_t n = layers_.size();
    res.embedding = x;
    for (std::size_t l = 0; l < n; ++l) {
      affine(l, theta, h, noise, res);
      if (l + 1 == n) break;
      h = res.outputs[l];
      for (auto& v : h) v = detail::activate(spec_.activation, v);
      if (l + 2 == n) res.embedding = h;
    }
    res.logits = res.outputs[n - 1];
  }

  void forward_attention(std::span<const double> theta, const Vector& x, const Perturbation* noise,
                         ForwardResult& res, AttentionCache* cache) const {
    const std::size_t T = spec_.seq_len;
    const std::size_t dm = spec_.layer_sizes[1];
    const std::size_t dff = spec_.layer_sizes[2];
    const std::size_t H = spec_.num_heads;
    const std::size_t hd = dm / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    enum : std::size_t { embed, q, k, v, o, f1, f2, head };

    affine(embed, theta, x, noise, res);
    const Vector h0 = res.outputs[embed];
    affine(q, theta, h0, noise, res);
    affine(k, theta, h0, noise, res);
    affine(v, theta, h0, noise, res);
    const Vector& Q = res.outputs[q];
    const Vector& K = res.outputs[k];
    const Vector& V = res.outputs[v];

    Vector probs(H * T * T, 0.0);
    Vector mixed(T * dm, 0.0);
    for (std::size_t hh = 0; hh < H; ++hh) {
      for (std::size_t t = 0; t < T; ++t) {
        double* p = probs.data() + (hh * T + t) * T;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < T; ++s) {
          double acc = 0.0;
          for (std::size_t c = 0; c < hd; ++c) acc += Q[t * dm + hh * hd + c] * K[s * dm + hh * hd + c];
          p[s] = acc * scale;
          mx = std::max(mx, p[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          p[s] = std::exp(p[s] - mx);
          z += p[s];
        }
        for (std::size_t s = 0; s < T; ++s) p[s] /= z;
        for (std::size_t s = 0; s < T; ++s)
          for (std::size_t c = 0; c < hd; ++c) mixed[t * dm + hh * hd + c] += p[s] * V[s * dm + hh * hd + c];
      }
    }
    affine(o, theta, mixed, noise, res);
    Vector h1 = h0;
    for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += res.outputs[o][i];
    affine(f1, theta, h1, noise, res);
    Vector act = res.outputs[f1];
    for (auto& a : act) a = detail::activate(spec_.activation, a);
    affine(f2, theta, act, noise, res);
    Vector h2 = h1;
    for (std::size_t i = 0; i < h2.size(); ++i) h2[i] += res.outputs[f2][i];

    Vector normed = h2;
    Vector inv_std(T, 1.0);
    if (spec_.layer_norm) {
      for (std::size_t t = 0; t < T; ++t) {
        double mean = 0.0;
        for (std::size_t c = 0; c < dm; ++c) mean += h2[t * dm + c];
        mean /= static_cast<double>(dm);
        double var = 0.0;
        for (std::size_t c = 0; c < dm; ++c) var += (h2[t * dm + c] - mean) * (h2[t * dm + c] - mean);
        var /= static_cast<double>(dm);
        inv_std[t] = 1.0 / std::sqrt(var + detail::layer_norm_eps);
        for (std::size_t c = 0; c < dm; ++c) normed[t * dm + c] = (h2[t * dm + c] - mean) * inv_std[t];
      }
    }
    Vector pooled(dm, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < dm; ++c) pooled[c] += normed[t * dm + c] / static_cast<double>(T);
    affine(head, theta, pooled, noise, res);
    res.logits = res.outputs[head];
    res.embedding = pooled;

    if (cache != nullptr) {
      cache->probs = std::move(probs);
      cache->mixed = std::move(mixed);
      cache->h1 = std::move(h1);
      cache->ffn_act = std::move(act);
      cache->h2 = std::move(h2);
      cache->normed = std::move(normed);
      cache->inv_std = std::move(inv_std);
    }
    (void)dff;
  }

  [[nodiscard]] double loss_from_logits(const Vector& logits, const Datum& datum) const {
    if (spec_.loss == LossKind::cross_entropy) {
      if (datum.label < 0 || static_cast<std::size_t>(datum.label) >= logits.size())
        throw DimensionMismatch("label " + std::to_string(datum.label) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      return -(logits[static_cast<std::size_t>(datum.label)] - mx - std::log(z));
    }
    require_same_size(datum.target.size(), logits.size(), "mse target");
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += (logits[i] - datum.target[i]) * (logits[i] - datum.target[i]);
    return 0.5 * s;
  }

  [[nodiscard]] Vector loss_grad(const Vector& logits, const Datum& datum) const {
    Vector g(logits.size());
    if (spec_.loss == LossKind::cross_entropy) {
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      for (std::size_t i = 0; i < logits.size(); ++i) g[i] = std::exp(logits[i] - mx) / z;
      g[static_cast<std::size_t>(datum.label)] -= 1.0;
    } else {
      for (std::size_t i = 0; i < logits.size(); ++i) g[i] = logits[i] - datum.target[i];
    }
    return g;
  }

  void backward_mlp(std::span<const double> theta, const Datum& datum, Vector& grad) const {
    const auto res = forward(theta, datum);
    const std::size_t n = layers_.size();
    Vector delta = loss_grad(res.logits, datum);
    for (std::size_t l = n; l-- > 0;) {
      Vector din;
      affine_backward(l, theta, res.inputs[l], delta, grad, l > 0 ? &din : nullptr);
      if (l == 0) break;
      // res.inputs[l] is act(res.outputs[l - 1])
      const auto& pre = res.outputs[l - 1];
      const auto& post = res.inputs[l];
      for (std::size_t i = 0; i < din.size(); ++i)
        din[i] *= detail::activate_grad(spec_.activation, pre[i], post[i]);
      delta = std::move(din);
    }
  }

  void backward_attention(std::span<const double> theta, const Datum& datum, Vector& grad) const {
    require_same_size(datum.x.size(), input_dim_, "oracle_gradient(x)");
    const std::size_t T = spec_.seq_len;
    const std::size_t dm = spec_.layer_sizes[1];
    const std::size_t H = spec_.num_heads;
    const std::size_t hd = dm / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    enum : std::size_t { embed, q, k, v, o, f1, f2, head };

    ForwardResult res;
    res.inputs.resize(layers_.size());
    res.outputs.resize(layers_.size());
    AttentionCache cache;
    forward_attention(theta, datum.x, nullptr, res, &cache);

    const Vector dlogits = loss_grad(res.logits, datum);
    Vector dpooled;
    affine_backward(head, theta, res.inputs[head], dlogits, grad, &dpooled);

    Vector dh2(T * dm, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      if (!spec_.layer_norm) {
        for (std::size_t c = 0; c < dm; ++c) dh2[t * dm + c] = dpooled[c] / static_cast<double>(T);
        continue;
      }
      // y = (x - mean) * inv_std; dx = inv_std * (dy - mean(dy) - y * mean(dy * y))
      double mean_dy = 0.0;
      double mean_dyy = 0.0;
      for (std::size_t c = 0; c < dm; ++c) {
        const double dy = dpooled[c] / static_cast<double>(T);
        mean_dy += dy;
        mean_dyy += dy * cache.normed[t * dm + c];
      }
      mean_dy /= static_cast<double>(dm);
      mean_dyy /= static_cast<double>(dm);
      for (std::size_t c = 0; c < dm; ++c) {
        const double dy = dpooled[c] / static_cast<double>(T);
        dh2[t * dm + c] = cache.inv_std[t] * (dy - mean_dy - cache.normed[t * dm + c] * mean_dyy);
      }
    }

    // h2 = h1 + ffn2(act(ffn1(h1)))
    Vector dact;
    affine_backward(f2, theta, res.inputs[f2], dh2, grad, &dact);
    for (std::size_t i = 0; i < dact.size(); ++i)
      dact[i] *= detail::activate_grad(spec_.activation, res.outputs[f1][i], cache.ffn_act[i]);
    Vector dh1_ffn;
    affine_backward(f1, theta, res.inputs[f1], dact, grad, &dh1_ffn);
    Vector dh1 = dh2;
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] += dh1_ffn[i];

    // h1 = h0 + attn_o(mixed)
    Vector dmixed;
    affine_backward(o, theta, res.inputs[o], dh1, grad, &dmixed);

    const Vector& Q = res.outputs[q];
    const Vector& K = res.outputs[k];
    const Vector& V = res.outputs[v];
    Vector dQ(T * dm, 0.0), dK(T * dm, 0.0), dV(T * dm, 0.0);
    Vector dp(T, 0.0);
    for (std::size_t hh = 0; hh < H; ++hh) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* p = cache.probs.data() + (hh * T + t) * T;
        double weighted = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          double acc = 0.0;
          for (std::size_t c = 0; c < hd; ++c) {
            acc += dmixed[t * dm + hh * hd + c] * V[s * dm + hh * hd + c];
            dV[s * dm + hh * hd + c] += p[s] * dmixed[t * dm + hh * hd + c];
          }
          dp[s] = acc;
          weighted += p[s] * acc;
        }
        for (std::size_t s = 0; s < T; ++s) {
          const double dscore = p[s] * (dp[s] - weighted) * scale;
          if (dscore == 0.0) continue;
          for (std::size_t c = 0; c < hd; ++c) {
            dQ[t * dm + hh * hd + c] += dscore * K[s * dm + hh * hd + c];
            dK[s * dm + hh * hd + c] += dscore * Q[t * dm + hh * hd + c];
          }
        }
      }
    }
    Vector dh0 = dh1;
    for (std::size_t layer : {q, k, v}) {
      const Vector& dy = layer == q ? dQ : (layer == k ? dK : dV);
      Vector din;
      affine_backward(layer, theta, res.inputs[layer], dy, grad, &din);
      for (std::size_t i = 0; i < dh0.size(); ++i) dh0[i] += din[i];
    }
    affine_backward(embed, theta, res.inputs[embed], dh0, grad, nullptr);
  }

  ModelSpec spec_;
  std::vector<AffineLayer> layers_;
  std::size_t num_params_ = 0;
  std::size_t input_dim_ = 0;
};

/// Parameter indices belonging to a named scope: "all", a layer name, or
/// "attn" (all four attention projections).
inline std::vector<std::size_t> scope_indices(const Model& model, std::string_view scope) {
  std::vector<std::size_t> idx;
  auto add_layer = [&](const AffineLayer& layer) {
    for (std::size_t i = layer.first_param(); i < layer.end_param(); ++i) idx.push_back(i);
  };
  if (scope == "all") {
    idx.resize(model.num_params());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }
  for (const auto& layer : model.layers()) {
    if (layer.name == scope || (scope == "attn" && layer.name.rfind("attn_", 0) == 0)) add_layer(layer);
  }
  if (idx.empty()) throw std::invalid_argument("unknown parameter scope '" + std::string(scope) + "'");
  return idx;
}

inline Vector gather(std::span<const double> v, std::span<const std::size_t> idx) {
  Vector out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

}  // namespace fwdalloc
