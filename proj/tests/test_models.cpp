#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fwdalloc/model.hpp"

using namespace fwdalloc;

namespace {

ModelSpec mlp_spec(std::vector<std::size_t> sizes, LossKind loss = LossKind::cross_entropy,
                   Activation act = Activation::tanh) {
  ModelSpec s;
  s.layer_sizes = std::move(sizes);
  s.loss = loss;
  s.activation = act;
  return s;
}

ModelSpec attention_spec(LossKind loss, bool layer_norm, std::size_t heads) {
  ModelSpec s;
  s.kind = ModelKind::attention_block;
  s.layer_sizes = {3, 4, 6, 2};
  s.seq_len = 3;
  s.num_heads = heads;
  s.layer_norm = layer_norm;
  s.loss = loss;
  return s;
}

Datum random_datum(const Model& m, RngStream& r) {
  Datum d;
  d.x = r.normal_vector(m.input_dim());
  d.label = static_cast<int>(r.below(m.output_dim()));
  d.target = r.normal_vector(m.output_dim());
  return d;
}

// Central differences with step 1e-5 against the analytic gradient of the mean
// batch loss; returns the worst relative error over coordinates.
double gradient_check(const Model& m, const Vector& theta, const std::vector<Datum>& batch) {
  const Vector g = m.oracle_gradient(theta, batch);
  const double h = 1e-5;
  double worst = 0.0;
  Vector t = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    auto mean_loss = [&] {
      double s = 0.0;
      for (const auto& d : batch) s += m.loss(t, d);
      return s / static_cast<double>(batch.size());
    };
    t[i] = theta[i] + h;
    const double up = mean_loss();
    t[i] = theta[i] - h;
    const double down = mean_loss();
    t[i] = theta[i];
    const double fd = (up - down) / (2.0 * h);
    // Coordinates whose gradient is at the level of the difference noise are
    // compared on an absolute scale.
    const double scale = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
    worst = std::max(worst, std::abs(g[i] - fd) / scale);
  }
  return worst;
}

}  // namespace

TEST(Model, ParameterCountAndLayout) {
  Model m(mlp_spec({3, 5, 2}));
  EXPECT_EQ(m.num_params(), 3u * 5 + 5 + 5 * 2 + 2);
  ASSERT_EQ(m.layers().size(), 2u);
  EXPECT_EQ(m.layers()[0].name, "layer0");
  EXPECT_EQ(m.layers()[1].first_param(), m.layers()[0].end_param());
  EXPECT_EQ(m.layer_index("layer1"), 1u);
  EXPECT_THROW((void)m.layer_index("nope"), std::invalid_argument);
}

TEST(Model, AttentionLayout) {
  Model m(attention_spec(LossKind::cross_entropy, false, 2));
  std::size_t total = 0;
  for (const auto& l : m.layers()) total += l.param_count();
  EXPECT_EQ(total, m.num_params());
  EXPECT_EQ(m.layers().front().name, "embed");
  EXPECT_EQ(m.layers().back().name, "head");
  EXPECT_EQ(m.input_dim(), 9u);
  EXPECT_LE(m.num_params(), 200u);
}

TEST(Model, FlattenRoundTripIsExact) {
  for (const auto& spec : {mlp_spec({4, 7, 3}), attention_spec(LossKind::mse, true, 2)}) {
    Model m(spec);
    const Vector theta = m.init_params(RngStream(1));
    EXPECT_EQ(m.flatten(m.unflatten(theta)), theta);
  }
}

TEST(Model, ZeroWeightsCrossEntropyIsLogC) {
  for (std::size_t c : {2u, 3u, 7u}) {
    Model m(mlp_spec({4, 6, c}));
    const Vector theta(m.num_params(), 0.0);
    RngStream r(c);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(m.loss(theta, random_datum(m, r)), std::log(double(c)), 1e-14);
  }
}

TEST(Model, ZeroNoiseIsBitIdentical) {
  RngStream r(2);
  for (const auto& spec : {mlp_spec({3, 8, 2}), attention_spec(LossKind::cross_entropy, false, 1)}) {
    Model m(spec);
    const Vector theta = m.init_params(r.child(1));
    const Datum d = random_datum(m, r);
    const double clean = m.loss(theta, d);

    Perturbation params;
    params.parameters.assign(m.num_params(), 0.0);
    EXPECT_EQ(m.forward(theta, d, &params).loss, clean);

    Perturbation act;
    act.activation.resize(m.layers().size());
    for (std::size_t l = 0; l < m.layers().size(); ++l) act.activation[l].assign(m.layers()[l].noise_dim(), 0.0);
    EXPECT_EQ(m.forward(theta, d, &act).loss, clean);
  }
}

TEST(Model, ParameterNoiseEqualsShiftedTheta) {
  RngStream r(3);
  Model m(mlp_spec({3, 8, 2}));
  const Vector theta = m.init_params(r.child(1));
  const Datum d = random_datum(m, r);
  Perturbation p;
  p.parameters = r.normal_vector(m.num_params());
  Vector shifted = theta;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += p.parameters[i];
  EXPECT_EQ(m.forward(theta, d, &p).loss, m.loss(shifted, d));
}

TEST(Model, ActivationNoiseActsBeforeTheNonlinearity) {
  // For a single-row layer, output noise z is the same as a bias shift by z.
  RngStream r(4);
  Model m(mlp_spec({3, 5, 2}));
  const Vector theta = m.init_params(r.child(1));
  const Datum d = random_datum(m, r);
  Perturbation p;
  p.activation.resize(2);
  p.activation[0] = r.normal_vector(5);
  Vector shifted = theta;
  for (std::size_t o = 0; o < 5; ++o) shifted[m.layers()[0].bias_offset + o] += p.activation[0][o];
  EXPECT_NEAR(m.forward(theta, d, &p).loss, m.loss(shifted, d), 1e-14);
}

TEST(Model, MseAtRealizableTargetIsZero) {
  RngStream r(5);
  Model m(mlp_spec({3, 6, 2}, LossKind::mse));
  const Vector theta_star = m.init_params(r.child(1));
  Datum d = random_datum(m, r);
  const auto out = m.forward(theta_star, d).logits;
  d.target = out;
  EXPECT_EQ(m.loss(theta_star, d), 0.0);
}

TEST(Model, ShapeMismatchThrows) {
  Model m(mlp_spec({3, 4, 2}));
  const Vector theta(m.num_params(), 0.0);
  Datum d{{1.0, 2.0}, 0, {}};
  EXPECT_THROW((void)m.loss(theta, d), DimensionMismatch);
  EXPECT_THROW((void)m.loss(Vector(3, 0.0), Datum{{1, 2, 3}, 0, {}}), DimensionMismatch);
  Perturbation p;
  p.parameters.assign(2, 0.0);
  EXPECT_THROW((void)m.forward(theta, Datum{{1, 2, 3}, 0, {}}, &p), DimensionMismatch);
}

TEST(Model, NonFiniteLossIsNumericalBlowup) {
  Model m(mlp_spec({2, 3, 2}, LossKind::mse, Activation::identity));
  Vector theta(m.num_params(), 1e200);
  Datum d{{1e200, 1e200}, 0, {0.0, 0.0}};
  EXPECT_THROW((void)m.loss(theta, d), NumericalBlowup);
}

TEST(Model, InvalidSpecsThrow) {
  EXPECT_THROW(Model(mlp_spec({3})), std::invalid_argument);
  EXPECT_THROW(Model(mlp_spec({3, 0, 2})), std::invalid_argument);
  auto s = attention_spec(LossKind::mse, false, 3);  // 4 not divisible by 3
  EXPECT_THROW(Model{s}, std::invalid_argument);
}

TEST(OracleGradient, QuadraticHead) {
  // Bias-free linear layer fed x = [1] with mse: L = 0.5 * ||theta - target||^2.
  ModelSpec s = mlp_spec({1, 6}, LossKind::mse, Activation::identity);
  s.bias = false;
  Model m(s);
  RngStream r(6);
  const Vector theta = r.normal_vector(6);
  const Datum d{{1.0}, 0, r.normal_vector(6)};
  const Vector g = m.oracle_gradient(theta, std::vector<Datum>{d});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(g[i], theta[i] - d.target[i], 1e-15);
}

TEST(OracleGradient, RandomMlpFiftyParamsMatchesFiniteDifferences) {
  Model m(mlp_spec({3, 8, 2}));  // 3*8+8+8*2+2 = 50
  ASSERT_EQ(m.num_params(), 50u);
  RngStream r(7);
  const Vector theta = m.init_params(r.child(1));
  std::vector<Datum> batch;
  for (int k = 0; k < 4; ++k) batch.push_back(random_datum(m, r));
  EXPECT_LT(gradient_check(m, theta, batch), 1e-4);
}

struct GradCase {
  std::string name;
  ModelSpec spec;
};

class OracleGradientCheck : public ::testing::TestWithParam<GradCase> {};

TEST_P(OracleGradientCheck, MatchesFiniteDifferences) {
  const Model m(GetParam().spec);
  ASSERT_LE(m.num_params(), 200u);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream r(100 + seed);
    Vector theta = m.init_params(r.child(1));
    for (auto& v : theta) v += 0.1 * r.normal();  // nonzero biases too
    std::vector<Datum> batch;
    for (int k = 0; k < 3; ++k) batch.push_back(random_datum(m, r));
    EXPECT_LT(gradient_check(m, theta, batch), 1e-4) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllKinds, OracleGradientCheck,
    ::testing::Values(GradCase{"mlp_tanh_ce", mlp_spec({3, 6, 5, 3})},
                      GradCase{"mlp_tanh_mse", mlp_spec({3, 6, 5, 3}, LossKind::mse)},
                      GradCase{"mlp_relu_ce", mlp_spec({4, 10, 3}, LossKind::cross_entropy, Activation::relu)},
                      GradCase{"attn_ce", attention_spec(LossKind::cross_entropy, false, 1)},
                      GradCase{"attn_mse", attention_spec(LossKind::mse, false, 1)},
                      GradCase{"attn_two_heads_ce", attention_spec(LossKind::cross_entropy, false, 2)},
                      GradCase{"attn_layer_norm_ce", attention_spec(LossKind::cross_entropy, true, 2)},
                      GradCase{"attn_layer_norm_mse", attention_spec(LossKind::mse, true, 1)}),
    [](const auto& info) { return info.param.name; });

TEST(OracleGradient, DuplicatedDatumMatchesSingle) {
  Model m(mlp_spec({3, 5, 2}));
  RngStream r(8);
  const Vector theta = m.init_params(r.child(1));
  const Datum d = random_datum(m, r);
  const Vector once = m.oracle_gradient(theta, std::vector<Datum>{d});
  const Vector twice = m.oracle_gradient(theta, std::vector<Datum>{d, d});
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-15);
}

TEST(Embedding, IdenticalInputsGiveCosineOne) {
  Model m(mlp_spec({3, 6, 2}));
  RngStream r(9);
  const Vector theta = m.init_params(r.child(1));
  const Vector x = r.normal_vector(3);
  const Vector a = m.embedding(theta, x);
  EXPECT_EQ(a, m.embedding(theta, x));
  EXPECT_NEAR(cosine_similarity(a, a).value, 1.0, 1e-15);
}

TEST(Embedding, IdentityLayerKeepsOrthogonalInputsOrthogonal) {
  Model m(mlp_spec({3, 3, 2}, LossKind::cross_entropy, Activation::identity));
  auto params = m.unflatten(Vector(m.num_params(), 0.0));
  for (std::size_t i = 0; i < 3; ++i) params[0].weight(i, i) = 1.0;
  const Vector theta = m.flatten(params);
  const Vector a = m.embedding(theta, Vector{1, 0, 0});
  const Vector b = m.embedding(theta, Vector{0, 1, 0});
  EXPECT_NEAR(cosine_similarity(a, b).value, 0.0, 1e-15);
}

TEST(Embedding, DimensionIsLastHiddenSize) {
  Model m(mlp_spec({3, 7, 5, 2}));
  const Vector theta = m.init_params(RngStream(10));
  EXPECT_EQ(m.embedding(theta, Vector{1, 2, 3}).size(), 5u);
  EXPECT_EQ(m.embedding_dim(), 5u);
  Model a(attention_spec(LossKind::cross_entropy, false, 2));
  EXPECT_EQ(a.embedding(a.init_params(RngStream(11)), Vector(9, 0.5)).size(), 4u);
}

TEST(Scope, NamedBlocks) {
  Model a(attention_spec(LossKind::cross_entropy, false, 2));
  EXPECT_EQ(scope_indices(a, "all").size(), a.num_params());
  const auto k = scope_indices(a, "attn_k");
  EXPECT_EQ(k.size(), a.layers()[a.layer_index("attn_k")].param_count());
  EXPECT_EQ(scope_indices(a, "attn").size(), 4 * k.size());
  EXPECT_THROW((void)scope_indices(a, "missing"), std::invalid_argument);
}
