#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "miat/autodiff.hpp"
#include "miat/objectives.hpp"

using namespace miat;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

using M = Matrix<double>;
using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

M random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Scalar read-out: sum of output entries times fixed random weights.
Var<double> weighted_sum(const Var<double>& y, const M& w) {
  auto& t = *y.tape();
  auto p = ad::hadamard_constant(y, w);
  auto left = t.constant(M::Ones(1, y.rows()));
  auto right = t.constant(M::Ones(y.cols(), 1));
  return ad::matmul(ad::matmul(left, p), right);
}

// Compares tape gradients of every input with central differences.
double max_gradient_error(const Builder& build, std::vector<M> inputs, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  M w;
  auto evaluate = [&](std::vector<M>& in, std::vector<M>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (std::size_t i = 0; i < in.size(); ++i) vars.push_back(tape.parameter(in[i], grads ? &(*grads)[i] : nullptr));
    auto y = build(tape, vars);
    if (w.size() == 0) w = random_matrix(rng, y.rows(), y.cols());
    auto s = weighted_sum(y, w);
    if (grads) tape.backward(s);
    return s.value()(0, 0);
  };
  std::vector<M> grads;
  for (const auto& m : inputs) grads.push_back(M::Zero(m.rows(), m.cols()));
  evaluate(inputs, &grads);
  double worst = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i].data()[j];
      inputs[i].data()[j] = keep + h;
      const double up = evaluate(inputs, nullptr);
      inputs[i].data()[j] = keep - h;
      const double down = evaluate(inputs, nullptr);
      inputs[i].data()[j] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[i].data()[j];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1.0});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
  }
  return worst;
}

constexpr double kTol = 1e-7;

}  // namespace

TEST(AutodiffOps, Matmul) {
  std::mt19937_64 rng(1);
  auto e = max_gradient_error([](auto&, const auto& v) { return ad::matmul(v[0], v[1]); },
                              {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)});
  EXPECT_LT(e, kTol);
}

TEST(AutodiffOps, LinearWithBias) {
  std::mt19937_64 rng(2);
  auto e = max_gradient_error([](auto&, const auto& v) { return ad::linear(v[0], v[1], v[2]); },
                              {random_matrix(rng, 5, 3), random_matrix(rng, 3, 4), random_matrix(rng, 1, 4)});
  EXPECT_LT(e, kTol);
}

TEST(AutodiffOps, AddScaleSliceConcatGatherRepeat) {
  std::mt19937_64 rng(3);
  auto e = max_gradient_error(
      [](auto&, const auto& v) {
        auto a = ad::add_scaled(v[0], v[1], 0.7);
        auto b = ad::scale(ad::add(v[0], v[1]), -1.3);
        auto c = ad::concat_rows<double>({a, ad::slice_rows(b, 1, 2), ad::gather_rows(a, {2, 0, 0})});
        auto d = ad::repeat_rows(ad::slice_cols(c, 1, 2), 2);
        return d;
      },
      {random_matrix(rng, 3, 3), random_matrix(rng, 3, 3)});
  EXPECT_LT(e, kTol);
}

TEST(AutodiffOps, CumulativeSumRestartsPerBlock) {
  Tape<double> t;
  M x(4, 1);
  x << 1, 2, 3, 4;
  auto y = ad::cumsum_rows(t.constant(x), 2);
  EXPECT_EQ(y.value()(1, 0), 3);
  EXPECT_EQ(y.value()(2, 0), 3);
  EXPECT_EQ(y.value()(3, 0), 7);
  std::mt19937_64 rng(4);
  auto e = max_gradient_error([](auto&, const auto& v) { return ad::cumsum_rows(v[0], 3); },
                              {random_matrix(rng, 6, 2)});
  EXPECT_LT(e, kTol);
}

TEST(AutodiffOps, Nonlinearities) {
  std::mt19937_64 rng(5);
  // Values kept away from zero so the kinked activations are differentiable.
  M x = random_matrix(rng, 4, 6, 0.05, 2.0);
  for (Eigen::Index i = 0; i < x.size(); i += 2) x.data()[i] = -x.data()[i];
  EXPECT_LT(max_gradient_error([](auto&, const auto& v) { return ad::leaky_relu(v[0], 0.1); }, {x}), kTol);
  EXPECT_LT(max_gradient_error([](auto&, const auto& v) { return ad::relu(v[0]); }, {x}), kTol);
  EXPECT_LT(max_gradient_error([](auto&, const auto& v) { return ad::softplus_floor(v[0], 1e-4); }, {x}), kTol);
  EXPECT_LT(max_gradient_error([](auto&, const auto& v) { return ad::glu(v[0]); }, {x}), kTol);
  EXPECT_LT(max_gradient_error([](auto&, const auto& v) { return ad::softmax_rows(v[0]); }, {x}), kTol);
}

TEST(AutodiffOps, LayerNorm) {
  std::mt19937_64 rng(6);
  auto e = max_gradient_error([](auto&, const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                              {random_matrix(rng, 3, 8), random_matrix(rng, 1, 8), random_matrix(rng, 1, 8)});
  EXPECT_LT(e, 1e-6);
}

TEST(AutodiffOps, MaskedMultiHeadAttention) {
  std::mt19937_64 rng(7);
  ad::AttentionPattern p;
  const std::vector<std::uint32_t> k0{0, 2, 3}, k1{1}, k2{}, k3{0, 1, 2, 3, 4};
  p.add_query(k0);
  p.add_query(k1);
  p.add_query(k2);
  p.add_query(k3);
  auto e = max_gradient_error([&](auto&, const auto& v) { return ad::attention(v[0], v[1], v[2], 2, p); },
                              {random_matrix(rng, 4, 6), random_matrix(rng, 5, 6), random_matrix(rng, 5, 6)});
  EXPECT_LT(e, kTol);
}

TEST(AutodiffOps, AttentionMatchesDenseReference) {
  std::mt19937_64 rng(8);
  const M q = random_matrix(rng, 3, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 4);
  Tape<double> t;
  ad::AttentionProbe<double> probe;
  auto out = ad::attention(t.constant(q), t.constant(k), t.constant(v), 2, ad::AttentionPattern::dense(3, 5), &probe);
  for (int h = 0; h < 2; ++h) {
    M scores = q.middleCols(2 * h, 2) * k.middleCols(2 * h, 2).transpose() / std::sqrt(2.0);
    for (Eigen::Index r = 0; r < 3; ++r) {
      M e = (scores.row(r).array() - scores.row(r).maxCoeff()).exp();
      e /= e.sum();
      const M expect = e * v.middleCols(2 * h, 2);
      for (int c = 0; c < 2; ++c) EXPECT_NEAR(out.value()(r, 2 * h + c), expect(0, c), 1e-12);
      double total = 0;
      for (double w : probe.weights[static_cast<std::size_t>(r * 2 + h)]) total += w;
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(AutodiffOps, EmptyKeyListGivesZeroRow) {
  Tape<double> t;
  ad::AttentionPattern p;
  p.add_query(std::span<const std::uint32_t>{});
  auto out = ad::attention(t.constant(M::Ones(1, 4)), t.constant(M::Ones(2, 4)), t.constant(M::Ones(2, 4)), 1, p);
  EXPECT_EQ(out.value(), M::Zero(1, 4));
}

TEST(AutodiffOps, LossOps) {
  std::mt19937_64 rng(9);
  const M truth = random_matrix(rng, 5, 2, -3, 3);
  EXPECT_LT(max_gradient_error([&](auto&, const auto& v) { return ad::mse_op(v[0], truth); },
                               {random_matrix(rng, 5, 2, -3, 3)}),
            kTol);
  EXPECT_LT(max_gradient_error([&](auto&, const auto& v) { return ad::nll_op(v[0], v[1], truth); },
                               {random_matrix(rng, 5, 2, -3, 3), random_matrix(rng, 5, 2, 0.5, 2)}),
            1e-6);
  EXPECT_LT(max_gradient_error([&](auto&, const auto& v) { return ad::nll_class_op(ad::softmax_rows(v[0]), 1); },
                               {random_matrix(rng, 1, 3)}),
            kTol);
}

TEST(Tape, FrozenLeavesReceiveNoGradient) {
  Tape<double> t;
  M a = M::Ones(2, 2), b = M::Ones(2, 2), ga = M::Zero(2, 2);
  auto va = t.parameter(a, &ga);
  auto vb = t.parameter(b, nullptr);
  auto s = weighted_sum(ad::matmul(va, vb), M::Ones(2, 2));
  t.backward(s);
  EXPECT_EQ(ga, M::Constant(2, 2, 2.0));
  EXPECT_FALSE(t.requires_grad(vb));
}

TEST(Tape, GradientsAccumulateAcrossPasses) {
  M a = M::Constant(1, 1, 3.0), ga = M::Zero(1, 1);
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> t;
    auto v = t.parameter(a, &ga);
    t.backward(ad::matmul(v, v), 0.5);
  }
  EXPECT_DOUBLE_EQ(ga(0, 0), 6.0);
}

TEST(Tape, ShapeErrors) {
  Tape<double> t;
  auto a = t.constant(M::Ones(2, 3));
  EXPECT_THROW(ad::matmul(a, a), ad::ShapeError);
  EXPECT_THROW(ad::add(a, t.constant(M::Ones(3, 2))), ad::ShapeError);
  EXPECT_THROW(t.backward(a), ad::ShapeError);
  EXPECT_THROW(ad::glu(a), ad::ShapeError);
  M sink = M::Zero(1, 1);
  M value = M::Ones(2, 2);
  EXPECT_THROW(t.parameter(value, &sink), ad::ShapeError);
}

TEST(Tape, BranchSignatureTracksKinks) {
  auto signature = [](double x) {
    Tape<double> t;
    ad::leaky_relu(t.constant(M::Constant(1, 1, x)), 0.1);
    return t.branch_signature();
  };
  EXPECT_EQ(signature(0.5), signature(2.0));
  EXPECT_NE(signature(0.5), signature(-0.5));
}
