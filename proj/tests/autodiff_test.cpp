#include "mantis/autodiff.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

namespace mantis {
namespace {

using testing::max_gradient_error;

// Reduces any matrix to a scalar with fixed, uneven weights.
Var readout(Tape& t, Var y) {
  Matrix w(1, y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) w(0, c) = 0.3 + 0.7 * static_cast<double>(c);
  Matrix rows(1, y.rows());
  for (Eigen::Index r = 0; r < y.rows(); ++r) rows(0, r) = 1.0 - 0.2 * static_cast<double>(r);
  // Per-row weights, broadcast across columns.
  Var weighted = ops::mul(y, t.constant(rows.transpose() * Matrix::Ones(1, y.cols())));
  return ops::linear(ops::col_mean(weighted), t.constant(w));
}

constexpr double kTol = 1e-6;

TEST(Ops, ElementwiseAndBroadcast) {
  Rng rng(1);
  std::vector<Matrix> in{rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(1, 3, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::add(v[0], v[1])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::mul(v[0], v[1])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::add_row(v[0], v[2])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::mul_row(v[0], v[2])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::scale(v[0], -2.5)); }), kTol);
}

TEST(Ops, LinearWithAndWithoutBias) {
  Rng rng(2);
  std::vector<Matrix> in{rng.normal_matrix(5, 4, 1.0), rng.normal_matrix(3, 4, 1.0), rng.normal_matrix(1, 3, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::linear(v[0], v[1])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::linear(v[0], v[1], v[2])); }),
            kTol);
}

TEST(Ops, Activations) {
  Rng rng(3);
  Matrix x = rng.normal_matrix(4, 5, 1.0);
  // Keep relu inputs away from its kink.
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.3;
  std::vector<Matrix> in{x};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::silu(v[0])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::relu(v[0])); }), kTol);
}

TEST(Ops, LayerNorm) {
  Rng rng(4);
  std::vector<Matrix> in{rng.normal_matrix(3, 6, 2.0), rng.normal_matrix(1, 6, 1.0), rng.normal_matrix(1, 6, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) {
              return readout(t, ops::layer_norm(v[0], v[1], v[2]));
            }),
            kTol);
  Tape t(false);
  const Matrix y = ops::layer_norm(t.constant(in[0]), t.constant(Matrix::Ones(1, 6)), t.constant(Matrix::Zero(1, 6))).value();
  for (Eigen::Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(r).squaredNorm() / 6.0, 1.0, 1e-4);
  }
}

TEST(Ops, CausalConvolution) {
  Rng rng(5);
  std::vector<Matrix> in{rng.normal_matrix(6, 3, 1.0), rng.normal_matrix(3, 4, 1.0), rng.normal_matrix(1, 3, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) {
              return readout(t, ops::causal_dwconv(v[0], v[1], v[2]));
            }),
            kTol);
  // Changing a later input leaves earlier outputs alone.
  Tape t(false);
  const Matrix y0 = ops::causal_dwconv(t.constant(in[0]), t.constant(in[1]), t.constant(in[2])).value();
  Matrix x1 = in[0];
  x1.row(4).setConstant(9.0);
  const Matrix y1 = ops::causal_dwconv(t.constant(x1), t.constant(in[1]), t.constant(in[2])).value();
  EXPECT_EQ((y0.topRows(4) - y1.topRows(4)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT((y0.row(4) - y1.row(4)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ops, GatherMaxMean) {
  Rng rng(6);
  std::vector<Matrix> in{rng.normal_matrix(5, 3, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) {
              return readout(t, ops::gather_rows(v[0], {4, 0, 0, 2}));
            }),
            kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::col_max(v[0])); }), kTol);
  EXPECT_LT(max_gradient_error(in, [](Tape& t, const std::vector<Var>& v) { return readout(t, ops::col_mean(v[0])); }), kTol);
}

TEST(Ops, WeightedSum) {
  Rng rng(7);
  std::vector<Matrix> in{rng.normal_matrix(1, 1, 1.0), rng.normal_matrix(1, 1, 1.0)};
  EXPECT_LT(max_gradient_error(in, [](Tape&, const std::vector<Var>& v) {
              return ops::weighted_sum({ops::mul(v[0], v[0]), v[1]}, {0.5, 3.0});
            }),
            kTol);
}

// Gradient of 1/2 ||W x||^2 with respect to W is (W x) x^T.
TEST(Tape, QuadraticFormGradient) {
  Rng rng(8);
  const Matrix w = rng.normal_matrix(3, 4, 1.0), x = rng.normal_matrix(1, 4, 1.0);
  Tape t;
  Var vw = t.variable_ref(w);
  Var y = ops::linear(t.constant_ref(x), vw);  // 1 x 3 = (W x)^T
  Var loss = ops::linear(ops::mul(y, y), t.constant(Matrix::Constant(1, 3, 0.5)));
  t.backward(loss);
  const Matrix expected = (w * x.transpose()) * x;
  EXPECT_LE((t.grad(vw) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Tape, SharedInputsAccumulate) {
  Tape t;
  Matrix x(1, 1);
  x << 3.0;
  Var v = t.variable_ref(x);
  Var loss = ops::weighted_sum({v, ops::mul(v, v)}, {1.0, 1.0});  // x + x^2
  t.backward(loss);
  EXPECT_DOUBLE_EQ(t.grad(v)(0, 0), 7.0);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape t;
  Matrix a = Matrix::Ones(2, 2), b = Matrix::Ones(2, 2);
  Var va = t.variable_ref(a), vb = t.constant_ref(b);
  t.backward(ops::linear(ops::col_mean(ops::mul(va, vb)), t.constant(Matrix::Ones(1, 2))));
  EXPECT_TRUE(t.has_grad(va.id));
  EXPECT_FALSE(t.has_grad(vb.id));
}

TEST(Tape, NonScalarAndNonRecordingBackwardThrow) {
  Tape t;
  Var v = t.variable(Matrix::Ones(2, 1));
  EXPECT_THROW(t.backward(v), InternalError);
  Tape off(false);
  Var s = off.variable(Matrix::Ones(1, 1));
  EXPECT_THROW(off.backward(s), InternalError);
  EXPECT_THROW(ops::add(t.variable(Matrix::Ones(2, 2)), t.variable(Matrix::Ones(2, 3))), InternalError);
}

}  // namespace
}  // namespace mantis
