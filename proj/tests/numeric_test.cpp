#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "repair/numeric.hpp"

namespace {

using repair::Matrix;
using repair::Vector;

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.values()) v = d(rng);
  return m;
}

TEST(Matrix, FromRowsRejectsRaggedRows) {
  EXPECT_THROW(Matrix::from_rows({{1.0, 2.0}, {3.0}}), repair::ShapeError);
}

TEST(Matrix, DataLengthMustMatchShape) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1.0, 2.0, 3.0}), repair::ShapeError);
}

TEST(Matrix, MatmulSmallExample) {
  const Matrix a = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  const Matrix b = Matrix::from_rows({{5.0, 6.0}, {7.0, 8.0}});
  const Matrix c = repair::matmul(a, b);
  EXPECT_EQ(c(0, 0), 19.0);
  EXPECT_EQ(c(0, 1), 22.0);
  EXPECT_EQ(c(1, 0), 43.0);
  EXPECT_EQ(c(1, 1), 50.0);
}

TEST(Matrix, MatmulShapeMismatchThrows) {
  EXPECT_THROW(repair::matmul(Matrix(2, 3), Matrix(2, 3)), repair::ShapeError);
  EXPECT_THROW(Matrix(2, 2) += Matrix(2, 3), repair::ShapeError);
}

TEST(Matrix, MatmulMatchesTripleLoopOracle) {
  std::mt19937_64 rng(7);
  const Matrix a = random_matrix(5, 4, rng);
  const Matrix b = random_matrix(4, 6, rng);
  const Matrix c = repair::matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
  }
}

TEST(Matrix, VecmatAndMatvecAgreeWithMatmul) {
  std::mt19937_64 rng(3);
  const Matrix m = random_matrix(4, 3, rng);
  const Vector v{1.0, -2.0, 0.5, 3.0};
  const Vector out = repair::vecmat(v, m);
  const Matrix row(1, 4, std::vector<double>(v.begin(), v.end()));
  const Matrix ref = repair::matmul(row, m);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out[j], ref(0, j), 1e-12);
  const Vector w{0.1, 0.2, 0.3};
  const Vector mv = repair::matvec(m, w.values());
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(mv[i], m(i, 0) * 0.1 + m(i, 1) * 0.2 + m(i, 2) * 0.3, 1e-12);
  }
}

TEST(Matrix, MatmulBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Matrix a = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(4, 2, rng);
  const Matrix up = random_matrix(3, 2, rng);
  const auto g = repair::matmul_backward(a, b, up);
  auto loss_a = [&](const Matrix& p) {
    const Matrix c = repair::matmul(p, b);
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c.values()[i] * up.values()[i];
    return repair::LossAndGrad{s, repair::matmul_backward(p, b, up).grad_a};
  };
  EXPECT_LT(repair::grad_check(loss_a, a).max_abs_error, 1e-8);
  EXPECT_EQ(g.grad_b.rows(), 4u);
  EXPECT_EQ(g.grad_b.cols(), 2u);
}

TEST(Vector, NormalizeZeroVectorThrows) {
  EXPECT_THROW(repair::normalized(Vector(3)), repair::NumericError);
  EXPECT_THROW(repair::cosine(Vector(2), Vector{1.0, 0.0}), repair::NumericError);
}

TEST(Vector, CosineOfParallelVectorsIsOne) {
  EXPECT_NEAR(repair::cosine(Vector{1.0, 2.0}, Vector{2.0, 4.0}), 1.0, 1e-15);
  EXPECT_NEAR(repair::cosine(Vector{1.0, 0.0}, Vector{0.0, 3.0}), 0.0, 1e-15);
}

TEST(Numeric, AllFiniteDetectsNanAndInf) {
  std::vector<double> v{1.0, 2.0};
  EXPECT_TRUE(repair::all_finite(v));
  v.push_back(std::numeric_limits<double>::quiet_NaN());
  EXPECT_FALSE(repair::all_finite(v));
  v.back() = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(repair::all_finite(v));
}

TEST(Numeric, TransposeAndHadamard) {
  const Matrix a = Matrix::from_rows({{1.0, 2.0, 3.0}});
  const Matrix t = repair::transpose(a);
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t(2, 0), 3.0);
  const Matrix h = repair::hadamard(a, Matrix::from_rows({{2.0, 0.0, -1.0}}));
  EXPECT_EQ(h(0, 0), 2.0);
  EXPECT_EQ(h(0, 1), 0.0);
  EXPECT_EQ(h(0, 2), -3.0);
}

TEST(Numeric, GradCheckFlagsWrongGradient) {
  const Matrix p = Matrix::from_rows({{1.0, -2.0}});
  auto wrong = [](const Matrix& x) {
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    return repair::LossAndGrad{s, Matrix(1, 2, 1.0)};
  };
  const auto r = repair::grad_check(wrong, p);
  EXPECT_NEAR(r.max_abs_error, 5.0, 1e-6);
  EXPECT_EQ(r.worst_index, 1u);
}

}  // namespace
