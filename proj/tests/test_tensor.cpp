#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "vbltr/tensor.hpp"

using namespace vbltr;

namespace {

DenseTensor random_tensor(const Dims& dims, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  std::vector<double> v(product(dims));
  for (auto& e : v) e = z(rng);
  return DenseTensor(dims, std::move(v));
}

CPFactors random_factors(const Dims& dims, std::size_t rank, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  std::vector<Matrix> f;
  for (auto d : dims) {
    Matrix m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(rank));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = z(rng);
    f.push_back(m);
  }
  return CPFactors(f);
}

// Column of (i_1..i_M) in the mode-d unfolding, straight from the index formula
// (0-based): j = sum_{k != d} i_k prod_{m < k, m != d} I_m.
std::size_t unfold_column(const std::vector<std::size_t>& idx, const Dims& dims, std::size_t d) {
  std::size_t j = 0;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (k == d) continue;
    std::size_t stride = 1;
    for (std::size_t m = 0; m < k; ++m) {
      if (m != d) stride *= dims[m];
    }
    j += idx[k] * stride;
  }
  return j;
}

}  // namespace

TEST(DenseTensor, RejectsBadShapes) {
  EXPECT_THROW(DenseTensor(Dims{3}), DimensionError);
  EXPECT_THROW(DenseTensor(Dims{2, 0}), DimensionError);
  EXPECT_THROW(DenseTensor(Dims{2, 2}, std::vector<double>(3)), DimensionError);
  EXPECT_NO_THROW(DenseTensor(Dims{2, 2}));
}

TEST(Matricize, IndexFormulaWorkedExample) {
  // (2,3,2) 1-based in dims (2,3,2) -> row 2, column 6 (1-based).
  Dims dims{2, 3, 2};
  DenseTensor t(dims);
  t({1, 2, 1}) = 42.0;
  const Matrix m = matricize(t, 0);
  EXPECT_EQ(m.rows(), 2);
  EXPECT_EQ(m.cols(), 6);
  EXPECT_EQ(m(1, 5), 42.0);
}

TEST(Matricize, BruteForceEnumeration) {
  std::mt19937_64 rng(1);
  for (const Dims& dims : {Dims{2, 3, 2}, Dims{3, 4}, Dims{2, 3, 4, 2}}) {
    const DenseTensor t = random_tensor(dims, rng);
    for (std::size_t d = 0; d < dims.size(); ++d) {
      const Matrix m = matricize(t, d);
      std::vector<std::size_t> idx(dims.size(), 0);
      for (std::size_t lin = 0; lin < t.size(); ++lin) {
        std::size_t rem = lin;
        for (std::size_t k = 0; k < dims.size(); ++k) {
          idx[k] = rem % dims[k];
          rem /= dims[k];
        }
        EXPECT_EQ(m(static_cast<Eigen::Index>(idx[d]),
                    static_cast<Eigen::Index>(unfold_column(idx, dims, d))),
                  t[lin]);
      }
    }
  }
}

TEST(Matricize, OrderTwoIsTheMatrixItself) {
  std::mt19937_64 rng(2);
  const DenseTensor t = random_tensor({3, 5}, rng);
  const Matrix m = matricize(t, 0);
  const Eigen::Map<const Matrix> view(t.data(), 3, 5);
  EXPECT_EQ(m, Matrix(view));
}

TEST(Matricize, BadModeThrows) {
  DenseTensor t(Dims{2, 2, 2});
  EXPECT_THROW(matricize(t, 3), ModeIndexError);
}

TEST(Fold, RoundTripRandom) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  for (int trial = 0; trial < 50; ++trial) {
    Dims dims{dim(rng), dim(rng), dim(rng)};
    const DenseTensor t = random_tensor(dims, rng);
    for (std::size_t d = 0; d < 3; ++d) {
      const Matrix m = matricize(t, d);
      EXPECT_EQ(fold(m, d, dims), t);
      EXPECT_EQ(matricize(fold(m, d, dims), d), m);
    }
  }
}

TEST(Fold, WorkedExampleAndZero) {
  Matrix m = Matrix::Zero(2, 6);
  EXPECT_EQ(fold(m, 0, {2, 3, 2}), DenseTensor(Dims{2, 3, 2}));
  m(1, 5) = 7.0;
  const DenseTensor t = fold(m, 0, {2, 3, 2});
  EXPECT_EQ(t({1, 2, 1}), 7.0);
  EXPECT_THROW(fold(Matrix::Zero(2, 5), 0, {2, 3, 2}), DimensionError);
}

TEST(Inner, BasicIdentities) {
  DenseTensor ones(Dims{2, 2, 2}, std::vector<double>(8, 1.0));
  EXPECT_EQ(inner(ones, ones), 8.0);
  DenseTensor zero(Dims{2, 2, 2});
  EXPECT_EQ(inner(zero, zero), 0.0);
  std::mt19937_64 rng(4);
  const DenseTensor x = random_tensor({3, 4, 2}, rng);
  const DenseTensor y = random_tensor({3, 4, 2}, rng);
  EXPECT_GT(inner(x, x), 0.0);
  for (std::size_t d = 0; d < 3; ++d) {
    const double tr = (matricize(x, d) * matricize(y, d).transpose()).trace();
    EXPECT_NEAR(inner(x, y), tr, 1e-12);
  }
  EXPECT_THROW(inner(x, ones), DimensionError);
}

TEST(Kronecker, HandExamples) {
  Matrix b(2, 2);
  b << 1, 2, 3, 4;
  const Matrix k = kronecker(Matrix::Identity(2, 2), b);
  Matrix expect = Matrix::Zero(4, 4);
  expect.topLeftCorner(2, 2) = b;
  expect.bottomRightCorner(2, 2) = b;
  EXPECT_EQ(k, expect);

  Matrix a(1, 2);
  a << 1, 2;
  Matrix c(2, 1);
  c << 3, 4;
  Matrix e(2, 2);
  e << 3, 6, 4, 8;
  EXPECT_EQ(kronecker(a, c), e);
}

TEST(Kronecker, MixedProductProperty) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = Matrix::Random(2, 2), b = Matrix::Random(2, 2), c = Matrix::Random(2, 2),
                 d = Matrix::Random(2, 2);
    EXPECT_LT((kronecker(a, b) * kronecker(c, d) - kronecker(a * c, b * d)).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(KhatriRao, ColumnLaw) {
  Matrix a = Matrix::Random(3, 2);
  Matrix b = Matrix::Random(4, 2);
  const Matrix kr = khatri_rao(a, b);
  for (Eigen::Index r = 0; r < 2; ++r) {
    EXPECT_EQ(Matrix(kr.col(r)), kronecker(a.col(r), b.col(r)));
  }
  const Matrix id = khatri_rao(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  Matrix expect = Matrix::Zero(4, 2);
  expect(0, 0) = 1;
  expect(3, 1) = 1;
  EXPECT_EQ(id, expect);
  EXPECT_THROW(khatri_rao(a, Matrix::Random(4, 3)), DimensionError);
}

TEST(CPCompose, MatricizationEqualsKhatriRaoChain) {
  std::mt19937_64 rng(6);
  for (const Dims& dims : {Dims{3, 4, 2}, Dims{2, 3, 2, 3}, Dims{4, 5}}) {
    const CPFactors f = random_factors(dims, 3, rng);
    const DenseTensor w = cp_compose(f);
    for (std::size_t d = 0; d < dims.size(); ++d) {
      const Matrix lhs = matricize(w, d);
      const Matrix rhs = f.factor(d) * khatri_rao_chain(f.factors(), d).transpose();
      EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(CPCompose, SmallCases) {
  std::vector<Matrix> ones{Matrix::Ones(2, 1), Matrix::Ones(3, 1), Matrix::Ones(2, 1)};
  const DenseTensor w = cp_compose(CPFactors(ones));
  for (double v : w.values()) EXPECT_EQ(v, 1.0);

  Matrix u(2, 1), v(2, 1);
  u << 1, 2;
  v << 3, 4;
  const Matrix m = matricize(cp_compose(CPFactors({u, v})), 0);
  Matrix expect(2, 2);
  expect << 3, 4, 6, 8;
  EXPECT_EQ(m, expect);
}

TEST(CPCompose, UnfoldingsHoldSameValues) {
  std::mt19937_64 rng(7);
  const DenseTensor w = cp_compose(random_factors({3, 2, 4}, 2, rng));
  Matrix a = matricize(w, 0), b = matricize(w, 1);
  std::vector<double> va(a.data(), a.data() + a.size()), vb(b.data(), b.data() + b.size());
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  EXPECT_EQ(va, vb);
}

TEST(CPFactors, RejectsInconsistentRank) {
  EXPECT_THROW(CPFactors({Matrix::Ones(2, 1), Matrix::Ones(2, 2)}), DimensionError);
  EXPECT_THROW(CPFactors({Matrix::Ones(2, 1)}), DimensionError);
}

TEST(Negdesign, AgreesWithInnerAndKhatriRao) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 10; ++t) {
    const Dims dims{3, 4, 2};
    const DenseTensor x = random_tensor(dims, rng);
    const CPFactors f = random_factors(dims, 2, rng);
    const double ref = inner(x, cp_compose(f));
    for (std::size_t m = 0; m < 3; ++m) {
      EXPECT_NEAR(negdesign(x, f, m), ref, 1e-10);
      const Matrix kr = khatri_rao_chain(f.factors(), m);
      const double dense = (f.factor(m) * kr.transpose() * matricize(x, m).transpose()).trace();
      EXPECT_NEAR(negdesign(x, f, m), dense, 1e-10);
    }
  }
}

TEST(Negdesign, ZeroFactorsAndShapeErrors) {
  std::mt19937_64 rng(9);
  const DenseTensor x = random_tensor({2, 3, 2}, rng);
  const CPFactors zero({Matrix::Zero(2, 2), Matrix::Zero(3, 2), Matrix::Zero(2, 2)});
  EXPECT_EQ(negdesign(x, zero, 0), 0.0);
  const CPFactors wrong({Matrix::Zero(2, 2), Matrix::Zero(2, 2), Matrix::Zero(2, 2)});
  EXPECT_THROW(negdesign(x, wrong, 0), DimensionError);
  EXPECT_THROW(negdesign(x, zero, 3), ModeIndexError);
}

TEST(ModeProduct, MatchesUnfoldingDefinition) {
  std::mt19937_64 rng(10);
  const DenseTensor x = random_tensor({3, 4, 2}, rng);
  const Matrix a = Matrix::Random(5, 4);
  const DenseTensor y = mode_product(x, 1, a);
  EXPECT_EQ(y.dims(), (Dims{3, 5, 2}));
  EXPECT_LT((matricize(y, 1) - a * matricize(x, 1)).cwiseAbs().maxCoeff(), 1e-12);
}
