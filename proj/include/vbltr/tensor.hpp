#pragma once

// Dense M-order tensors, matricization and CP algebra.
//
// Storage is first-index-fastest: component (i_1, ..., i_M) (0-based) lives at
// i_1 + I_1 * (i_2 + I_2 * (i_3 + ...)). With that order the mode-d unfolding
// column of a component is j = sum_{k != d} i_k * prod_{m < k, m != d} I_m,
// i.e. the storage map itself, and Kronecker chains run from the last mode to
// the first (u^(M) (x) ... (x) u^(1)).

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vbltr/error.hpp"

namespace vbltr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Dims = std::vector<std::size_t>;

inline std::size_t product(std::span<const std::size_t> dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string dims_to_string(std::span<const std::size_t> dims) {
  std::string s = "(";
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (k) s += ",";
    s += std::to_string(dims[k]);
  }
  return s + ")";
}

class DenseTensor {
 public:
  explicit DenseTensor(Dims dims) : dims_(std::move(dims)) {
    check_dims();
    values_.assign(product(dims_), 0.0);
  }

  DenseTensor(Dims dims, std::vector<double> values)
      : dims_(std::move(dims)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != product(dims_)) {
      throw DimensionError("tensor of dims " + dims_to_string(dims_) +
                           " needs " + std::to_string(product(dims_)) +
                           " values, got " + std::to_string(values_.size()));
    }
  }

  std::size_t order() const noexcept { return dims_.size(); }
  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t k) const { return dims_.at(k); }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  Eigen::Map<const Vector> vec() const {
    return {values_.data(), static_cast<Eigen::Index>(values_.size())};
  }
  Eigen::Map<Vector> vec() {
    return {values_.data(), static_cast<Eigen::Index>(values_.size())};
  }

  double operator[](std::size_t linear) const { return values_[linear]; }
  double& operator[](std::size_t linear) { return values_[linear]; }

  std::size_t linear_index(std::span<const std::size_t> idx) const {
    if (idx.size() != dims_.size()) {
      throw DimensionError("index of order " + std::to_string(idx.size()) +
                           " into tensor of order " +
                           std::to_string(dims_.size()));
    }
    std::size_t lin = 0;
    for (std::size_t k = dims_.size(); k-- > 0;) {
      if (idx[k] >= dims_[k]) throw DimensionError("tensor index out of range");
      lin = lin * dims_[k] + idx[k];
    }
    return lin;
  }

  double operator()(std::initializer_list<std::size_t> idx) const {
    return values_[linear_index({idx.begin(), idx.size()})];
  }
  double& operator()(std::initializer_list<std::size_t> idx) {
    return values_[linear_index({idx.begin(), idx.size()})];
  }

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  void check_dims() const {
    if (dims_.size() < 2) {
      throw DimensionError("tensors need at least two modes, got " +
                           std::to_string(dims_.size()));
    }
    for (auto d : dims_) {
      if (d == 0) throw DimensionError("tensor dims must be positive");
    }
  }

  Dims dims_;
  std::vector<double> values_;
};

namespace detail {

struct ModeSplit {
  std::size_t before;  // product of dims below the mode
  std::size_t extent;  // dim of the mode
  std::size_t after;   // product of dims above the mode
};

inline ModeSplit split(std::span<const std::size_t> dims, std::size_t k) {
  ModeSplit s{1, dims[k], 1};
  for (std::size_t i = 0; i < k; ++i) s.before *= dims[i];
  for (std::size_t i = k + 1; i < dims.size(); ++i) s.after *= dims[i];
  return s;
}

inline void check_mode(std::size_t order, std::size_t k) {
  if (k >= order) {
    throw ModeIndexError("mode " + std::to_string(k) +
                         " out of range for order " + std::to_string(order));
  }
}

// Contract mode k of a raw first-index-fastest buffer with vector u.
inline std::vector<double> ttv(std::span<const double> v, Dims& dims,
                               std::size_t k, const double* u) {
  const ModeSplit s = split(dims, k);
  std::vector<double> out(s.before * s.after, 0.0);
  for (std::size_t b = 0; b < s.after; ++b) {
    const double* src = v.data() + b * s.before * s.extent;
    double* dst = out.data() + b * s.before;
    for (std::size_t i = 0; i < s.extent; ++i) {
      const double w = u[i];
      const double* col = src + i * s.before;
      for (std::size_t a = 0; a < s.before; ++a) dst[a] += w * col[a];
    }
  }
  dims.erase(dims.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

// Mode-k product with a (J x I_k) matrix; dims[k] becomes J.
inline std::vector<double> ttm(std::span<const double> v, Dims& dims,
                               std::size_t k, const Matrix& a) {
  const ModeSplit s = split(dims, k);
  const auto rows = static_cast<std::size_t>(a.rows());
  std::vector<double> out(s.before * rows * s.after);
  const auto before = static_cast<Eigen::Index>(s.before);
  for (std::size_t b = 0; b < s.after; ++b) {
    Eigen::Map<const Matrix> blk(v.data() + b * s.before * s.extent, before,
                                 static_cast<Eigen::Index>(s.extent));
    Eigen::Map<Matrix> dst(out.data() + b * s.before * rows, before,
                           static_cast<Eigen::Index>(rows));
    dst.noalias() = blk * a.transpose();
  }
  dims[k] = rows;
  return out;
}

// Y_(k) Y_(k)^T without forming the unfolding.
inline Matrix mode_gram(std::span<const double> v,
                        std::span<const std::size_t> dims, std::size_t k) {
  const ModeSplit s = split(dims, k);
  const auto ext = static_cast<Eigen::Index>(s.extent);
  Matrix g = Matrix::Zero(ext, ext);
  for (std::size_t b = 0; b < s.after; ++b) {
    Eigen::Map<const Matrix> blk(v.data() + b * s.before * s.extent,
                                 static_cast<Eigen::Index>(s.before), ext);
    g.selfadjointView<Eigen::Lower>().rankUpdate(blk.transpose());
  }
  return g.selfadjointView<Eigen::Lower>();
}

// X_(m) times the Kronecker chain of vectors[k], k != m: a length-I_m vector.
template <class VecFor>
Vector contract_except(std::span<const double> v, Dims dims, std::size_t m,
                       VecFor&& vector_for_mode) {
  std::vector<double> cur(v.begin(), v.end());
  for (std::size_t k = dims.size(); k-- > 0;) {
    if (k == m) continue;
    const Vector& u = vector_for_mode(k);
    cur = ttv(cur, dims, k, u.data());
  }
  return Eigen::Map<const Vector>(cur.data(),
                                  static_cast<Eigen::Index>(cur.size()));
}

}  // namespace detail

/// Mode-d unfolding: I_d rows, one column per mode-d fiber.
inline Matrix matricize(const DenseTensor& t, std::size_t d) {
  detail::check_mode(t.order(), d);
  const auto s = detail::split(t.dims(), d);
  Matrix out(static_cast<Eigen::Index>(s.extent),
             static_cast<Eigen::Index>(s.before * s.after));
  for (std::size_t b = 0; b < s.after; ++b) {
    Eigen::Map<const Matrix> blk(t.data() + b * s.before * s.extent,
                                 static_cast<Eigen::Index>(s.before),
                                 static_cast<Eigen::Index>(s.extent));
    out.middleCols(static_cast<Eigen::Index>(b * s.before),
                   static_cast<Eigen::Index>(s.before)) = blk.transpose();
  }
  return out;
}

/// Inverse of matricize.
inline DenseTensor fold(const Matrix& m, std::size_t d, const Dims& dims) {
  DenseTensor t(dims);
  detail::check_mode(dims.size(), d);
  const auto s = detail::split(dims, d);
  if (static_cast<std::size_t>(m.rows()) != s.extent ||
      static_cast<std::size_t>(m.cols()) != s.before * s.after) {
    throw DimensionError("fold: matrix shape does not match dims " +
                         dims_to_string(dims) + " at mode " + std::to_string(d));
  }
  for (std::size_t b = 0; b < s.after; ++b) {
    Eigen::Map<Matrix> blk(t.data() + b * s.before * s.extent,
                           static_cast<Eigen::Index>(s.before),
                           static_cast<Eigen::Index>(s.extent));
    blk = m.middleCols(static_cast<Eigen::Index>(b * s.before),
                       static_cast<Eigen::Index>(s.before))
              .transpose();
  }
  return t;
}

inline double inner(const DenseTensor& x, const DenseTensor& y) {
  if (x.dims() != y.dims()) {
    throw DimensionError("inner: dims " + dims_to_string(x.dims()) + " vs " +
                         dims_to_string(y.dims()));
  }
  return x.vec().dot(y.vec());
}

/// Mode-k product t x_k a, a of shape J x I_k.
inline DenseTensor mode_product(const DenseTensor& t, std::size_t k,
                                const Matrix& a) {
  detail::check_mode(t.order(), k);
  if (static_cast<std::size_t>(a.cols()) != t.dim(k)) {
    throw DimensionError("mode_product: matrix columns != I_k");
  }
  Dims dims = t.dims();
  auto v = detail::ttm(t.values(), dims, k, a);
  return DenseTensor(std::move(dims), std::move(v));
}

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index p = 0; p < a.rows(); ++p) {
    for (Eigen::Index q = 0; q < a.cols(); ++q) {
      out.block(p * b.rows(), q * b.cols(), b.rows(), b.cols()) = a(p, q) * b;
    }
  }
  return out;
}

/// Column-wise Kronecker product.
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("khatri_rao: column counts " +
                         std::to_string(a.cols()) + " and " +
                         std::to_string(b.cols()));
  }
  Matrix out(a.rows() * b.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.cols(); ++r) {
    for (Eigen::Index p = 0; p < a.rows(); ++p) {
      out.col(r).segment(p * b.rows(), b.rows()) = a(p, r) * b.col(r);
    }
  }
  return out;
}

/// A point in CP parameter space: factor j is I_j x R.
class CPFactors {
 public:
  explicit CPFactors(std::vector<Matrix> factors)
      : factors_(std::move(factors)) {
    if (factors_.size() < 2) {
      throw DimensionError("CP factors need at least two modes");
    }
    const auto r = factors_.front().cols();
    if (r < 1) throw DimensionError("CP rank must be positive");
    for (const auto& f : factors_) {
      if (f.cols() != r) {
        throw DimensionError("CP factors disagree on rank");
      }
      if (f.rows() < 1) throw DimensionError("CP factor with no rows");
    }
  }

  std::size_t rank() const { return static_cast<std::size_t>(factors_[0].cols()); }
  std::size_t order() const { return factors_.size(); }
  const Matrix& factor(std::size_t j) const { return factors_.at(j); }
  const std::vector<Matrix>& factors() const { return factors_; }

  Dims dims() const {
    Dims d;
    for (const auto& f : factors_) d.push_back(static_cast<std::size_t>(f.rows()));
    return d;
  }

 private:
  std::vector<Matrix> factors_;
};

/// U^(M) (.) ... (.) U^(m+1) (.) U^(m-1) (.) ... (.) U^(1).
inline Matrix khatri_rao_chain(const std::vector<Matrix>& factors,
                               std::size_t skip) {
  detail::check_mode(factors.size(), skip);
  Matrix acc;
  bool first = true;
  for (std::size_t k = factors.size(); k-- > 0;) {
    if (k == skip) continue;
    acc = first ? factors[k] : khatri_rao(acc, factors[k]);
    first = false;
  }
  return acc;
}

/// Kronecker chain of vectors[M-1] (x) ... (x) vectors[0], skipping one mode.
inline Vector kronecker_chain(const std::vector<Vector>& vectors,
                              std::size_t skip) {
  Vector acc = Vector::Ones(1);
  for (std::size_t k = 0; k < vectors.size(); ++k) {
    if (k == skip) continue;
    const Vector& u = vectors[k];
    Vector next(acc.size() * u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      next.segment(i * acc.size(), acc.size()) = u(i) * acc;
    }
    acc = std::move(next);
  }
  return acc;
}

/// Sum over r of the outer products u_r^(1) o ... o u_r^(M).
inline DenseTensor cp_compose(const CPFactors& f) {
  const Dims dims = f.dims();
  DenseTensor out(dims);
  auto acc = out.vec();
  std::vector<Vector> cols(f.order());
  for (std::size_t r = 0; r < f.rank(); ++r) {
    for (std::size_t j = 0; j < f.order(); ++j) {
      cols[j] = f.factor(j).col(static_cast<Eigen::Index>(r));
    }
    acc += kronecker_chain(cols, f.order());
  }
  return out;
}

/// vec(U^(m))^T (I_R (x) X_(m)) vec(U^(-m)), accumulated as
/// sum_r u_r^(m)^T X_(m) u_r^(-m) without forming any Kronecker product.
inline double negdesign(const DenseTensor& x, const CPFactors& f,
                        std::size_t m) {
  detail::check_mode(x.order(), m);
  if (f.dims() != x.dims()) {
    throw DimensionError("negdesign: factor shapes " +
                         dims_to_string(f.dims()) + " vs tensor " +
                         dims_to_string(x.dims()));
  }
  double total = 0.0;
  std::vector<Vector> cols(f.order());
  for (std::size_t r = 0; r < f.rank(); ++r) {
    for (std::size_t j = 0; j < f.order(); ++j) {
      cols[j] = f.factor(j).col(static_cast<Eigen::Index>(r));
    }
    const Vector proj = detail::contract_except(
        x.values(), x.dims(), m,
        [&](std::size_t k) -> const Vector& { return cols[k]; });
    total += cols[m].dot(proj);
  }
  return total;
}

}  // namespace vbltr
