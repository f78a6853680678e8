#pragma once

// CP-parameterised logistic model with multiway shrinkage priors: the
// mean-field variational family, its coordinate updates and the lower bound.
//
// Prior hierarchy (shape-rate gammas):
//   u_r^(j) ~ N(0, tau phi_r diag(sigma_jr)),   tau ~ Gamma(a_tau, b_tau),
//   sigma_jrk ~ Exp(lambda_jr^2 / 2),            lambda_jr ~ Gamma(a_lambda, b_lambda),
//   (phi_1..phi_R) ~ Dirichlet(alpha, .., alpha).
// The logistic likelihood is replaced by the Jaakkola-Jordan quadratic bound
// with one xi per sample.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vbltr/error.hpp"
#include "vbltr/parallel.hpp"
#include "vbltr/special.hpp"
#include "vbltr/tensor.hpp"

namespace vbltr {

enum class FormulaMode {
  printed,  // tau and lambda updates with the published parameter assignment
  derived,  // exact conjugate coordinate maximisers
};

enum class MomentStrategy {
  analytic,
  monte_carlo,  // sample moments for E|u| and the phi marginals
};

enum class ConvergenceRule { absolute, relative };

struct Hyperparams {
  std::size_t rank = 1;
  // Unset prior constants take their dimension-dependent defaults.
  std::optional<double> alpha;
  std::optional<double> a_tau;
  std::optional<double> b_tau;
  double a_lambda = 3.0;
  std::optional<double> b_lambda;

  double epsilon = 1e-4;
  int max_iters = 100;
  ConvergenceRule convergence = ConvergenceRule::absolute;
  std::uint64_t seed = 0;
  std::size_t mode = 0;  // matricisation mode for xi and the bound

  FormulaMode formula = FormulaMode::printed;
  LogPhiFormula log_phi = LogPhiFormula::printed;
  MomentStrategy moments = MomentStrategy::analytic;
  int mc_draws = 10000;

  // Standard deviation of the seeded initial margin means. All-zero means
  // are a fixed point of the margin update, so some spread is required to
  // move; 0 reproduces the zero start exactly.
  double init_scale = 0.5;
  // Independent seeded starts; the fit with the largest final bound is kept.
  int restarts = 3;

  std::size_t dense_budget = 4096;  // max entries of a densified gram block
  unsigned threads = 0;             // 0: VBLTR_THREADS or hardware
};

/// Prior constants after defaults are applied.
struct Priors {
  double alpha;
  double a_tau;
  double b_tau;
  double a_lambda;
  double b_lambda;
};

inline Priors resolve_priors(const Hyperparams& hp, const Dims& dims) {
  if (hp.rank < 1) throw HyperparamError("rank must be at least 1");
  if (dims.size() < 2) throw DimensionError("need at least two modes");
  const double r = static_cast<double>(hp.rank);
  const double m = static_cast<double>(dims.size());
  double total = 0.0;
  for (auto d : dims) total += static_cast<double>(d);

  Priors p{};
  p.alpha = hp.alpha.value_or(1.0 / r);
  p.a_tau = hp.a_tau.value_or(p.alpha * r);
  p.b_tau = hp.b_tau.value_or(0.5 * r * total - 0.5);
  p.a_lambda = hp.a_lambda;
  p.b_lambda = hp.b_lambda.value_or(std::pow(hp.a_lambda, 0.5 / m));

  auto positive = [](double v, const char* name) {
    if (!(v > 0) || !std::isfinite(v)) {
      throw HyperparamError(std::string(name) + " must be positive, got " +
                            std::to_string(v));
    }
  };
  positive(p.alpha, "alpha");
  positive(p.a_tau, "a_tau");
  positive(p.b_tau, "b_tau");
  positive(p.a_lambda, "a_lambda");
  positive(p.b_lambda, "b_lambda");
  if (!(hp.epsilon > 0)) throw HyperparamError("epsilon must be positive");
  if (hp.max_iters < 0) throw HyperparamError("max_iters must be non-negative");
  if (hp.mc_draws < 1) throw HyperparamError("mc_draws must be positive");
  if (hp.restarts < 1) throw HyperparamError("restarts must be at least 1");
  if (!(hp.init_scale >= 0) || !std::isfinite(hp.init_scale)) {
    throw HyperparamError("init_scale must be finite and non-negative");
  }
  detail::check_mode(dims.size(), hp.mode);
  return p;
}

// ---------------------------------------------------------------------------
// Data.

struct Dataset {
  Dims dims;
  std::vector<DenseTensor> covariates;
  std::vector<int> labels;  // -1 or +1

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (dims.size() < 2) throw DimensionError("dataset needs at least two modes");
    for (auto d : dims) {
      if (d == 0) throw DimensionError("dataset has a zero dimension");
    }
    if (covariates.size() != labels.size()) {
      throw DimensionError("dataset has " + std::to_string(covariates.size()) +
                           " tensors but " + std::to_string(labels.size()) +
                           " labels");
    }
    for (std::size_t i = 0; i < covariates.size(); ++i) {
      if (covariates[i].dims() != dims) {
        throw DimensionError("sample " + std::to_string(i) + " has dims " +
                             dims_to_string(covariates[i].dims()) +
                             ", dataset dims " + dims_to_string(dims));
      }
      for (double v : covariates[i].values()) {
        if (!std::isfinite(v)) {
          throw DataError("sample " + std::to_string(i) + " has a non-finite value");
        }
      }
      if (labels[i] != 1 && labels[i] != -1) {
        throw LabelError("label " + std::to_string(labels[i]) + " at sample " +
                         std::to_string(i) + " is not -1 or +1");
      }
    }
  }

  bool single_class() const {
    bool pos = false;
    bool neg = false;
    for (int y : labels) (y > 0 ? pos : neg) = true;
    return !(pos && neg);
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out{dims, {}, {}};
    out.covariates.reserve(rows.size());
    out.labels.reserve(rows.size());
    for (auto i : rows) {
      out.covariates.push_back(covariates.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Variational family.

/// q(u_r^(j)) = N(mean, covariance) with derived quantities.
struct MarginPosterior {
  Vector mean;
  Matrix covariance;
  Matrix cov_chol;     // lower factor of covariance
  Matrix second;       // E[u u^T] = covariance + mean mean^T
  Matrix second_chol;  // lower factor of second
  Vector abs_mean;     // E|u_k|
  double log_det = 0;  // ln det covariance

  static MarginPosterior make(Vector mean, Matrix cov) {
    if (mean.size() != cov.rows() || cov.rows() != cov.cols()) {
      throw DimensionError("margin mean and covariance shapes disagree");
    }
    MarginPosterior m;
    m.covariance = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Matrix> llt(m.covariance);
    if (llt.info() != Eigen::Success) {
      throw DomainError("margin covariance is not positive definite");
    }
    m.cov_chol = llt.matrixL();
    m.log_det = 2.0 * m.cov_chol.diagonal().array().log().sum();
    m.mean = std::move(mean);
    m.second = m.covariance + m.mean * m.mean.transpose();
    Eigen::LLT<Matrix> llt2(m.second);
    if (llt2.info() != Eigen::Success) {
      throw DomainError("margin second moment is not positive definite");
    }
    m.second_chol = llt2.matrixL();
    m.abs_mean.resize(m.mean.size());
    for (Eigen::Index k = 0; k < m.mean.size(); ++k) {
      m.abs_mean(k) = folded_normal_abs_mean(m.mean(k), m.covariance(k, k));
    }
    return m;
  }
};

using LambdaPosterior = std::variant<GiGParams, QuadGammaParams>;

inline PositiveMoments lambda_moments(const LambdaPosterior& q) {
  return std::visit(
      [](const auto& p) {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, GiGParams>) {
          return gig_moments(p);
        } else {
          return quad_gamma_moments(p);
        }
      },
      q);
}

struct ScalePosteriors {
  GiGParams tau;
  std::vector<std::vector<std::vector<GiGParams>>> sigma;  // [j][r][k]
  std::vector<std::vector<LambdaPosterior>> lambda;        // [j][r]
  std::vector<double> phi_weights;
  std::vector<double> phi_rates;
};

struct Diagnostics {
  std::size_t sigma_floor_clamps = 0;
  std::size_t lambda_floor_clamps = 0;
  std::size_t phi_monte_carlo = 0;  // analytic E[1/phi] unavailable, sampled
};

inline constexpr double kScaleFloor = 1e-12;

struct VariationalState {
  Dims dims;
  std::size_t rank = 0;
  Priors priors{};
  std::vector<std::vector<MarginPosterior>> margins;  // [j][r]
  ScalePosteriors scales;

  // Cached moments, refreshed whenever the matching parameters change.
  PositiveMoments tau;
  std::vector<std::vector<std::vector<PositiveMoments>>> sigma;
  std::vector<std::vector<PositiveMoments>> lambda;
  std::vector<DirichletMarginal> phi;
  double phi_entropy = 0;

  Vector xi;
  std::size_t sweep = 0;
  Diagnostics diagnostics;

  std::size_t order() const { return dims.size(); }
  double dim_total() const {
    double s = 0;
    for (auto d : dims) s += static_cast<double>(d);
    return s;
  }

  /// The CP factors made of the posterior means.
  CPFactors mean_factors() const {
    std::vector<Matrix> f;
    for (std::size_t j = 0; j < order(); ++j) {
      Matrix u(static_cast<Eigen::Index>(dims[j]), static_cast<Eigen::Index>(rank));
      for (std::size_t r = 0; r < rank; ++r) {
        u.col(static_cast<Eigen::Index>(r)) = margins[j][r].mean;
      }
      f.push_back(std::move(u));
    }
    return CPFactors(std::move(f));
  }

  void set_tau(const GiGParams& g) {
    scales.tau = g;
    tau = gig_moments(g);
  }
  void set_sigma(std::size_t j, std::size_t r, std::size_t k, const GiGParams& g) {
    scales.sigma[j][r][k] = g;
    sigma[j][r][k] = gig_moments(g);
  }
  void set_lambda(std::size_t j, std::size_t r, const LambdaPosterior& q) {
    scales.lambda[j][r] = q;
    lambda[j][r] = lambda_moments(q);
  }

  /// sum_k E[1/sigma_jrk] E[u_rk^2], the trace term shared by several updates.
  double weighted_second(std::size_t j, std::size_t r) const {
    const auto& m = margins[j][r];
    double s = 0.0;
    for (std::size_t k = 0; k < dims[j]; ++k) {
      s += sigma[j][r][k].inv_mean * m.second(static_cast<Eigen::Index>(k),
                                              static_cast<Eigen::Index>(k));
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Structured expectations over the margins of all modes but one.

/// E[U^(-j)]: column r is the Kronecker chain of the mode means, j skipped.
inline Matrix expected_kr(const VariationalState& s, std::size_t j) {
  detail::check_mode(s.order(), j);
  std::size_t rows = 1;
  for (std::size_t k = 0; k < s.order(); ++k) {
    if (k != j) rows *= s.dims[k];
  }
  Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(s.rank));
  std::vector<Vector> cols(s.order());
  for (std::size_t r = 0; r < s.rank; ++r) {
    for (std::size_t k = 0; k < s.order(); ++k) cols[k] = s.margins[k][r].mean;
    out.col(static_cast<Eigen::Index>(r)) = kronecker_chain(cols, j);
  }
  return out;
}

/// Kronecker product kept as its per-mode factors, highest mode first.
struct KroneckerBlock {
  std::vector<Matrix> factors;

  Matrix dense() const {
    Matrix acc = factors.front();
    for (std::size_t i = 1; i < factors.size(); ++i) acc = kronecker(acc, factors[i]);
    return acc;
  }
};

/// E[vec U^(-j) vec U^(-j)^T] as an R x R grid of factored blocks.
inline std::vector<std::vector<KroneckerBlock>> expected_gram_blocks(
    const VariationalState& s, std::size_t j) {
  detail::check_mode(s.order(), j);
  std::vector<std::vector<KroneckerBlock>> grid(s.rank,
                                                std::vector<KroneckerBlock>(s.rank));
  for (std::size_t a = 0; a < s.rank; ++a) {
    for (std::size_t b = 0; b < s.rank; ++b) {
      for (std::size_t k = s.order(); k-- > 0;) {
        if (k == j) continue;
        grid[a][b].factors.push_back(
            a == b ? s.margins[k][a].second
                   : Matrix(s.margins[k][a].mean * s.margins[k][b].mean.transpose()));
      }
    }
  }
  return grid;
}

namespace detail {

// Per-mode quantities that the per-sample kernels reuse.
struct ModeKernel {
  const VariationalState& s;
  std::size_t j;
  bool dense = false;
  std::vector<std::vector<Matrix>> chol_t;  // [r][k]: L^T of E[u u^T]
  std::vector<Matrix> dense_second;         // [r]: densified diagonal blocks

  ModeKernel(const VariationalState& state, std::size_t mode, std::size_t budget)
      : s(state), j(mode) {
    check_mode(s.order(), j);
    std::size_t cols = 1;
    for (std::size_t k = 0; k < s.order(); ++k) {
      if (k != j) cols *= s.dims[k];
    }
    dense = cols * cols <= budget;
    if (dense) {
      const auto grid = expected_gram_blocks(s, j);
      for (std::size_t r = 0; r < s.rank; ++r) dense_second.push_back(grid[r][r].dense());
    } else {
      chol_t.resize(s.rank);
      for (std::size_t r = 0; r < s.rank; ++r) {
        chol_t[r].resize(s.order());
        for (std::size_t k = 0; k < s.order(); ++k) {
          if (k != j) chol_t[r][k] = s.margins[k][r].second_chol.transpose();
        }
      }
    }
  }

  // X_(j) times the Kronecker chain of the other modes' means, per component.
  std::vector<Vector> projections(const DenseTensor& x) const {
    std::vector<Vector> p(s.rank);
    for (std::size_t r = 0; r < s.rank; ++r) {
      p[r] = contract_except(x.values(), x.dims(), j, [&](std::size_t k) -> const Vector& {
        return s.margins[k][r].mean;
      });
    }
    return p;
  }

  // X_(j) E[v_r v_r^T] X_(j)^T.
  Matrix diagonal_gram(const DenseTensor& x, std::size_t r) const {
    if (dense) {
      const Matrix xj = matricize(x, j);
      return xj * dense_second[r] * xj.transpose();
    }
    std::vector<double> cur(x.values().begin(), x.values().end());
    Dims d = x.dims();
    for (std::size_t k = s.order(); k-- > 0;) {
      if (k == j) continue;
      cur = ttm(cur, d, k, chol_t[r][k]);
    }
    return mode_gram(cur, d, j);
  }
};

}  // namespace detail

/// Sufficient statistics of the bound for the mode-j margins.
struct ModeStats {
  std::vector<Vector> a;                  // [r], length I_j
  std::vector<std::vector<Matrix>> omega;  // [r][l], I_j x I_j

  ModeStats() = default;
  ModeStats(std::size_t rank, std::size_t ij)
      : a(rank, Vector::Zero(static_cast<Eigen::Index>(ij))),
        omega(rank, std::vector<Matrix>(rank, Matrix::Zero(static_cast<Eigen::Index>(ij),
                                                           static_cast<Eigen::Index>(ij)))) {}

  Vector a_vec() const {
    Vector out(static_cast<Eigen::Index>(a.size()) * a.front().size());
    for (std::size_t r = 0; r < a.size(); ++r) {
      out.segment(static_cast<Eigen::Index>(r) * a[r].size(), a[r].size()) = a[r];
    }
    return out;
  }

  void add(const ModeStats& o) {
    for (std::size_t r = 0; r < a.size(); ++r) {
      a[r] += o.a[r];
      for (std::size_t l = 0; l < a.size(); ++l) omega[r][l] += o.omega[r][l];
    }
  }
};

/// a_r = 1/2 sum_i y_i X_i(j) E[v_r] and
/// Omega_rl = sum_i lambda(xi_i) X_i(j) E[v_r v_l^T] X_i(j)^T.
inline ModeStats accumulate_stats(const Dataset& data, const VariationalState& s,
                                  std::size_t j, std::size_t dense_budget = 4096,
                                  unsigned threads = 0) {
  detail::check_mode(s.order(), j);
  if (static_cast<std::size_t>(s.xi.size()) != data.size()) {
    throw DimensionError("xi length does not match the dataset");
  }
  const detail::ModeKernel kernel(s, j, dense_budget);
  const std::size_t ij = s.dims[j];
  const ModeStats zero(s.rank, ij);
  return chunked_reduce(
      data.size(), threads, zero,
      [&](std::size_t begin, std::size_t end) {
        ModeStats part = zero;
        for (std::size_t i = begin; i < end; ++i) {
          const DenseTensor& x = data.covariates[i];
          const double w = lambda_xi(s.xi(static_cast<Eigen::Index>(i)));
          const double y = static_cast<double>(data.labels[i]);
          const auto p = kernel.projections(x);
          for (std::size_t r = 0; r < s.rank; ++r) {
            part.a[r] += 0.5 * y * p[r];
            part.omega[r][r] += w * kernel.diagonal_gram(x, r);
            for (std::size_t l = r + 1; l < s.rank; ++l) {
              part.omega[r][l].noalias() += w * p[r] * p[l].transpose();
            }
          }
        }
        for (std::size_t r = 0; r < s.rank; ++r) {
          for (std::size_t l = r + 1; l < s.rank; ++l) {
            part.omega[l][r] = part.omega[r][l].transpose();
          }
        }
        return part;
      },
      [](ModeStats& acc, const ModeStats& part) { acc.add(part); });
}

/// E[a_i] and E[a_i^2] of the linear predictor a_i = <W, X_i>.
struct PredictorMoments {
  Vector mean;
  Vector second;
};

inline PredictorMoments predictor_moments(const Dataset& data, const VariationalState& s,
                                          std::size_t m, std::size_t dense_budget = 4096,
                                          unsigned threads = 0) {
  detail::check_mode(s.order(), m);
  const detail::ModeKernel kernel(s, m, dense_budget);
  const auto n = static_cast<Eigen::Index>(data.size());
  PredictorMoments out{Vector::Zero(n), Vector::Zero(n)};
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const DenseTensor& x = data.covariates[i];
    const auto p = kernel.projections(x);
    double sum_c = 0.0;
    double sum_c2 = 0.0;
    double quad = 0.0;
    for (std::size_t r = 0; r < s.rank; ++r) {
      const auto& u = s.margins[m][r];
      const double c = u.mean.dot(p[r]);
      sum_c += c;
      sum_c2 += c * c;
      quad += kernel.diagonal_gram(x, r).cwiseProduct(u.second).sum();
    }
    const auto ii = static_cast<Eigen::Index>(i);
    out.mean(ii) = sum_c;
    out.second(ii) = quad + sum_c * sum_c - sum_c2;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Coordinate updates.

/// Gaussian update of q(u_r^(j)) from fresh mode-j statistics; the cross term
/// uses the current means of the other mode-j components.
inline void update_margin(VariationalState& s, const ModeStats& stats, std::size_t j,
                          std::size_t r) {
  detail::check_mode(s.order(), j);
  const auto ij = static_cast<Eigen::Index>(s.dims[j]);
  const double scale = s.tau.inv_mean * s.phi[r].inv_mean;
  Matrix precision = 2.0 * stats.omega[r][r];
  for (Eigen::Index k = 0; k < ij; ++k) {
    precision(k, k) += scale * s.sigma[j][r][static_cast<std::size_t>(k)].inv_mean;
  }
  Vector rhs = stats.a[r];
  for (std::size_t l = 0; l < s.rank; ++l) {
    if (l != r) rhs.noalias() -= 2.0 * stats.omega[r][l] * s.margins[j][l].mean;
  }
  const int jj = static_cast<int>(j);
  const int rr = static_cast<int>(r);
  const int it = static_cast<int>(s.sweep);
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success || !precision.allFinite()) {
    throw NumericalBreakdown("margin", jj, rr, it, "margin precision is not positive definite");
  }
  Vector mean = llt.solve(rhs);
  Matrix cov = llt.solve(Matrix::Identity(ij, ij));
  if (!mean.allFinite() || !cov.allFinite()) {
    throw NumericalBreakdown("margin", jj, rr, it, "margin update is not finite");
  }
  try {
    s.margins[j][r] = MarginPosterior::make(std::move(mean), std::move(cov));
  } catch (const DomainError& e) {
    throw NumericalBreakdown("margin", jj, rr, it, e.what());
  }
}

/// Convenience form that gathers the statistics itself.
inline void update_margin(VariationalState& s, const Dataset& data, std::size_t j,
                          std::size_t r) {
  update_margin(s, accumulate_stats(data, s, j), j, r);
}

/// beta_tau = sum_{j,r} E[1/phi_r] sum_k E[1/sigma_jrk] E[u_rk^2].
inline double tau_rate(const VariationalState& s) {
  double beta = 0.0;
  for (std::size_t j = 0; j < s.order(); ++j) {
    for (std::size_t r = 0; r < s.rank; ++r) {
      beta += s.phi[r].inv_mean * s.weighted_second(j, r);
    }
  }
  return beta;
}

inline GiGParams tau_posterior(const VariationalState& s, FormulaMode mode, double beta) {
  const double count = static_cast<double>(s.rank) * s.dim_total();
  if (mode == FormulaMode::printed) {
    return {s.priors.b_tau - 0.5 * count, 2.0 * s.priors.a_tau, beta};
  }
  return {s.priors.a_tau - 0.5 * count, 2.0 * s.priors.b_tau, beta};
}

inline GiGParams update_tau(VariationalState& s, const Hyperparams& hp) {
  const double beta = tau_rate(s);
  if (!(beta > 0) || !std::isfinite(beta)) {
    throw NumericalBreakdown("tau", -1, -1, static_cast<int>(s.sweep),
                             "tau rate is not positive");
  }
  const GiGParams g = tau_posterior(s, hp.formula, beta);
  s.set_tau(g);
  return g;
}

inline GiGParams update_sigma(VariationalState& s, std::size_t j, std::size_t r,
                              std::size_t k) {
  const auto kk = static_cast<Eigen::Index>(k);
  const double a = s.lambda[j][r].sq_mean;
  double b = s.tau.inv_mean * s.phi[r].inv_mean * s.margins[j][r].second(kk, kk);
  if (!(b > kScaleFloor)) {
    b = kScaleFloor;
    ++s.diagnostics.sigma_floor_clamps;
  }
  const GiGParams g{0.5, a, b};
  s.set_sigma(j, r, k, g);
  return g;
}

/// Dirichlet weights a_r = 1/2 sum_j I_j - alpha, rates b_r and the marginal
/// moments of each phi_r.
inline void update_phi(VariationalState& s, const Hyperparams& hp) {
  const std::size_t rank = s.rank;
  const double weight = 0.5 * s.dim_total() - s.priors.alpha;
  if (!(weight > 0)) {
    throw HyperparamError("Dirichlet weight 1/2 sum I_j - alpha must be positive");
  }
  s.scales.phi_weights.assign(rank, weight);
  s.scales.phi_rates.assign(rank, 0.0);
  for (std::size_t r = 0; r < rank; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s.order(); ++j) acc += s.weighted_second(j, r);
    s.scales.phi_rates[r] = 0.5 * s.tau.inv_mean * acc;
  }
  s.phi.assign(rank, DirichletMarginal{});
  s.phi_entropy = dirichlet_entropy(s.scales.phi_weights);
  if (rank == 1) return;

  if (hp.moments == MomentStrategy::monte_carlo) {
    // phi_r = psi_r / sum psi with psi_r ~ InvGamma(a_r, b_r).
    std::mt19937_64 rng(derive_seed(hp.seed, 0xf1, s.sweep));
    std::vector<std::gamma_distribution<double>> gammas;
    for (std::size_t r = 0; r < rank; ++r) {
      gammas.emplace_back(s.scales.phi_weights[r],
                          1.0 / std::max(s.scales.phi_rates[r], kScaleFloor));
    }
    std::vector<double> inv(rank, 0.0), root(rank, 0.0), psi(rank);
    for (int d = 0; d < hp.mc_draws; ++d) {
      double total = 0.0;
      for (std::size_t r = 0; r < rank; ++r) {
        psi[r] = 1.0 / gammas[r](rng);
        total += psi[r];
      }
      for (std::size_t r = 0; r < rank; ++r) {
        const double phi = psi[r] / total;
        inv[r] += 1.0 / phi;
        root[r] += std::sqrt(phi);
      }
    }
    for (std::size_t r = 0; r < rank; ++r) {
      const auto analytic = dirichlet_marginal_moments(s.scales.phi_weights, r, hp.log_phi);
      s.phi[r].inv_mean = inv[r] / hp.mc_draws;
      s.phi[r].sqrt_mean = root[r] / hp.mc_draws;
      s.phi[r].log_mean = analytic.log_mean;
      s.phi[r].inv_mean_monte_carlo = true;
    }
    return;
  }
  for (std::size_t r = 0; r < rank; ++r) {
    s.phi[r] = dirichlet_marginal_moments(s.scales.phi_weights, r, hp.log_phi,
                                          derive_seed(hp.seed, 0xf2, r), hp.mc_draws);
    if (s.phi[r].inv_mean_monte_carlo) ++s.diagnostics.phi_monte_carlo;
  }
}

/// sum_k E|u_rk^(j)|, analytic or sampled.
inline double abs_sum(const VariationalState& s, const Hyperparams& hp, std::size_t j,
                      std::size_t r) {
  const auto& m = s.margins[j][r];
  if (hp.moments == MomentStrategy::analytic) return m.abs_mean.sum();
  std::mt19937_64 rng(derive_seed(hp.seed, 0xab, s.sweep, j, r));
  std::normal_distribution<double> z;
  double total = 0.0;
  for (Eigen::Index k = 0; k < m.mean.size(); ++k) {
    const double sd = std::sqrt(m.covariance(k, k));
    double acc = 0.0;
    for (int d = 0; d < hp.mc_draws; ++d) acc += std::abs(m.mean(k) + sd * z(rng));
    total += acc / hp.mc_draws;
  }
  return total;
}

inline LambdaPosterior update_lambda(VariationalState& s, const Hyperparams& hp,
                                     std::size_t j, std::size_t r) {
  const double ij = static_cast<double>(s.dims[j]);
  LambdaPosterior q;
  if (hp.formula == FormulaMode::printed) {
    double b = 2.0 * abs_sum(s, hp, j, r) * s.phi[r].sqrt_mean * s.tau.sqrt_mean;
    if (!(b > kScaleFloor)) {
      b = kScaleFloor;
      ++s.diagnostics.lambda_floor_clamps;
    }
    q = GiGParams{s.priors.b_lambda - ij, 2.0 * s.priors.a_lambda, b};
  } else {
    // Exact optimum under Gamma(a, b) x prod_k Exp(sigma_k; lambda^2 / 2):
    // density lambda^(a + 2 I_j - 1) exp(-b lambda - lambda^2 sum_k E[sigma_k] / 2).
    double quad = 0.0;
    for (const auto& m : s.sigma[j][r]) quad += m.mean;
    q = QuadGammaParams{s.priors.a_lambda + 2.0 * ij, s.priors.b_lambda, 0.5 * quad};
  }
  s.set_lambda(j, r, q);
  return q;
}

/// xi_i = sqrt(E[a_i^2]); returns the predictor moments it was built from.
inline PredictorMoments update_xi(VariationalState& s, const Dataset& data,
                                  const Hyperparams& hp) {
  auto pm = predictor_moments(data, s, hp.mode, hp.dense_budget, hp.threads);
  s.xi = pm.second.cwiseMax(0.0).cwiseSqrt();
  return pm;
}

// ---------------------------------------------------------------------------
// Evidence lower bound.

struct ElboTerms {
  double likelihood = 0;  // E ln h(U, xi)
  double prior_u = 0;
  double prior_tau = 0;
  double prior_sigma = 0;
  double prior_lambda = 0;
  double prior_phi = 0;
  double entropy_u = 0;
  double entropy_tau = 0;
  double entropy_sigma = 0;
  double entropy_lambda = 0;
  double entropy_phi = 0;

  double total() const {
    return likelihood + prior_u + prior_tau + prior_sigma + prior_lambda + prior_phi +
           entropy_u + entropy_tau + entropy_sigma + entropy_lambda + entropy_phi;
  }
};

/// sum_i [ln g(xi) - xi/2 + lambda(xi) xi^2] + 1/2 sum_i y_i E[a_i]
/// - sum_i lambda(xi) E[a_i^2].
inline double likelihood_term(const Vector& xi, std::span<const int> labels,
                              const PredictorMoments& pm) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < xi.size(); ++i) {
    const double x = xi(i);
    const double w = lambda_xi(x);
    h += log_logistic(x) - 0.5 * x + w * x * x;
    h += 0.5 * labels[static_cast<std::size_t>(i)] * pm.mean(i) - w * pm.second(i);
  }
  return h;
}

inline ElboTerms elbo_terms(const VariationalState& s, const Dataset& data,
                            const PredictorMoments& pm) {
  constexpr double ln2pi = 1.8378770664093454836;
  const Priors& pr = s.priors;
  ElboTerms t;
  t.likelihood = likelihood_term(s.xi, data.labels, pm);

  // ln Gamma(x; a, b) = a ln b - lnGamma(a) + (a - 1) ln x - b x
  auto gamma_expect = [](double a, double b, const PositiveMoments& m) {
    return a * std::log(b) - std::lgamma(a) + (a - 1.0) * m.log_mean - b * m.mean;
  };
  t.prior_tau = gamma_expect(pr.a_tau, pr.b_tau, s.tau);
  t.entropy_tau = s.tau.entropy;

  for (std::size_t j = 0; j < s.order(); ++j) {
    const double ij = static_cast<double>(s.dims[j]);
    for (std::size_t r = 0; r < s.rank; ++r) {
      const auto& m = s.margins[j][r];
      const auto& lam = s.lambda[j][r];
      // ln N(u; 0, tau phi diag(sigma))
      double log_sigma = 0.0;
      for (std::size_t k = 0; k < s.dims[j]; ++k) {
        const auto& sg = s.sigma[j][r][k];
        log_sigma += sg.log_mean;
        // ln Exp(sigma; lambda^2/2) = 2 ln lambda - ln 2 - lambda^2 sigma / 2
        t.prior_sigma += 2.0 * lam.log_mean - std::numbers::ln2 - 0.5 * lam.sq_mean * sg.mean;
        t.entropy_sigma += sg.entropy;
      }
      t.prior_u += -0.5 * ij * ln2pi - 0.5 * ij * (s.tau.log_mean + s.phi[r].log_mean) -
                   0.5 * log_sigma -
                   0.5 * s.tau.inv_mean * s.phi[r].inv_mean * s.weighted_second(j, r);
      t.entropy_u += 0.5 * ij * (1.0 + ln2pi) + 0.5 * m.log_det;
      t.prior_lambda += gamma_expect(pr.a_lambda, pr.b_lambda, lam);
      t.entropy_lambda += lam.entropy;
    }
  }

  if (s.rank > 1) {
    // ln Dir(phi; alpha) = lnGamma(R alpha) - R lnGamma(alpha) + (alpha - 1) sum ln phi_r
    const double r = static_cast<double>(s.rank);
    t.prior_phi = std::lgamma(r * pr.alpha) - r * std::lgamma(pr.alpha);
    for (const auto& p : s.phi) t.prior_phi += (pr.alpha - 1.0) * p.log_mean;
    t.entropy_phi = s.phi_entropy;
  }
  return t;
}

inline double elbo(const VariationalState& s, const Dataset& data, const Hyperparams& hp) {
  return elbo_terms(s, data, predictor_moments(data, s, hp.mode, hp.dense_budget, hp.threads))
      .total();
}

}  // namespace vbltr
