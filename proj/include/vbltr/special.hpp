#pragma once

// Scalar special functions and the distribution moments used by the
// variational updates.

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vbltr/error.hpp"

namespace vbltr {

// ---------------------------------------------------------------------------
// Logistic function and the quadratic lower bound.

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// ln g(x), without overflow for large |x|.
inline double log_logistic(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// (g(xi) - 1/2) / (2 xi), evaluated as tanh(xi/2) / (4 xi). Even in xi.
inline double lambda_xi(double xi) {
  const double ax = std::fabs(xi);
  if (ax < 1e-4) {
    const double x2 = ax * ax;
    return 0.125 - x2 / 96.0 + x2 * x2 / 960.0;
  }
  return std::tanh(0.5 * ax) / (4.0 * ax);
}

/// g(xi) exp((a - xi)/2 - lambda(xi)(a^2 - xi^2)) <= g(a); tight at xi = +-a.
inline double jj_bound(double a, double xi) {
  return std::exp(log_logistic(xi) + 0.5 * (a - xi) -
                  lambda_xi(xi) * (a * a - xi * xi));
}

// ---------------------------------------------------------------------------
// Gamma family helpers.

inline double lgamma(double x) {
  if (!(x > 0)) throw DomainError("lgamma: argument must be positive");
  return std::lgamma(x);
}

inline double digamma(double x) {
  if (!(x > 0) || !std::isfinite(x)) {
    throw DomainError("digamma: argument must be positive and finite");
  }
  double result = 0.0;
  while (x < 10.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli-number asymptotic tail.
  const double tail =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 -
                              inv2 * (1.0 / 240 -
                                      inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))));
  return result + std::log(x) - 0.5 * inv - tail;
}

// ---------------------------------------------------------------------------
// Modified Bessel function of the second kind, in log space.

namespace detail {

// Temme's series for K_mu(x), K_{mu+1}(x), |mu| <= 1/2, 0 < x < 2.
inline void bessel_k_temme(double mu, double x, double& log_kmu,
                           double& ratio) {
  constexpr double eps = 1e-16;
  const double pi = std::numbers::pi;
  const double x2 = 0.5 * x;
  const double pimu = pi * mu;
  const double fact = std::fabs(pimu) < eps ? 1.0 : pimu / std::sin(pimu);
  double d = -std::log(x2);
  double e = mu * d;
  const double fact2 = std::fabs(e) < eps ? 1.0 : std::sinh(e) / e;

  // gampl = 1/Gamma(1+mu), gammi = 1/Gamma(1-mu),
  // gam1 = (gammi - gampl)/(2 mu), gam2 = (gammi + gampl)/2.
  double gam1, gam2, gampl, gammi;
  if (std::fabs(mu) < 1e-3) {
    // 1/Gamma(1+x) = 1 + c1 x + c2 x^2 + ...
    constexpr double c1 = 0.5772156649015329;
    constexpr double c2 = -0.6558780715202538;
    constexpr double c3 = -0.0420026350340952;
    constexpr double c4 = 0.1665386113822915;
    constexpr double c5 = -0.0421977345555443;
    const double m2 = mu * mu;
    gam1 = -(c1 + c3 * m2 + c5 * m2 * m2);
    gam2 = 1.0 + c2 * m2 + c4 * m2 * m2;
    gampl = 1.0 + mu * (c1 + mu * (c2 + mu * (c3 + mu * (c4 + mu * c5))));
    gammi = 1.0 - mu * (c1 - mu * (c2 - mu * (c3 - mu * (c4 - mu * c5))));
  } else {
    gampl = 1.0 / std::tgamma(1.0 + mu);
    gammi = 1.0 / std::tgamma(1.0 - mu);
    gam1 = (gammi - gampl) / (2.0 * mu);
    gam2 = 0.5 * (gammi + gampl);
  }

  double ff = fact * (gam1 * std::cosh(e) + gam2 * fact2 * d);
  double sum = ff;
  e = std::exp(e);
  double p = 0.5 * e / gampl;
  double q = 0.5 / (e * gammi);
  double c = 1.0;
  d = x2 * x2;
  double sum1 = p;
  const double mu2 = mu * mu;
  for (int i = 1; i <= 10000; ++i) {
    ff = (i * ff + p + q) / (i * static_cast<double>(i) - mu2);
    c *= d / i;
    p /= (i - mu);
    q /= (i + mu);
    const double del = c * ff;
    sum += del;
    sum1 += c * (p - i * ff);
    if (std::fabs(del) < std::fabs(sum) * eps) break;
  }
  log_kmu = std::log(sum);
  ratio = sum1 * (2.0 / x) / sum;
}

// Steed's continued fraction for K_mu(x) e^x, |mu| <= 1/2, x >= 2.
inline void bessel_k_steed(double mu, double x, double& log_kmu,
                           double& ratio) {
  constexpr double eps = 1e-16;
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double h = d;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  const double a1 = 0.25 - mu * mu;
  double q = a1;
  double c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 1; i <= 100000; ++i) {
    a -= 2 * i;
    c = -a * c / (i + 1.0);
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    h += delh;
    const double dels = q * delh;
    s += dels;
    if (std::fabs(dels / s) < eps) break;
  }
  h *= a1;
  log_kmu = 0.5 * std::log(std::numbers::pi / (2.0 * x)) - x - std::log(s);
  ratio = (mu + x + 0.5 - h) / x;
}

}  // namespace detail

/// ln K_nu(z) for z > 0. K_{-nu} = K_nu.
inline double log_bessel_k(double nu, double z) {
  if (!(z > 0) || !std::isfinite(z) || !std::isfinite(nu)) {
    throw DomainError("log_bessel_k: need finite nu and z > 0");
  }
  nu = std::fabs(nu);
  const int n = static_cast<int>(std::floor(nu + 0.5));
  const double mu = nu - n;
  double log_k = 0.0;
  double ratio = 0.0;  // K_{mu+k+1} / K_{mu+k}
  if (z < 2.0) {
    detail::bessel_k_temme(mu, z, log_k, ratio);
  } else {
    detail::bessel_k_steed(mu, z, log_k, ratio);
  }
  for (int k = 1; k <= n; ++k) {
    log_k += std::log(ratio);
    ratio = 1.0 / ratio + 2.0 * (mu + k) / z;
  }
  return log_k;
}

// ---------------------------------------------------------------------------
// Moments of positive scalar variational factors.

/// Expectations of a positive random variable that the updates and the
/// ELBO consume.
struct PositiveMoments {
  double mean = 1;           // E[x]
  double inv_mean = 1;       // E[1/x]
  double sqrt_mean = 1;      // E[x^(1/2)]
  double inv_sqrt_mean = 1;  // E[x^(-1/2)]
  double sq_mean = 1;        // E[x^2]
  double log_mean = 0;       // E[ln x]
  double entropy = 0;        // -E[ln q(x)]
};

/// Density proportional to x^(p-1) exp(-(a x + b / x) / 2) on x > 0.
struct GiGParams {
  double p = 0.5;
  double a = 1.0;
  double b = 1.0;

  void validate() const {
    if (!std::isfinite(p) || !(a > 0) || !(b > 0) || !std::isfinite(a) ||
        !std::isfinite(b)) {
      throw DomainError("GiG parameters need finite p, a > 0, b > 0 (got p=" +
                        std::to_string(p) + " a=" + std::to_string(a) +
                        " b=" + std::to_string(b) + ")");
    }
  }

  friend bool operator==(const GiGParams&, const GiGParams&) = default;
};

/// ln E[x^s] for x ~ GiG(p, a, b).
inline double gig_log_moment(const GiGParams& g, double s) {
  g.validate();
  const double omega = std::sqrt(g.a * g.b);
  return 0.5 * s * std::log(g.b / g.a) + log_bessel_k(g.p + s, omega) -
         log_bessel_k(g.p, omega);
}

inline double gig_moment(const GiGParams& g, double s) {
  return std::exp(gig_log_moment(g, s));
}

/// E[ln x] by a central difference of s -> ln E[x^s] at s = 0.
inline double gig_log_mean(const GiGParams& g) {
  constexpr double h = 1e-5;
  return (gig_log_moment(g, h) - gig_log_moment(g, -h)) / (2.0 * h);
}

inline PositiveMoments gig_moments(const GiGParams& g) {
  g.validate();
  const double omega = std::sqrt(g.a * g.b);
  const double log_ratio = std::log(g.b / g.a);
  const double lk = log_bessel_k(g.p, omega);
  auto moment = [&](double s) {
    return std::exp(0.5 * s * log_ratio + log_bessel_k(g.p + s, omega) - lk);
  };
  PositiveMoments m;
  m.mean = moment(1.0);
  m.inv_mean = moment(-1.0);
  m.sqrt_mean = moment(0.5);
  m.inv_sqrt_mean = moment(-0.5);
  m.sq_mean = moment(2.0);
  m.log_mean = gig_log_mean(g);
  // normaliser: 2 (b/a)^(p/2) K_p(omega)
  m.entropy = std::log(2.0) + 0.5 * g.p * log_ratio + lk -
              (g.p - 1.0) * m.log_mean + 0.5 * (g.a * m.mean + g.b * m.inv_mean);
  return m;
}

/// Density proportional to x^(shape-1) exp(-rate x - quad x^2) on x > 0.
/// quad = 0 is the gamma distribution.
struct QuadGammaParams {
  double shape = 1.0;
  double rate = 1.0;
  double quad = 0.0;

  void validate() const {
    if (!(shape > 0) || !(rate >= 0) || !(quad >= 0) || !std::isfinite(shape) ||
        !std::isfinite(rate) || !std::isfinite(quad) ||
        (rate == 0 && quad == 0)) {
      throw DomainError("quadratic-gamma parameters need shape > 0, rate >= 0, "
                        "quad >= 0, not both rate and quad zero");
    }
  }

  friend bool operator==(const QuadGammaParams&, const QuadGammaParams&) = default;
};

inline PositiveMoments quad_gamma_moments(const QuadGammaParams& g) {
  g.validate();
  const double s = g.shape;
  PositiveMoments m;
  if (g.quad == 0.0) {
    const double r = g.rate;
    m.mean = s / r;
    m.sq_mean = s * (s + 1.0) / (r * r);
    m.inv_mean = s > 1.0 ? r / (s - 1.0) : std::numeric_limits<double>::infinity();
    m.sqrt_mean = std::exp(std::lgamma(s + 0.5) - std::lgamma(s)) / std::sqrt(r);
    m.inv_sqrt_mean = s > 0.5
                          ? std::exp(std::lgamma(s - 0.5) - std::lgamma(s)) * std::sqrt(r)
                          : std::numeric_limits<double>::infinity();
    m.log_mean = digamma(s) - std::log(r);
    m.entropy = s - std::log(r) + std::lgamma(s) + (1.0 - s) * digamma(s);
    return m;
  }

  // Integrate on t = x / x_mode with the log density shifted to 0 at the mode.
  double x_mode;
  if (s > 1.0) {
    x_mode = 2.0 * (s - 1.0) /
             (g.rate + std::sqrt(g.rate * g.rate + 8.0 * g.quad * (s - 1.0)));
  } else {
    x_mode = 1.0 / (g.rate + std::sqrt(g.quad));
  }
  auto log_kernel = [&](double x) {
    return (s - 1.0) * std::log(x) - g.rate * x - g.quad * x * x;
  };
  const double l0 = log_kernel(x_mode);
  auto weight = [&](double t) {
    if (t <= 0.0) return 0.0;
    return std::exp(log_kernel(x_mode * t) - l0);
  };

  static thread_local boost::math::quadrature::tanh_sinh<double> inner_rule;
  static thread_local boost::math::quadrature::exp_sinh<double> tail_rule;
  constexpr double tol = 1e-13;
  auto integrate = [&](auto&& f) {
    const double lo = inner_rule.integrate(f, 0.0, 1.0, tol);
    const double hi = tail_rule.integrate(f, 1.0, std::numeric_limits<double>::infinity(), tol);
    return lo + hi;
  };
  const double z0 = integrate([&](double t) { return weight(t); });
  const double z1 = integrate([&](double t) { return t * weight(t); });
  const double z2 = integrate([&](double t) { return t * t * weight(t); });
  const double zh = integrate([&](double t) { return std::sqrt(t) * weight(t); });
  const double zl = integrate([&](double t) { return t > 0 ? std::log(t) * weight(t) : 0.0; });

  m.mean = x_mode * z1 / z0;
  m.sq_mean = x_mode * x_mode * z2 / z0;
  m.sqrt_mean = std::sqrt(x_mode) * zh / z0;
  m.log_mean = std::log(x_mode) + zl / z0;
  if (s > 1.0) {
    const double zi = integrate([&](double t) { return t > 0 ? weight(t) / t : 0.0; });
    m.inv_mean = zi / z0 / x_mode;
  } else {
    m.inv_mean = std::numeric_limits<double>::infinity();
  }
  if (s > 0.5) {
    const double zis = integrate([&](double t) { return t > 0 ? weight(t) / std::sqrt(t) : 0.0; });
    m.inv_sqrt_mean = zis / z0 / std::sqrt(x_mode);
  } else {
    m.inv_sqrt_mean = std::numeric_limits<double>::infinity();
  }
  const double log_z = l0 + std::log(x_mode) + std::log(z0);
  m.entropy = log_z - (s - 1.0) * m.log_mean + g.rate * m.mean + g.quad * m.sq_mean;
  return m;
}

// ---------------------------------------------------------------------------
// Gaussian absolute moment.

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// E|X| for X ~ N(mu, var).
inline double folded_normal_abs_mean(double mu, double var) {
  if (!(var > 0) || !std::isfinite(var)) {
    throw DomainError("folded_normal_abs_mean: variance must be positive");
  }
  const double sd = std::sqrt(var);
  return sd * std::sqrt(2.0 / std::numbers::pi) * std::exp(-0.5 * mu * mu / var) +
         mu * (1.0 - 2.0 * normal_cdf(-mu / sd));
}

// ---------------------------------------------------------------------------
// Dirichlet marginals.

enum class LogPhiFormula {
  printed,  // ln(a_r) - digamma(sum a)
  digamma,  // digamma(a_r) - digamma(sum a)
};

struct DirichletMarginal {
  double inv_mean = 1;   // E[phi_r^-1]
  double sqrt_mean = 1;  // E[phi_r^(1/2)]
  double log_mean = 0;   // E[ln phi_r]
  bool inv_mean_monte_carlo = false;
};

namespace detail {

inline double dirichlet_mc_inv_mean(std::span<const double> weights,
                                    std::size_t r, std::uint64_t seed,
                                    int draws) {
  std::mt19937_64 rng(seed);
  double acc = 0.0;
  std::vector<std::gamma_distribution<double>> gammas;
  for (double w : weights) gammas.emplace_back(w, 1.0);
  for (int d = 0; d < draws; ++d) {
    double total = 0.0;
    double mine = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double g = gammas[k](rng);
      total += g;
      if (k == r) mine = g;
    }
    acc += mine > 0 ? total / mine : 0.0;
  }
  return acc / draws;
}

}  // namespace detail

/// Marginal moments of phi_r when (phi_1..phi_R) ~ Dirichlet(weights); the
/// marginal is Beta(a_r, A - a_r) with A = sum of weights.
inline DirichletMarginal dirichlet_marginal_moments(
    std::span<const double> weights, std::size_t r,
    LogPhiFormula formula = LogPhiFormula::printed, std::uint64_t mc_seed = 0x5eed,
    int mc_draws = 10000) {
  if (weights.empty() || r >= weights.size()) {
    throw DomainError("dirichlet_marginal_moments: bad component index");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0)) throw DomainError("Dirichlet weights must be positive");
    total += w;
  }
  DirichletMarginal out;
  if (weights.size() == 1) return out;
  const double ar = weights[r];
  if (ar > 1.0) {
    out.inv_mean = (total - 1.0) / (ar - 1.0);
  } else {
    out.inv_mean = detail::dirichlet_mc_inv_mean(weights, r, mc_seed, mc_draws);
    out.inv_mean_monte_carlo = true;
  }
  out.sqrt_mean = std::exp(std::lgamma(ar + 0.5) + std::lgamma(total) -
                           std::lgamma(ar) - std::lgamma(total + 0.5));
  out.log_mean = (formula == LogPhiFormula::printed ? std::log(ar) : digamma(ar)) -
                 digamma(total);
  return out;
}

/// Entropy of Dirichlet(weights); zero for a single component.
inline double dirichlet_entropy(std::span<const double> weights) {
  if (weights.size() <= 1) return 0.0;
  double total = 0.0;
  double log_beta = 0.0;
  double acc = 0.0;
  for (double w : weights) {
    total += w;
    log_beta += std::lgamma(w);
    acc -= (w - 1.0) * digamma(w);
  }
  log_beta -= std::lgamma(total);
  return log_beta + (total - static_cast<double>(weights.size())) * digamma(total) + acc;
}

}  // namespace vbltr
