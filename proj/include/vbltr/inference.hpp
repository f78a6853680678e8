#pragma once

// Coordinate-ascent driver: initialisation, sweeps until the bound settles,
// and rank choice by the largest final bound.

#include <chrono>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vbltr/model.hpp"

namespace vbltr {

inline VariationalState init_state(const Dataset& data, const Hyperparams& hp) {
  data.validate();
  VariationalState s;
  s.dims = data.dims;
  s.rank = hp.rank;
  s.priors = resolve_priors(hp, data.dims);
  const std::size_t order = s.order();

  std::mt19937_64 rng(derive_seed(hp.seed, 0x1417));
  std::normal_distribution<double> z;
  s.margins.resize(order);
  for (std::size_t j = 0; j < order; ++j) {
    const auto ij = static_cast<Eigen::Index>(s.dims[j]);
    for (std::size_t r = 0; r < s.rank; ++r) {
      Vector mean(ij);
      for (Eigen::Index k = 0; k < ij; ++k) mean(k) = hp.init_scale * z(rng);
      s.margins[j].push_back(MarginPosterior::make(mean, 0.1 * Matrix::Identity(ij, ij)));
    }
  }

  // Scale posteriors start from unit rate parameters.
  s.set_tau(tau_posterior(s, hp.formula, 1.0));
  s.scales.sigma.resize(order);
  s.sigma.resize(order);
  for (std::size_t j = 0; j < order; ++j) {
    s.scales.sigma[j].assign(s.rank, std::vector<GiGParams>(s.dims[j]));
    s.sigma[j].assign(s.rank, std::vector<PositiveMoments>(s.dims[j]));
    for (std::size_t r = 0; r < s.rank; ++r) {
      for (std::size_t k = 0; k < s.dims[j]; ++k) s.set_sigma(j, r, k, {0.5, 1.0, 1.0});
    }
  }
  update_phi(s, hp);
  s.scales.lambda.assign(order, std::vector<LambdaPosterior>(s.rank));
  s.lambda.assign(order, std::vector<PositiveMoments>(s.rank));
  for (std::size_t j = 0; j < order; ++j) {
    for (std::size_t r = 0; r < s.rank; ++r) {
      if (hp.formula == FormulaMode::printed) {
        const double ij = static_cast<double>(s.dims[j]);
        s.set_lambda(j, r, GiGParams{s.priors.b_lambda - ij, 2.0 * s.priors.a_lambda, 1.0});
      } else {
        update_lambda(s, hp, j, r);
      }
    }
  }
  s.xi = Vector::Zero(static_cast<Eigen::Index>(data.size()));
  update_xi(s, data, hp);
  return s;
}

struct FitReport {
  std::vector<double> elbo_trace;  // initial value first
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0;
  std::size_t elbo_decreases = 0;  // steps below -1e-8 |L|
  bool single_class = false;
  Diagnostics diagnostics;
  ElboTerms final_terms;
  Hyperparams hp;
  VariationalState state;
  int restart = 0;                  // index of the kept start
  std::vector<double> restart_elbos;  // final bound of every start

  double final_elbo() const { return elbo_trace.back(); }
};

/// One full sweep in the fixed order margins, tau, sigma, phi, lambda, xi.
inline PredictorMoments sweep(VariationalState& s, const Dataset& data, const Hyperparams& hp) {
  for (std::size_t j = 0; j < s.order(); ++j) {
    const ModeStats stats = accumulate_stats(data, s, j, hp.dense_budget, hp.threads);
    for (std::size_t r = 0; r < s.rank; ++r) update_margin(s, stats, j, r);
  }
  update_tau(s, hp);
  for (std::size_t j = 0; j < s.order(); ++j) {
    for (std::size_t r = 0; r < s.rank; ++r) {
      for (std::size_t k = 0; k < s.dims[j]; ++k) update_sigma(s, j, r, k);
    }
  }
  update_phi(s, hp);
  for (std::size_t j = 0; j < s.order(); ++j) {
    for (std::size_t r = 0; r < s.rank; ++r) update_lambda(s, hp, j, r);
  }
  return update_xi(s, data, hp);
}

namespace detail {

inline FitReport fit_once(const Dataset& data, const Hyperparams& hp) {
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  if (data.size() == 0) throw DataError("cannot fit an empty dataset");

  FitReport rep;
  rep.hp = hp;
  rep.single_class = data.single_class();
  VariationalState s = init_state(data, hp);

  auto bound = [&](const PredictorMoments& pm) {
    const ElboTerms t = elbo_terms(s, data, pm);
    const double l = t.total();
    if (!std::isfinite(l)) {
      throw NumericalBreakdown("elbo", -1, -1, static_cast<int>(s.sweep),
                               "lower bound is not finite");
    }
    rep.final_terms = t;
    return l;
  };
  rep.elbo_trace.push_back(
      bound(predictor_moments(data, s, hp.mode, hp.dense_budget, hp.threads)));

  for (int t = 1; t <= hp.max_iters; ++t) {
    s.sweep = static_cast<std::size_t>(t);
    const PredictorMoments pm = sweep(s, data, hp);
    const double prev = rep.elbo_trace.back();
    const double cur = bound(pm);
    rep.elbo_trace.push_back(cur);
    rep.iterations = t;
    if (cur - prev < -1e-8 * std::abs(prev)) ++rep.elbo_decreases;
    const double delta = std::abs(cur - prev);
    const double tol =
        hp.convergence == ConvergenceRule::absolute ? hp.epsilon : hp.epsilon * std::abs(prev);
    if (delta <= tol) {
      rep.converged = true;
      break;
    }
  }
  rep.diagnostics = s.diagnostics;
  rep.state = std::move(s);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace detail

/// Coordinate ascent from hp.restarts seeded starts. Start 0 uses hp.seed
/// itself; the start with the largest final bound wins, earliest on ties.
inline FitReport fit(const Dataset& data, const Hyperparams& hp) {
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  if (data.size() == 0) throw DataError("cannot fit an empty dataset");
  resolve_priors(hp, data.dims);

  std::optional<FitReport> best;
  std::vector<double> finals;
  for (int k = 0; k < hp.restarts; ++k) {
    Hyperparams h = hp;
    if (k > 0) h.seed = derive_seed(hp.seed, 0x7e57, static_cast<std::uint64_t>(k));
    FitReport r = detail::fit_once(data, h);
    finals.push_back(r.final_elbo());
    if (!best || r.final_elbo() > best->final_elbo()) {
      r.restart = k;
      best = std::move(r);
    }
  }
  best->hp = hp;
  best->restart_elbos = std::move(finals);
  best->wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return std::move(*best);
}

struct RankFit {
  std::size_t rank = 0;
  std::optional<FitReport> report;
  std::string error;  // set when the fit failed
};

struct RankSelection {
  std::size_t best_rank = 0;
  std::vector<RankFit> fits;

  const FitReport& best() const {
    for (const auto& f : fits) {
      if (f.rank == best_rank && f.report) return *f.report;
    }
    throw Error("rank selection holds no successful fit");
  }
};

/// Fits every candidate rank with the same seed and keeps the largest final
/// bound; equal bounds favour the smaller rank.
inline RankSelection select_rank(const Dataset& data, const Hyperparams& hp,
                                 const std::vector<std::size_t>& candidates) {
  if (candidates.empty()) throw HyperparamError("no candidate ranks");
  RankSelection out;
  std::optional<double> best;
  std::string failures;
  for (auto r : candidates) {
    RankFit rf;
    rf.rank = r;
    Hyperparams h = hp;
    h.rank = r;
    try {
      rf.report = fit(data, h);
      const double l = rf.report->final_elbo();
      if (!best || l > *best || (l == *best && r < out.best_rank)) {
        best = l;
        out.best_rank = r;
      }
    } catch (const Error& e) {
      rf.error = e.what();
      failures += " R=" + std::to_string(r) + ": " + e.what();
    }
    out.fits.push_back(std::move(rf));
  }
  if (!best) throw NumericalBreakdown("rank-select", -1, -1, -1, "every candidate failed:" + failures);
  return out;
}

}  // namespace vbltr
