#pragma once

// Synthetic two-group tensor data and the coefficient / classification
// metrics used to score fits on it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vbltr/predict.hpp"

namespace vbltr {

struct SimConfig {
  std::size_t n1 = 20;
  std::size_t n2 = 80;
  Dims dims{10, 12, 10};
  double mu1 = 0.0;
  double mu2 = 0.2;
  // Per-mode half-open index ranges [first, last) where the true tensor is 1.
  // An empty range in any mode gives the zero tensor.
  std::vector<std::pair<std::size_t, std::size_t>> support{{0, 4}, {1, 5}, {0, 3}};
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    if (n1 < 1 || n2 < 1) throw DomainError("both groups need at least one sample");
    if (dims.size() < 2) throw DimensionError("need at least two modes");
    for (auto d : dims) {
      if (d == 0) throw DimensionError("zero dimension");
    }
    if (!(train_fraction > 0 && train_fraction < 1)) {
      throw DomainError("train fraction must lie in (0,1)");
    }
    if (support.size() != dims.size()) {
      throw DimensionError("support needs one index range per mode");
    }
    for (std::size_t k = 0; k < dims.size(); ++k) {
      if (support[k].first > support[k].second || support[k].second > dims[k]) {
        throw DimensionError("support range for mode " + std::to_string(k) +
                             " does not fit inside dims " + dims_to_string(dims));
      }
    }
  }
};

struct SimData {
  Dataset data;
  DenseTensor truth;
};

inline DenseTensor support_tensor(const Dims& dims,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& box) {
  DenseTensor w(dims);
  std::vector<std::size_t> idx(dims.size(), 0);
  for (std::size_t lin = 0; lin < w.size(); ++lin) {
    std::size_t rem = lin;
    bool inside = true;
    for (std::size_t k = 0; k < dims.size(); ++k) {
      idx[k] = rem % dims[k];
      rem /= dims[k];
      inside = inside && idx[k] >= box[k].first && idx[k] < box[k].second;
    }
    if (inside) w[lin] = 1.0;
  }
  return w;
}

/// Group 1 then group 2; entries iid N(mu_g, 1); y = +1 with probability
/// g(<W, X>).
inline SimData generate(const SimConfig& sim) {
  sim.validate();
  SimData out{Dataset{sim.dims, {}, {}}, support_tensor(sim.dims, sim.support)};
  std::mt19937_64 rng(sim.seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u;
  const std::size_t size = product(sim.dims);
  for (std::size_t g = 0; g < 2; ++g) {
    const std::size_t count = g == 0 ? sim.n1 : sim.n2;
    const double mu = g == 0 ? sim.mu1 : sim.mu2;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> v(size);
      for (auto& e : v) e = mu + z(rng);
      DenseTensor x(sim.dims, std::move(v));
      const double p = logistic(inner(out.truth, x));
      out.data.labels.push_back(u(rng) < p ? 1 : -1);
      out.data.covariates.push_back(std::move(x));
    }
  }
  return out;
}

struct CoefMetrics {
  double mae = 0;   // mean absolute error per entry
  double rmse = 0;  // root mean squared error per entry
  double tar = 0;
  double far = 0;
  double rate = 0;
};

/// Averages over the estimates. An entry counts as active when its
/// magnitude exceeds the threshold.
inline CoefMetrics coef_metrics(const DenseTensor& truth, std::span<const DenseTensor> estimates,
                                double activity_threshold = 0.1) {
  if (!(activity_threshold > 0)) throw DomainError("activity threshold must be positive");
  if (estimates.empty()) throw DomainError("no estimates");
  std::size_t active = 0;
  for (double v : truth.values()) active += v != 0.0;
  const std::size_t inactive = truth.size() - active;
  const double size = static_cast<double>(truth.size());

  CoefMetrics m;
  double sq = 0.0;
  for (const auto& est : estimates) {
    if (est.dims() != truth.dims()) throw DimensionError("estimate shape differs from truth");
    double l1 = 0.0;
    double l2 = 0.0;
    std::size_t hit = 0;
    std::size_t false_hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const double d = est[i] - truth[i];
      l1 += std::abs(d);
      l2 += d * d;
      const bool flagged = std::abs(est[i]) > activity_threshold;
      if (truth[i] != 0.0) {
        hit += flagged;
      } else {
        false_hit += flagged;
      }
    }
    m.mae += l1 / size;
    sq += l2 / size;
    m.tar += active ? static_cast<double>(hit) / active : 0.0;
    m.far += inactive ? static_cast<double>(false_hit) / inactive : 0.0;
    m.rate += static_cast<double>(hit + (inactive - false_hit)) / size;
  }
  const double k = static_cast<double>(estimates.size());
  m.mae /= k;
  m.rmse = std::sqrt(sq / k);
  m.tar /= k;
  m.far /= k;
  m.rate /= k;
  return m;
}

struct ClassMetrics {
  double sensitivity = 0;
  double specificity = 0;
  double accuracy = 0;
  double precision = 0;
  double f1 = 0;
  bool undefined = false;  // some ratio had a zero denominator and was set to 0
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline ClassMetrics classification_metrics(std::span<const int> labels,
                                           std::span<const int> predictions) {
  if (labels.size() != predictions.size()) {
    throw DimensionError("labels and predictions differ in length");
  }
  ClassMetrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = predictions[i];
    if ((y != 1 && y != -1) || (p != 1 && p != -1)) throw LabelError("labels must be -1 or +1");
    if (y == 1) {
      (p == 1 ? m.tp : m.fn)++;
    } else {
      (p == 1 ? m.fp : m.tn)++;
    }
  }
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.undefined = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  m.accuracy = ratio(m.tp + m.tn, labels.size());
  m.precision = ratio(m.tp, m.tp + m.fp);
  if (m.precision + m.sensitivity > 0) {
    m.f1 = 2.0 * m.precision * m.sensitivity / (m.precision + m.sensitivity);
  } else {
    m.undefined = true;
  }
  return m;
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from mid-ranks in doubled integer units so
/// the result is exact.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  long long pos = 0;
  long long neg = 0;
  long long rank2_pos = 0;  // twice the rank sum of positives
  for (std::size_t i = 0; i < n;) {
    std::size_t e = i;
    while (e < n && scores[order[e]] == scores[order[i]]) ++e;
    const long long mid2 = static_cast<long long>(i + 1 + e);  // 2 * mean rank of the run
    for (std::size_t k = i; k < e; ++k) {
      const int y = labels[order[k]];
      if (y == 1) {
        ++pos;
        rank2_pos += mid2;
      } else if (y == -1) {
        ++neg;
      } else {
        throw LabelError("labels must be -1 or +1");
      }
    }
    i = e;
  }
  if (pos == 0 || neg == 0) throw ThresholdError("AUC needs both classes");
  const long long u2 = rank2_pos - pos * (pos + 1);
  return static_cast<double>(u2) / static_cast<double>(2 * pos * neg);
}

// ---------------------------------------------------------------------------
// Replicated experiment.

struct ExperimentOptions {
  std::size_t replications = 1;
  std::vector<std::size_t> ranks;  // empty: use hp.rank as is
  double activity_threshold = 0.1;
  int draws = 1000;
};

struct Replication {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  std::size_t rank = 0;
  std::vector<std::pair<std::size_t, double>> rank_elbos;
  int iterations = 0;
  bool converged = false;
  double threshold = 0.5;
  CoefMetrics coef;
  ClassMetrics cls;
  double auc = 0;
  bool auc_defined = true;
  double ctime = 0;  // seconds; kept out of deterministic reports
};

struct MetricSummary {
  double mean = 0;
  double sd = 0;
};

struct MetricsReport {
  SimConfig sim;
  Hyperparams hp;
  ExperimentOptions options;
  std::vector<Replication> replications;
  std::map<std::string, MetricSummary> summary;
  std::size_t failures = 0;
};

inline std::map<std::string, double> replication_values(const Replication& r) {
  return {{"mae", r.coef.mae},          {"rmse", r.coef.rmse},
          {"tar", r.coef.tar},          {"far", r.coef.far},
          {"rate", r.coef.rate},        {"sensitivity", r.cls.sensitivity},
          {"specificity", r.cls.specificity}, {"accuracy", r.cls.accuracy},
          {"precision", r.cls.precision}, {"f1", r.cls.f1},
          {"auc", r.auc},               {"rank", static_cast<double>(r.rank)}};
}

/// Mean and sample standard deviation of each metric over successful
/// replications (AUC only where defined).
inline std::map<std::string, MetricSummary> summarize(const std::vector<Replication>& reps) {
  std::map<std::string, std::vector<double>> cols;
  for (const auto& r : reps) {
    if (!r.ok) continue;
    for (const auto& [k, v] : replication_values(r)) {
      if (k == "auc" && !r.auc_defined) continue;
      cols[k].push_back(v);
    }
  }
  std::map<std::string, MetricSummary> out;
  for (const auto& [k, v] : cols) {
    MetricSummary s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double acc = 0.0;
      for (double x : v) acc += (x - s.mean) * (x - s.mean);
      s.sd = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    out[k] = s;
  }
  return out;
}

/// Generate, split, fit (optionally choosing the rank), pick the threshold on
/// the training probabilities and score the held-out part.
inline Replication run_replication(const SimConfig& sim, const Hyperparams& hp,
                                   const ExperimentOptions& opt, std::size_t index) {
  const auto start = std::chrono::steady_clock::now();
  Replication rep;
  rep.index = index;
  SimConfig cfg = sim;
  cfg.seed = derive_seed(sim.seed, index, 1);
  try {
    const SimData sd = generate(cfg);
    const std::size_t n = sd.data.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(sim.seed, index, 2));
    std::shuffle(perm.begin(), perm.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(sim.train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    const std::vector<std::size_t> train_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    const std::vector<std::size_t> test_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    const Dataset train = sd.data.subset(train_idx);
    const Dataset test = sd.data.subset(test_idx);

    Hyperparams h = hp;
    h.seed = derive_seed(sim.seed, index, 3);
    FitReport report;
    if (opt.ranks.empty()) {
      report = fit(train, h);
      rep.rank_elbos.emplace_back(h.rank, report.final_elbo());
    } else {
      RankSelection sel = select_rank(train, h, opt.ranks);
      for (const auto& f : sel.fits) {
        if (f.report) rep.rank_elbos.emplace_back(f.rank, f.report->final_elbo());
      }
      report = sel.best();
    }
    rep.rank = report.state.rank;
    rep.iterations = report.iterations;
    rep.converged = report.converged;

    const DenseTensor what = cp_compose(report.state.mean_factors());
    rep.coef = coef_metrics(sd.truth, std::span<const DenseTensor>(&what, 1), opt.activity_threshold);

    FittedModel model{report.state, report.hp, 0.5, opt.draws, h.seed, report.elbo_trace};
    const Vector train_p = Predictor(model).probabilities(train.covariates);
    const std::vector<double> tp(train_p.data(), train_p.data() + train_p.size());
    rep.threshold = youden_threshold(tp, train.labels);
    model.threshold = rep.threshold;

    const Predictor pred(model);
    const Vector test_p = pred.probabilities(test.covariates);
    std::vector<int> labels_hat(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      labels_hat[i] = test_p(static_cast<Eigen::Index>(i)) > rep.threshold ? 1 : -1;
    }
    rep.cls = classification_metrics(test.labels, labels_hat);
    if (test.single_class()) {
      rep.auc_defined = false;
    } else {
      const std::vector<double> sp(test_p.data(), test_p.data() + test_p.size());
      rep.auc = auc(sp, test.labels);
    }
    rep.ok = true;
  } catch (const Error& e) {
    rep.error = e.what();
  }
  rep.ctime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline MetricsReport run_experiment(const SimConfig& sim, const Hyperparams& hp,
                                    const ExperimentOptions& opt) {
  sim.validate();
  MetricsReport out{sim, hp, opt, {}, {}, 0};
  for (std::size_t i = 0; i < opt.replications; ++i) {
    out.replications.push_back(run_replication(sim, hp, opt, i));
    if (!out.replications.back().ok) ++out.failures;
  }
  out.summary = summarize(out.replications);
  return out;
}

}  // namespace vbltr
