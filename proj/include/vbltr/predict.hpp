#pragma once

// Monte-Carlo predictive class probabilities and Youden-index thresholds.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "vbltr/inference.hpp"

namespace vbltr {

struct FittedModel {
  VariationalState state;
  Hyperparams hp;
  double threshold = 0.5;
  int draws = 1000;
  std::uint64_t seed = 0;
  std::vector<double> elbo_trace;

  void validate() const {
    if (!(threshold > 0 && threshold < 1)) {
      throw DomainError("threshold must lie in (0,1)");
    }
    if (draws < 1) throw DomainError("draw count must be positive");
  }
};

/// Independent draws of every margin from its Gaussian posterior.
inline std::vector<CPFactors> sample_factors(const FittedModel& model, int draws) {
  if (draws < 1) throw DomainError("draw count must be positive");
  const auto& s = model.state;
  std::mt19937_64 rng(derive_seed(model.seed, 0x5a));
  std::normal_distribution<double> z;
  std::vector<CPFactors> out;
  out.reserve(static_cast<std::size_t>(draws));
  for (int d = 0; d < draws; ++d) {
    std::vector<Matrix> f;
    for (std::size_t j = 0; j < s.order(); ++j) {
      const auto ij = static_cast<Eigen::Index>(s.dims[j]);
      Matrix u(ij, static_cast<Eigen::Index>(s.rank));
      for (std::size_t r = 0; r < s.rank; ++r) {
        const auto& m = s.margins[j][r];
        Vector e(ij);
        for (Eigen::Index k = 0; k < ij; ++k) e(k) = z(rng);
        u.col(static_cast<Eigen::Index>(r)) = m.mean + m.cov_chol * e;
      }
      f.push_back(std::move(u));
    }
    out.emplace_back(std::move(f));
  }
  return out;
}

/// Holds one shared draw set per model. Each draw is stored as its composed
/// coefficient tensor, so a score is the average of g(<W_d, x>) and a batch
/// of samples is one matrix product.
class Predictor {
 public:
  explicit Predictor(const FittedModel& model)
      : dims_(model.state.dims), threshold_(model.threshold) {
    model.validate();
    const auto draws = sample_factors(model, model.draws);
    weights_.resize(static_cast<Eigen::Index>(draws.size()),
                    static_cast<Eigen::Index>(product(dims_)));
    for (std::size_t d = 0; d < draws.size(); ++d) {
      weights_.row(static_cast<Eigen::Index>(d)) = cp_compose(draws[d]).vec().transpose();
    }
  }

  const Dims& dims() const { return dims_; }
  double threshold() const { return threshold_; }

  double probability(const DenseTensor& x) const {
    check(x);
    const Vector logits = weights_ * x.vec();
    return mean_logistic(logits);
  }

  Vector probabilities(std::span<const DenseTensor> xs) const {
    Vector out(static_cast<Eigen::Index>(xs.size()));
    constexpr std::size_t batch = 256;
    for (std::size_t b = 0; b < xs.size(); b += batch) {
      const std::size_t e = std::min(xs.size(), b + batch);
      Matrix cols(weights_.cols(), static_cast<Eigen::Index>(e - b));
      for (std::size_t i = b; i < e; ++i) {
        check(xs[i]);
        cols.col(static_cast<Eigen::Index>(i - b)) = xs[i].vec();
      }
      const Matrix logits = weights_ * cols;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        out(static_cast<Eigen::Index>(b) + c) = mean_logistic(logits.col(c));
      }
    }
    return out;
  }

  int classify(const DenseTensor& x) const { return probability(x) > threshold_ ? 1 : -1; }

 private:
  void check(const DenseTensor& x) const {
    if (x.dims() != dims_) {
      throw DimensionError("tensor dims " + dims_to_string(x.dims()) +
                           " do not match model dims " + dims_to_string(dims_));
    }
  }

  static double mean_logistic(const Eigen::Ref<const Vector>& logits) {
    double acc = 0.0;
    for (Eigen::Index d = 0; d < logits.size(); ++d) acc += logistic(logits(d));
    return acc / static_cast<double>(logits.size());
  }

  Dims dims_;
  double threshold_;
  Matrix weights_;  // draws x prod(dims)
};

inline double class_probability(const FittedModel& model, const DenseTensor& x) {
  return Predictor(model).probability(x);
}

inline int classify(const FittedModel& model, const DenseTensor& x) {
  return Predictor(model).classify(x);
}

/// 0.01, 0.02, ..., 0.99.
inline std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 99; ++i) g.push_back(i / 100.0);
  return g;
}

/// Grid point maximising sensitivity + specificity - 1 for the rule
/// score > a; ties go to the point nearest 0.5, then to the smaller point.
inline double youden_threshold(std::span<const double> scores, std::span<const int> labels,
                               std::span<const double> grid) {
  if (scores.size() != labels.size()) {
    throw DimensionError("scores and labels differ in length");
  }
  if (grid.empty()) throw DomainError("threshold grid is empty");
  std::size_t pos = 0;
  std::size_t neg = 0;
  for (int y : labels) {
    if (y == 1) {
      ++pos;
    } else if (y == -1) {
      ++neg;
    } else {
      throw LabelError("labels must be -1 or +1");
    }
  }
  if (pos == 0 || neg == 0) throw ThresholdError("threshold selection needs both classes");

  double best_a = 0;
  double best_j = -2;
  for (double a : grid) {
    if (!(a > 0 && a < 1)) throw DomainError("threshold grid must lie in (0,1)");
    std::size_t tp = 0;
    std::size_t tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool hit = scores[i] > a;
      if (labels[i] == 1 && hit) ++tp;
      if (labels[i] == -1 && !hit) ++tn;
    }
    const double j = static_cast<double>(tp) / pos + static_cast<double>(tn) / neg - 1.0;
    const bool better = j > best_j + 1e-12;
    const bool tie = std::abs(j - best_j) <= 1e-12;
    const double da = std::abs(a - 0.5);
    const double db = std::abs(best_a - 0.5);
    if (better || (tie && (da < db - 1e-15 || (std::abs(da - db) <= 1e-15 && a < best_a)))) {
      best_j = j;
      best_a = a;
    }
  }
  return best_a;
}

inline double youden_threshold(std::span<const double> scores, std::span<const int> labels) {
  const auto grid = default_threshold_grid();
  return youden_threshold(scores, labels, grid);
}

}  // namespace vbltr
