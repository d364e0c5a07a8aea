#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "divkd/tensor.hpp"

namespace divkd {

/// Probability rows paired with one-hot labels. Rows must sum to 1 within
/// 1e-9 and there must be at least one example.
struct PredictionBatch {
  Tensor probs;   // [N x K]
  Tensor labels;  // [N x K] one-hot

  PredictionBatch(Tensor p, Tensor y) : probs(std::move(p)), labels(std::move(y)) {
    if (probs.shape() != labels.shape())
      throw ShapeError("prediction batch: probs " + probs.shape().str() +
                       " vs labels " + labels.shape().str());
    if (probs.rows() < 1) throw std::invalid_argument("prediction batch is empty");
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) s += probs.at(i, j);
      if (std::abs(s - 1.0) > 1e-9)
        throw std::invalid_argument("probability row " + std::to_string(i) +
                                    " sums to " + std::to_string(s));
    }
  }

  std::size_t size() const { return probs.rows(); }
  std::size_t num_classes() const { return probs.cols(); }
};

/// Fraction of rows whose argmax prediction matches the argmax label;
/// ties break to the lowest class index.
inline double accuracy(const PredictionBatch& p) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (argmax_row(p.probs, i) == argmax_row(p.labels, i)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(p.size());
}

/// Mean -log probability of the true class (natural log, 1e-300 floor).
inline double nll(const PredictionBatch& p) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    total -= log_clamped(p.probs.at(i, argmax_row(p.labels, i)));
  return total / static_cast<double>(p.size());
}

/// K-normalized Brier score: mean over examples of (1/K) sum_k (p-y)^2.
inline double brier(const PredictionBatch& p) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p.num_classes(); ++j) {
      double d = p.probs.at(i, j) - p.labels.at(i, j);
      total += d * d;
    }
  return total / static_cast<double>(p.size() * p.num_classes());
}

/// Expected calibration error over equal-width confidence bins on (0,1].
inline double ece(const PredictionBatch& p, std::size_t num_bins = 15) {
  if (num_bins < 1) throw std::invalid_argument("ece: num_bins must be >= 1");
  std::vector<double> conf_sum(num_bins, 0.0), acc_sum(num_bins, 0.0);
  std::vector<std::size_t> count(num_bins, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::size_t pred = argmax_row(p.probs, i);
    double conf = p.probs.at(i, pred);
    auto bin = static_cast<std::size_t>(std::ceil(conf * static_cast<double>(num_bins)));
    bin = std::min(std::max<std::size_t>(bin, 1), num_bins) - 1;
    conf_sum[bin] += conf;
    acc_sum[bin] += (pred == argmax_row(p.labels, i)) ? 1.0 : 0.0;
    ++count[bin];
  }
  double e = 0.0;
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (count[b] == 0) continue;
    double n = static_cast<double>(count[b]);
    e += n / static_cast<double>(p.size()) * std::abs(acc_sum[b] / n - conf_sum[b] / n);
  }
  return e;
}

/// Shannon entropy -sum p log p of one probability row, with 0 log 0 := 0.
inline double predictive_entropy(const Tensor& prob_row) {
  double h = 0.0;
  for (std::size_t i = 0; i < prob_row.count(); ++i) {
    double v = prob_row[i];
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline double mean_predictive_entropy(const Tensor& probs) {
  double h = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double hi = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      double v = probs.at(i, j);
      if (v > 0.0) hi -= v * std::log(v);
    }
    h += hi;
  }
  return h / static_cast<double>(probs.rows());
}

/// Ensemble logits: elementwise log of the member-averaged probabilities.
inline Tensor ensemble_logits(const std::vector<Tensor>& member_probs) {
  if (member_probs.empty()) throw std::invalid_argument("ensemble_logits: no members");
  Tensor mean = member_probs[0];
  for (std::size_t m = 1; m < member_probs.size(); ++m)
    for (std::size_t i = 0; i < mean.count(); ++i) mean[i] += member_probs[m][i];
  for (std::size_t i = 0; i < mean.count(); ++i)
    mean[i] = log_clamped(mean[i] / static_cast<double>(member_probs.size()));
  return mean;
}

namespace detail {
inline double nll_at_temperature(const Tensor& logits, const Tensor& labels, double tau) {
  return nll(PredictionBatch(softmax_rows_value(logits, tau), labels));
}
}  // namespace detail

/// Optimal softmax temperature in [0.05, 5.0] minimizing validation NLL.
/// Coarse 100-point grid bracket followed by golden-section search down to
/// an interval below 1e-4; never worse than tau = 1.
inline double fit_temperature(const Tensor& val_logits, const Tensor& val_labels) {
  constexpr double lo = 0.05, hi = 5.0;
  constexpr std::size_t grid_n = 100;
  auto f = [&](double tau) { return detail::nll_at_temperature(val_logits, val_labels, tau); };

  std::vector<double> grid(grid_n);
  for (std::size_t i = 0; i < grid_n; ++i)
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid_n - 1);
  std::size_t best = 0;
  double best_nll = f(grid[0]);
  for (std::size_t i = 1; i < grid_n; ++i) {
    double v = f(grid[i]);
    if (v < best_nll) {
      best_nll = v;
      best = i;
    }
  }

  double a = grid[best == 0 ? 0 : best - 1];
  double b = grid[best + 1 >= grid_n ? grid_n - 1 : best + 1];
  constexpr double inv_phi = 0.6180339887498949;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double tau_star = 0.5 * (a + b);

  // The returned temperature must never lose to the grid best or to 1.0.
  double v_star = f(tau_star);
  if (best_nll < v_star) {
    tau_star = grid[best];
    v_star = best_nll;
  }
  if (f(1.0) < v_star) tau_star = 1.0;
  return tau_star;
}

/// Reference curve of ensemble-size vs NLL with strictly increasing sizes.
struct NllCurve {
  std::vector<std::pair<std::size_t, double>> points;  // (ensemble size, nll)

  void validate() const {
    if (points.size() < 2)
      throw std::invalid_argument("nll curve needs at least two points");
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i].first <= points[i - 1].first)
        throw std::invalid_argument("nll curve sizes must be strictly increasing");
  }

  bool is_decreasing() const {
    for (std::size_t i = 1; i < points.size(); ++i)
      if (points[i].second >= points[i - 1].second) return false;
    return true;
  }
};

struct DeeResult {
  double value = 1.0;
  bool above_max = false;       // model beats the largest ensemble on the curve
  bool non_monotone_curve = false;

  double report_value() const {
    return above_max ? std::numeric_limits<double>::infinity() : value;
  }
};

/// Smallest (interpolated) ensemble size whose curve NLL is <= model_nll.
/// Clamps to 1 below the first point; returns the +inf sentinel above the
/// last. A non-monotone curve is evaluated on its lower envelope.
inline DeeResult dee(double model_nll, const NllCurve& curve) {
  curve.validate();
  DeeResult res;
  res.non_monotone_curve = !curve.is_decreasing();
  std::vector<std::pair<double, double>> env;  // (size, envelope nll)
  env.reserve(curve.points.size());
  double running = std::numeric_limits<double>::infinity();
  for (const auto& [l, v] : curve.points) {
    running = std::min(running, v);
    env.emplace_back(static_cast<double>(l), running);
  }
  if (model_nll >= env.front().second) {
    res.value = 1.0;
    return res;
  }
  for (std::size_t i = 1; i < env.size(); ++i) {
    if (model_nll >= env[i].second) {
      double drop = env[i - 1].second - env[i].second;
      double t = drop > 0.0 ? (env[i - 1].second - model_nll) / drop : 1.0;
      res.value = env[i - 1].first + t * (env[i].first - env[i - 1].first);
      return res;
    }
  }
  res.above_max = true;
  res.value = env.back().first;
  return res;
}

}  // namespace divkd
