#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "divkd/losses.hpp"
#include "divkd/metrics.hpp"
#include "divkd/models.hpp"
#include "divkd/perturb.hpp"
#include "divkd/rng.hpp"
#include "divkd/tensor.hpp"

namespace divkd {

/// Mean KL(p_i || p_j) over all ordered pairs i != j of member output rows.
inline double pairwise_kld(const std::vector<Tensor>& member_prob_rows) {
  std::size_t m = member_prob_rows.size();
  if (m < 2) throw std::invalid_argument("pairwise_kld: need at least two members");
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const Tensor& p = member_prob_rows[i];
      const Tensor& q = member_prob_rows[j];
      double kl = 0.0;
      for (std::size_t c = 0; c < p.count(); ++c)
        if (p[c] > 0.0) kl += p[c] * (std::log(p[c]) - log_clamped(q[c]));
      total += kl;
    }
  return total / static_cast<double>(m * (m - 1));
}

/// Minimum over members of the maximum class probability.
inline double min_confidence(const std::vector<Tensor>& member_prob_rows) {
  if (member_prob_rows.empty())
    throw std::invalid_argument("min_confidence: no members");
  double mn = std::numeric_limits<double>::infinity();
  for (const Tensor& row : member_prob_rows) {
    double mx = row[0];
    for (std::size_t i = 1; i < row.count(); ++i) mx = std::max(mx, row[i]);
    mn = std::min(mn, mx);
  }
  return mn;
}

/// Binned diversity plot: per-sample average pairwise KL aggregated into
/// equal-width bins over the minimum member confidence.
struct DiversityPlotData {
  std::vector<double> bin_edges;       // num_bins + 1 edges over [0,1]
  std::vector<double> bin_mean_kld;    // 0 for empty bins
  std::vector<std::size_t> bin_counts;
  double mean_kld = 0.0;               // count-weighted = flat sample mean

  std::string to_csv() const {
    std::string out = "bin_lo,bin_hi,count,density,mean_kld\n";
    std::size_t n = 0;
    for (std::size_t c : bin_counts) n += c;
    char buf[160];
    for (std::size_t b = 0; b < bin_counts.size(); ++b) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%zu,%.17g,%.17g\n", bin_edges[b],
                    bin_edges[b + 1], bin_counts[b],
                    n ? static_cast<double>(bin_counts[b]) / static_cast<double>(n) : 0.0,
                    bin_mean_kld[b]);
      out += buf;
    }
    return out;
  }
};

/// Aggregate per-sample (min confidence, pairwise KL) pairs into bins.
inline DiversityPlotData bin_diversity(const std::vector<double>& min_conf,
                                       const std::vector<double>& per_sample_kld,
                                       std::size_t num_bins) {
  if (num_bins < 1) throw std::invalid_argument("diversity_plot: num_bins must be >= 1");
  if (min_conf.empty()) throw std::invalid_argument("diversity_plot: empty dataset");
  if (min_conf.size() != per_sample_kld.size())
    throw std::invalid_argument("diversity_plot: sample count mismatch");
  DiversityPlotData d;
  d.bin_edges.resize(num_bins + 1);
  for (std::size_t b = 0; b <= num_bins; ++b)
    d.bin_edges[b] = static_cast<double>(b) / static_cast<double>(num_bins);
  d.bin_mean_kld.assign(num_bins, 0.0);
  d.bin_counts.assign(num_bins, 0);
  std::vector<double> sums(num_bins, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < min_conf.size(); ++i) {
    auto b = static_cast<std::size_t>(min_conf[i] * static_cast<double>(num_bins));
    b = std::min(b, num_bins - 1);
    sums[b] += per_sample_kld[i];
    ++d.bin_counts[b];
    total += per_sample_kld[i];
  }
  for (std::size_t b = 0; b < num_bins; ++b)
    if (d.bin_counts[b]) d.bin_mean_kld[b] = sums[b] / static_cast<double>(d.bin_counts[b]);
  d.mean_kld = total / static_cast<double>(min_conf.size());
  return d;
}

struct DiversityRun {
  DiversityPlotData plot;
  std::size_t degenerate_count = 0;
};

namespace detail {

/// Shared core: per example, perturb (guide drawn from `collection` or the
/// external model), then collect every member's softmax row at the result.
template <typename Collection>
DiversityRun diversity_run_impl(const Collection& collection, std::size_t members,
                                const Tensor& x, const Tensor& y,
                                const PerturbationConfig& cfg, std::size_t num_bins,
                                Rng& rng, const MlpTeacher* external_guide) {
  cfg.validate();
  if (x.rows() == 0) throw std::invalid_argument("diversity_plot: empty dataset");
  std::vector<double> confs, klds;
  DiversityRun run;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Tensor xi = x.row(i);
    Tensor xt = xi;
    try {
      switch (cfg.strategy) {
        case PerturbStrategy::none:
          break;
        case PerturbStrategy::gaussian:
          xt = cfg.gaussian_match_norm ? perturb_gaussian_matched(xi, cfg.eta, rng)
                                       : perturb_gaussian(xi, cfg.effective_sigma(), rng);
          break;
        case PerturbStrategy::ods: {
          GuideVector w = sample_guide(collection.num_classes_(), rng);
          std::size_t pick = pick_random_teacher(members, rng);
          if (external_guide)
            xt = perturb_ods(xi, *external_guide, w, cfg.eta, cfg.tau);
          else
            xt = collection.perturb_with_member(pick, xi, w, cfg);
          break;
        }
        case PerturbStrategy::confods: {
          GuideVector w = sample_guide(collection.num_classes_(), rng);
          std::size_t pick = pick_random_teacher(members, rng);
          if (external_guide)
            xt = perturb_confods(xi, *external_guide, w, cfg.eta, cfg.tau);
          else
            xt = collection.perturb_with_member(pick, xi, w, cfg, /*conf=*/true);
          break;
        }
        case PerturbStrategy::adversarial: {
          std::size_t pick = pick_random_teacher(members, rng);
          xt = collection.adversarial_with_member(pick, xi, y.row(i), cfg,
                                                  external_guide);
          break;
        }
      }
    } catch (const DegenerateGradient&) {
      ++run.degenerate_count;
      xt = xi;
    }
    std::vector<Tensor> rows = collection.member_prob_rows(xt);
    confs.push_back(min_confidence(rows));
    klds.push_back(pairwise_kld(rows));
  }
  run.plot = bin_diversity(confs, klds, num_bins);
  return run;
}

struct EnsembleCollection {
  const DeepEnsemble& de;
  std::size_t num_classes_() const { return de.members.front().num_classes(); }
  Tensor perturb_with_member(std::size_t j, const Tensor& xi, const GuideVector& w,
                             const PerturbationConfig& cfg, bool conf = false) const {
    return conf ? perturb_confods(xi, de.members[j], w, cfg.eta, cfg.tau)
                : perturb_ods(xi, de.members[j], w, cfg.eta, cfg.tau);
  }
  Tensor adversarial_with_member(std::size_t j, const Tensor& xi, const Tensor& label,
                                 const PerturbationConfig& cfg,
                                 const MlpTeacher* ext) const {
    return perturb_adversarial(xi, ext ? *ext : de.members[j], label, cfg.eta, cfg.tau);
  }
  std::vector<Tensor> member_prob_rows(const Tensor& xt) const {
    std::vector<Tensor> rows;
    rows.reserve(de.size());
    for (const auto& m : de.members)
      rows.push_back(softmax_rows_value(logits(m, xt)).row(0));
    return rows;
  }
};

struct StudentCollection {
  const BatchEnsembleStudent& student;
  std::size_t num_classes_() const { return student.num_classes(); }
  Tensor perturb_with_member(std::size_t j, const Tensor& xi, const GuideVector& w,
                             const PerturbationConfig& cfg, bool conf = false) const {
    MemberView v{&student, j};
    return conf ? perturb_confods(xi, v, w, cfg.eta, cfg.tau)
                : perturb_ods(xi, v, w, cfg.eta, cfg.tau);
  }
  Tensor adversarial_with_member(std::size_t j, const Tensor& xi, const Tensor& label,
                                 const PerturbationConfig& cfg,
                                 const MlpTeacher* ext) const {
    if (ext) return perturb_adversarial(xi, *ext, label, cfg.eta, cfg.tau);
    return perturb_adversarial(xi, MemberView{&student, j}, label, cfg.eta, cfg.tau);
  }
  std::vector<Tensor> member_prob_rows(const Tensor& xt) const {
    std::vector<Tensor> rows;
    rows.reserve(student.members);
    for (std::size_t j = 0; j < student.members; ++j)
      rows.push_back(softmax_rows_value(member_logits(student, j, xt)).row(0));
    return rows;
  }
};

}  // namespace detail

/// Diversity plot for deep-ensemble members on (optionally perturbed) inputs.
inline DiversityRun diversity_plot(const DeepEnsemble& de, const Tensor& x,
                                   const Tensor& y, const PerturbationConfig& cfg,
                                   std::size_t num_bins, Rng& rng,
                                   const MlpTeacher* external_guide = nullptr) {
  return detail::diversity_run_impl(detail::EnsembleCollection{de}, de.size(), x, y,
                                    cfg, num_bins, rng, external_guide);
}

/// Same for the subnetworks of a BatchEnsemble student.
inline DiversityRun diversity_plot(const BatchEnsembleStudent& s, const Tensor& x,
                                   const Tensor& y, const PerturbationConfig& cfg,
                                   std::size_t num_bins, Rng& rng,
                                   const MlpTeacher* external_guide = nullptr) {
  return detail::diversity_run_impl(detail::StudentCollection{s}, s.members, x, y, cfg,
                                    num_bins, rng, external_guide);
}

/// Input Jacobian of the softmax outputs at temperature 1: K backward
/// passes, one per class, giving a [K x D] matrix.
template <typename Model>
Tensor input_jacobian(const Model& model, const Tensor& x) {
  GraphFn g = graph_fn(model, /*trainable=*/false);
  Tensor first = logits(model, x.as_row_matrix());
  std::size_t k = first.cols(), d = x.count();
  Tensor jac{Shape{k, d}};
  for (std::size_t c = 0; c < k; ++c) {
    NodePtr xn = leaf(x.as_row_matrix(), /*requires_grad=*/true);
    backward(gather(softmax_row(g.forward(xn)), c));
    for (std::size_t i = 0; i < d; ++i) jac.at(c, i) = xn->grad[i];
  }
  return jac;
}

/// Cosine similarity between the vectorized input Jacobians of two models.
template <typename ModelA, typename ModelB>
double jacobian_cosine(const ModelA& a, const ModelB& b, const Tensor& x) {
  Tensor ja = input_jacobian(a, x);
  Tensor jb = input_jacobian(b, x);
  if (ja.shape() != jb.shape())
    throw ShapeError("jacobian_cosine: models disagree on dims, " + ja.shape().str() +
                     " vs " + jb.shape().str());
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ja.count(); ++i) {
    dot += ja[i] * jb[i];
    na += ja[i] * ja[i];
    nb += jb[i] * jb[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) throw DegenerateGradient(std::min(na, nb));
  return dot / (na * nb);
}

/// ROC of two similarity samples plus the Mann-Whitney AUROC
/// P(pos > neg) + P(pos = neg)/2.
struct RocData {
  std::vector<double> thresholds;
  std::vector<double> tpr, fpr;
  double auroc = 0.0;
  double mean_pos = 0.0, mean_neg = 0.0;

  std::string to_csv() const {
    std::string out = "threshold,tpr,fpr\n";
    char buf[120];
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", thresholds[i], tpr[i],
                    fpr[i]);
      out += buf;
    }
    return out;
  }
};

inline RocData roc_auroc(const std::vector<double>& positives,
                         const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty())
    throw std::invalid_argument("roc_auroc: both samples must be nonempty");
  RocData roc;
  double wins = 0.0;
  for (double p : positives)
    for (double q : negatives) {
      if (p > q)
        wins += 1.0;
      else if (p == q)
        wins += 0.5;
    }
  roc.auroc = wins / (static_cast<double>(positives.size()) *
                      static_cast<double>(negatives.size()));
  for (double p : positives) roc.mean_pos += p;
  roc.mean_pos /= static_cast<double>(positives.size());
  for (double q : negatives) roc.mean_neg += q;
  roc.mean_neg /= static_cast<double>(negatives.size());

  // Full sweep over pooled values, from strict +inf down to the minimum;
  // a sample scores positive when value >= threshold.
  std::vector<double> pooled;
  pooled.reserve(positives.size() + negatives.size());
  pooled.insert(pooled.end(), positives.begin(), positives.end());
  pooled.insert(pooled.end(), negatives.begin(), negatives.end());
  std::sort(pooled.begin(), pooled.end(), std::greater<>());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  roc.thresholds.push_back(std::numeric_limits<double>::infinity());
  for (double t : pooled) roc.thresholds.push_back(t);
  for (double t : roc.thresholds) {
    std::size_t tp = 0, fp = 0;
    for (double p : positives)
      if (p >= t) ++tp;
    for (double q : negatives)
      if (q >= t) ++fp;
    roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(positives.size()));
    roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(negatives.size()));
  }
  return roc;
}

struct SnrResult {
  double value = 0.0;
  bool zero_variance = false;  // deterministic perturber; value is +inf
};

/// SNR of the Jacobian-matching gradient G(x, eps) =
/// grad_theta(L_KD(S(x+eps), T(x+eps)) - L_KD(S(x), T(x))):
/// ||E[vec G]|| / sqrt(||Var[vec G]||) with elementwise variance over draws.
template <typename TeacherT, typename StudentT>
SnrResult jacobian_matching_snr(const TeacherT& teacher, const StudentT& student,
                                const Tensor& x,
                                const std::function<Tensor(const Tensor&, Rng&)>& perturber,
                                std::size_t n_samples, Rng& rng, double tau = 1.0) {
  if (n_samples < 2)
    throw std::invalid_argument("jacobian_matching_snr: need at least two samples");
  auto grad_at = [&](const Tensor& xi) {
    GraphFn gs = graph_fn(student, /*trainable=*/true);
    Tensor t_logits = logits(teacher, xi.as_row_matrix());
    NodePtr loss = kd_loss_node(gs.forward(constant(xi.as_row_matrix())),
                                constant(t_logits), tau);
    backward(loss);
    std::vector<double> flat;
    for (const NodePtr& p : gs.params)
      flat.insert(flat.end(), p->grad.begin(), p->grad.end());
    return flat;
  };
  std::vector<double> base = grad_at(x);
  std::size_t dim = base.size();
  std::vector<double> mean(dim, 0.0), m2(dim, 0.0);
  std::vector<std::vector<double>> samples;
  samples.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tensor xt = perturber(x, rng);
    std::vector<double> g = grad_at(xt);
    for (std::size_t i = 0; i < dim; ++i) {
      g[i] -= base[i];
      mean[i] += g[i];
    }
    samples.push_back(std::move(g));
  }
  for (double& v : mean) v /= static_cast<double>(n_samples);
  for (const auto& g : samples)
    for (std::size_t i = 0; i < dim; ++i) {
      double d = g[i] - mean[i];
      m2[i] += d * d;
    }
  for (double& v : m2) v /= static_cast<double>(n_samples);
  double denom = std::sqrt(l2_norm(m2));
  SnrResult res;
  if (denom == 0.0) {
    res.zero_variance = true;
    res.value = std::numeric_limits<double>::infinity();
    return res;
  }
  res.value = l2_norm(mean) / denom;
  return res;
}

/// First-order Taylor residuals |f(x + eta d) - f(x) - eta d.grad f(x)| of a
/// scalar graph loss; the generic core behind the Jacobian-matching check.
template <typename LossGraph>
std::vector<double> first_order_residuals(LossGraph&& loss_graph, const Tensor& x,
                                          const Tensor& direction,
                                          const std::vector<double>& etas) {
  if (direction.count() != x.count())
    throw ShapeError("first_order_residuals: direction " + direction.shape().str() +
                     " vs x " + x.shape().str());
  NodePtr xn = leaf(x.as_row_matrix(), /*requires_grad=*/true);
  NodePtr base = loss_graph(xn);
  backward(base);
  double f0 = base->value.value();
  double slope = 0.0;
  for (std::size_t i = 0; i < direction.count(); ++i) slope += xn->grad[i] * direction[i];
  std::vector<double> out;
  out.reserve(etas.size());
  for (double eta : etas) {
    Tensor xe = x;
    for (std::size_t i = 0; i < xe.count(); ++i) xe[i] += eta * direction[i];
    double fe = loss_graph(constant(xe.as_row_matrix()))->value.value();
    out.push_back(std::abs(fe - f0 - eta * slope));
  }
  return out;
}

/// Residuals of the KD loss between a teacher/student pair along a fixed
/// direction; second-order decay here substantiates the Jacobian-matching
/// expansion. The gradient runs through both networks.
template <typename TeacherT, typename StudentT>
std::vector<double> jacobian_matching_residual(const TeacherT& teacher,
                                               const StudentT& student, const Tensor& x,
                                               const Tensor& direction,
                                               const std::vector<double>& etas,
                                               double tau = 1.0) {
  GraphFn gt = graph_fn(teacher, /*trainable=*/false);
  GraphFn gs = graph_fn(student, /*trainable=*/false);
  auto loss_graph = [&](const NodePtr& xn) {
    return kd_loss_node(gs.forward(xn), gt.forward(xn), tau, /*detach_teacher=*/false);
  };
  return first_order_residuals(loss_graph, x, direction, etas);
}

/// Least-squares slope of log(residual) against log(eta).
inline double loglog_slope(const std::vector<double>& etas,
                           const std::vector<double>& residuals) {
  if (etas.size() != residuals.size() || etas.size() < 2)
    throw std::invalid_argument("loglog_slope: need matching lists of >= 2 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  auto n = static_cast<double>(etas.size());
  for (std::size_t i = 0; i < etas.size(); ++i) {
    double lx = std::log(etas[i]);
    double ly = std::log(std::max(residuals[i], kLogFloor));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace divkd
