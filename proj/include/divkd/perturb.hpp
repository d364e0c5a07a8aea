#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "divkd/autodiff.hpp"
#include "divkd/models.hpp"
#include "divkd/rng.hpp"
#include "divkd/tensor.hpp"

namespace divkd {

/// Raised when the softened-output gradient vanishes and no perturbation
/// direction exists. Callers fall back to the unperturbed input.
class DegenerateGradient : public std::runtime_error {
public:
  explicit DegenerateGradient(double norm)
      : std::runtime_error("degenerate output gradient (norm " +
                           std::to_string(norm) + ")") {}
};

enum class PerturbStrategy { none, gaussian, ods, confods, adversarial };

inline const char* to_string(PerturbStrategy s) {
  switch (s) {
    case PerturbStrategy::none: return "none";
    case PerturbStrategy::gaussian: return "gaussian";
    case PerturbStrategy::ods: return "ods";
    case PerturbStrategy::confods: return "confods";
    case PerturbStrategy::adversarial: return "adversarial";
  }
  return "?";
}

inline PerturbStrategy perturb_strategy_from(const std::string& s) {
  if (s == "none") return PerturbStrategy::none;
  if (s == "gaussian") return PerturbStrategy::gaussian;
  if (s == "ods") return PerturbStrategy::ods;
  if (s == "confods") return PerturbStrategy::confods;
  if (s == "adversarial") return PerturbStrategy::adversarial;
  throw std::invalid_argument("unknown perturb.strategy '" + s + "'");
}

struct PerturbationConfig {
  PerturbStrategy strategy = PerturbStrategy::none;
  double eta = 1.0 / 255.0;  // step size
  double tau = 4.0;          // softening temperature for the guide gradient
  std::optional<double> gaussian_sigma;  // unset -> eta
  bool gaussian_match_norm = false;  // draw on the eta-sphere instead of N(0, sigma^2 I)
  bool share_batch = false;  // one guide/teacher per batch instead of per example

  double effective_sigma() const { return gaussian_sigma.value_or(eta); }

  void validate() const {
    if (!(eta >= 0.0))
      throw std::invalid_argument("perturb.eta must be nonnegative");
    if (!(tau > 0.0))
      throw std::invalid_argument("perturb.tau must be positive");
    if (gaussian_sigma && !(*gaussian_sigma >= 0.0))
      throw std::invalid_argument("perturb.sigma must be nonnegative");
  }
};

/// Random guide vector w ~ Unif([-1,1])^K.
struct GuideVector {
  std::vector<double> w;
};

inline GuideVector sample_guide(std::size_t num_classes, Rng& rng) {
  GuideVector g;
  g.w.resize(num_classes);
  for (double& v : g.w) v = rng.uniform(-1.0, 1.0);
  return g;
}

/// Uniform member index in [0, M).
inline std::size_t pick_random_teacher(std::size_t num_members, Rng& rng) {
  if (num_members == 0) throw std::invalid_argument("pick_random_teacher: M = 0");
  return rng.index(num_members);
}

/// Unit-norm input-space direction grad_x(w^T softmax(logits(x)/tau)),
/// normalized in L2. x is a single example [D].
template <typename Model>
Tensor ods_direction(const Model& model, const Tensor& x, const GuideVector& w,
                     double tau) {
  NodePtr xn = leaf(x.as_row_matrix(), /*requires_grad=*/true);
  GraphFn g = graph_fn(model, /*trainable=*/false);
  NodePtr probs = softmax_row(g.forward(xn), tau);
  if (w.w.size() != probs->value.count())
    throw ShapeError("guide vector length " + std::to_string(w.w.size()) +
                     " does not match K=" + std::to_string(probs->value.count()));
  backward(dot(probs, Tensor(Shape{1, w.w.size()}, w.w)));
  double norm = l2_norm(xn->grad);
  if (norm < 1e-12) throw DegenerateGradient(norm);
  Tensor dir{Shape{x.count()}};
  for (std::size_t i = 0; i < dir.count(); ++i) dir[i] = xn->grad[i] / norm;
  return dir;
}

/// x~ = x + eta * ods_direction(...); step has L2 norm exactly eta.
template <typename Model>
Tensor perturb_ods(const Tensor& x, const Model& teacher, const GuideVector& w,
                   double eta, double tau) {
  if (eta == 0.0) return x;
  Tensor dir = ods_direction(teacher, x, w, tau);
  Tensor out = x;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] += eta * dir[i];
  return out;
}

/// Maximum softened class probability max_k softmax(logits(x)/tau).
template <typename Model>
double max_confidence(const Model& teacher, const Tensor& x, double tau) {
  Tensor probs = softmax_rows_value(logits(teacher, x), tau);
  double mx = probs[0];
  for (std::size_t i = 1; i < probs.count(); ++i) mx = std::max(mx, probs[i]);
  return mx;
}

/// ConfODS: step scaled by the teacher's maximum softened class probability,
/// so the step length lies in (eta/K, eta].
template <typename Model>
Tensor perturb_confods(const Tensor& x, const Model& teacher, const GuideVector& w,
                       double eta, double tau) {
  if (eta == 0.0) return x;
  return perturb_ods(x, teacher, w, eta * max_confidence(teacher, x, tau), tau);
}

/// Isotropic Gaussian noise, x~ = x + N(0, sigma^2 I).
inline Tensor perturb_gaussian(const Tensor& x, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be nonnegative");
  Tensor out = x;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] += rng.normal(0.0, sigma);
  return out;
}

/// Random direction with step norm exactly eta; the step-size-matched
/// Gaussian baseline used by the diversity and SNR comparisons.
inline Tensor perturb_gaussian_matched(const Tensor& x, double eta, Rng& rng) {
  if (eta == 0.0) return x;
  std::vector<double> u = rng.unit_vector(x.count());
  Tensor out = x;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] += eta * u[i];
  return out;
}

/// Non-targeted attack step: the guide vector is replaced by minus the
/// one-hot label, so the step decreases the true-class probability.
template <typename Model>
Tensor perturb_adversarial(const Tensor& x, const Model& teacher, const Tensor& label,
                           double eta, double tau) {
  std::size_t ones = 0;
  GuideVector w;
  w.w.resize(label.count());
  for (std::size_t i = 0; i < label.count(); ++i) {
    if (label[i] == 1.0)
      ++ones;
    else if (label[i] != 0.0)
      throw std::invalid_argument("adversarial label must be one-hot");
    w.w[i] = -label[i];
  }
  if (ones != 1) throw std::invalid_argument("adversarial label must be one-hot");
  if (eta == 0.0) return x;
  return perturb_ods(x, teacher, w, eta, tau);
}

/// One perturbed batch plus bookkeeping from applying a strategy row by row.
struct PerturbedBatch {
  Tensor x_tilde;
  std::size_t degenerate_count = 0;
};

/// Apply cfg.strategy to every row of x using the teacher ensemble.
/// Guide vectors and teacher picks are sampled per example (or once per
/// batch with cfg.share_batch). A degenerate gradient leaves that row
/// unperturbed and bumps the counter. When `external_guide` is given, ODS
/// directions come from it instead of a randomly picked ensemble member.
inline PerturbedBatch perturb_batch(const DeepEnsemble& teachers, const Tensor& x,
                                    const Tensor& labels, const PerturbationConfig& cfg,
                                    Rng& rng, const MlpTeacher* external_guide = nullptr) {
  cfg.validate();
  PerturbedBatch out;
  out.x_tilde = x;
  if (cfg.strategy == PerturbStrategy::none || cfg.eta == 0.0) {
    if (cfg.strategy != PerturbStrategy::gaussian || cfg.effective_sigma() == 0.0)
      return out;
  }
  std::size_t n = x.rows(), d = x.cols(), k = teachers.members.front().num_classes();
  GuideVector shared_w;
  std::size_t shared_pick = 0;
  if (cfg.share_batch) {
    shared_w = sample_guide(k, rng);
    shared_pick = pick_random_teacher(teachers.size(), rng);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor xi = x.row(i);
    GuideVector w = cfg.share_batch ? shared_w : sample_guide(k, rng);
    std::size_t pick = cfg.share_batch ? shared_pick
                                       : pick_random_teacher(teachers.size(), rng);
    const MlpTeacher& guide = external_guide ? *external_guide : teachers.members[pick];
    Tensor xt = xi;
    try {
      switch (cfg.strategy) {
        case PerturbStrategy::none:
          break;
        case PerturbStrategy::gaussian:
          xt = cfg.gaussian_match_norm ? perturb_gaussian_matched(xi, cfg.eta, rng)
                                       : perturb_gaussian(xi, cfg.effective_sigma(), rng);
          break;
        case PerturbStrategy::ods:
          xt = perturb_ods(xi, guide, w, cfg.eta, cfg.tau);
          break;
        case PerturbStrategy::confods:
          xt = perturb_confods(xi, guide, w, cfg.eta, cfg.tau);
          break;
        case PerturbStrategy::adversarial:
          xt = perturb_adversarial(xi, guide, labels.row(i), cfg.eta, cfg.tau);
          break;
      }
    } catch (const DegenerateGradient&) {
      ++out.degenerate_count;
      xt = xi;
    }
    for (std::size_t j = 0; j < d; ++j) out.x_tilde.at(i, j) = xt[j];
  }
  return out;
}

}  // namespace divkd
