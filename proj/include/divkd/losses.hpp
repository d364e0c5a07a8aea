#pragma once

#include <stdexcept>
#include <string>

#include "divkd/autodiff.hpp"
#include "divkd/models.hpp"
#include "divkd/tensor.hpp"

namespace divkd {

struct LossConfig {
  double alpha = 0.9;  // KD weight, in (0, 1]
  double tau = 4.0;    // softening temperature, > 0

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw std::invalid_argument("loss.alpha must be in (0,1], got " +
                                  std::to_string(alpha));
    if (!(tau > 0.0))
      throw std::invalid_argument("loss.tau must be positive, got " +
                                  std::to_string(tau));
  }
};

namespace detail {
inline void check_one_hot(const Tensor& labels) {
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < labels.cols(); ++j) {
      double v = labels.at(i, j);
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        throw std::invalid_argument("labels must be one-hot; row " +
                                    std::to_string(i) + " has entry " +
                                    std::to_string(v));
    }
    if (ones != 1)
      throw std::invalid_argument("labels must be one-hot; row " +
                                  std::to_string(i) + " has " +
                                  std::to_string(ones) + " ones");
  }
}
}  // namespace detail

/// Mean over the batch of -sum_k y log p. `probs` rows are distributions,
/// `labels` one-hot.
inline double cross_entropy(const Tensor& probs, const Tensor& labels) {
  detail::check_same_shape("cross_entropy", probs, labels);
  detail::check_one_hot(labels);
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    for (std::size_t j = 0; j < probs.cols(); ++j)
      if (labels.at(i, j) == 1.0) total -= log_clamped(probs.at(i, j));
  return total / static_cast<double>(probs.rows());
}

/// Graph version over a probs node; labels stay constant.
inline NodePtr cross_entropy_node(const NodePtr& probs, const Tensor& labels) {
  detail::check_same_shape("cross_entropy", probs->value, labels);
  detail::check_one_hot(labels);
  double inv_n = 1.0 / static_cast<double>(labels.rows());
  return scale(dot(log(probs), labels), -inv_n);
}

/// Temperature-scaled soft cross-entropy, mean over the batch:
///   -tau^2 * sum_k softmax(t/tau) log softmax(s/tau).
/// The teacher side is a constant target; no gradient flows into it.
inline NodePtr kd_loss_node(const NodePtr& student_logits, const NodePtr& teacher_logits,
                            double tau, bool detach_teacher = true) {
  if (!(tau > 0.0))
    throw std::invalid_argument("kd_loss: tau must be positive, got " +
                                std::to_string(tau));
  detail::check_same_shape("kd_loss", student_logits->value, teacher_logits->value);
  std::size_t n = student_logits->value.rows();
  NodePtr s_logsoft = log(softmax_row(student_logits, tau));
  double c = -tau * tau / static_cast<double>(n);
  if (detach_teacher) {
    Tensor t_soft = softmax_rows_value(teacher_logits->value, tau);
    return scale(dot(s_logsoft, t_soft), c);
  }
  NodePtr t_soft = softmax_row(teacher_logits, tau);
  return scale(sum(mul(t_soft, s_logsoft)), c);
}

inline double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                      double tau) {
  return kd_loss_node(constant(student_logits), constant(teacher_logits), tau)
      ->value.value();
}

/// One-to-one distillation objective over M subnetworks:
///   sum_j [(1-alpha) CE(S_j(x), y) + alpha KD(S_j(x~), T_j(x~); tau)]
/// CE is evaluated on clean inputs, KD on perturbed inputs; teacher logits
/// at the perturbed inputs are precomputed constants.
inline NodePtr combined_distill_loss_node(const LiftedStudent& student,
                                          const std::vector<Tensor>& teacher_logits_pert,
                                          const NodePtr& x_clean, const NodePtr& x_pert,
                                          const Tensor& labels, const LossConfig& cfg) {
  cfg.validate();
  std::size_t m = student.member_forward.size();
  if (teacher_logits_pert.size() != m)
    throw std::invalid_argument("combined_distill_loss: " +
                                std::to_string(teacher_logits_pert.size()) +
                                " teachers for M=" + std::to_string(m) + " subnetworks");
  NodePtr total;
  for (std::size_t j = 0; j < m; ++j) {
    NodePtr kd = kd_loss_node(student.member_forward[j](x_pert),
                              constant(teacher_logits_pert[j]), cfg.tau);
    NodePtr term = scale(kd, cfg.alpha);
    if (cfg.alpha < 1.0) {
      NodePtr ce = cross_entropy_node(
          softmax_row(student.member_forward[j](x_clean)), labels);
      term = add(term, scale(ce, 1.0 - cfg.alpha));
    }
    total = total ? add(total, term) : term;
  }
  return total;
}

inline double combined_distill_loss(const BatchEnsembleStudent& student,
                                    const DeepEnsemble& teachers, const Tensor& x_clean,
                                    const Tensor& x_pert, const Tensor& labels,
                                    const LossConfig& cfg) {
  if (teachers.size() != student.members)
    throw std::invalid_argument("combined_distill_loss: |teachers|=" +
                                std::to_string(teachers.size()) +
                                " but student has M=" + std::to_string(student.members));
  detail::check_same_shape("combined_distill_loss", x_clean, x_pert);
  std::vector<Tensor> t_logits;
  t_logits.reserve(teachers.size());
  for (const auto& t : teachers.members) t_logits.push_back(logits(t, x_pert));
  LiftedStudent ls = lift_student(student, /*trainable=*/false);
  return combined_distill_loss_node(ls, t_logits, constant(x_clean), constant(x_pert),
                                    labels, cfg)
      ->value.value();
}

}  // namespace divkd
