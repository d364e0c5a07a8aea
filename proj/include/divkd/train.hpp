#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "divkd/data.hpp"
#include "divkd/losses.hpp"
#include "divkd/metrics.hpp"
#include "divkd/models.hpp"
#include "divkd/perturb.hpp"
#include "divkd/rng.hpp"

namespace divkd {

/// Heavy-ball SGD state: g' = g + wd*theta; v <- mu*v + g'; theta <- theta - lr*v.
struct OptimState {
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr = 0.1;
  std::vector<std::vector<double>> velocity;
};

inline OptimState make_optim_state(const std::vector<Tensor*>& params, double momentum,
                                   double weight_decay) {
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("optim.momentum must be in [0,1)");
  OptimState st;
  st.momentum = momentum;
  st.weight_decay = weight_decay;
  for (const Tensor* p : params) st.velocity.emplace_back(p->count(), 0.0);
  return st;
}

inline void sgd_step(const std::vector<Tensor*>& params,
                     const std::vector<const std::vector<double>*>& grads,
                     OptimState& st) {
  if (params.size() != grads.size() || params.size() != st.velocity.size())
    throw ShapeError("sgd_step: parameter/gradient/velocity count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    const std::vector<double>& g = *grads[p];
    std::vector<double>& v = st.velocity[p];
    if (g.size() != theta.count() || v.size() != theta.count())
      throw ShapeError("sgd_step: size mismatch at parameter " + std::to_string(p) +
                       " (" + std::to_string(theta.count()) + " vs " +
                       std::to_string(g.size()) + ")");
    for (std::size_t i = 0; i < v.size(); ++i) {
      double gp = g[i] + st.weight_decay * theta[i];
      v[i] = st.momentum * v[i] + gp;
      theta[i] -= st.lr * v[i];
    }
  }
}

/// Four-phase schedule: warmup from 0.01*base to base, constant base until
/// 0.5T, linear decay to 0.01*base until 0.9T, constant 0.01*base to the end.
struct ScheduleConfig {
  double base_lr = 0.1;
  std::size_t total_epochs = 100;
  std::size_t warmup_epochs = 5;

  void validate() const {
    if (!(base_lr > 0.0)) throw std::invalid_argument("sched.base_lr must be positive");
    if (total_epochs < 1) throw std::invalid_argument("sched.total_epochs must be >= 1");
    if (static_cast<double>(warmup_epochs) >= 0.5 * static_cast<double>(total_epochs))
      throw std::invalid_argument("sched.warmup_epochs must be below half of total_epochs");
  }
};

/// Learning rate at a (possibly fractional) epoch in [0, total_epochs).
inline double lr_at(double epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  double total = static_cast<double>(cfg.total_epochs);
  double warm = static_cast<double>(cfg.warmup_epochs);
  if (!(epoch >= 0.0) || epoch >= total)
    throw std::domain_error("lr_at: epoch " + std::to_string(epoch) +
                            " outside [0, " + std::to_string(cfg.total_epochs) + ")");
  if (warm > 0.0 && epoch <= warm)
    return cfg.base_lr * (0.01 + 0.99 * epoch / warm);
  if (epoch <= 0.5 * total) return cfg.base_lr;
  if (epoch <= 0.9 * total)
    return cfg.base_lr * (1.0 - 0.99 * (epoch - 0.5 * total) / (0.4 * total));
  return 0.01 * cfg.base_lr;
}

struct TrainerConfig {
  ScheduleConfig sched;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
};

struct TrainLog {
  struct Row {
    std::size_t epoch;
    double lr;
    double train_loss;
    double val_acc;
    double val_nll;
  };
  std::vector<Row> rows;
  std::size_t degenerate_count = 0;  // perturbations skipped on vanishing gradients
  std::size_t best_epoch = 0;
  double best_val_acc = -1.0;

  std::string to_csv() const {
    std::string out = "epoch,lr,train_loss,val_acc,val_nll\n";
    char buf[160];
    for (const Row& r : rows) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr,
                    r.train_loss, r.val_acc, r.val_nll);
      out += buf;
    }
    return out;
  }
};

namespace detail {

inline Split slice_batch(const Split& s, const std::vector<std::size_t>& order,
                         std::size_t lo, std::size_t hi) {
  std::size_t d = s.x.cols(), k = s.y.cols();
  Split b;
  b.x = Tensor{Shape{hi - lo, d}};
  b.y = Tensor{Shape{hi - lo, k}};
  for (std::size_t i = lo; i < hi; ++i) {
    for (std::size_t j = 0; j < d; ++j) b.x.at(i - lo, j) = s.x.at(order[i], j);
    for (std::size_t j = 0; j < k; ++j) b.y.at(i - lo, j) = s.y.at(order[i], j);
  }
  return b;
}

inline std::size_t snapshot_window_start(std::size_t total_epochs) {
  auto s = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(total_epochs)));
  return std::min(total_epochs - 1, s);
}

template <typename ModelT>
std::vector<Tensor> snapshot_params(ModelT& m) {
  std::vector<Tensor> out;
  for (Tensor* p : param_refs(m)) out.push_back(*p);
  return out;
}

template <typename ModelT>
void restore_params(ModelT& m, const std::vector<Tensor>& snap) {
  auto refs = param_refs(m);
  for (std::size_t i = 0; i < refs.size(); ++i) *refs[i] = snap[i];
}

}  // namespace detail

/// One teacher trained with plain cross-entropy under the four-phase
/// schedule; returns the best-validation-accuracy snapshot taken inside the
/// final constant-LR phase.
inline MlpTeacher train_single_teacher(const Split& train, const Split& val,
                                       const std::vector<std::size_t>& widths,
                                       const TrainerConfig& cfg, std::uint64_t seed,
                                       TrainLog* log = nullptr) {
  cfg.sched.validate();
  Rng rng(seed);
  MlpTeacher model = make_mlp(widths, rng);
  auto params = param_refs(model);
  OptimState st = make_optim_state(params, cfg.momentum, cfg.weight_decay);
  std::size_t n = train.size();
  std::size_t window = detail::snapshot_window_start(cfg.sched.total_epochs);
  std::vector<Tensor> best;
  std::size_t best_epoch = 0;
  double best_acc = -1.0;
  for (std::size_t e = 0; e < cfg.sched.total_epochs; ++e) {
    st.lr = lr_at(static_cast<double>(e), cfg.sched);
    auto order = rng.permutation(n);
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      std::size_t hi = std::min(n, lo + cfg.batch_size);
      Split b = detail::slice_batch(train, order, lo, hi);
      GraphFn g = graph_fn(model, /*trainable=*/true);
      NodePtr loss = cross_entropy_node(softmax_row(g.forward(constant(b.x))), b.y);
      backward(loss);
      loss_sum += loss->value.value() * static_cast<double>(hi - lo);
      std::vector<const std::vector<double>*> grads;
      for (const NodePtr& pn : g.params) grads.push_back(&pn->grad);
      sgd_step(params, grads, st);
    }
    if (!std::isfinite(loss_sum))
      throw NumericalError("training loss became non-finite at epoch " +
                           std::to_string(e));
    PredictionBatch vp(softmax_rows_value(logits(model, val.x)), val.y);
    double vacc = accuracy(vp), vnll = nll(vp);
    if (log) log->rows.push_back({e, st.lr, loss_sum / static_cast<double>(n), vacc, vnll});
    if (e >= window && vacc > best_acc) {
      best_acc = vacc;
      best_epoch = e;
      best = detail::snapshot_params(model);
    }
  }
  if (!best.empty()) detail::restore_params(model, best);
  if (log) {
    log->best_epoch = best_epoch;
    log->best_val_acc = best_acc;
  }
  return model;
}

/// M independently seeded teachers over the same data.
inline DeepEnsemble train_teachers(const Split& train, const Split& val,
                                   const std::vector<std::size_t>& widths,
                                   std::size_t members, const TrainerConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::vector<TrainLog>* logs = nullptr) {
  if (seeds.size() != members)
    throw std::invalid_argument("train_teachers: need one seed per member");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != members)
    throw std::invalid_argument("train_teachers: seeds must be distinct");
  require_multiclass(train);
  DeepEnsemble de;
  for (std::size_t m = 0; m < members; ++m) {
    TrainLog log;
    de.members.push_back(
        train_single_teacher(train, val, widths, cfg, seeds[m], &log));
    if (logs) logs->push_back(std::move(log));
  }
  return de;
}

/// Knowledge distillation from frozen teachers into the student's
/// subnetworks. Per batch: sample guides and a teacher index per example,
/// build the perturbed inputs, take one SGD step on the combined loss.
/// Returns the training log; the student is updated in place and ends at
/// its best-validation snapshot from the final constant-LR phase.
inline TrainLog distill(const DeepEnsemble& teachers, BatchEnsembleStudent& student,
                        const Split& train, const Split& val, const LossConfig& loss_cfg,
                        const PerturbationConfig& perturb_cfg, const TrainerConfig& cfg,
                        std::uint64_t seed, const MlpTeacher* external_guide = nullptr) {
  if (teachers.size() != student.members)
    throw std::invalid_argument("distill: |teachers|=" + std::to_string(teachers.size()) +
                                " but student has M=" + std::to_string(student.members));
  loss_cfg.validate();
  perturb_cfg.validate();
  cfg.sched.validate();
  Rng rng(seed);
  auto params = param_refs(student);
  OptimState st = make_optim_state(params, cfg.momentum, cfg.weight_decay);
  std::size_t n = train.size();
  std::size_t window = detail::snapshot_window_start(cfg.sched.total_epochs);
  TrainLog log;
  std::vector<Tensor> best;
  for (std::size_t e = 0; e < cfg.sched.total_epochs; ++e) {
    st.lr = lr_at(static_cast<double>(e), cfg.sched);
    auto order = rng.permutation(n);
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      std::size_t hi = std::min(n, lo + cfg.batch_size);
      Split b = detail::slice_batch(train, order, lo, hi);
      PerturbedBatch pb = perturb_batch(teachers, b.x, b.y, perturb_cfg, rng,
                                        external_guide);
      log.degenerate_count += pb.degenerate_count;
      std::vector<Tensor> t_logits;
      t_logits.reserve(teachers.size());
      for (const auto& t : teachers.members) t_logits.push_back(logits(t, pb.x_tilde));
      LiftedStudent ls = lift_student(student, /*trainable=*/true);
      NodePtr loss = combined_distill_loss_node(ls, t_logits, constant(b.x),
                                                constant(pb.x_tilde), b.y, loss_cfg);
      backward(loss);
      loss_sum += loss->value.value() * static_cast<double>(hi - lo);
      std::vector<const std::vector<double>*> grads;
      for (const NodePtr& pn : ls.params) grads.push_back(&pn->grad);
      sgd_step(params, grads, st);
    }
    if (!std::isfinite(loss_sum))
      throw NumericalError("distillation loss became non-finite at epoch " +
                           std::to_string(e));
    // Validation uses the ensemble-averaged student prediction.
    PredictionBatch vp(ensemble_probs(student, val.x), val.y);
    double vacc = accuracy(vp), vnll = nll(vp);
    log.rows.push_back({e, st.lr, loss_sum / static_cast<double>(n), vacc, vnll});
    if (e >= window && vacc > log.best_val_acc) {
      log.best_val_acc = vacc;
      log.best_epoch = e;
      best = detail::snapshot_params(student);
    }
  }
  if (!best.empty()) detail::restore_params(student, best);
  return log;
}

/// Label-only baseline: trains the student's subnetworks with plain
/// cross-entropy (no teachers). Used for the from-scratch comparisons.
inline TrainLog train_student_scratch(BatchEnsembleStudent& student, const Split& train,
                                      const Split& val, const TrainerConfig& cfg,
                                      std::uint64_t seed) {
  cfg.sched.validate();
  require_multiclass(train);
  Rng rng(seed);
  auto params = param_refs(student);
  OptimState st = make_optim_state(params, cfg.momentum, cfg.weight_decay);
  std::size_t n = train.size();
  std::size_t window = detail::snapshot_window_start(cfg.sched.total_epochs);
  TrainLog log;
  std::vector<Tensor> best;
  for (std::size_t e = 0; e < cfg.sched.total_epochs; ++e) {
    st.lr = lr_at(static_cast<double>(e), cfg.sched);
    auto order = rng.permutation(n);
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      std::size_t hi = std::min(n, lo + cfg.batch_size);
      Split b = detail::slice_batch(train, order, lo, hi);
      LiftedStudent ls = lift_student(student, /*trainable=*/true);
      NodePtr xn = constant(b.x);
      NodePtr loss;
      for (std::size_t j = 0; j < student.members; ++j) {
        NodePtr ce = cross_entropy_node(softmax_row(ls.member_forward[j](xn)), b.y);
        loss = loss ? add(loss, ce) : ce;
      }
      backward(loss);
      loss_sum += loss->value.value() * static_cast<double>(hi - lo);
      std::vector<const std::vector<double>*> grads;
      for (const NodePtr& pn : ls.params) grads.push_back(&pn->grad);
      sgd_step(params, grads, st);
    }
    if (!std::isfinite(loss_sum))
      throw NumericalError("scratch training loss became non-finite at epoch " +
                           std::to_string(e));
    PredictionBatch vp(ensemble_probs(student, val.x), val.y);
    double vacc = accuracy(vp), vnll = nll(vp);
    log.rows.push_back({e, st.lr, loss_sum / static_cast<double>(n), vacc, vnll});
    if (e >= window && vacc > log.best_val_acc) {
      log.best_val_acc = vacc;
      log.best_epoch = e;
      best = detail::snapshot_params(student);
    }
  }
  if (!best.empty()) detail::restore_params(student, best);
  return log;
}

}  // namespace divkd
