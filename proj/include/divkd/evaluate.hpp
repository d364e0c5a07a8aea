#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "divkd/data.hpp"
#include "divkd/metrics.hpp"
#include "divkd/models.hpp"
#include "divkd/rng.hpp"

namespace divkd {

/// Per-member softmax probabilities at temperature 1.
inline std::vector<Tensor> member_probs(const MlpTeacher& m, const Tensor& x) {
  return {softmax_rows_value(logits(m, x))};
}

inline std::vector<Tensor> member_probs(const DeepEnsemble& de, const Tensor& x) {
  std::vector<Tensor> out;
  out.reserve(de.size());
  for (const auto& m : de.members) out.push_back(softmax_rows_value(logits(m, x)));
  return out;
}

inline std::vector<Tensor> member_probs(const BatchEnsembleStudent& s, const Tensor& x) {
  std::vector<Tensor> out;
  out.reserve(s.members);
  for (std::size_t j = 0; j < s.members; ++j)
    out.push_back(softmax_rows_value(member_logits(s, j, x)));
  return out;
}

struct MetricsBlock {
  double acc = 0.0, nll = 0.0, brier = 0.0, ece = 0.0, entropy_mean = 0.0;

  nlohmann::json to_json() const {
    return {{"acc", acc},
            {"nll", nll},
            {"brier", brier},
            {"ece", ece},
            {"entropy_mean", entropy_mean}};
  }
};

inline MetricsBlock metrics_block(const PredictionBatch& p, std::size_t ece_bins = 15) {
  MetricsBlock b;
  b.acc = accuracy(p);
  b.nll = nll(p);
  b.brier = brier(p);
  b.ece = ece(p, ece_bins);
  b.entropy_mean = mean_predictive_entropy(p.probs);
  return b;
}

/// Full evaluation following the calibrated-metrics recipe: the optimal
/// temperature is fit on validation ensemble logits, then every metric is
/// recomputed on temperature-scaled test logits.
struct EvaluationReport {
  MetricsBlock standard, calibrated;
  double tau_star = 1.0;
  std::optional<DeeResult> dee_result;

  nlohmann::json to_json() const {
    MetricsBlock flat = standard;
    nlohmann::json j{{"acc", flat.acc},
                     {"nll", flat.nll},
                     {"brier", flat.brier},
                     {"ece", flat.ece},
                     {"entropy_mean", flat.entropy_mean},
                     {"tau_star", tau_star},
                     {"standard", standard.to_json()},
                     {"calibrated", calibrated.to_json()}};
    if (dee_result) {
      if (dee_result->above_max)
        j["dee"] = "inf";
      else
        j["dee"] = dee_result->value;
      j["dee_non_monotone_curve"] = dee_result->non_monotone_curve;
    } else {
      j["dee"] = nullptr;
    }
    return j;
  }
};

inline EvaluationReport evaluate_probs(const std::vector<Tensor>& probs_val,
                                       const Tensor& val_labels,
                                       const std::vector<Tensor>& probs_test,
                                       const Tensor& test_labels,
                                       std::size_t ece_bins = 15) {
  Tensor val_logits = ensemble_logits(probs_val);
  Tensor test_logits = ensemble_logits(probs_test);
  EvaluationReport rep;
  rep.standard = metrics_block(
      PredictionBatch(softmax_rows_value(test_logits), test_labels), ece_bins);
  rep.tau_star = fit_temperature(val_logits, val_labels);
  rep.calibrated = metrics_block(
      PredictionBatch(softmax_rows_value(test_logits, rep.tau_star), test_labels),
      ece_bins);
  double val_nll_raw =
      nll(PredictionBatch(softmax_rows_value(val_logits), val_labels));
  double val_nll_cal =
      nll(PredictionBatch(softmax_rows_value(val_logits, rep.tau_star), val_labels));
  if (val_nll_cal > val_nll_raw + 1e-9)
    throw std::logic_error("temperature scaling increased validation NLL");
  return rep;
}

template <typename ModelT>
EvaluationReport evaluate_model(const ModelT& model, const Split& val,
                                const Split& test, std::size_t ece_bins = 15) {
  return evaluate_probs(member_probs(model, val.x), val.y,
                        member_probs(model, test.x), test.y, ece_bins);
}

/// Calibrated NLL of one specific subset of teachers.
inline double subset_calibrated_nll(const DeepEnsemble& teachers,
                                    const std::vector<std::size_t>& subset,
                                    const Split& val, const Split& test) {
  std::vector<Tensor> pv, pt;
  for (std::size_t idx : subset) {
    pv.push_back(softmax_rows_value(logits(teachers.members[idx], val.x)));
    pt.push_back(softmax_rows_value(logits(teachers.members[idx], test.x)));
  }
  double tau = fit_temperature(ensemble_logits(pv), val.y);
  return nll(PredictionBatch(softmax_rows_value(ensemble_logits(pt), tau), test.y));
}

/// Reference NLL curve for the DEE score: for each ensemble size 1..M,
/// the mean calibrated test NLL over a few random member subsets.
inline NllCurve dee_reference_curve(const DeepEnsemble& teachers, const Split& val,
                                    const Split& test, Rng& rng,
                                    std::size_t subsets_per_size = 3) {
  NllCurve curve;
  std::size_t m = teachers.size();
  for (std::size_t size = 1; size <= m; ++size) {
    double total = 0.0;
    std::size_t reps = size == m ? 1 : subsets_per_size;
    for (std::size_t r = 0; r < reps; ++r) {
      auto perm = rng.permutation(m);
      std::vector<std::size_t> subset(perm.begin(), perm.begin() + size);
      total += subset_calibrated_nll(teachers, subset, val, test);
    }
    curve.points.emplace_back(size, total / static_cast<double>(reps));
  }
  return curve;
}

}  // namespace divkd
