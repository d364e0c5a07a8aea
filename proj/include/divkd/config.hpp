#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "divkd/losses.hpp"
#include "divkd/models.hpp"
#include "divkd/perturb.hpp"
#include "divkd/train.hpp"

namespace divkd {

/// Resolved run configuration. Merged from a JSON config file plus flag
/// overrides; unknown keys are rejected; the resolved form is echoed into
/// every output artifact.
struct RunConfig {
  // data.*
  std::string data_kind = "spirals";
  std::size_t data_k = 4;
  std::size_t data_d = 2;
  std::size_t data_n_per_class = 500;
  double data_spread = 0.5;   // blobs
  double data_noise = 0.05;   // spirals
  double data_ood_shift = 0.0;

  // model.*
  std::vector<std::size_t> model_hidden = {32, 32};
  std::size_t model_m = 4;
  FactorInit model_factor_init = FactorInit::random_sign;

  LossConfig loss;  // alpha 0.9, tau 4 defaults

  // optim.*
  double optim_momentum = 0.9;
  double optim_weight_decay = 1e-4;
  std::size_t optim_batch_size = 64;

  ScheduleConfig sched;  // base_lr 0.1, 100 epochs, 5 warmup

  PerturbationConfig perturb;  // strategy none, eta 1/255
  bool perturb_tau_set = false;  // when false, perturb.tau follows loss.tau

  std::uint64_t seed = 0;

  std::vector<std::size_t> widths(std::size_t input_dim, std::size_t classes) const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), model_hidden.begin(), model_hidden.end());
    w.push_back(classes);
    return w;
  }

  TrainerConfig trainer() const {
    TrainerConfig t;
    t.sched = sched;
    t.momentum = optim_momentum;
    t.weight_decay = optim_weight_decay;
    t.batch_size = optim_batch_size;
    return t;
  }

  void validate() const {
    loss.validate();
    perturb.validate();
    sched.validate();
    if (model_m == 0) throw std::invalid_argument("model.m must be >= 1");
    if (optim_batch_size == 0) throw std::invalid_argument("optim.batch_size must be >= 1");
    if (!(optim_momentum >= 0.0 && optim_momentum < 1.0))
      throw std::invalid_argument("optim.momentum must be in [0,1)");
    if (!(optim_weight_decay >= 0.0))
      throw std::invalid_argument("optim.weight_decay must be nonnegative");
  }

  nlohmann::json to_json() const {
    nlohmann::json p{{"strategy", to_string(perturb.strategy)},
                     {"eta", perturb.eta},
                     {"tau", perturb.tau},
                     {"match_norm", perturb.gaussian_match_norm},
                     {"share_batch", perturb.share_batch}};
    if (perturb.gaussian_sigma) p["sigma"] = *perturb.gaussian_sigma;
    return nlohmann::json{
        {"data",
         {{"kind", data_kind},
          {"k", data_k},
          {"d", data_d},
          {"n_per_class", data_n_per_class},
          {"spread", data_spread},
          {"noise", data_noise},
          {"ood_shift", data_ood_shift}}},
        {"model",
         {{"hidden", model_hidden},
          {"m", model_m},
          {"factor_init", model_factor_init == FactorInit::ones ? "ones" : "sign"}}},
        {"loss", {{"alpha", loss.alpha}, {"tau", loss.tau}}},
        {"optim",
         {{"momentum", optim_momentum},
          {"weight_decay", optim_weight_decay},
          {"batch_size", optim_batch_size}}},
        {"sched",
         {{"base_lr", sched.base_lr},
          {"total_epochs", sched.total_epochs},
          {"warmup_epochs", sched.warmup_epochs}}},
        {"perturb", std::move(p)},
        {"seed", seed}};
  }

  static RunConfig from_json(const nlohmann::json& j);
};

namespace detail {
inline void reject_unknown(const nlohmann::json& obj, const char* section,
                           std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("unknown config key '" + std::string(section) +
                                  (section[0] ? "." : "") + it.key() + "'");
  }
}
}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j, "", {"data", "model", "loss", "optim", "sched", "perturb", "seed"});
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data",
                           {"kind", "k", "d", "n_per_class", "spread", "noise", "ood_shift"});
    if (d.contains("kind")) c.data_kind = d.at("kind").get<std::string>();
    if (d.contains("k")) c.data_k = d.at("k").get<std::size_t>();
    if (d.contains("d")) c.data_d = d.at("d").get<std::size_t>();
    if (d.contains("n_per_class")) c.data_n_per_class = d.at("n_per_class").get<std::size_t>();
    if (d.contains("spread")) c.data_spread = d.at("spread").get<double>();
    if (d.contains("noise")) c.data_noise = d.at("noise").get<double>();
    if (d.contains("ood_shift")) c.data_ood_shift = d.at("ood_shift").get<double>();
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, "model", {"hidden", "m", "factor_init"});
    if (m.contains("hidden")) c.model_hidden = m.at("hidden").get<std::vector<std::size_t>>();
    if (m.contains("m")) c.model_m = m.at("m").get<std::size_t>();
    if (m.contains("factor_init")) {
      std::string f = m.at("factor_init").get<std::string>();
      if (f == "sign")
        c.model_factor_init = FactorInit::random_sign;
      else if (f == "ones")
        c.model_factor_init = FactorInit::ones;
      else
        throw std::invalid_argument("model.factor_init must be 'sign' or 'ones'");
    }
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::reject_unknown(l, "loss", {"alpha", "tau"});
    if (l.contains("alpha")) c.loss.alpha = l.at("alpha").get<double>();
    if (l.contains("tau")) c.loss.tau = l.at("tau").get<double>();
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    detail::reject_unknown(o, "optim", {"momentum", "weight_decay", "batch_size"});
    if (o.contains("momentum")) c.optim_momentum = o.at("momentum").get<double>();
    if (o.contains("weight_decay")) c.optim_weight_decay = o.at("weight_decay").get<double>();
    if (o.contains("batch_size")) c.optim_batch_size = o.at("batch_size").get<std::size_t>();
  }
  if (j.contains("sched")) {
    const auto& s = j.at("sched");
    detail::reject_unknown(s, "sched", {"base_lr", "total_epochs", "warmup_epochs"});
    if (s.contains("base_lr")) c.sched.base_lr = s.at("base_lr").get<double>();
    if (s.contains("total_epochs")) c.sched.total_epochs = s.at("total_epochs").get<std::size_t>();
    if (s.contains("warmup_epochs")) c.sched.warmup_epochs = s.at("warmup_epochs").get<std::size_t>();
  }
  if (j.contains("perturb")) {
    const auto& p = j.at("perturb");
    detail::reject_unknown(p, "perturb",
                           {"strategy", "eta", "tau", "sigma", "match_norm", "share_batch"});
    if (p.contains("strategy"))
      c.perturb.strategy = perturb_strategy_from(p.at("strategy").get<std::string>());
    if (p.contains("eta")) c.perturb.eta = p.at("eta").get<double>();
    if (p.contains("tau")) {
      c.perturb.tau = p.at("tau").get<double>();
      c.perturb_tau_set = true;
    }
    if (p.contains("sigma")) c.perturb.gaussian_sigma = p.at("sigma").get<double>();
    if (p.contains("match_norm")) c.perturb.gaussian_match_norm = p.at("match_norm").get<bool>();
    if (p.contains("share_batch")) c.perturb.share_batch = p.at("share_batch").get<bool>();
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  // The perturbation guide is softened with the same temperature as the KD
  // loss unless the config says otherwise.
  if (!c.perturb_tau_set) c.perturb.tau = c.loss.tau;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file " + path);
  return RunConfig::from_json(nlohmann::json::parse(is));
}

}  // namespace divkd
