// Command-line surface for the distillation pipeline:
//   gen-data, train-teachers, distill, evaluate, diversity, jacobian.
// Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "divkd/checkpoint.hpp"
#include "divkd/config.hpp"
#include "divkd/data.hpp"
#include "divkd/diversity.hpp"
#include "divkd/evaluate.hpp"
#include "divkd/train.hpp"
#include "divkd/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace divkd;

namespace {

class UsageError : public std::runtime_error {
public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed offsets deriving every subsystem stream from the single --seed.
constexpr std::uint64_t kSeedOffsetTeacherBase = 0;    // + member index
constexpr std::uint64_t kSeedOffsetStudentInit = 501;
constexpr std::uint64_t kSeedOffsetDistill = 1001;
constexpr std::uint64_t kSeedOffsetOod = 2001;
constexpr std::uint64_t kSeedOffsetAnalysis = 3001;
constexpr std::uint64_t kSeedOffsetDee = 4001;

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("cannot parse " + path + ": " + e.what());
  }
}

// Apply `--set a.b=value` style overrides onto the raw config JSON.
void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
  std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare strings stay strings
  }
  json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

struct ConfigCli {
  std::string config_path;
  std::vector<std::string> sets;
  json raw = json::object();

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config JSON file");
    cmd->add_option("--set", sets, "override a config key, e.g. --set loss.alpha=0.8");
  }

  json merged() {
    raw = config_path.empty() ? json::object() : load_json_file(config_path);
    for (const std::string& kv : sets) apply_override(raw, kv);
    return raw;
  }
};

RunConfig resolve(json raw) {
  try {
    return RunConfig::from_json(raw);
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad config value: ") + e.what());
  }
}

json artifact_header(const RunConfig& cfg) {
  return json{{"tool_version", std::string(kToolName) + " " + kToolVersion},
              {"config_echo", cfg.to_json()}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::atomic_write_text(path, text);
}

Dataset load_dataset_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json"))
    throw UsageError("no dataset manifest under " + dir);
  return load_dataset(dir);
}

Checkpoint load_checkpoint_checked(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const json::exception& e) {
    throw UsageError("cannot parse checkpoint " + path + ": " + e.what());
  }
}

std::vector<fs::path> checkpoint_files(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no .ckpt files under " + dir);
  return files;
}

DeepEnsemble load_teacher_ensemble(const std::string& path) {
  DeepEnsemble de;
  if (fs::is_directory(path)) {
    for (const fs::path& f : checkpoint_files(path)) {
      Checkpoint c = load_checkpoint_checked(f.string());
      if (!c.is_mlp()) throw UsageError("ensemble member " + f.string() + " is not an mlp");
      de.members.push_back(c.mlp());
    }
  } else {
    Checkpoint c = load_checkpoint_checked(path);
    if (!c.is_mlp()) throw UsageError(path + " is not an mlp checkpoint");
    de.members.push_back(c.mlp());
  }
  return de;
}

const Split& split_by_name(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  if (name == "test") return ds.test;
  if (name == "ood") {
    if (!ds.ood) throw UsageError("dataset has no ood split");
    return *ds.ood;
  }
  throw UsageError("unknown split '" + name + "'");
}

// ---- gen-data ----

struct GenDataArgs {
  ConfigCli cfg;
  std::string kind, out;
  std::size_t k = 0, d = 0, n = 0;
  double spread = -1.0, noise = -1.0, ood_shift = -1.0;
  std::int64_t seed = -1;
};

int run_gen_data(GenDataArgs& a) {
  json raw = a.cfg.merged();
  if (!a.kind.empty()) raw["data"]["kind"] = a.kind;
  if (a.k) raw["data"]["k"] = a.k;
  if (a.d) raw["data"]["d"] = a.d;
  if (a.n) raw["data"]["n_per_class"] = a.n;
  if (a.spread >= 0.0) raw["data"]["spread"] = a.spread;
  if (a.noise >= 0.0) raw["data"]["noise"] = a.noise;
  if (a.ood_shift >= 0.0) raw["data"]["ood_shift"] = a.ood_shift;
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);

  Dataset ds = generate_dataset(cfg.data_kind, cfg.data_k, cfg.data_d,
                                cfg.data_n_per_class,
                                cfg.data_kind == "blobs" ? cfg.data_spread
                                                         : cfg.data_noise,
                                cfg.seed);
  if (cfg.data_ood_shift > 0.0)
    ds = gen_ood_shift(ds, cfg.data_ood_shift, cfg.seed + kSeedOffsetOod);

  fs::create_directories(a.out);
  json manifest = dataset_manifest(ds);
  manifest.update(artifact_header(cfg));
  write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  write_text(fs::path(a.out) / "train.csv", divkd::detail::split_csv(ds.train, ds.dim));
  write_text(fs::path(a.out) / "val.csv", divkd::detail::split_csv(ds.val, ds.dim));
  write_text(fs::path(a.out) / "test.csv", divkd::detail::split_csv(ds.test, ds.dim));
  if (ds.ood)
    write_text(fs::path(a.out) / "ood.csv", divkd::detail::split_csv(*ds.ood, ds.dim));
  std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/"
            << ds.test.size() << (ds.ood ? "/" + std::to_string(ds.ood->size()) : "")
            << " examples to " << a.out << "\n";
  return 0;
}

// ---- train-teachers ----

struct TrainTeachersArgs {
  ConfigCli cfg;
  std::string data, out;
  std::size_t m = 0;
  std::int64_t seed = -1;
};

int run_train_teachers(TrainTeachersArgs& a) {
  json raw = a.cfg.merged();
  if (a.m) raw["model"]["m"] = a.m;
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);
  Dataset ds = load_dataset_checked(a.data);

  std::vector<std::uint64_t> seeds;
  for (std::size_t j = 0; j < cfg.model_m; ++j)
    seeds.push_back(cfg.seed + kSeedOffsetTeacherBase + j);
  std::vector<TrainLog> logs;
  DeepEnsemble de = train_teachers(ds.train, ds.val,
                                   cfg.widths(ds.dim, ds.num_classes), cfg.model_m,
                                   cfg.trainer(), seeds, &logs);
  fs::create_directories(a.out);
  for (std::size_t j = 0; j < de.size(); ++j) {
    json meta = artifact_header(cfg);
    meta["member_index"] = j;
    meta["member_seed"] = seeds[j];
    meta["best_epoch"] = logs[j].best_epoch;
    meta["best_val_acc"] = logs[j].best_val_acc;
    save_checkpoint(de.members[j], fs::path(a.out) / ("teacher_" + std::to_string(j) + ".ckpt"),
                    seeds[j], meta);
    write_text(fs::path(a.out) / ("teacher_" + std::to_string(j) + ".log.csv"),
               logs[j].to_csv());
    std::cout << "teacher_" << j << ": seed " << seeds[j] << ", best val acc "
              << logs[j].best_val_acc << " at epoch " << logs[j].best_epoch << "\n";
  }
  return 0;
}

// ---- distill ----

struct DistillArgs {
  ConfigCli cfg;
  std::string teachers, data, out, perturb, external_guide;
  double eta = -1.0, alpha = -1.0, tau = -1.0;
  std::int64_t seed = -1;
  bool scratch = false;
};

int run_distill(DistillArgs& a) {
  json raw = a.cfg.merged();
  if (!a.perturb.empty()) raw["perturb"]["strategy"] = a.perturb;
  if (a.eta >= 0.0) raw["perturb"]["eta"] = a.eta;
  if (a.alpha >= 0.0) raw["loss"]["alpha"] = a.alpha;
  if (a.tau > 0.0) raw["loss"]["tau"] = a.tau;
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);
  Dataset ds = load_dataset_checked(a.data);

  std::size_t members = cfg.model_m;
  DeepEnsemble teachers;
  if (!a.scratch) {
    if (a.teachers.empty()) throw UsageError("distill requires --teachers (or --scratch)");
    teachers = load_teacher_ensemble(a.teachers);
    members = teachers.size();
  }
  Rng init_rng(cfg.seed + kSeedOffsetStudentInit);
  BatchEnsembleStudent student = make_student(cfg.widths(ds.dim, ds.num_classes),
                                              members, init_rng, cfg.model_factor_init);

  MlpTeacher guide;
  const MlpTeacher* guide_ptr = nullptr;
  if (!a.external_guide.empty()) {
    Checkpoint c = load_checkpoint_checked(a.external_guide);
    if (!c.is_mlp()) throw UsageError("--external-guide must be an mlp checkpoint");
    guide = c.mlp();
    guide_ptr = &guide;
  }

  TrainLog log;
  if (a.scratch) {
    log = train_student_scratch(student, ds.train, ds.val, cfg.trainer(),
                                cfg.seed + kSeedOffsetDistill);
  } else {
    log = distill(teachers, student, ds.train, ds.val, cfg.loss, cfg.perturb,
                  cfg.trainer(), cfg.seed + kSeedOffsetDistill, guide_ptr);
  }
  json meta = artifact_header(cfg);
  meta["mode"] = a.scratch ? "scratch" : "distill";
  meta["degenerate_gradient_count"] = log.degenerate_count;
  meta["best_epoch"] = log.best_epoch;
  meta["best_val_acc"] = log.best_val_acc;
  meta["val_metric"] = "ensemble_averaged_accuracy";
  if (guide_ptr) meta["external_guide"] = a.external_guide;
  save_checkpoint(student, a.out, cfg.seed, meta);
  write_text(a.out + ".log.csv", log.to_csv());
  std::cout << (a.scratch ? "scratch student" : "distilled student") << " -> " << a.out
            << " (best val acc " << log.best_val_acc << ", degenerate grads "
            << log.degenerate_count << ")\n";
  return 0;
}

// ---- evaluate ----

struct EvaluateArgs {
  ConfigCli cfg;
  std::string model, data, out, dee_teachers;
  std::size_t ece_bins = 15;
  std::int64_t seed = -1;
};

int run_evaluate(EvaluateArgs& a) {
  json raw = a.cfg.merged();
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);
  Dataset ds = load_dataset_checked(a.data);

  std::vector<Tensor> pv, pt;
  std::string kind;
  if (fs::is_directory(a.model)) {
    DeepEnsemble de = load_teacher_ensemble(a.model);
    pv = member_probs(de, ds.val.x);
    pt = member_probs(de, ds.test.x);
    kind = "deep_ensemble[" + std::to_string(de.size()) + "]";
  } else {
    Checkpoint c = load_checkpoint_checked(a.model);
    if (c.is_mlp()) {
      pv = member_probs(c.mlp(), ds.val.x);
      pt = member_probs(c.mlp(), ds.test.x);
      kind = "mlp";
    } else {
      pv = member_probs(c.student(), ds.val.x);
      pt = member_probs(c.student(), ds.test.x);
      kind = "batch_ensemble[" + std::to_string(c.student().members) + "]";
    }
  }
  EvaluationReport rep = evaluate_probs(pv, ds.val.y, pt, ds.test.y, a.ece_bins);

  if (!a.dee_teachers.empty()) {
    DeepEnsemble teachers = load_teacher_ensemble(a.dee_teachers);
    if (teachers.size() < 2)
      throw UsageError("--dee-teachers needs an ensemble of at least two members");
    Rng rng(cfg.seed + kSeedOffsetDee);
    NllCurve curve = dee_reference_curve(teachers, ds.val, ds.test, rng);
    rep.dee_result = dee(rep.calibrated.nll, curve);
  }

  json out = rep.to_json();
  out["model"] = a.model;
  out["model_kind"] = kind;
  out["data"] = a.data;
  out["ece_bins"] = a.ece_bins;
  out.update(artifact_header(cfg));
  write_text(a.out, out.dump(2) + "\n");
  std::cout << "acc " << rep.standard.acc << ", nll " << rep.standard.nll
            << ", calibrated nll " << rep.calibrated.nll << " (tau* " << rep.tau_star
            << ") -> " << a.out << "\n";
  return 0;
}

// ---- diversity ----

struct DiversityArgs {
  ConfigCli cfg;
  std::string models, data, split = "train", perturb, external_guide, out;
  double eta = -1.0, tau = -1.0, sigma = -1.0;
  std::size_t bins = 20;
  std::int64_t seed = -1;
  bool match_norm = false;
};

int run_diversity(DiversityArgs& a) {
  json raw = a.cfg.merged();
  if (!a.perturb.empty()) raw["perturb"]["strategy"] = a.perturb;
  if (a.eta >= 0.0) raw["perturb"]["eta"] = a.eta;
  if (a.tau > 0.0) raw["perturb"]["tau"] = a.tau;
  if (a.sigma >= 0.0) raw["perturb"]["sigma"] = a.sigma;
  if (a.match_norm) raw["perturb"]["match_norm"] = true;
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);
  Dataset ds = load_dataset_checked(a.data);
  const Split& split = split_by_name(ds, a.split);

  MlpTeacher guide;
  const MlpTeacher* guide_ptr = nullptr;
  if (!a.external_guide.empty()) {
    Checkpoint c = load_checkpoint_checked(a.external_guide);
    if (!c.is_mlp()) throw UsageError("--external-guide must be an mlp checkpoint");
    guide = c.mlp();
    guide_ptr = &guide;
  }

  Rng rng(cfg.seed + kSeedOffsetAnalysis);
  DiversityRun run;
  std::string kind;
  if (fs::is_directory(a.models)) {
    DeepEnsemble de = load_teacher_ensemble(a.models);
    if (de.size() < 2) throw UsageError("diversity needs at least two members");
    run = diversity_plot(de, split.x, split.y, cfg.perturb, a.bins, rng, guide_ptr);
    kind = "deep_ensemble[" + std::to_string(de.size()) + "]";
  } else {
    Checkpoint c = load_checkpoint_checked(a.models);
    if (c.is_mlp()) throw UsageError("diversity over a single mlp has no member pairs");
    run = diversity_plot(c.student(), split.x, split.y, cfg.perturb, a.bins, rng,
                         guide_ptr);
    kind = "batch_ensemble[" + std::to_string(c.student().members) + "]";
  }

  write_text(a.out + ".csv", run.plot.to_csv());
  json summary{{"mean_kld", run.plot.mean_kld},
               {"degenerate_gradient_count", run.degenerate_count},
               {"split", a.split},
               {"models", a.models},
               {"model_kind", kind},
               {"num_bins", a.bins}};
  summary.update(artifact_header(cfg));
  write_text(a.out + ".json", summary.dump(2) + "\n");
  std::cout << "mean_kld " << run.plot.mean_kld << " over " << split.size()
            << " examples (" << a.split << ") -> " << a.out << ".{csv,json}\n";
  return 0;
}

// ---- jacobian ----

struct JacobianArgs {
  ConfigCli cfg;
  std::string teacher, student, data, split = "val", out;
  std::vector<std::string> students;
  bool snr = false;
  std::size_t samples = 64, points = 8, limit = 0;
  std::vector<double> eta_grid;
  std::int64_t seed = -1;
};

// Cosine similarities between teacher(s) and every member of one student
// checkpoint, pooled over examples.
std::vector<double> cosine_pool(const DeepEnsemble& teachers, const Checkpoint& student,
                                const Tensor& x, std::size_t limit) {
  std::vector<double> sims;
  std::size_t n = limit ? std::min<std::size_t>(limit, x.rows()) : x.rows();
  for (std::size_t i = 0; i < n; ++i) {
    Tensor xi = x.row(i);
    if (student.is_mlp()) {
      for (const auto& t : teachers.members) {
        try {
          sims.push_back(jacobian_cosine(t, student.mlp(), xi));
        } catch (const DegenerateGradient&) {
        }
      }
    } else {
      const BatchEnsembleStudent& s = student.student();
      for (std::size_t j = 0; j < s.members; ++j) {
        const MlpTeacher& t =
            teachers.members[teachers.size() == s.members ? j : j % teachers.size()];
        try {
          sims.push_back(jacobian_cosine(t, MemberView{&s, j}, xi));
        } catch (const DegenerateGradient&) {
        }
      }
    }
  }
  if (sims.empty()) throw NumericalError("all Jacobians degenerate in cosine pool");
  return sims;
}

int run_jacobian(JacobianArgs& a) {
  json raw = a.cfg.merged();
  if (a.seed >= 0) raw["seed"] = a.seed;
  RunConfig cfg = resolve(raw);
  Dataset ds = load_dataset_checked(a.data);
  const Split& split = split_by_name(ds, a.split);
  Rng rng(cfg.seed + kSeedOffsetAnalysis);

  if (a.snr) {
    if (a.teacher.empty() || a.student.empty())
      throw UsageError("--snr needs --teacher and --student checkpoints");
    Checkpoint tc = load_checkpoint_checked(a.teacher);
    if (!tc.is_mlp()) throw UsageError("--teacher must be an mlp checkpoint");
    Checkpoint sc = load_checkpoint_checked(a.student);
    std::vector<double> grid = a.eta_grid;
    if (grid.empty()) grid = {1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};

    std::size_t n_points = std::min<std::size_t>(a.points, split.size());
    std::string csv = "eta,snr_gaussian,snr_ods\n";
    json rows = json::array();
    for (double eta : grid) {
      double snr_g = 0.0, snr_o = 0.0;
      std::size_t used_g = 0, used_o = 0;
      for (std::size_t i = 0; i < n_points; ++i) {
        Tensor xi = split.x.row(i);
        auto gauss = [eta](const Tensor& v, Rng& r) {
          return perturb_gaussian_matched(v, eta, r);
        };
        auto run_one = [&](auto&& perturber, double& acc, std::size_t& used) {
          auto compute = [&](const auto& student_model) {
            SnrResult r = jacobian_matching_snr(tc.mlp(), student_model, xi, perturber,
                                                a.samples, rng, cfg.perturb.tau);
            if (!r.zero_variance) {
              acc += r.value;
              ++used;
            }
          };
          if (sc.is_mlp())
            compute(sc.mlp());
          else
            compute(MemberView{&sc.student(), 0});
        };
        run_one(std::function<Tensor(const Tensor&, Rng&)>(gauss), snr_g, used_g);
        auto ods = [&](const Tensor& v, Rng& r) {
          GuideVector w = sample_guide(tc.mlp().num_classes(), r);
          return perturb_ods(v, tc.mlp(), w, eta, cfg.perturb.tau);
        };
        run_one(std::function<Tensor(const Tensor&, Rng&)>(ods), snr_o, used_o);
      }
      snr_g = used_g ? snr_g / static_cast<double>(used_g) : 0.0;
      snr_o = used_o ? snr_o / static_cast<double>(used_o) : 0.0;
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", eta, snr_g, snr_o);
      csv += buf;
      rows.push_back({{"eta", eta}, {"snr_gaussian", snr_g}, {"snr_ods", snr_o}});
    }
    write_text(a.out + "_snr.csv", csv);
    json summary{{"snr", rows},
                 {"samples", a.samples},
                 {"points", n_points},
                 {"split", a.split},
                 {"tau", cfg.perturb.tau}};
    summary.update(artifact_header(cfg));
    write_text(a.out + ".json", summary.dump(2) + "\n");
    std::cout << "snr table over " << grid.size() << " step sizes -> " << a.out
              << "_snr.csv\n";
    return 0;
  }

  if (a.teacher.empty() || a.students.size() != 2)
    throw UsageError("jacobian ROC mode needs --teacher and exactly two --students "
                     "(positives first)");
  DeepEnsemble teachers = load_teacher_ensemble(a.teacher);
  Checkpoint pos = load_checkpoint_checked(a.students[0]);
  Checkpoint neg = load_checkpoint_checked(a.students[1]);
  std::vector<double> sims_pos = cosine_pool(teachers, pos, split.x, a.limit);
  std::vector<double> sims_neg = cosine_pool(teachers, neg, split.x, a.limit);
  RocData roc = roc_auroc(sims_pos, sims_neg);
  write_text(a.out + "_roc.csv", roc.to_csv());
  json summary{{"auroc", roc.auroc},
               {"mean_cos", {{"positives", roc.mean_pos}, {"negatives", roc.mean_neg}}},
               {"positives", a.students[0]},
               {"negatives", a.students[1]},
               {"split", a.split},
               {"n_pos", sims_pos.size()},
               {"n_neg", sims_neg.size()}};
  summary.update(artifact_header(cfg));
  write_text(a.out + ".json", summary.dump(2) + "\n");
  std::cout << "auroc " << roc.auroc << " (mean cos " << roc.mean_pos << " vs "
            << roc.mean_neg << ") -> " << a.out << "_roc.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge distillation from deep ensembles with output-diversified "
               "input perturbations"};
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen.cfg.attach(cmd_gen);
  cmd_gen->add_option("--kind", gen.kind, "blobs|spirals");
  cmd_gen->add_option("--k", gen.k, "number of classes");
  cmd_gen->add_option("--d", gen.d, "input dimension (blobs)");
  cmd_gen->add_option("--n", gen.n, "examples per class");
  cmd_gen->add_option("--spread", gen.spread, "blob standard deviation");
  cmd_gen->add_option("--noise", gen.noise, "spiral noise");
  cmd_gen->add_option("--ood-shift", gen.ood_shift, "also emit a shifted ood split");
  cmd_gen->add_option("--seed", gen.seed, "generator seed");
  cmd_gen->add_option("--out", gen.out, "output directory")->required();

  TrainTeachersArgs tt;
  auto* cmd_tt = app.add_subcommand("train-teachers", "train a deep ensemble");
  tt.cfg.attach(cmd_tt);
  cmd_tt->add_option("--data", tt.data, "dataset directory")->required();
  cmd_tt->add_option("--m", tt.m, "ensemble size");
  cmd_tt->add_option("--seed", tt.seed, "base seed; member j trains with seed+j");
  cmd_tt->add_option("--out", tt.out, "output directory")->required();

  DistillArgs di;
  auto* cmd_di = app.add_subcommand("distill", "distill teachers into a student");
  di.cfg.attach(cmd_di);
  cmd_di->add_option("--teachers", di.teachers, "teacher checkpoint directory");
  cmd_di->add_option("--data", di.data, "dataset directory")->required();
  cmd_di->add_option("--perturb", di.perturb, "none|gaussian|ods|confods|adversarial");
  cmd_di->add_option("--eta", di.eta, "perturbation step size");
  cmd_di->add_option("--alpha", di.alpha, "KD weight");
  cmd_di->add_option("--tau", di.tau, "KD temperature");
  cmd_di->add_option("--seed", di.seed, "run seed");
  cmd_di->add_option("--external-guide", di.external_guide,
                     "compute ODS directions from this checkpoint instead");
  cmd_di->add_flag("--scratch", di.scratch, "train from labels only (no teachers)");
  cmd_di->add_option("--out", di.out, "student checkpoint path")->required();

  EvaluateArgs ev;
  auto* cmd_ev = app.add_subcommand("evaluate", "standard + calibrated metrics report");
  ev.cfg.attach(cmd_ev);
  cmd_ev->add_option("--model", ev.model, "checkpoint file or ensemble directory")
      ->required();
  cmd_ev->add_option("--data", ev.data, "dataset directory")->required();
  cmd_ev->add_option("--dee-teachers", ev.dee_teachers,
                     "teacher directory for the DEE reference curve");
  cmd_ev->add_option("--ece-bins", ev.ece_bins, "ECE bin count");
  cmd_ev->add_option("--seed", ev.seed, "seed for DEE subset sampling");
  cmd_ev->add_option("--out", ev.out, "report JSON path")->required();

  DiversityArgs dv;
  auto* cmd_dv = app.add_subcommand("diversity", "binned pairwise-KL diversity plot");
  dv.cfg.attach(cmd_dv);
  cmd_dv->add_option("--models", dv.models, "ensemble directory or student checkpoint")
      ->required();
  cmd_dv->add_option("--data", dv.data, "dataset directory")->required();
  cmd_dv->add_option("--split", dv.split, "train|val|test|ood");
  cmd_dv->add_option("--perturb", dv.perturb, "none|gaussian|ods|confods|adversarial");
  cmd_dv->add_option("--eta", dv.eta, "perturbation step size");
  cmd_dv->add_option("--tau", dv.tau, "softening temperature");
  cmd_dv->add_option("--sigma", dv.sigma, "gaussian sigma (defaults to eta)");
  cmd_dv->add_flag("--match-norm", dv.match_norm, "gaussian step norm fixed to eta");
  cmd_dv->add_option("--bins", dv.bins, "confidence bin count");
  cmd_dv->add_option("--external-guide", dv.external_guide,
                     "compute ODS directions from this checkpoint");
  cmd_dv->add_option("--seed", dv.seed, "analysis seed");
  cmd_dv->add_option("--out", dv.out, "output prefix (.csv/.json)")->required();

  JacobianArgs ja;
  auto* cmd_ja = app.add_subcommand("jacobian",
                                    "jacobian cosine ROC/AUROC and gradient SNR");
  ja.cfg.attach(cmd_ja);
  cmd_ja->add_option("--teacher", ja.teacher, "teacher checkpoint or directory");
  cmd_ja->add_option("--students", ja.students,
                     "two student checkpoints: positives negatives")
      ->expected(0, 2);
  cmd_ja->add_option("--student", ja.student, "student checkpoint (snr mode)");
  cmd_ja->add_flag("--snr", ja.snr, "gradient SNR table over the eta grid");
  cmd_ja->add_option("--samples", ja.samples, "perturbation draws per example");
  cmd_ja->add_option("--points", ja.points, "examples averaged in snr mode");
  cmd_ja->add_option("--limit", ja.limit, "max examples for the cosine pool");
  cmd_ja->add_option("--eta-grid", ja.eta_grid, "snr step sizes");
  cmd_ja->add_option("--data", ja.data, "dataset directory")->required();
  cmd_ja->add_option("--split", ja.split, "train|val|test|ood");
  cmd_ja->add_option("--seed", ja.seed, "analysis seed");
  cmd_ja->add_option("--out", ja.out, "output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cmd_gen->parsed()) return run_gen_data(gen);
    if (cmd_tt->parsed()) return run_train_teachers(tt);
    if (cmd_di->parsed()) return run_distill(di);
    if (cmd_ev->parsed()) return run_evaluate(ev);
    if (cmd_dv->parsed()) return run_diversity(dv);
    if (cmd_ja->parsed()) return run_jacobian(ja);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DegenerateGradient& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
