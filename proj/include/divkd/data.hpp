#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "divkd/rng.hpp"
#include "divkd/tensor.hpp"

namespace divkd {

struct Split {
  Tensor x;  // [n x D]
  Tensor y;  // [n x K] one-hot

  std::size_t size() const { return x.rows(); }
};

/// Synthetic classification dataset with stratified train/val/test splits
/// and an optional shifted OOD split. Regeneration from (seed, params) is
/// bit-identical.
struct Dataset {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::string generator;  // "blobs" | "spirals"
  std::uint64_t seed = 0;
  nlohmann::json params;  // generator-specific knobs
  Split train, val, test;
  std::optional<Split> ood;
  std::optional<nlohmann::json> ood_meta;
};

namespace detail {

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
  Tensor y{Shape{labels.size(), k}};
  for (std::size_t i = 0; i < labels.size(); ++i) y.at(i, labels[i]) = 1.0;
  return y;
}

/// Stratified 80/10/10 split with a deterministic shuffle inside each split.
inline void split_stratified(const std::vector<std::vector<double>>& feats,
                             const std::vector<std::size_t>& labels, std::size_t k,
                             std::size_t dim, Rng& rng, Dataset& out) {
  std::vector<std::vector<std::size_t>> per_class(k);
  for (std::size_t i = 0; i < labels.size(); ++i) per_class[labels[i]].push_back(i);
  std::vector<std::size_t> tr, va, te;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> idx = per_class[c];
    // Generators may emit points in a structured order (spiral arms run
    // inside-out); shuffle within the class so the splits interleave.
    auto perm = rng.permutation(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = per_class[c][perm[i]];
    std::size_t n = idx.size();
    std::size_t n_va = n / 10, n_te = n / 10;
    std::size_t n_tr = n - n_va - n_te;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_tr)
        tr.push_back(idx[i]);
      else if (i < n_tr + n_va)
        va.push_back(idx[i]);
      else
        te.push_back(idx[i]);
    }
  }
  auto build = [&](std::vector<std::size_t>& ids) {
    auto perm = rng.permutation(ids.size());
    Split s;
    s.x = Tensor{Shape{ids.size(), dim}};
    std::vector<std::size_t> ys(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::size_t src = ids[perm[i]];
      for (std::size_t j = 0; j < dim; ++j) s.x.at(i, j) = feats[src][j];
      ys[i] = labels[src];
    }
    s.y = one_hot(ys, k);
    return s;
  };
  out.train = build(tr);
  out.val = build(va);
  out.test = build(te);
}

}  // namespace detail

/// K Gaussian clusters with centers on a radius-2 circle in the first two
/// coordinates; `spread` is the per-coordinate standard deviation.
inline Dataset gen_blobs(std::size_t k, std::size_t d, std::size_t n_per_class,
                         double spread, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("gen_blobs: need k >= 2 classes");
  if (d < 2) throw std::invalid_argument("gen_blobs: need d >= 2 dimensions");
  if (n_per_class == 0) throw std::invalid_argument("gen_blobs: n_per_class must be positive");
  if (!(spread >= 0.0)) throw std::invalid_argument("gen_blobs: spread must be nonnegative");
  Rng rng(seed);
  std::vector<std::vector<double>> feats;
  std::vector<std::size_t> labels;
  constexpr double radius = 2.0;
  for (std::size_t c = 0; c < k; ++c) {
    double angle = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(k);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::vector<double> p(d, 0.0);
      p[0] = radius * std::cos(angle);
      p[1] = radius * std::sin(angle);
      for (std::size_t j = 0; j < d; ++j) p[j] += spread * rng.normal();
      feats.push_back(std::move(p));
      labels.push_back(c);
    }
  }
  Dataset ds;
  ds.num_classes = k;
  ds.dim = d;
  ds.generator = "blobs";
  ds.seed = seed;
  ds.params = {{"n_per_class", n_per_class}, {"spread", spread}};
  detail::split_stratified(feats, labels, k, d, rng, ds);
  return ds;
}

/// Spiral arm geometry shared by the generator and its exactness test.
struct SpiralArm {
  static constexpr double r0 = 0.03;
  static constexpr double r1 = 0.3;
  static constexpr double sweep = 2.0 * M_PI;

  static double radius(double t) { return r0 + (r1 - r0) * t; }
  static double angle(double t, std::size_t arm, std::size_t k) {
    return 2.0 * M_PI * static_cast<double>(arm) / static_cast<double>(k) + sweep * t;
  }
};

/// K interleaved spiral arms in 2-D; a linear classifier cannot separate
/// them while a small MLP can.
inline Dataset gen_spirals(std::size_t k, std::size_t n_per_class, double noise,
                           std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("gen_spirals: need k >= 2 classes");
  if (n_per_class == 0)
    throw std::invalid_argument("gen_spirals: n_per_class must be positive");
  if (!(noise >= 0.0)) throw std::invalid_argument("gen_spirals: noise must be nonnegative");
  Rng rng(seed);
  std::vector<std::vector<double>> feats;
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      double t = n_per_class == 1
                     ? 0.0
                     : static_cast<double>(i) / static_cast<double>(n_per_class - 1);
      double r = SpiralArm::radius(t);
      double th = SpiralArm::angle(t, c, k);
      feats.push_back({r * std::cos(th) + noise * rng.normal(),
                       r * std::sin(th) + noise * rng.normal()});
      labels.push_back(c);
    }
  }
  Dataset ds;
  ds.num_classes = k;
  ds.dim = 2;
  ds.generator = "spirals";
  ds.seed = seed;
  ds.params = {{"n_per_class", n_per_class}, {"noise", noise}};
  detail::split_stratified(feats, labels, k, 2, rng, ds);
  return ds;
}

inline Dataset generate_dataset(const std::string& kind, std::size_t k, std::size_t d,
                                std::size_t n_per_class, double spread_or_noise,
                                std::uint64_t seed) {
  if (kind == "blobs") return gen_blobs(k, d, n_per_class, spread_or_noise, seed);
  if (kind == "spirals") return gen_spirals(k, n_per_class, spread_or_noise, seed);
  throw std::invalid_argument("unknown dataset kind '" + kind + "'");
}

/// Attach an out-of-distribution split: a fresh sample from the base
/// generator's parameters, pushed radially away from the training centroid
/// by the factor (1 + shift_magnitude). Every cluster translates outward
/// along its own direction, so the OOD cloud surrounds the data instead of
/// sitting to one side. Labels are retained but flagged unused.
inline Dataset gen_ood_shift(const Dataset& base, double shift_magnitude,
                             std::uint64_t seed) {
  if (!(shift_magnitude >= 0.0))
    throw std::invalid_argument("gen_ood_shift: shift must be nonnegative");
  std::size_t n_per_class =
      std::max<std::size_t>(1, base.params.at("n_per_class").get<std::size_t>() / 10);
  double spread_or_noise = base.generator == "blobs"
                               ? base.params.at("spread").get<double>()
                               : base.params.at("noise").get<double>();
  Dataset fresh = generate_dataset(base.generator, base.num_classes, base.dim,
                                   n_per_class, spread_or_noise, seed);
  std::vector<double> centroid(base.dim, 0.0);
  for (std::size_t i = 0; i < base.train.size(); ++i)
    for (std::size_t j = 0; j < base.dim; ++j) centroid[j] += base.train.x.at(i, j);
  for (double& c : centroid) c /= static_cast<double>(base.train.size());

  std::size_t total = fresh.train.size() + fresh.val.size() + fresh.test.size();
  Split ood;
  ood.x = Tensor{Shape{total, base.dim}};
  ood.y = Tensor{Shape{total, base.num_classes}};
  double scale = 1.0 + shift_magnitude;
  std::size_t row = 0;
  for (const Split* s : {&fresh.train, &fresh.val, &fresh.test})
    for (std::size_t i = 0; i < s->size(); ++i, ++row) {
      for (std::size_t j = 0; j < base.dim; ++j)
        ood.x.at(row, j) = centroid[j] + scale * (s->x.at(i, j) - centroid[j]);
      for (std::size_t j = 0; j < base.num_classes; ++j)
        ood.y.at(row, j) = s->y.at(i, j);
    }

  Dataset out = base;
  out.ood = std::move(ood);
  out.ood_meta = nlohmann::json{{"shift_magnitude", shift_magnitude},
                                {"seed", seed},
                                {"labels_used", false}};
  return out;
}

// ---- file I/O ----

namespace detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << content;
  }
  std::filesystem::rename(tmp, path);
}

inline std::string split_csv(const Split& s, std::size_t dim) {
  std::string out;
  for (std::size_t j = 0; j < dim; ++j) {
    out += "f" + std::to_string(j);
    out += ",";
  }
  out += "label\n";
  char buf[40];
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", s.x.at(i, j));
      out += buf;
      out += ",";
    }
    out += std::to_string(argmax_row(s.y, i));
    out += "\n";
  }
  return out;
}

inline Split split_from_csv(const std::filesystem::path& path, std::size_t dim,
                            std::size_t k) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);  // header
  std::vector<double> xs;
  std::vector<std::size_t> ys;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0;
    for (std::size_t j = 0; j <= dim; ++j) {
      std::size_t next = line.find(',', pos);
      std::string field = line.substr(pos, next == std::string::npos
                                               ? std::string::npos
                                               : next - pos);
      if (j < dim)
        xs.push_back(std::strtod(field.c_str(), nullptr));
      else
        ys.push_back(static_cast<std::size_t>(std::stoul(field)));
      pos = next + 1;
    }
  }
  Split s;
  s.x = Tensor{Shape{ys.size(), dim}, std::move(xs)};
  s.y = one_hot(ys, k);
  return s;
}

}  // namespace detail

inline nlohmann::json dataset_manifest(const Dataset& ds) {
  nlohmann::json m{{"format_version", 1},
                   {"generator", ds.generator},
                   {"k", ds.num_classes},
                   {"d", ds.dim},
                   {"seed", ds.seed},
                   {"params", ds.params},
                   {"sizes",
                    {{"train", ds.train.size()},
                     {"val", ds.val.size()},
                     {"test", ds.test.size()}}}};
  if (ds.ood) {
    m["sizes"]["ood"] = ds.ood->size();
    m["ood"] = *ds.ood_meta;
  }
  return m;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::atomic_write(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
  detail::atomic_write(dir / "train.csv", detail::split_csv(ds.train, ds.dim));
  detail::atomic_write(dir / "val.csv", detail::split_csv(ds.val, ds.dim));
  detail::atomic_write(dir / "test.csv", detail::split_csv(ds.test, ds.dim));
  if (ds.ood) detail::atomic_write(dir / "ood.csv", detail::split_csv(*ds.ood, ds.dim));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m = nlohmann::json::parse(is);
  Dataset ds;
  ds.num_classes = m.at("k").get<std::size_t>();
  ds.dim = m.at("d").get<std::size_t>();
  ds.generator = m.at("generator").get<std::string>();
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.params = m.at("params");
  ds.train = detail::split_from_csv(dir / "train.csv", ds.dim, ds.num_classes);
  ds.val = detail::split_from_csv(dir / "val.csv", ds.dim, ds.num_classes);
  ds.test = detail::split_from_csv(dir / "test.csv", ds.dim, ds.num_classes);
  if (m.contains("ood")) {
    ds.ood = detail::split_from_csv(dir / "ood.csv", ds.dim, ds.num_classes);
    ds.ood_meta = m.at("ood");
  }
  return ds;
}

/// Sanity check used before training: a dataset whose train split holds a
/// single class cannot drive classification.
inline void require_multiclass(const Split& train) {
  std::size_t first = argmax_row(train.y, 0);
  for (std::size_t i = 1; i < train.size(); ++i)
    if (argmax_row(train.y, i) != first) return;
  throw std::invalid_argument("degenerate dataset: train split has a single class");
}

}  // namespace divkd
