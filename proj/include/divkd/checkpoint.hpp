#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "divkd/models.hpp"

namespace divkd {

/// Checkpoint format: JSON with format_version 1, a kind tag, layer widths,
/// flat row-major parameter arrays and free-form training metadata.
/// load(save(m)) reproduces bit-identical forward outputs.

namespace detail {
inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json(t.data());
}

inline std::vector<double> array_from_json(const nlohmann::json& j, std::size_t expect,
                                           const std::string& name) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != expect)
    throw std::runtime_error("checkpoint: parameter '" + name + "' has " +
                             std::to_string(v.size()) + " values, expected " +
                             std::to_string(expect));
  return v;
}
}  // namespace detail

inline nlohmann::json checkpoint_json(const MlpTeacher& m, std::uint64_t seed,
                                      nlohmann::json training_meta = {}) {
  nlohmann::json params;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    params["layer" + std::to_string(l) + ".weight"] = detail::tensor_to_json(m.weights[l]);
    params["layer" + std::to_string(l) + ".bias"] = detail::tensor_to_json(m.biases[l]);
  }
  return nlohmann::json{{"format_version", 1},
                        {"kind", "mlp"},
                        {"widths", m.widths},
                        {"seed", seed},
                        {"parameters", std::move(params)},
                        {"training_meta", std::move(training_meta)}};
}

inline nlohmann::json checkpoint_json(const BatchEnsembleStudent& s, std::uint64_t seed,
                                      nlohmann::json training_meta = {}) {
  if (!training_meta.contains("per_member_bias")) training_meta["per_member_bias"] = true;
  nlohmann::json params;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    std::string base = "layer" + std::to_string(l);
    params[base + ".weight"] = detail::tensor_to_json(s.shared_weights[l]);
    for (std::size_t j = 0; j < s.members; ++j) {
      params[base + ".s" + std::to_string(j)] = detail::tensor_to_json(s.input_factors[l][j]);
      params[base + ".r" + std::to_string(j)] = detail::tensor_to_json(s.output_factors[l][j]);
      params[base + ".bias" + std::to_string(j)] = detail::tensor_to_json(s.biases[l][j]);
    }
  }
  return nlohmann::json{{"format_version", 1},
                        {"kind", "batch_ensemble"},
                        {"widths", s.widths},
                        {"M", s.members},
                        {"seed", seed},
                        {"parameters", std::move(params)},
                        {"training_meta", std::move(training_meta)}};
}

struct Checkpoint {
  std::variant<MlpTeacher, BatchEnsembleStudent> model;
  std::uint64_t seed = 0;
  nlohmann::json training_meta;

  bool is_mlp() const { return std::holds_alternative<MlpTeacher>(model); }
  const MlpTeacher& mlp() const { return std::get<MlpTeacher>(model); }
  const BatchEnsembleStudent& student() const {
    return std::get<BatchEnsembleStudent>(model);
  }
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format_version");
  Checkpoint c;
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("training_meta")) c.training_meta = j.at("training_meta");
  auto widths = j.at("widths").get<std::vector<std::size_t>>();
  const auto& params = j.at("parameters");
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "mlp") {
    MlpTeacher m;
    m.widths = widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      std::string base = "layer" + std::to_string(l);
      m.weights.emplace_back(Shape{widths[l], widths[l + 1]},
                             detail::array_from_json(params.at(base + ".weight"),
                                                     widths[l] * widths[l + 1],
                                                     base + ".weight"));
      m.biases.emplace_back(Shape{widths[l + 1]},
                            detail::array_from_json(params.at(base + ".bias"),
                                                    widths[l + 1], base + ".bias"));
    }
    c.model = std::move(m);
  } else if (kind == "batch_ensemble") {
    BatchEnsembleStudent s;
    s.widths = widths;
    s.members = j.at("M").get<std::size_t>();
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      std::string base = "layer" + std::to_string(l);
      s.shared_weights.emplace_back(Shape{widths[l], widths[l + 1]},
                                    detail::array_from_json(params.at(base + ".weight"),
                                                            widths[l] * widths[l + 1],
                                                            base + ".weight"));
      s.input_factors.emplace_back();
      s.output_factors.emplace_back();
      s.biases.emplace_back();
      for (std::size_t m = 0; m < s.members; ++m) {
        std::string sj = base + ".s" + std::to_string(m);
        std::string rj = base + ".r" + std::to_string(m);
        std::string bj = base + ".bias" + std::to_string(m);
        s.input_factors[l].emplace_back(Shape{widths[l]},
                                        detail::array_from_json(params.at(sj), widths[l], sj));
        s.output_factors[l].emplace_back(
            Shape{widths[l + 1]},
            detail::array_from_json(params.at(rj), widths[l + 1], rj));
        s.biases[l].emplace_back(Shape{widths[l + 1]},
                                 detail::array_from_json(params.at(bj), widths[l + 1], bj));
      }
    }
    c.model = std::move(s);
  } else {
    throw std::runtime_error("checkpoint: unknown kind '" + kind + "'");
  }
  return c;
}

namespace detail {
inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << text;
  }
  std::filesystem::rename(tmp, path);
}
}  // namespace detail

template <typename ModelT>
void save_checkpoint(const ModelT& m, const std::filesystem::path& path,
                     std::uint64_t seed, nlohmann::json training_meta = {}) {
  detail::atomic_write_text(path,
                            checkpoint_json(m, seed, std::move(training_meta)).dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(is));
}

}  // namespace divkd
