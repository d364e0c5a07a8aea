#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "divkd/autodiff.hpp"
#include "divkd/rng.hpp"
#include "divkd/tensor.hpp"

namespace divkd {

/// Fully connected classifier: ReLU on hidden layers, identity on the
/// output layer (logits). widths = [D, h1, ..., K].
struct MlpTeacher {
  std::vector<std::size_t> widths;
  std::vector<Tensor> weights;  // per layer, [d_in x d_out]
  std::vector<Tensor> biases;   // per layer, [d_out]

  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_classes() const { return widths.back(); }
  std::size_t num_layers() const { return weights.size(); }
};

/// Rank-one factored ensemble sharing one weight matrix per layer.
/// Member j's effective weight entry (i,o) is W[i,o] * s_j[i] * r_j[o];
/// biases are per member.
struct BatchEnsembleStudent {
  std::size_t members = 0;  // M
  std::vector<std::size_t> widths;
  std::vector<Tensor> shared_weights;                // [layer] -> [d_in x d_out]
  std::vector<std::vector<Tensor>> input_factors;    // [layer][member] -> s, [d_in]
  std::vector<std::vector<Tensor>> output_factors;   // [layer][member] -> r, [d_out]
  std::vector<std::vector<Tensor>> biases;           // [layer][member] -> [d_out]

  std::size_t input_dim() const { return widths.front(); }
  std::size_t num_classes() const { return widths.back(); }
  std::size_t num_layers() const { return shared_weights.size(); }
};

/// M independently trained teachers of identical architecture.
struct DeepEnsemble {
  std::vector<MlpTeacher> members;

  std::size_t size() const { return members.size(); }
};

enum class FactorInit { random_sign, ones };

inline MlpTeacher make_mlp(std::vector<std::size_t> widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("mlp needs at least two widths");
  MlpTeacher m;
  m.widths = std::move(widths);
  for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
    std::size_t din = m.widths[l], dout = m.widths[l + 1];
    Tensor w{Shape{din, dout}};
    double std_dev = std::sqrt(2.0 / static_cast<double>(din));
    for (std::size_t i = 0; i < w.count(); ++i) w[i] = rng.normal(0.0, std_dev);
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(Shape{dout});
  }
  return m;
}

inline BatchEnsembleStudent make_student(std::vector<std::size_t> widths,
                                         std::size_t members, Rng& rng,
                                         FactorInit factor_init = FactorInit::random_sign) {
  if (widths.size() < 2) throw std::invalid_argument("student needs at least two widths");
  if (members == 0) throw std::invalid_argument("student needs at least one member");
  BatchEnsembleStudent s;
  s.members = members;
  s.widths = std::move(widths);
  for (std::size_t l = 0; l + 1 < s.widths.size(); ++l) {
    std::size_t din = s.widths[l], dout = s.widths[l + 1];
    Tensor w{Shape{din, dout}};
    double std_dev = std::sqrt(2.0 / static_cast<double>(din));
    for (std::size_t i = 0; i < w.count(); ++i) w[i] = rng.normal(0.0, std_dev);
    s.shared_weights.push_back(std::move(w));
    s.input_factors.emplace_back();
    s.output_factors.emplace_back();
    s.biases.emplace_back();
    for (std::size_t j = 0; j < members; ++j) {
      Tensor sj{Shape{din}, 1.0};
      Tensor rj{Shape{dout}, 1.0};
      if (factor_init == FactorInit::random_sign) {
        for (std::size_t i = 0; i < din; ++i) sj[i] = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < dout; ++i) rj[i] = rng.uniform() < 0.5 ? -1.0 : 1.0;
      }
      s.input_factors[l].push_back(std::move(sj));
      s.output_factors[l].push_back(std::move(rj));
      s.biases[l].emplace_back(Shape{dout});
    }
  }
  return s;
}

// ---- value-level forward passes ----

namespace detail {
inline void check_input_width(std::size_t expected, const Tensor& x) {
  if (x.cols() != expected)
    throw ShapeError("input width " + std::to_string(x.cols()) +
                     " does not match model input dim " + std::to_string(expected));
}
}  // namespace detail

/// Teacher logits for a batch, x is [n x D].
inline Tensor logits(const MlpTeacher& m, const Tensor& x) {
  detail::check_input_width(m.input_dim(), x);
  Tensor h = x.shape().rank() == 1 ? x.as_row_matrix() : x;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Tensor z = matmul_value(h, m.weights[l]);
    std::size_t c = z.cols();
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) z.at(i, j) += m.biases[l][j];
    if (l + 1 < m.num_layers())
      for (std::size_t i = 0; i < z.count(); ++i) z[i] = z[i] > 0.0 ? z[i] : 0.0;
    h = std::move(z);
  }
  return h;
}

/// Logits of student member j via the factored path ((x o s_j) W) o r_j + b_j.
inline Tensor member_logits(const BatchEnsembleStudent& s, std::size_t member,
                            const Tensor& x) {
  if (member >= s.members)
    throw std::out_of_range("member index " + std::to_string(member) +
                            " out of range for M=" + std::to_string(s.members));
  detail::check_input_width(s.input_dim(), x);
  Tensor h = x.shape().rank() == 1 ? x.as_row_matrix() : x;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    const Tensor& sj = s.input_factors[l][member];
    const Tensor& rj = s.output_factors[l][member];
    const Tensor& bj = s.biases[l][member];
    Tensor scaled = h;
    for (std::size_t i = 0; i < scaled.rows(); ++i)
      for (std::size_t j = 0; j < scaled.cols(); ++j) scaled.at(i, j) *= sj[j];
    Tensor z = matmul_value(scaled, s.shared_weights[l]);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j)
        z.at(i, j) = z.at(i, j) * rj[j] + bj[j];
    if (l + 1 < s.num_layers())
      for (std::size_t i = 0; i < z.count(); ++i) z[i] = z[i] > 0.0 ? z[i] : 0.0;
    h = std::move(z);
  }
  return h;
}

/// Member j's explicit per-layer weight W o (r_j s_j^T), entry (i,o) =
/// W[i,o] * s_j[i] * r_j[o]. Used by the equivalence tests.
inline Tensor explicit_member_weight(const BatchEnsembleStudent& s, std::size_t layer,
                                     std::size_t member) {
  const Tensor& w = s.shared_weights[layer];
  const Tensor& sj = s.input_factors[layer][member];
  const Tensor& rj = s.output_factors[layer][member];
  Tensor out = w;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t o = 0; o < w.cols(); ++o) out.at(i, o) *= sj[i] * rj[o];
  return out;
}

/// Arithmetic mean of probability rows; each input is [n x K].
inline Tensor average_probs(const std::vector<Tensor>& member_probs) {
  if (member_probs.empty())
    throw std::invalid_argument("ensemble_predict: no members");
  Tensor out = member_probs[0];
  for (std::size_t m = 1; m < member_probs.size(); ++m) {
    detail::check_same_shape("average_probs", out, member_probs[m]);
    for (std::size_t i = 0; i < out.count(); ++i) out[i] += member_probs[m][i];
  }
  double inv = 1.0 / static_cast<double>(member_probs.size());
  for (std::size_t i = 0; i < out.count(); ++i) out[i] *= inv;
  return out;
}

/// Mean of member softmax outputs at temperature 1.
inline Tensor ensemble_probs(const DeepEnsemble& de, const Tensor& x) {
  std::vector<Tensor> probs;
  probs.reserve(de.size());
  for (const auto& m : de.members) probs.push_back(softmax_rows_value(logits(m, x)));
  return average_probs(probs);
}

inline Tensor ensemble_probs(const BatchEnsembleStudent& s, const Tensor& x) {
  std::vector<Tensor> probs;
  probs.reserve(s.members);
  for (std::size_t j = 0; j < s.members; ++j)
    probs.push_back(softmax_rows_value(member_logits(s, j, x)));
  return average_probs(probs);
}

// ---- parameter access ----

inline std::vector<Tensor*> param_refs(MlpTeacher& m) {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    out.push_back(&m.weights[l]);
    out.push_back(&m.biases[l]);
  }
  return out;
}

inline std::vector<Tensor*> param_refs(BatchEnsembleStudent& s) {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    out.push_back(&s.shared_weights[l]);
    for (std::size_t j = 0; j < s.members; ++j) {
      out.push_back(&s.input_factors[l][j]);
      out.push_back(&s.output_factors[l][j]);
      out.push_back(&s.biases[l][j]);
    }
  }
  return out;
}

inline std::size_t param_count(const MlpTeacher& m) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < m.num_layers(); ++l)
    n += m.weights[l].count() + m.biases[l].count();
  return n;
}

inline std::size_t param_count(const BatchEnsembleStudent& s) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    n += s.shared_weights[l].count();
    for (std::size_t j = 0; j < s.members; ++j)
      n += s.input_factors[l][j].count() + s.output_factors[l][j].count() +
           s.biases[l][j].count();
  }
  return n;
}

// ---- graph lifting ----

/// A classifier lifted into the autodiff graph: `forward` maps an input node
/// to a logits node; `params` holds the trainable leaves (empty when lifted
/// as a constant). Parameter order matches param_refs().
struct GraphFn {
  std::vector<NodePtr> params;
  std::function<NodePtr(const NodePtr&)> forward;
};

inline GraphFn graph_fn(const MlpTeacher& m, bool trainable) {
  GraphFn g;
  std::vector<NodePtr> ws, bs;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    ws.push_back(leaf(m.weights[l], trainable));
    bs.push_back(leaf(m.biases[l], trainable));
    if (trainable) {
      g.params.push_back(ws.back());
      g.params.push_back(bs.back());
    }
  }
  g.forward = [ws, bs](const NodePtr& x) {
    NodePtr h = x;
    for (std::size_t l = 0; l < ws.size(); ++l) {
      h = add_rowvec(matmul(h, ws[l]), bs[l]);
      if (l + 1 < ws.size()) h = relu(h);
    }
    return h;
  };
  return g;
}

/// One student member viewed as a standalone classifier. When lifted as
/// trainable, params cover the shared weights and this member's factors only.
struct MemberView {
  const BatchEnsembleStudent* student;
  std::size_t member;
};

inline Tensor logits(const MemberView& v, const Tensor& x) {
  return member_logits(*v.student, v.member, x);
}

inline GraphFn graph_fn(const MemberView& v, bool trainable) {
  const BatchEnsembleStudent& s = *v.student;
  if (v.member >= s.members)
    throw std::out_of_range("member index " + std::to_string(v.member) +
                            " out of range for M=" + std::to_string(s.members));
  GraphFn g;
  std::vector<NodePtr> ws, ss, rs, bs;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    ws.push_back(leaf(s.shared_weights[l], trainable));
    ss.push_back(leaf(s.input_factors[l][v.member], trainable));
    rs.push_back(leaf(s.output_factors[l][v.member], trainable));
    bs.push_back(leaf(s.biases[l][v.member], trainable));
    if (trainable) {
      g.params.push_back(ws.back());
      g.params.push_back(ss.back());
      g.params.push_back(rs.back());
      g.params.push_back(bs.back());
    }
  }
  g.forward = [ws, ss, rs, bs](const NodePtr& x) {
    NodePtr h = x;
    for (std::size_t l = 0; l < ws.size(); ++l) {
      h = add_rowvec(mul_rowvec(matmul(mul_rowvec(h, ss[l]), ws[l]), rs[l]), bs[l]);
      if (l + 1 < ws.size()) h = relu(h);
    }
    return h;
  };
  return g;
}

/// Lift the whole student once so every member shares the same weight
/// leaves; member_forward[j] builds member j's logits from an input node.
/// Parameter order matches param_refs(BatchEnsembleStudent&).
struct LiftedStudent {
  std::vector<NodePtr> params;
  std::vector<std::function<NodePtr(const NodePtr&)>> member_forward;
};

inline LiftedStudent lift_student(const BatchEnsembleStudent& s, bool trainable = true) {
  LiftedStudent out;
  std::vector<NodePtr> ws;
  std::vector<std::vector<NodePtr>> ss(s.num_layers()), rs(s.num_layers()),
      bs(s.num_layers());
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    ws.push_back(leaf(s.shared_weights[l], trainable));
    if (trainable) out.params.push_back(ws.back());
    for (std::size_t j = 0; j < s.members; ++j) {
      ss[l].push_back(leaf(s.input_factors[l][j], trainable));
      rs[l].push_back(leaf(s.output_factors[l][j], trainable));
      bs[l].push_back(leaf(s.biases[l][j], trainable));
      if (trainable) {
        out.params.push_back(ss[l].back());
        out.params.push_back(rs[l].back());
        out.params.push_back(bs[l].back());
      }
    }
  }
  for (std::size_t j = 0; j < s.members; ++j) {
    out.member_forward.push_back([ws, ss, rs, bs, j](const NodePtr& x) {
      NodePtr h = x;
      for (std::size_t l = 0; l < ws.size(); ++l) {
        h = add_rowvec(mul_rowvec(matmul(mul_rowvec(h, ss[l][j]), ws[l]), rs[l][j]),
                       bs[l][j]);
        if (l + 1 < ws.size()) h = relu(h);
      }
      return h;
    });
  }
  return out;
}

}  // namespace divkd
