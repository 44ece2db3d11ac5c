// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over row-major matrices, and the optimiser
// stack (Adam, cosine annealing, global-norm clipping).

#pragma once

#include "xmgn/common.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace xmgn {

template <class T>
inline std::string shape_str(const Mat<T>& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

/// Named trainable arrays. Ids are stable insertion indices.
template <class T>
struct ParameterStore {
  std::vector<std::string> names;
  std::vector<Mat<T>> values;

  Index add(std::string name, Mat<T> value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return static_cast<Index>(values.size()) - 1;
  }
  Index size() const { return static_cast<Index>(values.size()); }
  Index count_scalars() const {
    Index n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  Index find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<Index>(i);
    }
    return -1;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<U>());
    return out;
  }
};

template <class T>
using Gradients = std::vector<Mat<T>>;

template <class T>
inline Gradients<T> zero_gradients(const ParameterStore<T>& store) {
  Gradients<T> g;
  g.reserve(store.values.size());
  for (const auto& v : store.values) g.push_back(Mat<T>::Zero(v.rows(), v.cols()));
  return g;
}

/// Records one forward evaluation; backward() replays it in reverse.
template <class T>
class Tape {
 public:
  struct Var {
    Index id = -1;
  };

  explicit Tape(const ParameterStore<T>* params = nullptr) : params_(params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat<T> value) { return push(std::move(value), false, {}); }

  /// Leaf referencing parameter `pid`; the store must outlive the tape.
  Var parameter(Index pid) {
    if (params_ == nullptr || pid < 0 || pid >= params_->size()) {
      throw ConfigError("tape: unknown parameter id " + std::to_string(pid));
    }
    Node n;
    n.ref = &params_->values[static_cast<std::size_t>(pid)];
    n.param = pid;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<Index>(nodes_.size()) - 1};
  }

  const Mat<T>& value(Var v) const { return node(v).value(); }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // X·W + b with W [in x out] and b [1 x out].
  Var linear(Var x, Var w, Var b) {
    const auto& X = value(x);
    const auto& W = value(w);
    const auto& B = value(b);
    if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) {
      throw ShapeError("linear: X" + shape_str(X) + " W" + shape_str(W) + " b" + shape_str(B));
    }
    Mat<T> y(X.rows(), W.cols());
    y.noalias() = X * W;
    y.rowwise() += B.row(0);
    return push(std::move(y), any_grad({x, w, b}), [x, w, b](Tape& t, Index self) {
      const auto& gy = t.grad_of(self);
      if (t.needs(x)) t.grad(x).noalias() += gy * t.value(w).transpose();
      if (t.needs(w)) t.grad(w).noalias() += t.value(x).transpose() * gy;
      if (t.needs(b)) t.grad(b) += gy.colwise().sum();
    });
  }

  Var silu(Var x) {
    const auto& X = value(x);
    Mat<T> sig = (T(1) + (-X.array()).exp()).inverse().matrix();
    Mat<T> y = X.cwiseProduct(sig);
    return push(std::move(y), needs(x), [x, sig = std::move(sig)](Tape& t, Index self) {
      const auto& X = t.value(x);
      t.grad(x).array() += t.grad_of(self).array() * sig.array() * (T(1) + X.array() * (T(1) - sig.array()));
    });
  }

  Var gelu(Var x) {
    const auto& X = value(x);
    Mat<T> y = X.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); });
    return push(std::move(y), needs(x), [x](Tape& t, Index self) {
      const auto& X = t.value(x);
      t.grad(x).array() += t.grad_of(self).array() * X.unaryExpr([](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + v * pdf;
      }).array();
    });
  }

  /// [h[dst] | h[src] | e] · W + b without materialising the concatenation:
  /// node rows are projected once, then gathered per edge. W is [2d + e_cols x out].
  Var edge_linear(Var h, Var e, Var w, Var b, std::vector<Index> src, std::vector<Index> dst) {
    const auto& H = value(h);
    const auto& E = value(e);
    const auto& W = value(w);
    const auto& B = value(b);
    const Index d = H.cols(), m = E.rows();
    if (W.rows() != 2 * d + E.cols() || B.rows() != 1 || B.cols() != W.cols() ||
        static_cast<Index>(src.size()) != m || static_cast<Index>(dst.size()) != m) {
      throw ShapeError("edge_linear: H" + shape_str(H) + " E" + shape_str(E) + " W" + shape_str(W) + " b" +
                       shape_str(B) + " with " + std::to_string(src.size()) + " edges");
    }
    for (std::size_t k = 0; k < src.size(); ++k) {
      if (src[k] < 0 || src[k] >= H.rows() || dst[k] < 0 || dst[k] >= H.rows()) {
        throw ShapeError("edge_linear: edge " + std::to_string(k) + " references a missing node");
      }
    }
    Mat<T> pr(H.rows(), W.cols()), ps(H.rows(), W.cols()), y(m, W.cols());
    pr.noalias() = H * W.topRows(d);
    ps.noalias() = H * W.middleRows(d, d);
    y.noalias() = E * W.bottomRows(E.cols());
    for (Index k = 0; k < m; ++k) {
      y.row(k) += pr.row(dst[static_cast<std::size_t>(k)]);
      y.row(k) += ps.row(src[static_cast<std::size_t>(k)]);
    }
    y.rowwise() += B.row(0);
    return push(std::move(y), any_grad({h, e, w, b}),
                [h, e, w, b, src = std::move(src), dst = std::move(dst)](Tape& t, Index self) {
                  const auto& gy = t.grad_of(self);
                  const auto& H = t.value(h);
                  const auto& W = t.value(w);
                  const Index d = H.cols(), ec = t.value(e).cols();
                  if (t.needs(h) || t.needs(w)) {
                    Mat<T> gr = Mat<T>::Zero(H.rows(), gy.cols()), gs = Mat<T>::Zero(H.rows(), gy.cols());
                    for (std::size_t k = 0; k < src.size(); ++k) {
                      gr.row(dst[k]) += gy.row(static_cast<Index>(k));
                      gs.row(src[k]) += gy.row(static_cast<Index>(k));
                    }
                    if (t.needs(w)) {
                      auto& gw = t.grad(w);
                      gw.topRows(d).noalias() += H.transpose() * gr;
                      gw.middleRows(d, d).noalias() += H.transpose() * gs;
                    }
                    if (t.needs(h)) {
                      auto& gh = t.grad(h);
                      gh.noalias() += gr * W.topRows(d).transpose();
                      gh.noalias() += gs * W.middleRows(d, d).transpose();
                    }
                  }
                  if (t.needs(w)) t.grad(w).bottomRows(ec).noalias() += t.value(e).transpose() * gy;
                  if (t.needs(e)) t.grad(e).noalias() += gy * W.bottomRows(ec).transpose();
                  if (t.needs(b)) t.grad(b) += gy.colwise().sum();
                });
  }

  /// Per-row normalisation with affine gamma/beta [1 x cols]. Uses no statistics across rows.
  Var layernorm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    const auto& G = value(gamma);
    const auto& B = value(beta);
    if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols()) {
      throw ShapeError("layernorm: X" + shape_str(X) + " gamma" + shape_str(G) + " beta" + shape_str(B));
    }
    using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    const T inv_d = T(1) / T(X.cols());
    const Col mean = X.rowwise().sum() * inv_d;
    Mat<T> xhat = X.colwise() - mean;
    const Col inv_std = ((xhat.array().square().rowwise().sum() * inv_d + eps).sqrt()).inverse().matrix();
    xhat.array().colwise() *= inv_std.array();
    Mat<T> y = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
    return push(std::move(y), any_grad({x, gamma, beta}),
                [x, gamma, beta, xhat = std::move(xhat), inv_std](Tape& t, Index self) {
                  const auto& gy = t.grad_of(self);
                  if (t.needs(gamma)) t.grad(gamma) += (gy.array() * xhat.array()).colwise().sum().matrix();
                  if (t.needs(beta)) t.grad(beta) += gy.colwise().sum();
                  if (!t.needs(x)) return;
                  const T inv_d = T(1) / T(gy.cols());
                  const Mat<T> gxh = (gy.array().rowwise() * t.value(gamma).row(0).array()).matrix();
                  const Col mean_g = gxh.rowwise().sum() * inv_d;
                  const Col mean_gx = (gxh.array() * xhat.array()).rowwise().sum().matrix() * inv_d;
                  t.grad(x).array() += ((gxh.colwise() - mean_g).array() - xhat.array().colwise() * mean_gx.array())
                                           .colwise() *
                                       inv_std.array();
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const Index rows = value(parts[0]).rows();
    Index cols = 0;
    for (auto p : parts) {
      if (value(p).rows() != rows) {
        throw ShapeError("concat_cols: row mismatch " + shape_str(value(parts[0])) + " vs " + shape_str(value(p)));
      }
      cols += value(p).cols();
    }
    Mat<T> y(rows, cols);
    Index c = 0;
    for (auto p : parts) {
      y.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    return push(std::move(y), any_grad(parts), [parts](Tape& t, Index self) {
      const auto& gy = t.grad_of(self);
      Index c = 0;
      for (auto p : parts) {
        const Index w = t.value(p).cols();
        if (t.needs(p)) t.grad(p) += gy.middleCols(c, w);
        c += w;
      }
    });
  }

  Var add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError("add: " + shape_str(value(a)) + " vs " + shape_str(value(b)));
    }
    Mat<T> y = value(a) + value(b);
    return push(std::move(y), any_grad({a, b}), [a, b](Tape& t, Index self) {
      if (t.needs(a)) t.grad(a) += t.grad_of(self);
      if (t.needs(b)) t.grad(b) += t.grad_of(self);
    });
  }

  Var mul(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError("mul: " + shape_str(value(a)) + " vs " + shape_str(value(b)));
    }
    Mat<T> y = value(a).cwiseProduct(value(b));
    return push(std::move(y), any_grad({a, b}), [a, b](Tape& t, Index self) {
      if (t.needs(a)) t.grad(a) += t.grad_of(self).cwiseProduct(t.value(b));
      if (t.needs(b)) t.grad(b) += t.grad_of(self).cwiseProduct(t.value(a));
    });
  }

  Var scale(Var a, T s) {
    Mat<T> y = value(a) * s;
    return push(std::move(y), needs(a), [a, s](Tape& t, Index self) { t.grad(a) += t.grad_of(self) * s; });
  }

  /// Sum of all entries as a 1x1 value.
  Var sum(Var a) {
    Mat<T> y(1, 1);
    y(0, 0) = value(a).sum();
    return push(std::move(y), needs(a), [a](Tape& t, Index self) {
      t.grad(a).array() += t.grad_of(self)(0, 0);
    });
  }

  /// First n rows of x; returns x itself when n covers every row.
  Var top_rows(Var x, Index n) {
    const auto& X = value(x);
    if (n < 0 || n > X.rows()) throw ShapeError("top_rows: " + std::to_string(n) + " rows of X" + shape_str(X));
    if (n == X.rows()) return x;
    Mat<T> y = X.topRows(n);
    return push(std::move(y), needs(x), [x](Tape& t, Index self) {
      const auto& gy = t.grad_of(self);
      t.grad(x).topRows(gy.rows()) += gy;
    });
  }

  /// y.row(r) = x.row(idx[r]).
  Var gather_rows(Var x, std::vector<Index> idx) {
    const auto& X = value(x);
    Mat<T> y(static_cast<Index>(idx.size()), X.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= X.rows()) {
        throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range for X" + shape_str(X));
      }
      y.row(static_cast<Index>(r)) = X.row(idx[r]);
    }
    return push(std::move(y), needs(x), [x, idx = std::move(idx)](Tape& t, Index self) {
      const auto& gy = t.grad_of(self);
      auto& gx = t.grad(x);
      for (std::size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += gy.row(static_cast<Index>(r));
    });
  }

  /// y.row(idx[r]) += x.row(r) into `out_rows` zero rows.
  Var scatter_sum(Var x, std::vector<Index> idx, Index out_rows) {
    const auto& X = value(x);
    if (static_cast<Index>(idx.size()) != X.rows()) {
      throw ShapeError("scatter_sum: " + std::to_string(idx.size()) + " indices for X" + shape_str(X));
    }
    Mat<T> y = Mat<T>::Zero(out_rows, X.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= out_rows) {
        throw ShapeError("scatter_sum: index " + std::to_string(idx[r]) + " out of range for " +
                         std::to_string(out_rows) + " rows");
      }
      y.row(idx[r]) += X.row(static_cast<Index>(r));
    }
    return push(std::move(y), needs(x), [x, idx = std::move(idx)](Tape& t, Index self) {
      const auto& gy = t.grad_of(self);
      auto& gx = t.grad(x);
      for (std::size_t r = 0; r < idx.size(); ++r) gx.row(static_cast<Index>(r)) += gy.row(idx[r]);
    });
  }

  /// Sum over rows with mask[r] != 0 of the squared error; 1x1.
  Var masked_sse(Var pred, Var target, std::vector<std::uint8_t> mask) {
    const auto& P = value(pred);
    const auto& Y = value(target);
    if (P.rows() != Y.rows() || P.cols() != Y.cols() || static_cast<Index>(mask.size()) != P.rows()) {
      throw ShapeError("masked_sse: pred" + shape_str(P) + " target" + shape_str(Y) + " mask[" +
                       std::to_string(mask.size()) + "]");
    }
    T s = 0;
    for (Index r = 0; r < P.rows(); ++r) {
      if (mask[static_cast<std::size_t>(r)]) s += (P.row(r) - Y.row(r)).squaredNorm();
    }
    Mat<T> y(1, 1);
    y(0, 0) = s;
    return push(std::move(y), any_grad({pred, target}), [pred, target, mask = std::move(mask)](Tape& t, Index self) {
      const T g = t.grad_of(self)(0, 0);
      const auto& P = t.value(pred);
      const auto& Y = t.value(target);
      for (Index r = 0; r < P.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const auto d = ((P.row(r) - Y.row(r)) * (T(2) * g)).eval();
        if (t.needs(pred)) t.grad(pred).row(r) += d;
        if (t.needs(target)) t.grad(target).row(r) -= d;
      }
    });
  }

  /// Adds d(loss)/d(param) into `accum` (one entry per store parameter).
  void backward(Var loss, Gradients<T>& accum) {
    const auto& L = value(loss);
    if (L.rows() != 1 || L.cols() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(L));
    if (params_ != nullptr && static_cast<Index>(accum.size()) != params_->size()) {
      throw ShapeError("backward: gradient set does not match the parameter store");
    }
    grad(loss).setOnes();
    for (Index id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.has_grad) continue;
      if (n.back) n.back(*this, id);
      if (n.param >= 0) {
        accum[static_cast<std::size_t>(n.param)] += n.grad;
      }
      if (id != loss.id) n.grad = Mat<T>();  // intermediates are no longer needed
    }
  }

  Gradients<T> backward(Var loss) {
    Gradients<T> g = params_ ? zero_gradients(*params_) : Gradients<T>{};
    backward(loss, g);
    return g;
  }

  /// Adjoint of a node after backward (kept only for the loss and parameter leaves).
  const Mat<T>& adjoint(Var v) const { return node(v).grad; }

  bool needs(Var v) const { return node(v).needs_grad; }

  Mat<T>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.has_grad) {
      n.grad = Mat<T>::Zero(n.value().rows(), n.value().cols());
      n.has_grad = true;
    }
    return n.grad;
  }

 private:
  using Backward = std::function<void(Tape&, Index)>;

  struct Node {
    Mat<T> own;
    const Mat<T>* ref = nullptr;
    Mat<T> grad;
    bool has_grad = false;
    bool needs_grad = false;
    Index param = -1;
    Backward back;

    const Mat<T>& value() const { return ref ? *ref : own; }
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= size()) throw ShapeError("tape: invalid variable id " + std::to_string(v.id));
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Mat<T>& grad_of(Index id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  bool any_grad(std::initializer_list<Var> vs) const {
    for (auto v : vs) {
      if (needs(v)) return true;
    }
    return false;
  }
  bool any_grad(const std::vector<Var>& vs) const {
    for (auto v : vs) {
      if (needs(v)) return true;
    }
    return false;
  }

  Var push(Mat<T> value, bool needs_grad, Backward back) {
    Node n;
    n.own = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<Index>(nodes_.size()) - 1};
  }

  const ParameterStore<T>* params_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  Index total_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_threshold = 32.0;  // <= 0 disables clipping
};

template <class T>
struct OptimizerState {
  AdamConfig config;
  Index step = 0;
  std::vector<Mat<T>> first_moment;
  std::vector<Mat<T>> second_moment;

  OptimizerState() = default;
  OptimizerState(const ParameterStore<T>& params, AdamConfig cfg) : config(cfg) {
    first_moment = zero_gradients(params);
    second_moment = zero_gradients(params);
  }
};

/// lr_min + (lr_max - lr_min)/2 * (1 + cos(pi t / T)).
inline double cosine_lr(const AdamConfig& cfg, Index step) {
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

template <class T>
inline double global_norm(const Gradients<T>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

/// Scales all gradients so their joint L2 norm is at most `threshold`; returns the pre-clip norm.
template <class T>
inline double clip_global_norm(Gradients<T>& grads, double threshold) {
  const double norm = global_norm(grads);
  if (threshold > 0.0 && norm > threshold) {
    const T s = static_cast<T>(threshold / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

struct StepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// Clip, then one bias-corrected Adam update at the cosine-annealed rate.
template <class T>
inline StepInfo adam_step(ParameterStore<T>& params, Gradients<T> grads, OptimizerState<T>& state) {
  const auto& cfg = state.config;
  if (state.step >= cfg.total_steps) {
    throw ConfigError("adam_step: step " + std::to_string(state.step) + " is past the schedule end " +
                      std::to_string(cfg.total_steps));
  }
  if (grads.size() != params.values.size() || state.first_moment.size() != params.values.size()) {
    throw ShapeError("adam_step: gradient/moment count does not match parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].allFinite()) throw NumericError("adam_step: non-finite gradient for '" + params.names[i] + "'");
  }
  StepInfo info;
  info.grad_norm = clip_global_norm(grads, cfg.clip_threshold);
  info.lr = cosine_lr(cfg, state.step);
  const Index t = state.step + 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(info.lr), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = b1 * m + (T(1) - b1) * grads[i];
    v = b2 * v + (T(1) - b2) * grads[i].cwiseProduct(grads[i]);
    params.values[i].array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
  ++state.step;
  return info;
}

}  // namespace xmgn
