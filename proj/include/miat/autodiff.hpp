#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation of one forward pass; backward()
// walks it in reverse and accumulates gradients into parameter sinks.
//
// Ops are coarse-grained (linear, layer norm, masked multi-head attention,
// GLU, the loss terms) so a forward pass records a few hundred nodes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace miat::ad {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<S>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape<S>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<S>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Matrix<S> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf referring to external storage. Gradients accumulate into `sink`
  /// (same shape) during backward; a null sink freezes the leaf.
  Var<S> parameter(const Matrix<S>& value, Matrix<S>* sink) {
    if (sink && (sink->rows() != value.rows() || sink->cols() != value.cols())) {
      throw ShapeError("gradient sink shape does not match parameter");
    }
    Node n;
    n.ref = &value;
    n.sink = sink;
    n.requires_grad = sink != nullptr;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op result. `backward` runs only if some input requires grad.
  Var<S> record(Matrix<S> value, std::initializer_list<Var<S>> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (const auto& in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<S> record_many(Matrix<S> value, const std::vector<Var<S>>& inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (const auto& in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix<S>& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var<S>& v) const { return requires_grad(v.id()); }

  /// Gradient buffer of a node, zero-initialized on first access.
  Matrix<S>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.sink) return *n.sink;
    if (!n.has_grad) {
      const auto& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
      n.has_grad = true;
    }
    return n.grad;
  }
  Matrix<S>& grad(const Var<S>& v) { return grad(v.id()); }

  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  /// Backpropagates from a scalar (1x1) node, scaled by `seed`.
  void backward(const Var<S>& root, S seed = S(1)) {
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward() needs a 1x1 root");
    if (!requires_grad(root.id())) return;
    grad(root.id())(0, 0) += seed;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.has_grad) {
        current_ = i;
        n.backward(*this);
      }
    }
  }

  /// Gradient of the node whose backward function is currently running.
  const Matrix<S>& upstream() const { return nodes_[current_].grad; }

  /// Folds the branch taken by a piecewise-linear activation into a running
  /// hash, so gradient checks can detect finite-difference probes that cross
  /// a kink.
  void note_branches(const S* pre, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      branch_hash_ = (branch_hash_ ^ static_cast<std::uint64_t>(pre[i] > S(0))) * 0x100000001b3ull;
    }
  }
  std::uint64_t branch_signature() const { return branch_hash_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    const Matrix<S>* ref = nullptr;
    Matrix<S> grad;
    Matrix<S>* sink = nullptr;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  std::vector<Node> nodes_;
  std::size_t current_ = 0;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ull;
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  auto& t = *a.tape();
  Matrix<S> out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape<S>& tp) {
    const auto& g = tp.upstream();
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * b.value().transpose();
    if (tp.requires_grad(b)) tp.grad(b).noalias() += a.value().transpose() * g;
  });
}

/// x W + b with b broadcast over rows.
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  detail::require(x.cols() == w.rows(), "linear: input width does not match weight rows");
  detail::require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias must be 1 x out");
  auto& t = *x.tape();
  Matrix<S> out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape<S>& tp) {
    const auto& g = tp.upstream();
    if (tp.requires_grad(x)) tp.grad(x).noalias() += g * w.value().transpose();
    if (tp.requires_grad(w)) tp.grad(w).noalias() += x.value().transpose() * g;
    if (tp.requires_grad(b)) tp.grad(b) += g.colwise().sum();
  });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto& t = *a.tape();
  Matrix<S> out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape<S>& tp) {
    const auto& g = tp.upstream();
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

/// a + c for a constant c of the same shape.
template <class S>
Var<S> add_constant(const Var<S>& a, const Matrix<S>& c) {
  detail::require(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant: shape mismatch");
  Matrix<S> out = a.value() + c;
  return a.tape()->record(std::move(out), {a}, [a](Tape<S>& tp) { tp.grad(a) += tp.upstream(); });
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
  Matrix<S> out = a.value() * s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape<S>& tp) { tp.grad(a) += tp.upstream() * s; });
}

/// a * m elementwise for a constant m (dropout masks).
template <class S>
Var<S> hadamard_constant(const Var<S>& a, const Matrix<S>& m) {
  detail::require(a.rows() == m.rows() && a.cols() == m.cols(), "hadamard_constant: shape mismatch");
  Matrix<S> out = a.value().cwiseProduct(m);
  return a.tape()->record(std::move(out), {a}, [a, m](Tape<S>& tp) { tp.grad(a) += tp.upstream().cwiseProduct(m); });
}

/// a + s * b for scalars or same-shape matrices.
template <class S>
Var<S> add_scaled(const Var<S>& a, const Var<S>& b, S s) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add_scaled: shape mismatch");
  Matrix<S> out = a.value() + s * b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b, s](Tape<S>& tp) {
    const auto& g = tp.upstream();
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += s * g;
  });
}

// ---------------------------------------------------------------------------
// Row and column plumbing

template <class S>
Var<S> slice_rows(const Var<S>& a, Eigen::Index begin, Eigen::Index count) {
  detail::require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  Matrix<S> out = a.value().middleRows(begin, count);
  return a.tape()->record(std::move(out), {a}, [a, begin, count](Tape<S>& tp) {
    tp.grad(a).middleRows(begin, count) += tp.upstream();
  });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index begin, Eigen::Index count) {
  detail::require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols: out of range");
  Matrix<S> out = a.value().middleCols(begin, count);
  return a.tape()->record(std::move(out), {a}, [a, begin, count](Tape<S>& tp) {
    tp.grad(a).middleCols(begin, count) += tp.upstream();
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const auto cols = parts.front().cols();
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<S> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape()->record_many(std::move(out), parts, [parts](Tape<S>& tp) {
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (tp.requires_grad(p)) tp.grad(p) += tp.upstream().middleRows(off, p.rows());
      off += p.rows();
    }
  });
}

/// Rows of `a` listed in `index` (repeats allowed).
template <class S>
Var<S> gather_rows(const Var<S>& a, std::vector<Eigen::Index> index) {
  Matrix<S> out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] >= 0 && index[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.tape()->record(std::move(out), {a}, [a, index = std::move(index)](Tape<S>& tp) {
    auto& ga = tp.grad(a);
    const auto& g = tp.upstream();
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Each row repeated `times` times consecutively.
template <class S>
Var<S> repeat_rows(const Var<S>& a, Eigen::Index times) {
  detail::require(times >= 1, "repeat_rows: times must be >= 1");
  Matrix<S> out(a.rows() * times, a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) out.middleRows(r * times, times).rowwise() = a.value().row(r);
  return a.tape()->record(std::move(out), {a}, [a, times](Tape<S>& tp) {
    auto& ga = tp.grad(a);
    const auto& g = tp.upstream();
    for (Eigen::Index r = 0; r < ga.rows(); ++r) ga.row(r) += g.middleRows(r * times, times).colwise().sum();
  });
}

/// Running sum down the rows, restarting every `block` rows.
template <class S>
Var<S> cumsum_rows(const Var<S>& a, Eigen::Index block) {
  detail::require(block >= 1 && a.rows() % block == 0, "cumsum_rows: rows not a multiple of block");
  Matrix<S> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (r % block != 0) out.row(r) += out.row(r - 1);
  }
  return a.tape()->record(std::move(out), {a}, [a, block](Tape<S>& tp) {
    Matrix<S> g = tp.upstream();
    for (Eigen::Index r = g.rows() - 1; r >= 0; --r) {
      if ((r + 1) % block != 0) g.row(r) += g.row(r + 1);
    }
    tp.grad(a) += g;
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <class S>
Var<S> leaky_relu(const Var<S>& a, S slope) {
  auto& t = *a.tape();
  const auto& x = a.value();
  t.note_branches(x.data(), static_cast<std::size_t>(x.size()));
  Matrix<S> out = x.unaryExpr([slope](S v) { return v > S(0) ? v : slope * v; });
  return t.record(std::move(out), {a}, [a, slope](Tape<S>& tp) {
    tp.grad(a) += tp.upstream().binaryExpr(a.value(), [slope](S g, S v) { return v > S(0) ? g : slope * g; });
  });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  return leaky_relu(a, S(0));
}

template <class S>
S sigmoid(S v) {
  return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
}

template <class S>
S softplus(S v) {
  return v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

/// softplus(x) + floor, elementwise.
template <class S>
Var<S> softplus_floor(const Var<S>& a, S floor) {
  Matrix<S> out = a.value().unaryExpr([floor](S v) { return softplus(v) + floor; });
  return a.tape()->record(std::move(out), {a}, [a](Tape<S>& tp) {
    tp.grad(a) += tp.upstream().binaryExpr(a.value(), [](S g, S v) { return g * sigmoid(v); });
  });
}

/// Gated linear unit over the column halves: a * sigmoid(b) for x = [a | b].
template <class S>
Var<S> glu(const Var<S>& x) {
  detail::require(x.cols() % 2 == 0, "glu: needs an even number of columns");
  const Eigen::Index h = x.cols() / 2;
  const auto& v = x.value();
  Matrix<S> gate = v.rightCols(h).unaryExpr([](S z) { return sigmoid(z); });
  Matrix<S> out = v.leftCols(h).cwiseProduct(gate);
  return x.tape()->record(std::move(out), {x}, [x, h, gate = std::move(gate)](Tape<S>& tp) {
    const auto& g = tp.upstream();
    auto& gx = tp.grad(x);
    const auto& v = x.value();
    gx.leftCols(h) += g.cwiseProduct(gate);
    gx.rightCols(h).array() += g.array() * v.leftCols(h).array() * gate.array() * (S(1) - gate.array());
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x d).
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  const auto d = x.cols();
  detail::require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                  "layer_norm: gain/bias must be 1 x d");
  const auto& v = x.value();
  Matrix<S> xhat(v.rows(), d);
  std::vector<S> inv_std(static_cast<std::size_t>(v.rows()));
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const S mean = v.row(r).mean();
    const S var = (v.row(r).array() - mean).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (v.row(r).array() - mean) * is;
  }
  Matrix<S> out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.tape()->record(std::move(out), {x, gain, bias},
                          [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& tp) {
                            const auto& g = tp.upstream();
                            if (tp.requires_grad(gain)) tp.grad(gain) += g.cwiseProduct(xhat).colwise().sum();
                            if (tp.requires_grad(bias)) tp.grad(bias) += g.colwise().sum();
                            if (!tp.requires_grad(x)) return;
                            auto& gx = tp.grad(x);
                            const auto n = static_cast<S>(xhat.cols());
                            for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                              auto dxhat = (g.row(r).array() * gain.value().row(0).array()).eval();
                              const S m1 = dxhat.sum() / n;
                              const S m2 = (dxhat * xhat.row(r).array()).sum() / n;
                              gx.row(r).array() +=
                                  inv_std[static_cast<std::size_t>(r)] * (dxhat - m1 - xhat.row(r).array() * m2);
                            }
                          });
}

/// Row-wise softmax.
template <class S>
Var<S> softmax_rows(const Var<S>& a) {
  const auto& v = a.value();
  Matrix<S> out(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const S m = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  Matrix<S> y = out;
  return a.tape()->record(std::move(out), {a}, [a, y = std::move(y)](Tape<S>& tp) {
    const auto& g = tp.upstream();
    auto& ga = tp.grad(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const S dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Compressed key lists: query i attends to keys[offsets[i] .. offsets[i+1]).
struct AttentionPattern {
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> keys;

  std::size_t queries() const { return offsets.size() - 1; }

  void add_query(std::span<const std::uint32_t> ks) {
    keys.insert(keys.end(), ks.begin(), ks.end());
    offsets.push_back(static_cast<std::uint32_t>(keys.size()));
  }

  /// Every query attends to every key.
  static AttentionPattern dense(std::size_t n_queries, std::size_t n_keys) {
    AttentionPattern p;
    std::vector<std::uint32_t> all(n_keys);
    for (std::size_t k = 0; k < n_keys; ++k) all[k] = static_cast<std::uint32_t>(k);
    for (std::size_t q = 0; q < n_queries; ++q) p.add_query(all);
    return p;
  }

  /// Block-diagonal self attention over consecutive blocks of `len` rows.
  static AttentionPattern blocks(std::size_t n_blocks, std::size_t len) {
    AttentionPattern p;
    std::vector<std::uint32_t> ks(len);
    for (std::size_t b = 0; b < n_blocks; ++b) {
      for (std::size_t k = 0; k < len; ++k) ks[k] = static_cast<std::uint32_t>(b * len + k);
      for (std::size_t q = 0; q < len; ++q) p.add_query(ks);
    }
    return p;
  }

  /// Query block b (of q_len rows) attends to all k_len keys of key block b.
  static AttentionPattern cross_blocks(std::size_t n_blocks, std::size_t q_len, std::size_t k_len) {
    AttentionPattern p;
    std::vector<std::uint32_t> ks(k_len);
    for (std::size_t b = 0; b < n_blocks; ++b) {
      for (std::size_t k = 0; k < k_len; ++k) ks[k] = static_cast<std::uint32_t>(b * k_len + k);
      for (std::size_t q = 0; q < q_len; ++q) p.add_query(ks);
    }
    return p;
  }
};

/// Attention probabilities captured for inspection: weights[(i * heads + h)]
/// lists the softmax over query i's keys for head h.
template <class S>
struct AttentionProbe {
  int heads = 0;
  std::vector<std::vector<S>> weights;
};

/// Scaled dot-product attention with `heads` heads splitting the width of
/// q/k/v evenly. Scores are scaled by 1/sqrt(head width). A query with no
/// keys yields a zero row.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads, const AttentionPattern& pattern,
                 AttentionProbe<S>* probe = nullptr) {
  const auto d = q.cols();
  detail::require(k.cols() == d && v.cols() == d, "attention: q/k/v widths differ");
  detail::require(k.rows() == v.rows(), "attention: k and v row counts differ");
  detail::require(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  detail::require(pattern.queries() == static_cast<std::size_t>(q.rows()), "attention: pattern/query mismatch");
  for (auto key : pattern.keys) detail::require(key < static_cast<std::uint32_t>(k.rows()), "attention: key out of range");

  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const auto nq = static_cast<std::size_t>(Q.rows());
  // probs[offsets[i] * heads + h * n_i + j]
  std::vector<S> probs(pattern.keys.size() * static_cast<std::size_t>(heads));
  Matrix<S> out = Matrix<S>::Zero(Q.rows(), d);
  std::vector<S> scores;
  for (std::size_t i = 0; i < nq; ++i) {
    const auto begin = pattern.offsets[i];
    const auto n = pattern.offsets[i + 1] - begin;
    if (n == 0) continue;
    scores.resize(n);
    for (int h = 0; h < heads; ++h) {
      const S* qi = Q.data() + static_cast<Eigen::Index>(i) * d + h * dh;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::uint32_t j = 0; j < n; ++j) {
        const S* kj = K.data() + static_cast<Eigen::Index>(pattern.keys[begin + j]) * d + h * dh;
        S s = 0;
        for (Eigen::Index c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      S z = 0;
      for (std::uint32_t j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      S* p = probs.data() + static_cast<std::size_t>(begin) * heads + static_cast<std::size_t>(h) * n;
      S* oi = out.data() + static_cast<Eigen::Index>(i) * d + h * dh;
      for (std::uint32_t j = 0; j < n; ++j) {
        p[j] = scores[j] / z;
        const S* vj = V.data() + static_cast<Eigen::Index>(pattern.keys[begin + j]) * d + h * dh;
        for (Eigen::Index c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  if (probe) {
    probe->heads = heads;
    probe->weights.assign(nq * static_cast<std::size_t>(heads), {});
    for (std::size_t i = 0; i < nq; ++i) {
      const auto begin = pattern.offsets[i];
      const auto n = pattern.offsets[i + 1] - begin;
      for (int h = 0; h < heads; ++h) {
        const S* p = probs.data() + static_cast<std::size_t>(begin) * heads + static_cast<std::size_t>(h) * n;
        probe->weights[i * heads + h].assign(p, p + n);
      }
    }
  }
  return q.tape()->record(
      std::move(out), {q, k, v}, [q, k, v, heads, dh, scale, pattern, probs = std::move(probs)](Tape<S>& tp) {
        const auto d = q.cols();
        const auto& G = tp.upstream();
        const auto& Q = q.value();
        const auto& K = k.value();
        const auto& V = v.value();
        const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
        S* dQ = gq ? tp.grad(q).data() : nullptr;
        S* dK = gk ? tp.grad(k).data() : nullptr;
        S* dV = gv ? tp.grad(v).data() : nullptr;
        std::vector<S> dp;
        for (std::size_t i = 0; i < pattern.queries(); ++i) {
          const auto begin = pattern.offsets[i];
          const auto n = pattern.offsets[i + 1] - begin;
          if (n == 0) continue;
          dp.resize(n);
          for (int h = 0; h < heads; ++h) {
            const S* p = probs.data() + static_cast<std::size_t>(begin) * heads + static_cast<std::size_t>(h) * n;
            const S* gi = G.data() + static_cast<Eigen::Index>(i) * d + h * dh;
            const S* qi = Q.data() + static_cast<Eigen::Index>(i) * d + h * dh;
            S dot = 0;
            for (std::uint32_t j = 0; j < n; ++j) {
              const auto row = static_cast<Eigen::Index>(pattern.keys[begin + j]) * d + h * dh;
              const S* vj = V.data() + row;
              S s = 0;
              for (Eigen::Index c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += p[j] * s;
              if (dV) {
                S* dvj = dV + row;
                for (Eigen::Index c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
              }
            }
            for (std::uint32_t j = 0; j < n; ++j) {
              const S ds = p[j] * (dp[j] - dot) * scale;
              const auto row = static_cast<Eigen::Index>(pattern.keys[begin + j]) * d + h * dh;
              if (dQ) {
                S* dqi = dQ + static_cast<Eigen::Index>(i) * d + h * dh;
                const S* kj = K.data() + row;
                for (Eigen::Index c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              }
              if (dK) {
                S* dkj = dK + row;
                for (Eigen::Index c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

}  // namespace miat::ad
