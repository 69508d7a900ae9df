#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mmt/common.hpp"

namespace mmt {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Allowed-attention mask: true where a query row may attend to a key column.
using AttentionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
};

/// Named parameters in insertion order. Indices are stable, so layers keep
/// plain indices and the store stays copyable.
template <typename Scalar>
class ParamStore {
 public:
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back({name, Matrix<Scalar>::Zero(rows, cols), Matrix<Scalar>::Zero(rows, cols)});
    return params_.size() - 1;
  }

  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw NotFoundError("no parameter named '" + name + "'");
    return params_[it->second];
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t n_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Reverse-mode tape over dense row-major matrices. Every op records its
/// value eagerly; backward() replays the recorded adjoints in reverse and
/// accumulates into Parameter::grad. A tape built with record = false only
/// evaluates.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  struct Var {
    int index = -1;
  };

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  const Mat& value(Var v) const {
    const auto& n = nodes_[v.index];
    return n.external ? *n.external : n.value;
  }

  Var constant(Mat m) { return push(std::move(m), nullptr); }

  Var param(Parameter<Scalar>& p) {
    Node n;
    n.external = &p.value;
    n.param = record_ ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Var param(const Parameter<Scalar>& p) {
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
    Mat out = A * B;
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g * value(b).transpose());
      if (needs(b)) accumulate(b, value(a).transpose() * g);
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
    Mat out = A * B.transpose();
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g * value(b));
      if (needs(b)) accumulate(b, g.transpose() * value(a));
    });
  }

  Var add(Var a, Var b) {
    require_same(a, b, "add");
    Mat out = value(a) + value(b);
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
  }

  /// a + broadcast(row) with row of shape 1 x cols(a).
  Var add_row(Var a, Var row) {
    const Mat& A = value(a);
    const Mat& R = value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeError("add_row: row shape mismatch");
    Mat out = A.rowwise() + R.row(0);
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g);
      if (needs(row)) accumulate(row, g.colwise().sum());
    });
  }

  Var affine(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

  Var hadamard(Var a, Var b) {
    require_same(a, b, "hadamard");
    Mat out = value(a).cwiseProduct(value(b));
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g.cwiseProduct(value(b)));
      if (needs(b)) accumulate(b, g.cwiseProduct(value(a)));
    });
  }

  Var scale(Var a, Scalar s) {
    Mat out = value(a) * s;
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g * s);
    });
  }

  Var relu(Var a) {
    Mat out = value(a).cwiseMax(Scalar(0));
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, (value(a).array() > Scalar(0)).select(g.array(), Scalar(0)).matrix());
    });
  }

  Var sigmoid(Var a) {
    Mat out = value(a).unaryExpr([](Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); });
    const int self = next_index();
    return push(std::move(out), [=, this](const Mat& g) {
      if (!needs(a)) return;
      const Mat& y = nodes_[self].value;
      accumulate(a, g.cwiseProduct(y.cwiseProduct((Scalar(1) - y.array()).matrix())));
    });
  }

  /// Row-wise layer normalization with gain and bias rows (1 x cols).
  Var layer_norm(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5)) {
    const Mat& X = value(x);
    const auto d = static_cast<Scalar>(X.cols());
    Mat xhat(X.rows(), X.cols());
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const Scalar mu = X.row(r).sum() / d;
      const Scalar var = (X.row(r).array() - mu).square().sum() / d;
      inv_std[r] = Scalar(1) / std::sqrt(var + eps);
      xhat.row(r) = (X.row(r).array() - mu) * inv_std[r];
    }
    Mat out = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    out.rowwise() += value(bias).row(0);
    return push(std::move(out), [=, this, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Mat& g) {
      if (needs(gain)) accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
      if (needs(bias)) accumulate(bias, g.colwise().sum());
      if (!needs(x)) return;
      Mat dxhat = (g.array().rowwise() * value(gain).row(0).array()).matrix();
      Mat dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const Scalar m1 = dxhat.row(r).sum() / d;
        const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / d;
        dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      accumulate(x, dx);
    });
  }

  /// Row-wise softmax restricted to allowed entries; disallowed entries get
  /// probability exactly zero. Every row needs at least one allowed entry.
  Var masked_softmax(Var scores, const AttentionMask& allowed) {
    const Mat& S = value(scores);
    if (allowed.rows() != S.rows() || allowed.cols() != S.cols()) {
      throw ShapeError("masked_softmax: mask shape mismatch");
    }
    Mat P = Mat::Zero(S.rows(), S.cols());
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index c = 0; c < S.cols(); ++c) {
        if (allowed(r, c)) mx = std::max(mx, S(r, c));
      }
      if (!std::isfinite(mx)) throw Error("masked_softmax: row with no allowed entries");
      Scalar total = 0;
      for (Eigen::Index c = 0; c < S.cols(); ++c) {
        if (allowed(r, c)) total += (P(r, c) = std::exp(S(r, c) - mx));
      }
      P.row(r) /= total;
    }
    const int self = next_index();
    return push(std::move(P), [=, this](const Mat& g) {
      if (!needs(scores)) return;
      const Mat& Y = nodes_[self].value;
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = g.cwiseProduct(Y).rowwise().sum();
      Mat ds = Y.cwiseProduct((g.colwise() - dot));
      accumulate(scores, ds);
    });
  }

  Var log_softmax(Var a) {
    const Mat& A = value(a);
    Mat out(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const Scalar mx = A.row(r).maxCoeff();
      const Scalar lse = mx + std::log((A.row(r).array() - mx).exp().sum());
      out.row(r) = A.row(r).array() - lse;
    }
    const int self = next_index();
    return push(std::move(out), [=, this](const Mat& g) {
      if (!needs(a)) return;
      const Mat& Y = nodes_[self].value;
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gsum = g.rowwise().sum();
      Mat da = g - (Y.array().exp().colwise() * gsum.array()).matrix();
      accumulate(a, da);
    });
  }

  /// Inverted dropout; identity when p == 0.
  Var dropout(Var a, Scalar p, Rng& rng) {
    if (p <= Scalar(0)) return a;
    std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
    const Scalar factor = Scalar(1) / (Scalar(1) - p);
    Mat mask(value(a).rows(), value(a).cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? factor : Scalar(0);
    Mat out = value(a).cwiseProduct(mask);
    return push(std::move(out), [=, this, mask = std::move(mask)](const Mat& g) {
      if (needs(a)) accumulate(a, g.cwiseProduct(mask));
    });
  }

  Var concat_rows(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.cols()) throw ShapeError("concat_rows: column counts differ");
    Mat out(A.rows() + B.rows(), A.cols());
    out.topRows(A.rows()) = A;
    out.bottomRows(B.rows()) = B;
    const auto ra = A.rows();
    const auto rb = B.rows();
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(a)) accumulate(a, g.topRows(ra));
      if (needs(b)) accumulate(b, g.bottomRows(rb));
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const auto rows = value(parts.front()).rows();
    Eigen::Index cols = 0;
    for (auto p : parts) {
      if (value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
      cols += value(p).cols();
    }
    Mat out(rows, cols);
    Eigen::Index offset = 0;
    for (auto p : parts) {
      out.middleCols(offset, value(p).cols()) = value(p);
      offset += value(p).cols();
    }
    return push(std::move(out), [=, this](const Mat& g) {
      Eigen::Index off = 0;
      for (auto p : parts) {
        const auto c = value(p).cols();
        if (needs(p)) accumulate(p, g.middleCols(off, c));
        off += c;
      }
    });
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    const Mat& A = value(a);
    if (start < 0 || start + count > A.cols()) throw ShapeError("slice_cols: out of range");
    Mat out = A.middleCols(start, count);
    const auto rows = A.rows();
    const auto cols = A.cols();
    return push(std::move(out), [=, this](const Mat& g) {
      if (!needs(a)) return;
      Mat full = Mat::Zero(rows, cols);
      full.middleCols(start, count) = g;
      accumulate(a, full);
    });
  }

  Var gather_rows(Var table, std::span<const int> ids) {
    const Mat& T = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), T.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= T.rows()) throw Error("gather_rows: id out of range");
      out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    const auto rows = T.rows();
    return push(std::move(out), [=, this, idx = std::move(idx)](const Mat& g) {
      if (!needs(table)) return;
      Mat dt = Mat::Zero(rows, g.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      accumulate(table, dt);
    });
  }

  Var broadcast_row(Var row, Eigen::Index n) {
    const Mat& R = value(row);
    if (R.rows() != 1) throw ShapeError("broadcast_row: input must be a single row");
    Mat out = R.replicate(n, 1);
    return push(std::move(out), [=, this](const Mat& g) {
      if (needs(row)) accumulate(row, g.colwise().sum());
    });
  }

  /// Sum over non-pad rows of (1 - eps) * NLL(target) + eps * mean_v NLL(v).
  /// Returns a 1 x 1 node; divide by the token count for the mean.
  Var label_smoothed_nll(Var log_probs, std::span<const int> targets, Scalar eps, int pad_id) {
    const Mat& L = value(log_probs);
    if (static_cast<Eigen::Index>(targets.size()) != L.rows()) {
      throw ShapeError("label_smoothed_nll: one target per row required");
    }
    const auto V = static_cast<Scalar>(L.cols());
    Scalar total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == pad_id) continue;
      const auto r = static_cast<Eigen::Index>(i);
      total += -(Scalar(1) - eps) * L(r, targets[i]) - eps * L.row(r).sum() / V;
    }
    Mat out(1, 1);
    out(0, 0) = total;
    std::vector<int> t(targets.begin(), targets.end());
    const auto rows = L.rows();
    const auto cols = L.cols();
    return push(std::move(out), [=, this, t = std::move(t)](const Mat& g) {
      if (!needs(log_probs)) return;
      Mat d = Mat::Zero(rows, cols);
      const Scalar up = g(0, 0);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == pad_id) continue;
        const auto r = static_cast<Eigen::Index>(i);
        d.row(r).setConstant(-eps / V * up);
        d(r, t[i]) -= (Scalar(1) - eps) * up;
      }
      accumulate(log_probs, d);
    });
  }

  /// Runs the adjoint sweep from a 1 x 1 root.
  void backward(Var root) {
    if (!record_) throw Error("backward() on a non-recording tape");
    if (value(root).size() != 1) throw ShapeError("backward: root must be a scalar");
    nodes_[root.index].grad = Mat::Ones(1, 1);
    for (int i = root.index; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back(n.grad);
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    std::function<void(const Mat&)> back;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
  };

  int next_index() const { return static_cast<int>(nodes_.size()); }

  Var push(Mat value, std::function<void(const Mat&)> back) {
    Node n;
    n.value = std::move(value);
    if (record_) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const {
    const auto& n = nodes_[v.index];
    return n.back != nullptr || n.param != nullptr;
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    auto& n = nodes_[v.index];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void require_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError(std::string(op) + ": operand shapes differ");
    }
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace mmt
