#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "enrt/common.hpp"

namespace enrt::ad {

using Matrix = Eigen::MatrixXd;

// Handle into a Tape. Valid only for the tape that produced it.
struct Tensor {
  int id = -1;
};

// Define-by-run reverse-mode tape over rank<=2 binary64 tensors. A tape is
// built per minibatch, swept backward once, then discarded. A second
// backward() on the same tape is rejected.
//
// Leaves come in four flavors: owned or borrowed storage, each either
// differentiable or constant. Borrowed leaves never copy their matrix; the
// caller keeps it alive for the tape's lifetime. Adjoints are only
// propagated into subgraphs that reach a differentiable leaf.
class Tape {
 public:
  Tensor leaf(Matrix v) { return push_leaf(std::move(v), nullptr, true); }

  Tensor leaf(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return push_leaf(std::move(m), nullptr, true);
  }

  Tensor constant(Matrix v) { return push_leaf(std::move(v), nullptr, false); }

  Tensor leaf_view(const Matrix& v) { return push_leaf(Matrix(), &v, true); }

  Tensor constant_view(const Matrix& v) { return push_leaf(Matrix(), &v, false); }

  Tensor matmul(Tensor a, Tensor b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.cols() != B.rows())
      throw ShapeMismatch("matmul: " + shape_str(a) + " x " + shape_str(b));
    return push(Op::kMatMul, a, b, A * B);
  }

  // Same-shape add, row-broadcast (m x n) + (1 x n), or scalar broadcast.
  Tensor add(Tensor a, Tensor b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.rows() == B.rows() && A.cols() == B.cols())
      return push(Op::kAdd, a, b, A + B);
    if (B.rows() == 1 && B.cols() == A.cols())
      return push(Op::kAddRow, a, b, A.rowwise() + B.row(0));
    if (B.rows() == 1 && B.cols() == 1)
      return push(Op::kAddScalar, a, b, A.array() + B(0, 0));
    throw ShapeMismatch("add: " + shape_str(a) + " + " + shape_str(b));
  }

  Tensor sub(Tensor a, Tensor b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw ShapeMismatch("sub: " + shape_str(a) + " - " + shape_str(b));
    return push(Op::kSub, a, b, A - B);
  }

  Tensor mul(Tensor a, Tensor b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw ShapeMismatch("mul: " + shape_str(a) + " * " + shape_str(b));
    return push(Op::kMul, a, b, A.cwiseProduct(B));
  }

  Tensor scalar_mul(Tensor a, double c) {
    Tensor t = push(Op::kScalarMul, a, Tensor{}, val(a) * c);
    nodes_[static_cast<std::size_t>(t.id)].c = c;
    return t;
  }

  Tensor sigmoid(Tensor a) {
    Matrix out = val(a).unaryExpr([](double x) { return stable_sigmoid(x); });
    return push(Op::kSigmoid, a, Tensor{}, std::move(out));
  }

  Tensor tanh(Tensor a) {
    Matrix out = val(a).array().tanh();
    return push(Op::kTanh, a, Tensor{}, std::move(out));
  }

  Tensor relu(Tensor a) {
    Matrix out = val(a).cwiseMax(0.0);
    return push(Op::kRelu, a, Tensor{}, std::move(out));
  }

  Tensor abs(Tensor a) {
    Matrix out = val(a).cwiseAbs();
    return push(Op::kAbs, a, Tensor{}, std::move(out));
  }

  Tensor square(Tensor a) {
    const Matrix& A = val(a);
    return push(Op::kSquare, a, Tensor{}, A.cwiseProduct(A));
  }

  // Column-wise concatenation of equal-height blocks.
  Tensor concat(Tensor a, Tensor b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    if (A.rows() != B.rows())
      throw ShapeMismatch("concat: " + shape_str(a) + " | " + shape_str(b));
    Matrix out(A.rows(), A.cols() + B.cols());
    out << A, B;
    return push(Op::kConcat, a, b, std::move(out));
  }

  Tensor slice(Tensor a, int col0, int ncols) {
    const Matrix& A = val(a);
    if (col0 < 0 || ncols < 0 || col0 + ncols > A.cols())
      throw ShapeMismatch("slice: out of range on " + shape_str(a));
    Tensor t = push(Op::kSlice, a, Tensor{}, A.middleCols(col0, ncols));
    nodes_[static_cast<std::size_t>(t.id)].i0 = col0;
    nodes_[static_cast<std::size_t>(t.id)].i1 = ncols;
    return t;
  }

  Tensor sum(Tensor a) {
    Matrix out(1, 1);
    out(0, 0) = val(a).sum();
    return push(Op::kSum, a, Tensor{}, std::move(out));
  }

  Tensor mean(Tensor a) {
    Matrix out(1, 1);
    out(0, 0) = val(a).mean();
    return push(Op::kMean, a, Tensor{}, std::move(out));
  }

  // Row-major flatten to 1 x (rows*cols); the adjoint restores the shape.
  Tensor reshape_row(Tensor a) {
    const Matrix& A = val(a);
    Matrix out(1, A.rows() * A.cols());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < A.cols(); ++j) out(0, k++) = A(i, j);
    Tensor t = push(Op::kReshapeRow, a, Tensor{}, std::move(out));
    nodes_[static_cast<std::size_t>(t.id)].i0 = static_cast<int>(A.rows());
    nodes_[static_cast<std::size_t>(t.id)].i1 = static_cast<int>(A.cols());
    return t;
  }

  const Matrix& val(Tensor t) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(t.id));
    return n.ext ? *n.ext : n.val;
  }

  double scalar(Tensor t) const {
    const Matrix& m = val(t);
    if (m.rows() != 1 || m.cols() != 1) throw NonScalarOutput("scalar() on " + shape_str(t));
    return m(0, 0);
  }

  // Reverse sweep from a scalar output. Leaves unreachable from it keep a
  // zero gradient. Visits each reachable node once and skips subgraphs with
  // no differentiable leaf below them.
  void backward(Tensor out) {
    const Matrix& o = val(out);
    if (o.rows() != 1 || o.cols() != 1)
      throw NonScalarOutput("backward requires a 1x1 output, got " + shape_str(out));
    if (swept_) throw std::logic_error("backward already run on this tape");
    swept_ = true;

    grads_.assign(nodes_.size(), Matrix());
    grads_[static_cast<std::size_t>(out.id)] = Matrix::Ones(1, 1);

    for (int i = out.id; i >= 0; --i) {
      auto iu = static_cast<std::size_t>(i);
      if (grads_[iu].size() == 0) continue;
      const Node& n = nodes_[iu];
      const Matrix& g = grads_[iu];
      const bool need_a = n.a >= 0 && nodes_[static_cast<std::size_t>(n.a)].needs;
      const bool need_b = n.b >= 0 && nodes_[static_cast<std::size_t>(n.b)].needs;
      switch (n.op) {
        case Op::kLeaf:
          break;
        case Op::kMatMul:
          if (need_a) acc(n.a, g * value_of(n.b).transpose());
          if (need_b) acc(n.b, value_of(n.a).transpose() * g);
          break;
        case Op::kAdd:
          if (need_a) acc(n.a, g);
          if (need_b) acc(n.b, g);
          break;
        case Op::kAddRow:
          if (need_a) acc(n.a, g);
          if (need_b) acc(n.b, g.colwise().sum());
          break;
        case Op::kAddScalar: {
          if (need_a) acc(n.a, g);
          if (need_b) {
            Matrix s(1, 1);
            s(0, 0) = g.sum();
            acc(n.b, std::move(s));
          }
          break;
        }
        case Op::kSub:
          if (need_a) acc(n.a, g);
          if (need_b) acc(n.b, -g);
          break;
        case Op::kMul:
          if (need_a) acc(n.a, g.cwiseProduct(value_of(n.b)));
          if (need_b) acc(n.b, g.cwiseProduct(value_of(n.a)));
          break;
        case Op::kScalarMul:
          if (need_a) acc(n.a, g * n.c);
          break;
        case Op::kSigmoid:
          if (need_a) {
            const Matrix& s = n.val;
            acc(n.a, (g.array() * s.array() * (1.0 - s.array())).matrix());
          }
          break;
        case Op::kTanh:
          if (need_a) {
            const Matrix& s = n.val;
            acc(n.a, (g.array() * (1.0 - s.array() * s.array())).matrix());
          }
          break;
        case Op::kRelu:
          if (need_a)
            acc(n.a, (g.array() * (value_of(n.a).array() > 0.0).cast<double>()).matrix());
          break;
        case Op::kAbs:
          if (need_a) {
            Matrix sign = value_of(n.a).unaryExpr(
                [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
            acc(n.a, g.cwiseProduct(sign));
          }
          break;
        case Op::kSquare:
          if (need_a) acc(n.a, 2.0 * g.cwiseProduct(value_of(n.a)));
          break;
        case Op::kConcat: {
          Eigen::Index ca = value_of(n.a).cols();
          if (need_a) acc(n.a, g.leftCols(ca));
          if (need_b) acc(n.b, g.rightCols(g.cols() - ca));
          break;
        }
        case Op::kSlice:
          if (need_a) {
            Matrix ga = Matrix::Zero(value_of(n.a).rows(), value_of(n.a).cols());
            ga.middleCols(n.i0, n.i1) = g;
            acc(n.a, std::move(ga));
          }
          break;
        case Op::kSum:
          if (need_a)
            acc(n.a,
                Matrix::Constant(value_of(n.a).rows(), value_of(n.a).cols(), g(0, 0)));
          break;
        case Op::kMean:
          if (need_a) {
            double scale = g(0, 0) / static_cast<double>(value_of(n.a).size());
            acc(n.a, Matrix::Constant(value_of(n.a).rows(), value_of(n.a).cols(), scale));
          }
          break;
        case Op::kReshapeRow:
          if (need_a) {
            Matrix ga(n.i0, n.i1);
            Eigen::Index k = 0;
            for (int r = 0; r < n.i0; ++r)
              for (int c2 = 0; c2 < n.i1; ++c2) ga(r, c2) = g(0, k++);
            acc(n.a, std::move(ga));
          }
          break;
      }
    }
  }

  // Gradient of the swept output with respect to any tensor (zero matrix if
  // unreachable or constant).
  Matrix grad(Tensor t) const {
    if (!swept_) throw std::logic_error("grad() before backward()");
    const Matrix& g = grads_.at(static_cast<std::size_t>(t.id));
    if (g.size() == 0) {
      const Matrix& v = val(t);
      return Matrix::Zero(v.rows(), v.cols());
    }
    return g;
  }

  // Moves the gradient out of the tape; the cheap variant for optimizer
  // loops that discard the tape right after.
  Matrix take_grad(Tensor t) {
    if (!swept_) throw std::logic_error("take_grad() before backward()");
    Matrix& g = grads_.at(static_cast<std::size_t>(t.id));
    if (g.size() == 0) {
      const Matrix& v = val(t);
      return Matrix::Zero(v.rows(), v.cols());
    }
    return std::move(g);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kLeaf, kMatMul, kAdd, kAddRow, kAddScalar, kSub, kMul, kScalarMul,
    kSigmoid, kTanh, kRelu, kAbs, kSquare, kConcat, kSlice, kSum, kMean,
    kReshapeRow,
  };

  struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1;
    double c = 0.0;
    int i0 = 0, i1 = 0;
    bool needs = false;  // a differentiable leaf is reachable below
    Matrix val;
    const Matrix* ext = nullptr;
  };

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  const Matrix& value_of(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ext ? *n.ext : n.val;
  }

  Tensor push_leaf(Matrix v, const Matrix* ext, bool differentiable) {
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(v);
    n.ext = ext;
    n.needs = differentiable;
    nodes_.push_back(std::move(n));
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor push(Op op, Tensor a, Tensor b, Matrix v) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.val = std::move(v);
    n.needs = (a.id >= 0 && nodes_[static_cast<std::size_t>(a.id)].needs) ||
              (b.id >= 0 && nodes_[static_cast<std::size_t>(b.id)].needs);
    nodes_.push_back(std::move(n));
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  void acc(int id, Matrix&& g) {
    auto iu = static_cast<std::size_t>(id);
    if (grads_[iu].size() == 0)
      grads_[iu] = std::move(g);
    else
      grads_[iu] += g;
  }

  template <typename Expr>
  void acc(int id, const Expr& g) {
    auto iu = static_cast<std::size_t>(id);
    if (grads_[iu].size() == 0)
      grads_[iu] = g;
    else
      grads_[iu] += g;
  }

  std::string shape_str(Tensor t) const {
    const Matrix& m = val(t);
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
  }

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  bool swept_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m, v;
  long t = 0;

  void init_like(const std::vector<Matrix>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.push_back(Matrix::Zero(p.rows(), p.cols()));
      v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    t = 0;
  }
};

// Bias-corrected Adam update, in place and allocation-free.
inline void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
                      AdamState& st, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeMismatch("adam_step: parameter/gradient/state count mismatch");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols())
      throw ShapeMismatch("adam_step: shape mismatch at parameter " + std::to_string(i));
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grads[i];
    st.v[i].array() =
        cfg.beta2 * st.v[i].array() + (1.0 - cfg.beta2) * grads[i].array().square();
    params[i].array() -=
        cfg.lr * (st.m[i].array() / bc1) / ((st.v[i].array() / bc2).sqrt() + cfg.eps);
  }
}

}  // namespace enrt::ad
