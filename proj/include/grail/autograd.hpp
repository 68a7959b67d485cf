#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every operation records a closure on a tape rooted at its
// result; `Var::backward()` walks the tape in reverse topological order.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace grail {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

namespace ad {

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    grad += g;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  /// Gradient accumulated by the last backward(); zeros if never touched.
  Mat grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  /// Seeds d(this)/d(this) = 1 for a 1x1 result and propagates.
  void backward() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward);
};

Var constant(Mat value);
Var parameter(Mat value);
Var scalar(double v);

/// Builds a result node; the closure receives the result node and pushes its
/// grad into parents. Skipped entirely when no parent needs a gradient.
Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var matmul(const Mat& a, const Var& b);
Var matmul(const SpMat& a, const Var& b);
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_const(const Var& a, const Mat& c);
/// a + bias, bias is 1 x cols broadcast over rows.
Var add_row(const Var& a, const Var& bias);
Var detach(const Var& a);

Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);

// Row-wise
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

// Structural
Var gather_rows(const Var& table, std::span<const int> index);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
/// out(i) = a(i, index[i]) as a column.
Var pick(const Var& a, std::span<const int> index);

// Reductions (1x1 results)
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_squares(const Var& a);
Var mean_squares(const Var& a);

/// Mean over rows of -log softmax(logits)[row, target].
Var cross_entropy(const Var& logits, std::span<const int> targets);

/// Mean binary cross-entropy of probabilities against a 0/1 matrix over
/// off-diagonal entries; probabilities are clamped to [1e-7, 1 - 1e-7].
Var bce_offdiag(const Var& prob, const Mat& target);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace ad
}  // namespace grail
