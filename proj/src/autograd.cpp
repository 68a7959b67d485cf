#include "grail/autograd.hpp"

#include "grail/errors.hpp"

#include <cmath>
#include <unordered_set>

namespace grail::ad {

namespace {

thread_local bool g_grad_enabled = true;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

bool needs(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

std::string shape(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Mat Var::grad() const {
  if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  require(rows() == 1 && cols() == 1, "item() on a non-scalar " + shape(value()));
  return node_->value(0, 0);
}

void Var::zero_grad() { node_->grad.resize(0, 0); }

void Var::backward() const {
  require(rows() == 1 && cols() == 1, "backward() needs a scalar, got " + shape(value()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior grads are released so repeated backward passes over shared
  // parameters stay additive only at the leaves.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

Var constant(Mat value) { return Var(std::move(value), false); }
Var parameter(Mat value) { return Var(std::move(value), true); }
Var scalar(double v) { return Var(Mat::Constant(1, 1, v), false); }

Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any && g_grad_enabled) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var matmul(const Var& a, const Var& b) {
  require_dims(a.cols() == b.rows(),
               "matmul " + shape(a.value()) + " * " + shape(b.value()));
  Mat out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (needs(self, 0)) pa.accumulate_expr(self.grad * pb.value.transpose());
    if (needs(self, 1)) pb.accumulate_expr(pa.value.transpose() * self.grad);
  });
}

Var matmul(const Mat& a, const Var& b) {
  require_dims(a.cols() == b.rows(), "matmul " + shape(a) + " * " + shape(b.value()));
  Mat out = a * b.value();
  Mat at = a.transpose();
  return make_op(std::move(out), {b}, [at = std::move(at)](Node& self) {
    parent(self, 0).accumulate_expr(at * self.grad);
  });
}

Var matmul(const SpMat& a, const Var& b) {
  require_dims(a.cols() == b.rows(), "sparse matmul " + std::to_string(a.rows()) + "x" +
                                         std::to_string(a.cols()) + " * " + shape(b.value()));
  Mat out = a * b.value();
  SpMat at = a.transpose();
  return make_op(std::move(out), {b}, [at = std::move(at)](Node& self) {
    parent(self, 0).accumulate_expr(at * self.grad);
  });
}

Var transpose(const Var& a) {
  Mat out = a.value().transpose();
  return make_op(std::move(out), {a}, [](Node& self) {
    parent(self, 0).accumulate_expr(self.grad.transpose());
  });
}

namespace {
void check_same(const Var& a, const Var& b, const char* op) {
  require_dims(a.rows() == b.rows() && a.cols() == b.cols(),
               std::string(op) + " " + shape(a.value()) + " vs " + shape(b.value()));
}
}  // namespace

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) parent(self, 0).accumulate(self.grad);
    if (needs(self, 1)) parent(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) parent(self, 0).accumulate(self.grad);
    if (needs(self, 1)) parent(self, 1).accumulate_expr(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (needs(self, 0)) pa.accumulate_expr(self.grad.cwiseProduct(pb.value));
    if (needs(self, 1)) pb.accumulate_expr(self.grad.cwiseProduct(pa.value));
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& self) {
    parent(self, 0).accumulate_expr(self.grad * s);
  });
}

Var add_const(const Var& a, const Mat& c) {
  require_dims(a.rows() == c.rows() && a.cols() == c.cols(), "add_const shape");
  return make_op(a.value() + c, {a}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

Var add_row(const Var& a, const Var& bias) {
  require_dims(bias.rows() == 1 && bias.cols() == a.cols(),
               "add_row " + shape(a.value()) + " + " + shape(bias.value()));
  Mat out = a.value().rowwise() + bias.value().row(0);
  return make_op(std::move(out), {a, bias}, [](Node& self) {
    if (needs(self, 0)) parent(self, 0).accumulate(self.grad);
    if (needs(self, 1)) parent(self, 1).accumulate_expr(self.grad.colwise().sum());
  });
}

Var detach(const Var& a) { return constant(a.value()); }

Var relu(const Var& a) {
  return make_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate_expr((p.value.array() > 0.0).cast<double>().matrix().cwiseProduct(self.grad));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return make_op(std::move(out), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    Mat d = p.value.unaryExpr([](double x) {
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    p.accumulate_expr(d.cwiseProduct(self.grad));
  });
}

Var sigmoid(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make_op(std::move(out), {a}, [](Node& self) {
    const Mat& y = self.value;
    parent(self, 0).accumulate_expr(
        (y.array() * (1.0 - y.array()) * self.grad.array()).matrix());
  });
}

Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  return make_op(std::move(out), {a}, [](Node& self) {
    const Mat& y = self.value;
    parent(self, 0).accumulate_expr(((1.0 - y.array().square()) * self.grad.array()).matrix());
  });
}

Var exp(const Var& a) {
  Mat out = a.value().array().exp().matrix();
  return make_op(std::move(out), {a}, [](Node& self) {
    parent(self, 0).accumulate_expr(self.value.cwiseProduct(self.grad));
  });
}

namespace {
Mat softmax_value(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}
}  // namespace

Var softmax_rows(const Var& a) {
  return make_op(softmax_value(a.value()), {a}, [](Node& self) {
    const Mat& y = self.value;
    Eigen::VectorXd dots = (self.grad.cwiseProduct(y)).rowwise().sum();
    Mat g = y.cwiseProduct(self.grad - dots.replicate(1, y.cols()));
    parent(self, 0).accumulate(g);
  });
}

Var log_softmax_rows(const Var& a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return make_op(std::move(out), {a}, [](Node& self) {
    Mat p = self.value.array().exp().matrix();
    Eigen::VectorXd gs = self.grad.rowwise().sum();
    Mat g = self.grad - p.cwiseProduct(gs.replicate(1, p.cols()));
    parent(self, 0).accumulate(g);
  });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  require_dims(gamma.cols() == n && beta.cols() == n, "layer_norm width");
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make_op(std::move(out), {a, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Mat& g = self.grad;
                   Node& pg = parent(self, 1);
                   if (needs(self, 0)) {
                     const double nn = static_cast<double>(g.cols());
                     Mat dxhat = (g.array().rowwise() * pg.value.row(0).array()).matrix();
                     Mat dx(g.rows(), g.cols());
                     for (Eigen::Index i = 0; i < g.rows(); ++i) {
                       const double s1 = dxhat.row(i).sum();
                       const double s2 = dxhat.row(i).dot(xhat.row(i));
                       dx.row(i) = (inv_std(i) / nn) *
                                   (nn * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
                     }
                     parent(self, 0).accumulate(dx);
                   }
                   if (needs(self, 1)) pg.accumulate_expr(g.cwiseProduct(xhat).colwise().sum());
                   if (needs(self, 2)) parent(self, 2).accumulate_expr(g.colwise().sum());
                 });
}

Var gather_rows(const Var& table, std::span<const int> index) {
  const Mat& t = table.value();
  Mat out(static_cast<Eigen::Index>(index.size()), t.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < t.rows(),
            "gather_rows index " + std::to_string(index[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_op(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    Node& p = parent(self, 0);
    if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      p.grad.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require_dims(start >= 0 && start + count <= a.cols(), "slice_cols range");
  Mat out = a.value().middleCols(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& self) {
    Node& p = parent(self, 0);
    if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    p.grad.middleCols(start, count) += self.grad;
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require_dims(start >= 0 && start + count <= a.rows(), "slice_rows range");
  Mat out = a.value().middleRows(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& self) {
    Node& p = parent(self, 0);
    if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    p.grad.middleRows(start, count) += self.grad;
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require_dims(p.rows() == parts[0].rows(), "concat_cols row mismatch");
    cols += p.cols();
  }
  Mat out(parts[0].rows(), cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_op(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = parent(self, i);
      if (!p.requires_grad) continue;
      p.accumulate_expr(self.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require_dims(p.cols() == parts[0].cols(), "concat_rows col mismatch");
    rows += p.rows();
  }
  Mat out(rows, parts[0].cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_op(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = parent(self, i);
      if (!p.requires_grad) continue;
      p.accumulate_expr(self.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

Var pick(const Var& a, std::span<const int> index) {
  require_dims(static_cast<Eigen::Index>(index.size()) == a.rows(), "pick length");
  Mat out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    require(index[i] >= 0 && index[i] < a.cols(), "pick index out of range");
    out(i, 0) = a.value()(i, index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_op(std::move(out), {a}, [idx = std::move(idx)](Node& self) {
    Node& p = parent(self, 0);
    if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      p.grad(static_cast<Eigen::Index>(i), idx[i]) += self.grad(static_cast<Eigen::Index>(i), 0);
    }
  });
}

Var sum(const Var& a) {
  return make_op(Mat::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate_expr(Mat::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_op(Mat::Constant(1, 1, a.value().sum() / n), {a}, [n](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate_expr(Mat::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0) / n));
  });
}

Var sum_squares(const Var& a) {
  return make_op(Mat::Constant(1, 1, a.value().squaredNorm()), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate_expr(p.value * (2.0 * self.grad(0, 0)));
  });
}

Var mean_squares(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_op(Mat::Constant(1, 1, a.value().squaredNorm() / n), {a}, [n](Node& self) {
    Node& p = parent(self, 0);
    p.accumulate_expr(p.value * (2.0 * self.grad(0, 0) / n));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const Mat& x = logits.value();
  require_dims(static_cast<Eigen::Index>(targets.size()) == x.rows(), "cross_entropy length");
  require(x.rows() > 0, "cross_entropy over zero rows");
  Mat prob = softmax_value(x);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int t = targets[i];
    require(t >= 0 && t < x.cols(), "cross_entropy target out of range");
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    loss += lse - x(i, t);
  }
  const double n = static_cast<double>(x.rows());
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_op(Mat::Constant(1, 1, loss / n), {logits},
                 [prob = std::move(prob), tgt = std::move(tgt), n](Node& self) {
                   Mat g = prob;
                   for (std::size_t i = 0; i < tgt.size(); ++i) {
                     g(static_cast<Eigen::Index>(i), tgt[i]) -= 1.0;
                   }
                   parent(self, 0).accumulate_expr(g * (self.grad(0, 0) / n));
                 });
}

Var bce_offdiag(const Var& prob, const Mat& target) {
  const Mat& p = prob.value();
  require_dims(p.rows() == p.cols() && target.rows() == p.rows() && target.cols() == p.cols(),
               "bce_offdiag expects matching square matrices");
  constexpr double lo = 1e-7;
  constexpr double hi = 1.0 - 1e-7;
  const Eigen::Index n = p.rows();
  const double count = static_cast<double>(n * (n - 1));
  if (n < 2) return make_op(Mat::Zero(1, 1), {prob}, [](Node&) {});
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = std::clamp(p(i, j), lo, hi);
      loss -= target(i, j) * std::log(q) + (1.0 - target(i, j)) * std::log(1.0 - q);
    }
  }
  return make_op(Mat::Constant(1, 1, loss / count), {prob}, [target, count](Node& self) {
    Node& pp = parent(self, 0);
    const Mat& pv = pp.value;
    Mat g = Mat::Zero(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < pv.rows(); ++i) {
      for (Eigen::Index j = 0; j < pv.cols(); ++j) {
        const double q = pv(i, j);
        if (i == j || q < lo || q > hi) continue;
        g(i, j) = (-target(i, j) / q + (1.0 - target(i, j)) / (1.0 - q)) / count;
      }
    }
    pp.accumulate_expr(g * self.grad(0, 0));
  });
}

}  // namespace grail::ad
