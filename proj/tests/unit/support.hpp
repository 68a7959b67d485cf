#pragma once

#include "grail/autograd.hpp"
#include "grail/graph.hpp"
#include "grail/nn.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testutil {

using grail::Mat;
using grail::Rng;
namespace ad = grail::ad;

inline Mat randn(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  return grail::gaussian(r, c, rng, sd);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// normwise ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6), worst leaf
inline double grad_check(std::vector<ad::Var> leaves, const std::function<ad::Var()>& f,
                         double h = 1e-5) {
  for (auto& v : leaves) v.zero_grad();
  f().backward();
  std::vector<Mat> analytic;
  for (auto& v : leaves) analytic.push_back(v.grad());

  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    Mat& x = leaves[k].mutable_value();
    Mat numeric = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      x.data()[i] = keep + h;
      const double up = f().item();
      x.data()[i] = keep - h;
      const double down = f().item();
      x.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const double scale = std::max({analytic[k].norm(), numeric.norm(), 1e-6});
    worst = std::max(worst, (analytic[k] - numeric).norm() / scale);
  }
  return worst;
}

// random simple undirected graph with features (and labels when classes > 0)
inline grail::Graph random_graph(Rng& rng, int n, double p, int d, int classes = 0) {
  std::vector<grail::Edge> edges;
  std::bernoulli_distribution coin(p);
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v)
      if (coin(rng)) edges.emplace_back(u, v);
  Mat x = randn(n, d, rng);
  if (classes <= 0) return grail::Graph(n, std::move(edges), std::move(x));
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& l : y) l = uniform_int(rng, 0, classes - 1);
  return grail::Graph(n, std::move(edges), std::move(x), y, classes);
}

inline std::vector<int> random_permutation(Rng& rng, int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// new graph where old node v becomes perm[v]
inline grail::Graph permute_graph(const grail::Graph& g, const std::vector<int>& perm) {
  std::vector<grail::Edge> edges;
  for (auto [u, v] : g.edges()) edges.emplace_back(perm[u], perm[v]);
  Mat x(g.node_count(), g.feature_dim());
  for (int v = 0; v < g.node_count(); ++v) x.row(perm[v]) = g.features().row(v);
  return grail::Graph(g.node_count(), std::move(edges), std::move(x));
}

}  // namespace testutil
