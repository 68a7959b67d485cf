#pragma once

#include "grail/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace grail {

using Edge = std::pair<int, int>;

/// Undirected, unweighted attributed graph. Edges are stored once with
/// u < v, sorted; neighbor lists are sorted ascending.
class Graph {
 public:
  Graph() = default;
  /// Symmetrizes, deduplicates and drops self-loops. Throws on out-of-range
  /// ids, feature rows != n, or labels outside [0, classes).
  Graph(int n, std::vector<Edge> edges, Mat features,
        std::optional<std::vector<int>> labels = std::nullopt, int classes = 0);

  int node_count() const { return n_; }
  std::size_t edge_count() const { return edges_.size(); }
  Eigen::Index feature_dim() const { return features_.cols(); }
  int class_count() const { return classes_; }

  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<int>& neighbors(int v) const { return adj_[static_cast<std::size_t>(v)]; }
  bool has_edge(int u, int v) const;
  const Mat& features() const { return features_; }
  bool has_labels() const { return labels_.has_value(); }
  const std::vector<int>& labels() const;

  Mat dense_adjacency() const;
  SpMat sparse_adjacency() const;

  bool operator==(const Graph& other) const;

 private:
  int n_ = 0;
  int classes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> adj_;
  Mat features_;
  std::optional<std::vector<int>> labels_;
};

/// Induced ego-network. Row i of `adjacency` and `features` is node
/// `nodes[i]` of the parent graph; nodes are ordered by (hop, id) with the
/// center first.
struct EgoSubgraph {
  int center = 0;
  std::vector<int> nodes;
  std::vector<int> hops;
  Mat adjacency;  // p x p, 0/1, symmetric, zero diagonal
  Mat features;   // p x d

  int size() const { return static_cast<int>(nodes.size()); }
  std::size_t edge_count() const;
};

struct DomainPair {
  Graph source;
  Graph target;
};

struct ShiftConfig {
  int source_nodes = 300;
  int target_nodes = 300;
  int classes = 2;
  int feature_dim = 16;
  double source_p_in = 0.03;
  double source_p_out = 0.01;
  double target_p_in = 0.03;
  double target_p_out = 0.01;
  /// Distance of each class mean from the origin.
  double class_separation = 1.5;
  /// Per-class feature-mean shift applied to the target domain.
  double shift = 0.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
};

enum class GraphFormat { Archive, Directory };

GraphFormat parse_graph_format(const std::string& name);

/// Reads a graph container. Archive: ustar file with `header.json`, `edges`,
/// `features` and optional `labels`; Directory: the same four entries as
/// plain files.
Graph load_graph(const std::filesystem::path& path, GraphFormat format = GraphFormat::Archive);
void save_graph(const Graph& g, const std::filesystem::path& path,
                GraphFormat format = GraphFormat::Archive);

/// BFS ball of radius `hops` around `center`, downsampled hop-by-hop to at
/// most `max_nodes` (closer hops kept first, seeded uniform within a hop).
EgoSubgraph sample_ego(const Graph& g, int center, int hops, int max_nodes, std::uint64_t seed);

/// Removes floor(remove_ratio * m) existing edges and adds floor(add_ratio * m)
/// former non-edges, both seeded-uniform. Features are untouched.
EgoSubgraph perturb_edges(const EgoSubgraph& sub, double add_ratio, double remove_ratio,
                          std::uint64_t seed);

/// Two stochastic block models with shared class semantics; the target's
/// class means are displaced by `shift` along per-class random directions.
DomainPair synth_shift(const ShiftConfig& cfg);

/// Wraps a subgraph as a standalone Graph (labels dropped).
Graph to_graph(const EgoSubgraph& sub);

/// Mixes `base` and `tag` into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace grail
