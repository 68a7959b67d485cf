#include "support.hpp"

#include "grail/errors.hpp"
#include "grail/graph.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <queue>
#include <set>

using namespace grail;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "grail_test_graph" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

fs::path make_dir_graph(const std::string& name, const std::string& header, const std::string& edges,
                        const std::string& features, const std::string* labels = nullptr) {
  fs::path dir = scratch(name);
  fs::create_directories(dir);
  write_file(dir / "header.json", header);
  write_file(dir / "edges", edges);
  write_file(dir / "features", features);
  if (labels) write_file(dir / "labels", *labels);
  return dir;
}

std::vector<int> bfs_dist(const Graph& g, int src) {
  std::vector<int> d(static_cast<std::size_t>(g.node_count()), -1);
  std::queue<int> q;
  d[static_cast<std::size_t>(src)] = 0;
  q.push(src);
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v = 0; v < g.node_count(); ++v) {
      if (g.has_edge(u, v) && d[static_cast<std::size_t>(v)] < 0) {
        d[static_cast<std::size_t>(v)] = d[static_cast<std::size_t>(u)] + 1;
        q.push(v);
      }
    }
  }
  return d;
}

Graph path_graph(int n) {
  std::vector<Edge> e;
  for (int i = 0; i + 1 < n; ++i) e.emplace_back(i, i + 1);
  return Graph(n, e, Mat::Zero(n, 1));
}

std::set<Edge> edge_set(const EgoSubgraph& s) {
  std::set<Edge> out;
  for (int i = 0; i < s.size(); ++i)
    for (int j = i + 1; j < s.size(); ++j)
      if (s.adjacency(i, j) != 0.0) out.emplace(i, j);
  return out;
}

void check_sub_invariants(const EgoSubgraph& s) {
  REQUIRE(s.adjacency.rows() == s.size());
  CHECK(s.adjacency == s.adjacency.transpose());
  CHECK(s.adjacency.diagonal().isZero());
  for (Eigen::Index i = 0; i < s.adjacency.size(); ++i) {
    double a = s.adjacency.data()[i];
    CHECK((a == 0.0 || a == 1.0));
  }
}

}  // namespace

TEST_CASE("graph constructor normalizes edges") {
  Graph g(3, {{1, 0}, {0, 1}, {2, 2}, {2, 1}}, Mat::Zero(3, 2));
  CHECK(g.edge_count() == 2);
  CHECK(g.edges() == std::vector<Edge>{{0, 1}, {1, 2}});
  CHECK(g.has_edge(1, 0));
  CHECK_FALSE(g.has_edge(2, 2));
  Mat a = g.dense_adjacency();
  CHECK(a == a.transpose());
  CHECK(a.sum() == doctest::Approx(2.0 * g.edge_count()));
  CHECK(g.neighbors(1) == std::vector<int>{0, 2});
}

TEST_CASE("graph constructor rejects bad input") {
  CHECK_THROWS_AS(Graph(2, {{0, 2}}, Mat::Zero(2, 1)), ContractError);
  CHECK_THROWS_AS(Graph(2, {}, Mat::Zero(3, 1)), DimensionError);
  CHECK_THROWS_AS(Graph(2, {}, Mat::Zero(2, 1), std::vector<int>{0, 2}, 2), ContractError);
  Graph unlabeled(1, {}, Mat::Zero(1, 1));
  CHECK_THROWS_AS(unlabeled.labels(), ContractError);
}

TEST_CASE("load minimal directory graph") {
  auto dir = make_dir_graph("minimal", R"({"version":1,"n":2,"d":1})", "0 1\n", "1.0\n3.0\n");
  Graph g = load_graph(dir, GraphFormat::Directory);
  CHECK(g.node_count() == 2);
  CHECK(g.edge_count() == 1);
  CHECK(g.features()(1, 0) == 3.0);
  CHECK_FALSE(g.has_labels());
}

TEST_CASE("load deduplicates symmetric edge listings") {
  auto dir = make_dir_graph("dedup", R"({"version":1,"n":2,"d":1})", "0 1\n1 0\n", "1\n3\n");
  CHECK(load_graph(dir, GraphFormat::Directory).edge_count() == 1);
}

TEST_CASE("load reports the offending line") {
  auto bad_edge = make_dir_graph("bad_edge", R"({"version":1,"n":3,"d":1})", "0 1\n1 x\n", "1\n2\n3\n");
  try {
    load_graph(bad_edge, GraphFormat::Directory);
    FAIL("expected ParseError");
  } catch (const SchemaError&) {
    FAIL("expected a plain ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("edges line 2") != std::string::npos);
  }

  auto short_row = make_dir_graph("short_row", R"({"version":1,"n":2,"d":2})", "", "1 2\n3\n");
  CHECK_THROWS_AS(load_graph(short_row, GraphFormat::Directory), SchemaError);

  auto few_rows = make_dir_graph("few_rows", R"({"version":1,"n":3,"d":1})", "", "1\n2\n");
  CHECK_THROWS_AS(load_graph(few_rows, GraphFormat::Directory), SchemaError);

  auto version = make_dir_graph("version", R"({"version":9,"n":1,"d":1})", "", "1\n");
  CHECK_THROWS_AS(load_graph(version, GraphFormat::Directory), SchemaError);

  std::string labels = "0\n5\n";
  auto bad_label =
      make_dir_graph("bad_label", R"({"version":1,"n":2,"d":1,"C":2})", "", "1\n2\n", &labels);
  CHECK_THROWS_AS(load_graph(bad_label, GraphFormat::Directory), SchemaError);

  CHECK_THROWS_AS(load_graph(scratch("missing.graph")), ParseError);
  auto junk = scratch("junk.graph");
  write_file(junk, "not a tar file");
  CHECK_THROWS_AS(load_graph(junk), ParseError);
}

TEST_CASE("load a citation-sized container") {
  // row count of the ACMv9 network
  const int n = 9360;
  Rng rng(11);
  Mat x = testutil::randn(n, 3, rng);
  std::vector<Edge> e;
  for (int i = 0; i + 1 < n; i += 2) e.emplace_back(i, i + 1);
  auto path = scratch("acm.graph");
  save_graph(Graph(n, e, x), path);
  Graph g = load_graph(path);
  CHECK(g.node_count() == 9360);
  CHECK(g.edge_count() == 4680);
}

TEST_CASE("save then load is the identity") {
  Rng rng(12);
  for (int trial = 0; trial < 8; ++trial) {
    const int n = testutil::uniform_int(rng, 1, 25);
    const int classes = trial % 2 ? 3 : 0;
    Graph g = testutil::random_graph(rng, n, 0.2, testutil::uniform_int(rng, 1, 5), classes);
    for (auto fmt : {GraphFormat::Archive, GraphFormat::Directory}) {
      auto path = scratch("rt" + std::to_string(trial) + (fmt == GraphFormat::Archive ? ".graph" : ""));
      save_graph(g, path, fmt);
      CHECK(load_graph(path, fmt) == g);
    }
  }
}

TEST_CASE("graph format names") {
  CHECK(parse_graph_format("archive") == GraphFormat::Archive);
  CHECK(parse_graph_format("dir") == GraphFormat::Directory);
  CHECK_THROWS_AS(parse_graph_format("csv"), ContractError);
}

TEST_CASE("ego on a path") {
  Graph g = path_graph(5);
  EgoSubgraph s = sample_ego(g, 0, 3, 10, 0);
  CHECK(s.nodes == std::vector<int>{0, 1, 2, 3});
  CHECK(s.hops == std::vector<int>{0, 1, 2, 3});
  CHECK(s.edge_count() == 3);

  EgoSubgraph mid = sample_ego(g, 2, 1, 10, 0);
  CHECK(mid.center == 2);
  CHECK(mid.nodes == std::vector<int>{2, 1, 3});
}

TEST_CASE("radius-zero ego is the center alone") {
  Rng rng(13);
  Graph g = testutil::random_graph(rng, 12, 0.4, 2);
  EgoSubgraph s = sample_ego(g, 5, 0, 10, 1);
  CHECK(s.nodes == std::vector<int>{5});
  CHECK(s.adjacency.size() == 1);
  CHECK(s.adjacency(0, 0) == 0.0);
}

TEST_CASE("ego errors") {
  Graph g = path_graph(3);
  CHECK_THROWS_AS(sample_ego(g, 3, 1, 4, 0), std::out_of_range);
  CHECK_THROWS_AS(sample_ego(g, -1, 1, 4, 0), std::out_of_range);
  CHECK_THROWS_AS(sample_ego(g, 0, -1, 4, 0), ContractError);
  CHECK_THROWS_AS(sample_ego(g, 0, 1, 0, 0), ContractError);
}

TEST_CASE("uncapped ego equals the BFS ball") {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g = testutil::random_graph(rng, 30, 0.08, 2);
    const int center = testutil::uniform_int(rng, 0, 29);
    const int hops = testutil::uniform_int(rng, 0, 3);
    EgoSubgraph s = sample_ego(g, center, hops, 1000, trial);
    auto d = bfs_dist(g, center);
    std::set<int> want;
    for (int v = 0; v < 30; ++v)
      if (d[static_cast<std::size_t>(v)] >= 0 && d[static_cast<std::size_t>(v)] <= hops) want.insert(v);
    CHECK(std::set<int>(s.nodes.begin(), s.nodes.end()) == want);
    for (int i = 0; i < s.size(); ++i)
      CHECK(s.hops[static_cast<std::size_t>(i)] == d[static_cast<std::size_t>(s.nodes[static_cast<std::size_t>(i)])]);
  }
}

TEST_CASE("ego subgraphs are induced and canonically ordered") {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = testutil::uniform_int(rng, 2, 50);
    Graph g = testutil::random_graph(rng, n, testutil::uniform(rng, 0.02, 0.3), 3);
    const int center = testutil::uniform_int(rng, 0, n - 1);
    const int cap = testutil::uniform_int(rng, 1, 20);
    EgoSubgraph s = sample_ego(g, center, 2, cap, trial);
    check_sub_invariants(s);
    CHECK(s.size() <= cap);
    CHECK(s.nodes.front() == center);
    CHECK(s.hops.front() == 0);
    for (int i = 0; i < s.size(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      CHECK(s.features.row(i) == g.features().row(s.nodes[ui]));
      if (i > 0) {
        auto prev = std::pair{s.hops[ui - 1], s.nodes[ui - 1]};
        CHECK(prev < std::pair(s.hops[ui], s.nodes[ui]));
      }
      for (int j = 0; j < s.size(); ++j)
        CHECK((s.adjacency(i, j) != 0.0) ==
              g.has_edge(s.nodes[ui], s.nodes[static_cast<std::size_t>(j)]));
    }
  }
}

TEST_CASE("capped ego keeps closer hops first") {
  // star of 6 leaves, each leaf with 2 pendants
  std::vector<Edge> e;
  int next = 7;
  for (int leaf = 1; leaf <= 6; ++leaf) {
    e.emplace_back(0, leaf);
    e.emplace_back(leaf, next++);
    e.emplace_back(leaf, next++);
  }
  Graph g(next, e, Mat::Zero(next, 1));
  EgoSubgraph s = sample_ego(g, 0, 2, 9, 3);
  CHECK(s.size() == 9);
  int hop1 = 0;
  for (int h : s.hops) hop1 += h == 1;
  CHECK(hop1 == 6);

  EgoSubgraph partial = sample_ego(g, 0, 2, 4, 3);
  for (int h : partial.hops) CHECK(h <= 1);

  // seeded: same seed same nodes, some seed differs
  CHECK(sample_ego(g, 0, 2, 9, 3).nodes == s.nodes);
  bool differs = false;
  for (std::uint64_t seed = 0; seed < 20 && !differs; ++seed)
    differs = sample_ego(g, 0, 2, 9, seed).nodes != s.nodes;
  CHECK(differs);
}

TEST_CASE("perturb identity and full removal") {
  Rng rng(16);
  Graph g = testutil::random_graph(rng, 10, 0.4, 2);
  EgoSubgraph s = sample_ego(g, 0, 2, 10, 0);
  EgoSubgraph same = perturb_edges(s, 0.0, 0.0, 7);
  CHECK(same.adjacency == s.adjacency);
  CHECK(same.features == s.features);

  Graph tri(3, {{0, 1}, {1, 2}, {0, 2}}, Mat::Ones(3, 1));
  EgoSubgraph t = sample_ego(tri, 0, 1, 3, 0);
  CHECK(perturb_edges(t, 0.0, 1.0, 1).edge_count() == 0);
  CHECK_THROWS_AS(perturb_edges(t, 1.5, 0.0, 1), ContractError);
}

TEST_CASE("perturb changes exactly the requested counts") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    Graph g = testutil::random_graph(rng, 10, 0.35, 2);
    EgoSubgraph s = sample_ego(g, 0, 3, 10, 0);
    if (s.size() < 4) continue;
    EgoSubgraph p = perturb_edges(s, 0.2, 0.2, trial);
    check_sub_invariants(p);
    CHECK(p.features == s.features);
    const auto before = edge_set(s);
    const auto after = edge_set(p);
    std::size_t removed = 0, added = 0;
    for (auto e : before) removed += !after.count(e);
    for (auto e : after) added += !before.count(e);
    const auto m = before.size();
    const auto want = static_cast<std::size_t>(0.2 * static_cast<double>(m));
    const std::size_t pairs = static_cast<std::size_t>(s.size() * (s.size() - 1) / 2);
    CHECK(removed == want);
    CHECK(added == std::min(want, pairs - m));
  }
}

TEST_CASE("synthetic shift is deterministic") {
  ShiftConfig cfg;
  cfg.shift = 1.5;
  cfg.seed = 5;
  DomainPair a = synth_shift(cfg);
  DomainPair b = synth_shift(cfg);
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  CHECK(a.source.feature_dim() == a.target.feature_dim());
  CHECK(a.source.class_count() == a.target.class_count());
  cfg.seed = 6;
  CHECK_FALSE(synth_shift(cfg).source == a.source);
}

TEST_CASE("zero shift keeps class centroids within noise") {
  auto centroid_gap = [](const DomainPair& p, int c) {
    auto mean_of = [c](const Graph& g) {
      RowVec m = RowVec::Zero(g.feature_dim());
      int count = 0;
      for (int v = 0; v < g.node_count(); ++v)
        if (g.labels()[static_cast<std::size_t>(v)] == c) {
          m += g.features().row(v);
          ++count;
        }
      return std::pair<RowVec, int>(m / count, count);
    };
    auto [ms, ns] = mean_of(p.source);
    auto [mt, nt] = mean_of(p.target);
    const double floor = 3.0 * std::sqrt(static_cast<double>(p.source.feature_dim()) * (1.0 / ns + 1.0 / nt));
    return std::pair<double, double>((ms - mt).norm(), floor);
  };
  ShiftConfig cfg;
  cfg.seed = 21;
  DomainPair same = synth_shift(cfg);
  cfg.shift = 1.5;
  DomainPair moved = synth_shift(cfg);
  for (int c = 0; c < cfg.classes; ++c) {
    auto [gap0, floor0] = centroid_gap(same, c);
    CHECK(gap0 < floor0);
    auto [gap1, floor1] = centroid_gap(moved, c);
    CHECK(gap1 > floor1);
  }
}

TEST_CASE("to_graph wraps a subgraph") {
  Rng rng(18);
  Graph g = testutil::random_graph(rng, 15, 0.3, 2);
  EgoSubgraph s = sample_ego(g, 3, 2, 8, 0);
  Graph w = to_graph(s);
  CHECK(w.node_count() == s.size());
  CHECK(w.dense_adjacency() == s.adjacency);
  CHECK(w.features() == s.features);
}

TEST_CASE("derived seeds are distinct streams") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base = 0; base < 10; ++base)
    for (std::uint64_t tag = 0; tag < 10; ++tag) seen.insert(derive_seed(base, tag));
  CHECK(seen.size() == 100);
  CHECK(derive_seed(3, 4) == derive_seed(3, 4));
}
