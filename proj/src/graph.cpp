#include "grail/graph.hpp"

#include "grail/errors.hpp"
#include "grail/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>

namespace grail {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(base ^ mix(tag));
}

Graph::Graph(int n, std::vector<Edge> edges, Mat features, std::optional<std::vector<int>> labels,
             int classes)
    : n_(n), classes_(classes), features_(std::move(features)), labels_(std::move(labels)) {
  require(n >= 0, "negative node count");
  require_dims(features_.rows() == n, "feature rows " + std::to_string(features_.rows()) +
                                          " != node count " + std::to_string(n));
  for (auto& [u, v] : edges) {
    require(u >= 0 && u < n && v >= 0 && v < n,
            "edge (" + std::to_string(u) + "," + std::to_string(v) + ") out of range");
    if (u > v) std::swap(u, v);
  }
  std::erase_if(edges, [](const Edge& e) { return e.first == e.second; });
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);

  adj_.assign(static_cast<std::size_t>(n), {});
  for (const auto& [u, v] : edges_) {
    adj_[static_cast<std::size_t>(u)].push_back(v);
    adj_[static_cast<std::size_t>(v)].push_back(u);
  }
  for (auto& a : adj_) std::sort(a.begin(), a.end());

  if (labels_) {
    require(static_cast<int>(labels_->size()) == n, "label count != node count");
    if (classes_ == 0 && n > 0) classes_ = *std::max_element(labels_->begin(), labels_->end()) + 1;
    for (int y : *labels_) {
      require(y >= 0 && y < classes_, "label " + std::to_string(y) + " outside [0, " +
                                          std::to_string(classes_) + ")");
    }
  }
}

bool Graph::has_edge(int u, int v) const {
  const auto& a = adj_[static_cast<std::size_t>(u)];
  return std::binary_search(a.begin(), a.end(), v);
}

const std::vector<int>& Graph::labels() const {
  require(labels_.has_value(), "graph has no labels");
  return *labels_;
}

Mat Graph::dense_adjacency() const {
  Mat a = Mat::Zero(n_, n_);
  for (const auto& [u, v] : edges_) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

SpMat Graph::sparse_adjacency() const {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(edges_.size() * 2);
  for (const auto& [u, v] : edges_) {
    trip.emplace_back(u, v, 1.0);
    trip.emplace_back(v, u, 1.0);
  }
  SpMat a(n_, n_);
  a.setFromTriplets(trip.begin(), trip.end());
  return a;
}

bool Graph::operator==(const Graph& other) const {
  return n_ == other.n_ && classes_ == other.classes_ && edges_ == other.edges_ &&
         features_ == other.features_ && labels_ == other.labels_;
}

std::size_t EgoSubgraph::edge_count() const {
  std::size_t m = 0;
  for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < adjacency.cols(); ++j) m += adjacency(i, j) != 0.0;
  }
  return m;
}

Graph to_graph(const EgoSubgraph& sub) {
  std::vector<Edge> edges;
  for (Eigen::Index i = 0; i < sub.adjacency.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sub.adjacency.cols(); ++j) {
      if (sub.adjacency(i, j) != 0.0) edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  }
  return Graph(sub.size(), std::move(edges), sub.features);
}

// ---------------------------------------------------------------------------
// Container I/O

GraphFormat parse_graph_format(const std::string& name) {
  if (name == "archive" || name == "tar") return GraphFormat::Archive;
  if (name == "dir" || name == "directory") return GraphFormat::Directory;
  throw ContractError("unknown graph format '" + name + "' (expected archive or dir)");
}

namespace {

constexpr int kGraphFormatVersion = 1;

using Entries = std::map<std::string, std::string>;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Minimal POSIX ustar: regular files only, deterministic (mtime 0).
void write_tar(const std::filesystem::path& path, const Entries& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& [name, data] : entries) {
    std::array<char, 512> h{};
    std::memcpy(h.data(), name.data(), std::min<std::size_t>(name.size(), 99));
    std::snprintf(h.data() + 100, 8, "%07o", 0644);
    std::snprintf(h.data() + 108, 8, "%07o", 0);
    std::snprintf(h.data() + 116, 8, "%07o", 0);
    std::snprintf(h.data() + 124, 12, "%011llo", static_cast<unsigned long long>(data.size()));
    std::snprintf(h.data() + 136, 12, "%011o", 0);
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 6);
    std::memcpy(h.data() + 263, "00", 2);
    std::memset(h.data() + 148, ' ', 8);
    unsigned sum = 0;
    for (char c : h) sum += static_cast<unsigned char>(c);
    std::snprintf(h.data() + 148, 8, "%06o", sum);
    h[155] = ' ';
    out.write(h.data(), 512);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    const std::size_t pad = (512 - data.size() % 512) % 512;
    static const std::array<char, 512> zeros{};
    out.write(zeros.data(), static_cast<std::streamsize>(pad));
  }
  static const std::array<char, 1024> trailer{};
  out.write(trailer.data(), trailer.size());
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Entries read_tar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open graph archive");
  Entries entries;
  std::uint64_t offset = 0;
  for (;;) {
    std::array<char, 512> h{};
    if (!in.read(h.data(), 512)) {
      throw ParseError(path.string() + ": truncated archive header at offset " +
                       std::to_string(offset));
    }
    if (std::all_of(h.begin(), h.end(), [](char c) { return c == 0; })) break;
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    }
    const unsigned stored = static_cast<unsigned>(std::strtoul(h.data() + 148, nullptr, 8));
    if (sum != stored) {
      throw ParseError(path.string() + ": bad archive checksum at offset " +
                       std::to_string(offset));
    }
    std::string name(h.data(), strnlen(h.data(), 100));
    const std::string size_field(h.data() + 124, 12);
    const auto size = std::strtoull(size_field.c_str(), nullptr, 8);
    std::string data(size, '\0');
    if (!in.read(data.data(), static_cast<std::streamsize>(size))) {
      throw ParseError(path.string() + ": truncated entry '" + name + "' at offset " +
                       std::to_string(offset + 512));
    }
    const std::size_t pad = (512 - size % 512) % 512;
    in.ignore(static_cast<std::streamsize>(pad));
    offset += 512 + size + pad;
    if (h[156] == '0' || h[156] == '\0') entries[name] = std::move(data);
  }
  return entries;
}

Entries read_dir(const std::filesystem::path& dir) {
  Entries entries;
  for (const char* name : {"header.json", "edges", "features", "labels"}) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) continue;
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    entries[name] = ss.str();
  }
  return entries;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

Graph parse_entries(const Entries& entries, const std::string& where) {
  auto entry = [&](const std::string& name) -> const std::string& {
    auto it = entries.find(name);
    if (it == entries.end()) throw ParseError(where + ": missing entry '" + name + "'");
    return it->second;
  };

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(entry("header.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + ": header.json: " + e.what());
  }
  if (header.value("version", 0) != kGraphFormatVersion) {
    throw SchemaError(where + ": unsupported graph format version " +
                      std::to_string(header.value("version", 0)));
  }
  const int n = header.at("n").get<int>();
  const int d = header.at("d").get<int>();
  const int classes = header.value("C", 0);

  std::vector<Edge> edges;
  const auto edge_lines = split_lines(entry("edges"));
  for (std::size_t i = 0; i < edge_lines.size(); ++i) {
    if (blank(edge_lines[i])) continue;
    std::istringstream ls(edge_lines[i]);
    long long u = 0, v = 0;
    std::string extra;
    if (!(ls >> u >> v) || (ls >> extra)) {
      throw ParseError(where + ": edges line " + std::to_string(i + 1) +
                       ": expected two integers");
    }
    if (u < 0 || v < 0 || u >= n || v >= n) {
      throw ParseError(where + ": edges line " + std::to_string(i + 1) + ": node id out of [0, " +
                       std::to_string(n) + ")");
    }
    edges.emplace_back(static_cast<int>(u), static_cast<int>(v));
  }

  Mat features(n, d);
  int row = 0;
  const auto feat_lines = split_lines(entry("features"));
  for (std::size_t i = 0; i < feat_lines.size(); ++i) {
    if (blank(feat_lines[i])) continue;
    if (row >= n) {
      throw SchemaError(where + ": features line " + std::to_string(i + 1) +
                        ": more rows than n=" + std::to_string(n));
    }
    std::istringstream ls(feat_lines[i]);
    std::string tok;
    int col = 0;
    while (ls >> tok) {
      if (col >= d) {
        throw SchemaError(where + ": features line " + std::to_string(i + 1) +
                          ": more than d=" + std::to_string(d) + " columns");
      }
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') {
        throw ParseError(where + ": features line " + std::to_string(i + 1) + ": bad number '" +
                         tok + "'");
      }
      features(row, col++) = v;
    }
    if (col != d) {
      throw SchemaError(where + ": features line " + std::to_string(i + 1) + ": " +
                        std::to_string(col) + " columns, header says d=" + std::to_string(d));
    }
    ++row;
  }
  if (row != n) {
    throw SchemaError(where + ": features has " + std::to_string(row) + " rows, header says n=" +
                      std::to_string(n));
  }

  std::optional<std::vector<int>> labels;
  if (auto it = entries.find("labels"); it != entries.end()) {
    std::vector<int> ys;
    const auto label_lines = split_lines(it->second);
    for (std::size_t i = 0; i < label_lines.size(); ++i) {
      if (blank(label_lines[i])) continue;
      std::istringstream ls(label_lines[i]);
      long long y = 0;
      std::string extra;
      if (!(ls >> y) || (ls >> extra)) {
        throw ParseError(where + ": labels line " + std::to_string(i + 1) +
                         ": expected one integer");
      }
      if (y < 0 || (classes > 0 && y >= classes)) {
        throw SchemaError(where + ": labels line " + std::to_string(i + 1) + ": label " +
                          std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      }
      ys.push_back(static_cast<int>(y));
    }
    if (static_cast<int>(ys.size()) != n) {
      throw SchemaError(where + ": labels has " + std::to_string(ys.size()) +
                        " rows, header says n=" + std::to_string(n));
    }
    labels = std::move(ys);
  }
  return Graph(n, std::move(edges), std::move(features), std::move(labels), classes);
}

}  // namespace

Graph load_graph(const std::filesystem::path& path, GraphFormat format) {
  if (!std::filesystem::exists(path)) throw ParseError(path.string() + ": no such file");
  const Entries entries = format == GraphFormat::Archive ? read_tar(path) : read_dir(path);
  return parse_entries(entries, path.string());
}

void save_graph(const Graph& g, const std::filesystem::path& path, GraphFormat format) {
  Entries entries;
  nlohmann::json header = {{"format", "grail-graph"},
                           {"version", kGraphFormatVersion},
                           {"n", g.node_count()},
                           {"d", g.feature_dim()},
                           {"C", g.class_count()}};
  entries["header.json"] = header.dump() + "\n";

  std::string edges;
  for (const auto& [u, v] : g.edges()) edges += std::to_string(u) + " " + std::to_string(v) + "\n";
  entries["edges"] = std::move(edges);

  std::string feats;
  const Mat& x = g.features();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (j) feats += ' ';
      feats += format_double(x(i, j));
    }
    feats += '\n';
  }
  entries["features"] = std::move(feats);

  if (g.has_labels()) {
    std::string ys;
    for (int y : g.labels()) ys += std::to_string(y) + "\n";
    entries["labels"] = std::move(ys);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (format == GraphFormat::Archive) {
    write_tar(path, entries);
  } else {
    std::filesystem::create_directories(path);
    for (const auto& [name, data] : entries) {
      std::ofstream out(path / name, std::ios::binary | std::ios::trunc);
      out << data;
    }
  }
}

// ---------------------------------------------------------------------------
// Sampling

EgoSubgraph sample_ego(const Graph& g, int center, int hops, int max_nodes, std::uint64_t seed) {
  if (center < 0 || center >= g.node_count()) {
    throw std::out_of_range("center " + std::to_string(center) + " outside [0, " +
                            std::to_string(g.node_count()) + ")");
  }
  require(hops >= 0, "hops must be >= 0");
  require(max_nodes >= 1, "max_nodes must be >= 1");

  std::vector<int> dist(static_cast<std::size_t>(g.node_count()), -1);
  std::vector<std::vector<int>> rings{{center}};
  dist[static_cast<std::size_t>(center)] = 0;
  for (int h = 1; h <= hops; ++h) {
    std::vector<int> next;
    for (int u : rings.back()) {
      for (int v : g.neighbors(u)) {
        if (dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = h;
          next.push_back(v);
        }
      }
    }
    if (next.empty()) break;
    std::sort(next.begin(), next.end());
    rings.push_back(std::move(next));
  }

  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(center)));
  EgoSubgraph sub;
  sub.center = center;
  int budget = max_nodes;
  for (std::size_t h = 0; h < rings.size() && budget > 0; ++h) {
    std::vector<int> ring = rings[h];
    if (static_cast<int>(ring.size()) > budget) {
      std::shuffle(ring.begin(), ring.end(), rng);
      ring.resize(static_cast<std::size_t>(budget));
      std::sort(ring.begin(), ring.end());
    }
    for (int v : ring) {
      sub.nodes.push_back(v);
      sub.hops.push_back(static_cast<int>(h));
    }
    budget -= static_cast<int>(ring.size());
  }

  const auto p = static_cast<Eigen::Index>(sub.nodes.size());
  sub.adjacency = Mat::Zero(p, p);
  sub.features.resize(p, g.feature_dim());
  for (Eigen::Index i = 0; i < p; ++i) {
    sub.features.row(i) = g.features().row(sub.nodes[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = i + 1; j < p; ++j) {
      if (g.has_edge(sub.nodes[static_cast<std::size_t>(i)], sub.nodes[static_cast<std::size_t>(j)])) {
        sub.adjacency(i, j) = sub.adjacency(j, i) = 1.0;
      }
    }
  }
  return sub;
}

EgoSubgraph perturb_edges(const EgoSubgraph& sub, double add_ratio, double remove_ratio,
                          std::uint64_t seed) {
  require(add_ratio >= 0.0 && add_ratio <= 1.0, "add_ratio outside [0,1]");
  require(remove_ratio >= 0.0 && remove_ratio <= 1.0, "remove_ratio outside [0,1]");
  std::vector<Edge> present, absent;
  const Eigen::Index p = sub.adjacency.rows();
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = i + 1; j < p; ++j) {
      (sub.adjacency(i, j) != 0.0 ? present : absent)
          .emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  }
  const auto m = static_cast<double>(present.size());
  const auto n_remove = std::min(present.size(), static_cast<std::size_t>(std::floor(remove_ratio * m)));
  const auto n_add = std::min(absent.size(), static_cast<std::size_t>(std::floor(add_ratio * m)));

  Rng rng(seed);
  std::shuffle(present.begin(), present.end(), rng);
  std::shuffle(absent.begin(), absent.end(), rng);

  EgoSubgraph out = sub;
  for (std::size_t k = 0; k < n_remove; ++k) {
    const auto [i, j] = present[k];
    out.adjacency(i, j) = out.adjacency(j, i) = 0.0;
  }
  for (std::size_t k = 0; k < n_add; ++k) {
    const auto [i, j] = absent[k];
    out.adjacency(i, j) = out.adjacency(j, i) = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic domain shift

namespace {

Mat random_unit_rows(int rows, int cols, Rng& rng) {
  Mat m = gaussian(rows, cols, rng);
  for (int i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

Graph sample_sbm(int n, const Mat& means, double p_in, double p_out, double noise, Rng& rng) {
  const int classes = static_cast<int>(means.rows());
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  Mat x = gaussian(n, means.cols(), rng, noise);
  for (int i = 0; i < n; ++i) x.row(i) += means.row(labels[static_cast<std::size_t>(i)]);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double p = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? p_in : p_out;
      if (unif(rng) < p) edges.emplace_back(i, j);
    }
  }
  return Graph(n, std::move(edges), std::move(x), std::move(labels), classes);
}

}  // namespace

DomainPair synth_shift(const ShiftConfig& cfg) {
  for (double p : {cfg.source_p_in, cfg.source_p_out, cfg.target_p_in, cfg.target_p_out}) {
    require(p >= 0.0 && p <= 1.0, "edge probability outside [0,1]");
  }
  require(cfg.classes >= 1 && cfg.feature_dim >= 1, "classes and feature_dim must be positive");
  require(cfg.source_nodes >= cfg.classes && cfg.target_nodes >= cfg.classes,
          "each domain needs at least one node per class");
  require(cfg.noise >= 0.0, "noise must be >= 0");

  Rng shared(derive_seed(cfg.seed, 1));
  const Mat means = cfg.class_separation * random_unit_rows(cfg.classes, cfg.feature_dim, shared);
  const Mat shift_dirs = random_unit_rows(cfg.classes, cfg.feature_dim, shared);

  Rng src_rng(derive_seed(cfg.seed, 2));
  Rng tgt_rng(derive_seed(cfg.seed, 3));
  DomainPair pair;
  pair.source = sample_sbm(cfg.source_nodes, means, cfg.source_p_in, cfg.source_p_out, cfg.noise,
                           src_rng);
  pair.target = sample_sbm(cfg.target_nodes, means + cfg.shift * shift_dirs, cfg.target_p_in,
                           cfg.target_p_out, cfg.noise, tgt_rng);
  return pair;
}

}  // namespace grail
