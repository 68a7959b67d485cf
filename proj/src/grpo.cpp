#include "grail/grpo.hpp"

#include "grail/checkpoint.hpp"
#include "grail/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace grail {

CentroidMatrix build_centroids(const Mat& embeddings, std::span<const int> labels, int classes) {
  require(classes >= 1, "classes must be >= 1");
  require_dims(static_cast<Eigen::Index>(labels.size()) == embeddings.rows(),
               "one label per embedding row required");
  CentroidMatrix c;
  c.centroids = Mat::Zero(classes, embeddings.cols());
  c.counts.assign(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    require(y >= 0 && y < classes, "label " + std::to_string(y) + " outside [0, C)");
    c.centroids.row(y) += embeddings.row(static_cast<Eigen::Index>(i));
    ++c.counts[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < classes; ++y) {
    require(c.counts[static_cast<std::size_t>(y)] > 0,
            "class " + std::to_string(y) + " has no members; cannot form its centroid");
    c.centroids.row(y) /= c.counts[static_cast<std::size_t>(y)];
  }
  return c;
}

void save_centroids(const CentroidMatrix& c, const std::filesystem::path& path) {
  TensorArchive ar;
  ar.meta = {{"kind", "centroids"}, {"C", c.classes()}, {"d", c.centroids.cols()}, {"counts", c.counts}};
  ar.put("centroids", c.centroids);
  write_archive(path, ar);
}

CentroidMatrix load_centroids(const std::filesystem::path& path) {
  const TensorArchive ar = read_archive(path);
  expect_kind(ar, "centroids", path);
  CentroidMatrix c;
  c.centroids = ar.get("centroids");
  c.counts = ar.meta.at("counts").get<std::vector<int>>();
  if (c.centroids.rows() != ar.meta.at("C").get<Eigen::Index>() ||
      c.centroids.cols() != ar.meta.at("d").get<Eigen::Index>() ||
      c.counts.size() != static_cast<std::size_t>(c.centroids.rows())) {
    throw SchemaError(path.string() + ": centroid shape disagrees with its header");
  }
  return c;
}

double gaussian_kernel(const RowVec& x, const RowVec& y, double sigma) {
  return std::exp(-(x - y).squaredNorm() / (2.0 * sigma * sigma));
}

double mmd2(const Mat& xa, const Mat& xb, double sigma) {
  require(xa.rows() >= 2 && xb.rows() >= 2, "mmd2 needs at least two rows in each set");
  require_dims(xa.cols() == xb.cols(), "mmd2 sets differ in width");
  require(sigma > 0.0, "kernel bandwidth must be positive");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  auto kernel_sum = [inv](const Mat& a, const Mat& b, bool skip_diag) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.rows(); ++j) {
        if (skip_diag && i == j) continue;
        s += std::exp(-(a.row(i) - b.row(j)).squaredNorm() * inv);
      }
    }
    return s;
  };
  // canonical order so that swapping the arguments sums in the same order
  const bool flip = xb.rows() < xa.rows() ||
                    (xb.rows() == xa.rows() &&
                     std::lexicographical_compare(xb.data(), xb.data() + xb.size(), xa.data(),
                                                  xa.data() + xa.size()));
  const Mat& a = flip ? xb : xa;
  const Mat& b = flip ? xa : xb;
  const auto n1 = static_cast<double>(a.rows());
  const auto n2 = static_cast<double>(b.rows());
  return kernel_sum(a, a, true) / (n1 * (n1 - 1)) + kernel_sum(b, b, true) / (n2 * (n2 - 1)) -
         2.0 * kernel_sum(a, b, false) / (n1 * n2);
}

double median_bandwidth(const Mat& a, const Mat& b) {
  require_dims(a.cols() == b.cols(), "bandwidth sets differ in width");
  Mat pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  std::vector<double> d;
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  }
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  const double med = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  return med > 0.0 ? med : 1.0;
}

double reward_align(double d2, double gamma) {
  require(gamma > 0.0, "gamma must be positive");
  return std::exp(-gamma * std::max(d2, 0.0));
}

double reward_conf(const PredictionTable& preds) { return mean_negative_entropy(preds); }

double reward_final(double r_align, double r_conf, const RewardConfig& cfg) {
  return (cfg.use_align ? r_align : 0.0) + (cfg.use_conf ? r_conf : 0.0);
}

RewardBundle score_refined(const EgoSubgraph& refined, const GnnModel& gnn,
                           const CentroidMatrix& centroids, const RewardConfig& cfg) {
  require(cfg.sigma > 0.0, "reward kernel bandwidth not set");
  const Mat h = embed(gnn, refined);
  RewardBundle r;
  r.align = reward_align(mmd2(h, centroids.centroids, cfg.sigma), cfg.gamma);
  r.conf = reward_conf(predict_from_embedding(gnn, h));
  r.final = reward_final(r.align, r.conf, cfg);
  return r;
}

// ---------------------------------------------------------------------------

std::vector<double> grpo_advantages(std::span<const double> rewards, double eps_std) {
  require(rewards.size() >= 2, "a group needs at least two rewards");
  require(eps_std > 0.0, "eps_std must be positive");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::max(std::sqrt(var / n), eps_std);
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / sd);
  return adv;
}

double kl_categorical(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), "categoricals differ in support size");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

namespace {

// Per-position KL rows summed: sum_t sum_v p_theta (log p_theta - log p_old).
ad::Var kl_sum(const PolicyEval& cur, const Mat& old_logp) {
  ad::Var p = ad::exp(cur.dist_logp);
  return ad::sum(ad::mul(p, ad::add_const(cur.dist_logp, -old_logp)));
}

PolicyEval frozen_eval(const RestorerLM& old, std::span<const int> seq, int prompt_len, int k,
                       int max_blocks) {
  ad::NoGradGuard guard;
  return policy_eval(old, seq, prompt_len, k, max_blocks);
}

struct SurrogateParts {
  ad::Var loss;
  double mean_kl = 0.0;
};

SurrogateParts surrogate_parts(const RestorerLM& lm, const RestorerLM& old,
                               std::span<const ScoredSample> group, int prompt_len, int k,
                               int max_blocks, double beta_kl) {
  require(!group.empty(), "empty GRPO group");
  SurrogateParts out;
  std::vector<ad::Var> terms;
  for (const auto& s : group) {
    PolicyEval cur = policy_eval(lm, s.tokens, prompt_len, k, max_blocks);
    if (cur.positions.empty()) continue;
    const double n = static_cast<double>(cur.positions.size());
    const PolicyEval prev = frozen_eval(old, s.tokens, prompt_len, k, max_blocks);
    ad::Var kl = ad::scale(kl_sum(cur, prev.dist_logp.value()), 1.0 / n);
    out.mean_kl += kl.item();
    ad::Var term = ad::scale(ad::sum(cur.token_logp), s.advantage / n);
    if (beta_kl != 0.0) term = term - ad::scale(kl, beta_kl);
    terms.push_back(term);
  }
  const double g = static_cast<double>(group.size());
  out.mean_kl /= g;
  ad::Var total = ad::scalar(0.0);
  for (const auto& t : terms) total = total + t;
  out.loss = ad::scale(total, -1.0 / g);
  return out;
}

}  // namespace

ad::Var kl_per_token_var(const RestorerLM& theta, const RestorerLM& old, std::span<const int> seq,
                         int prompt_len, int k, int max_blocks) {
  PolicyEval cur = policy_eval(theta, seq, prompt_len, k, max_blocks);
  if (cur.positions.empty()) return ad::scalar(0.0);
  const PolicyEval prev = frozen_eval(old, seq, prompt_len, k, max_blocks);
  return ad::scale(kl_sum(cur, prev.dist_logp.value()), 1.0 / static_cast<double>(cur.positions.size()));
}

double kl_per_token(const RestorerLM& theta, const RestorerLM& old, std::span<const int> seq,
                    int prompt_len, int k, int max_blocks) {
  ad::NoGradGuard guard;
  return kl_per_token_var(theta, old, seq, prompt_len, k, max_blocks).item();
}

ad::Var grpo_surrogate(const RestorerLM& lm, const RestorerLM& old,
                       std::span<const ScoredSample> group, int prompt_len, int k, int max_blocks,
                       double beta_kl) {
  return surrogate_parts(lm, old, group, prompt_len, k, max_blocks, beta_kl).loss;
}

GrpoStats grpo_step(RestorerLM& lm, const RestorerLM& old, nn::Adam& opt,
                    std::span<const GrpoPrompt> prompts, const RewardFn& reward,
                    const GrpoConfig& cfg, int k, int max_blocks, std::uint64_t seed) {
  require(cfg.group >= 2, "GRPO group size must be >= 2");
  require(cfg.beta_kl >= 0.0, "beta_kl must be >= 0");
  require(!prompts.empty(), "grpo_step needs at least one prompt");
  GrpoStats stats;
  double adv_sq = 0.0;
  int samples = 0;
  for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
    const GrpoPrompt& prompt = prompts[pi];
    std::vector<Generation> gens;
    std::vector<std::optional<RewardBundle>> scores;
    for (int i = 0; i < cfg.group; ++i) {
      SamplingConfig sc;
      sc.temperature = cfg.temperature;
      sc.top_k = cfg.top_k;
      sc.max_blocks = max_blocks;
      sc.seed = derive_seed(seed, pi * 1000003ULL + static_cast<std::uint64_t>(i));
      gens.push_back(generate(old, prompt.tokens, k, sc));
      scores.push_back(reward(prompt, gens.back()));
    }
    double floor = std::numeric_limits<double>::infinity();
    for (const auto& s : scores) {
      if (s) floor = std::min(floor, s->final);
    }
    if (!std::isfinite(floor)) floor = 0.0;
    std::vector<double> rewards;
    for (const auto& s : scores) {
      if (s) {
        rewards.push_back(s->final);
        stats.mean_align += s->align;
        stats.mean_conf += s->conf;
      } else {
        rewards.push_back(floor);
        ++stats.failures;
      }
      stats.mean_reward += rewards.back();
    }
    const std::vector<double> adv = grpo_advantages(rewards, cfg.eps_std);
    std::vector<ScoredSample> group;
    for (std::size_t i = 0; i < gens.size(); ++i) {
      group.push_back({std::move(gens[i].tokens), adv[i]});
      stats.advantage_mean += adv[i];
      adv_sq += adv[i] * adv[i];
      ++samples;
    }
    opt.zero_grad();
    SurrogateParts parts = surrogate_parts(lm, old, group, static_cast<int>(prompt.tokens.size()),
                                           k, max_blocks, cfg.beta_kl);
    parts.loss.backward();
    opt.step();
    stats.mean_kl += parts.mean_kl;
  }
  const double n = static_cast<double>(samples);
  const int ok = samples - stats.failures;
  stats.mean_reward /= n;
  stats.mean_align = ok > 0 ? stats.mean_align / ok : 0.0;
  stats.mean_conf = ok > 0 ? stats.mean_conf / ok : 0.0;
  stats.mean_kl /= static_cast<double>(prompts.size());
  stats.advantage_mean /= n;
  stats.advantage_std = std::sqrt(std::max(0.0, adv_sq / n - stats.advantage_mean * stats.advantage_mean));
  return stats;
}

// ---------------------------------------------------------------------------

GrpoPrompt make_prompt(const TokenizerBundle& tok, const GnnModel& gnn, const EgoSubgraph& sub) {
  const Mat z = latent_for_value(tok, embed(gnn, sub), static_cast<std::uint64_t>(sub.center));
  GrpoPrompt p;
  p.sub = sub;
  p.tokens.push_back(kBos);
  for (int c : quantize(z, tok.codebook, tok.config.steps).ids) p.tokens.push_back(code_to_token(c));
  return p;
}

std::optional<EgoSubgraph> decode_generation(const TokenizerBundle& tok, const Generation& gen,
                                             const EgoSubgraph& sub) {
  if (gen.blocks.size() < 2) return std::nullopt;
  return decode_tokens(tok, gen.blocks.back(), sub);
}

Refinement refine_target(const EgoSubgraph& sub, const TokenizerBundle& tok, const RestorerLM& lm,
                         const GnnModel& gnn, const SamplingConfig& sampling) {
  const GrpoPrompt prompt = make_prompt(tok, gnn, sub);
  SamplingConfig sc = sampling;
  if (sc.max_blocks <= 0) sc.max_blocks = tok.config.steps + 1;
  Refinement r;
  r.generation = generate(lm, prompt.tokens, tok.config.query_tokens, sc);
  if (auto decoded = decode_generation(tok, r.generation, sub)) {
    r.refined = std::move(*decoded);
  } else {
    r.refined = sub;
    r.fallback = true;
  }
  return r;
}

RewardFn make_reward_fn(const TokenizerBundle& tok, const GnnModel& gnn,
                        const CentroidMatrix& centroids, const RewardConfig& cfg) {
  return [&tok, &gnn, &centroids, cfg](const GrpoPrompt& prompt,
                                       const Generation& gen) -> std::optional<RewardBundle> {
    if (prompt.sub.size() < 2) return std::nullopt;
    auto refined = decode_generation(tok, gen, prompt.sub);
    if (!refined) return std::nullopt;
    return score_refined(*refined, gnn, centroids, cfg);
  };
}

Graph stitch(const Graph& g, std::span<const EgoSubgraph> refined) {
  const int n = g.node_count();
  Mat feat_sum = Mat::Zero(n, g.feature_dim());
  std::vector<int> cover(static_cast<std::size_t>(n), 0);
  // (u, v) with u < v -> (votes for an edge, subgraphs covering the pair)
  std::map<std::pair<int, int>, std::pair<int, int>> votes;
  for (const auto& sub : refined) {
    require_dims(sub.features.cols() == g.feature_dim(), "refined feature width != graph width");
    require_dims(sub.adjacency.rows() == sub.size() && sub.features.rows() == sub.size(),
                 "refined subgraph shape inconsistent");
    for (int i = 0; i < sub.size(); ++i) {
      const int u = sub.nodes[static_cast<std::size_t>(i)];
      require(u >= 0 && u < n, "refined subgraph node " + std::to_string(u) + " outside graph");
      feat_sum.row(u) += sub.features.row(i);
      ++cover[static_cast<std::size_t>(u)];
      for (int j = i + 1; j < sub.size(); ++j) {
        const int v = sub.nodes[static_cast<std::size_t>(j)];
        auto& slot = votes[{std::min(u, v), std::max(u, v)}];
        slot.first += sub.adjacency(i, j) > 0.5 ? 1 : 0;
        slot.second += 1;
      }
    }
  }
  Mat features = g.features();
  for (int v = 0; v < n; ++v) {
    if (cover[static_cast<std::size_t>(v)] > 0) features.row(v) = feat_sum.row(v) / cover[static_cast<std::size_t>(v)];
  }
  std::vector<Edge> edges;
  for (const auto& e : g.edges()) {
    if (!votes.contains(e)) edges.push_back(e);
  }
  for (const auto& [pair, vc] : votes) {
    const int twice = 2 * vc.first;
    const bool present = twice == vc.second ? g.has_edge(pair.first, pair.second) : twice > vc.second;
    if (present) edges.push_back(pair);
  }
  if (g.has_labels()) return Graph(n, std::move(edges), std::move(features), g.labels(), g.class_count());
  return Graph(n, std::move(edges), std::move(features));
}

}  // namespace grail
