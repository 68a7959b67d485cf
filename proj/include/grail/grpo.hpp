#pragma once

// Reward model and GRPO post-training for the restorer, plus the target
// refinement loop (encode -> generate -> decode) and subgraph stitching.

#include "grail/gnn.hpp"
#include "grail/graph.hpp"
#include "grail/restorer.hpp"
#include "grail/tokenizer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace grail {

// ---------------------------------------------------------------------------
// Rewards

struct CentroidMatrix {
  Mat centroids;  // C x d
  std::vector<int> counts;

  int classes() const { return static_cast<int>(centroids.rows()); }
};

CentroidMatrix build_centroids(const Mat& embeddings, std::span<const int> labels, int classes);
void save_centroids(const CentroidMatrix& c, const std::filesystem::path& path);
CentroidMatrix load_centroids(const std::filesystem::path& path);

double gaussian_kernel(const RowVec& x, const RowVec& y, double sigma);

/// Unbiased squared MMD with a Gaussian kernel; may be slightly negative.
double mmd2(const Mat& xa, const Mat& xb, double sigma);

/// Median pairwise Euclidean distance over the rows of `a` and `b` pooled;
/// 1.0 when every pair coincides.
double median_bandwidth(const Mat& a, const Mat& b);

struct RewardConfig {
  double gamma = 1.0;
  /// Kernel bandwidth; 0 means "set by the median heuristic on first use".
  double sigma = 0.0;
  bool use_align = true;
  bool use_conf = true;
};

double reward_align(double d2, double gamma);
double reward_conf(const PredictionTable& preds);
double reward_final(double r_align, double r_conf, const RewardConfig& cfg);

struct RewardBundle {
  double align = 0.0;
  double conf = 0.0;
  double final = 0.0;
};

/// Scores a refined subgraph against the source centroids with the frozen GNN.
RewardBundle score_refined(const EgoSubgraph& refined, const GnnModel& gnn,
                           const CentroidMatrix& centroids, const RewardConfig& cfg);

// ---------------------------------------------------------------------------
// GRPO

/// (r_i - mean) / max(population std, eps_std).
std::vector<double> grpo_advantages(std::span<const double> rewards, double eps_std = 1e-8);

/// Sum_c p_c log(p_c / q_c) with 0 log 0 = 0.
double kl_categorical(std::span<const double> p, std::span<const double> q);

/// Mean over scored continuation positions of KL(pi_theta || pi_old).
ad::Var kl_per_token_var(const RestorerLM& theta, const RestorerLM& old, std::span<const int> seq,
                         int prompt_len, int k, int max_blocks);
double kl_per_token(const RestorerLM& theta, const RestorerLM& old, std::span<const int> seq,
                    int prompt_len, int k, int max_blocks);

struct GrpoConfig {
  int group = 8;
  double beta_kl = 0.05;
  double lr = 2e-6;
  double eps_std = 1e-8;
  double temperature = 1.0;
  int top_k = 0;
  double clip_norm = 1.0;
};

/// One sampled completion with its advantage.
struct ScoredSample {
  std::vector<int> tokens;
  double advantage = 0.0;
};

/// Negated objective -(1/g) sum_i [A_i * mean_t log pi_theta(o_i,t) - beta * KL_i]
/// over one group sharing a prompt of length `prompt_len`.
ad::Var grpo_surrogate(const RestorerLM& lm, const RestorerLM& old,
                       std::span<const ScoredSample> group, int prompt_len, int k, int max_blocks,
                       double beta_kl);

/// A prompt for the policy: BOS + quantized target block, and the subgraph
/// it came from (decoder queries and reward input).
struct GrpoPrompt {
  std::vector<int> tokens;
  EgoSubgraph sub;
};

/// Returns nullopt when a candidate cannot be decoded.
using RewardFn = std::function<std::optional<RewardBundle>(const GrpoPrompt&, const Generation&)>;

struct GrpoStats {
  double mean_reward = 0.0;
  double mean_align = 0.0;
  double mean_conf = 0.0;
  double mean_kl = 0.0;
  double advantage_mean = 0.0;
  double advantage_std = 0.0;
  int failures = 0;
};

/// One GRPO step: for each prompt, sample `group` completions from `old`,
/// score them, and apply one optimizer update on that group's surrogate.
GrpoStats grpo_step(RestorerLM& lm, const RestorerLM& old, nn::Adam& opt,
                    std::span<const GrpoPrompt> prompts, const RewardFn& reward,
                    const GrpoConfig& cfg, int k, int max_blocks, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Refinement

GrpoPrompt make_prompt(const TokenizerBundle& tok, const GnnModel& gnn, const EgoSubgraph& sub);

struct Refinement {
  EgoSubgraph refined;
  bool fallback = false;  // no generated block; refined == input
  Generation generation;
};

/// Decodes the last generated block (S_0) of `gen`; nullopt when the
/// generation produced no block beyond the prompt.
std::optional<EgoSubgraph> decode_generation(const TokenizerBundle& tok, const Generation& gen,
                                             const EgoSubgraph& sub);

Refinement refine_target(const EgoSubgraph& sub, const TokenizerBundle& tok, const RestorerLM& lm,
                         const GnnModel& gnn, const SamplingConfig& sampling);

RewardFn make_reward_fn(const TokenizerBundle& tok, const GnnModel& gnn,
                        const CentroidMatrix& centroids, const RewardConfig& cfg);

/// Features averaged over covering subgraphs; edges by majority vote over
/// subgraphs covering both endpoints, ties resolved by the input graph.
Graph stitch(const Graph& g, std::span<const EgoSubgraph> refined);

}  // namespace grail
