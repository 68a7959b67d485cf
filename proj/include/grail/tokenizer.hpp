#pragma once

// Trajectory tokenizer: compresses ego-subgraph embeddings into K latent
// rows, learns a latent denoising diffusion over them, discretizes latents
// against a learned codebook and decodes codes back to a graph.

#include "grail/autograd.hpp"
#include "grail/gnn.hpp"
#include "grail/graph.hpp"
#include "grail/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace grail {

// ---------------------------------------------------------------------------
// Diffusion schedule

/// Linear beta schedule. Vectors are indexed by step t in [0, T]; entry 0
/// holds beta = 0, alpha = alpha_bar = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max);

/// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.
Mat forward_diffuse(const Mat& z0, int t, const Mat& eps, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Networks

struct QFormerEncoder {
  ad::Var queries;  // K x d
  nn::Attention self_attn;
  nn::LayerNorm self_norm;
  nn::Attention cross_attn;
  nn::LayerNorm cross_norm;
  nn::Mlp out;

  QFormerEncoder() = default;
  QFormerEncoder(int k, Eigen::Index input_width, Eigen::Index width, int heads, Rng& rng);

  int query_count() const { return static_cast<int>(queries.rows()); }
  Eigen::Index width() const { return queries.cols(); }
  Eigen::Index input_width() const { return cross_attn.wk.weight.rows(); }

  /// Z = MLP(CrossAttn(SelfAttn(Q); H)), always K x d.
  ad::Var forward(const ad::Var& h) const;
  nn::ParamSet params() const;
};

Mat timestep_embedding(int t, Eigen::Index width);

/// Noise predictor eps_theta(Z_t, t): a row-wise MLP conditioned on a
/// sinusoidal timestep embedding and a learned per-row slot embedding.
struct DenoiserNet {
  ad::Var slots;  // K x hidden
  nn::Linear input;
  nn::Linear time;
  nn::Mlp body;
  Eigen::Index time_width = 32;

  DenoiserNet() = default;
  DenoiserNet(int k, Eigen::Index width, Eigen::Index hidden, Rng& rng);

  ad::Var forward(const ad::Var& zt, int t) const;
  Mat predict(const Mat& zt, int t) const;
  nn::ParamSet params() const;
};

struct Codebook {
  ad::Var vectors;  // M x d

  int size() const { return vectors.defined() ? static_cast<int>(vectors.rows()) : 0; }
  nn::ParamSet params() const;
};

struct TokenGrid {
  int step = 0;
  std::vector<int> ids;
};

struct DecodeResult {
  ad::Var h_rec;  // p x d
  ad::Var x_hat;  // p x d_feat
  ad::Var a_hat;  // p x p, symmetric, in (0,1)
};

struct GraphDecoder {
  nn::Mlp query_mlp;
  nn::Attention cross_attn;
  nn::Mlp feature_head;

  GraphDecoder() = default;
  GraphDecoder(Eigen::Index feature_width, Eigen::Index width, int heads, Rng& rng);

  DecodeResult forward(const ad::Var& z_hat, const ad::Var& x) const;
  nn::ParamSet params() const;
};

struct LossWeights {
  double quant = 0.4;  // lambda1
  double dec = 1.0;    // lambda2
};

struct LossParts {
  double diff = 0.0;
  double quant = 0.0;
  double dec = 0.0;
};

// ---------------------------------------------------------------------------
// Operations

ad::Var encode(const QFormerEncoder& enc, const ad::Var& h);
Mat encode(const QFormerEncoder& enc, const Mat& h);

/// mu_theta(Z_t) + sqrt(beta_t) * eps_sample for t > 1; mu_theta for t = 1.
Mat denoise_step(const Mat& zt, int t, const DenoiserNet& dn, const NoiseSchedule& sched,
                 const Mat& eps_sample);
/// Same with an explicit noise predictor (used for closed-form checks).
Mat denoise_step(const Mat& zt, int t, const Mat& eps_pred, const NoiseSchedule& sched,
                 const Mat& eps_sample);

ad::Var diffusion_loss(const DenoiserNet& dn, const ad::Var& z0, int t, const Mat& eps,
                       const NoiseSchedule& sched);

/// Noise source for the reverse chain: returns eps for step t (shape K x d).
using NoiseStream = std::function<Mat(int t, Eigen::Index rows, Eigen::Index cols)>;
NoiseStream seeded_noise(std::uint64_t seed);
NoiseStream zero_noise();

/// Reverse chain from Z_T down to Z_0. Element 0 is Z_T, element T is Z_0.
std::vector<Mat> build_trajectory(const DenoiserNet& dn, const NoiseSchedule& sched,
                                  const Mat& z_start, const NoiseStream& noise);

/// Nearest codebook row per latent row; ties go to the lowest index.
std::vector<int> nearest_codes(const Mat& z, const Mat& codebook);
TokenGrid quantize(const Mat& z, const Codebook& cb, int step = 0);
Mat dequantize(const TokenGrid& s, const Codebook& cb);

DecodeResult decode(const GraphDecoder& dec, const ad::Var& z_hat, const ad::Var& x);

/// ||sg[Z] - p_s||^2 + ||Z - sg[p_s]||^2 summed over entries.
ad::Var quant_loss(const ad::Var& z, const Codebook& cb);
/// Z + sg(p_s - Z): forward value p_s, gradient copied to Z.
ad::Var straight_through(const ad::Var& z, const Codebook& cb);

/// Mean off-diagonal BCE(A_hat, A) + ||X_hat - X||^2.
ad::Var dec_loss(const ad::Var& x_hat, const ad::Var& a_hat, const Mat& x, const Mat& a);
double dec_loss(const Mat& x_hat, const Mat& a_hat, const Mat& x, const Mat& a);

double total_loss(const LossParts& parts, const LossWeights& w);
ad::Var total_loss(const ad::Var& diff, const ad::Var& quant, const ad::Var& dec,
                   const LossWeights& w);

// ---------------------------------------------------------------------------
// Training

struct TokenizerConfig {
  int query_tokens = 128;  // K
  int codebook_size = 128; // M
  int steps = 10;          // T
  double beta_min = 1e-4;
  double beta_max = 0.2;
  int heads = 4;
  int denoiser_hidden = 128;
  LossWeights weights;
  int epochs = 50;
  int batch_size = 8;
  double lr = 1e-3;
  /// Subgraphs whose encoder outputs seed the k-means codebook init.
  int kmeans_warmup = 64;
  int kmeans_iterations = 25;
  /// Ablation: latents are K seeded node embeddings instead of the encoder.
  bool no_encoder = false;
  /// Ablation: no diffusion loss; trajectories come from edge perturbation.
  bool no_diffusion = false;
  double perturb_ratio = 0.5;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TokenizerConfig from_json(const nlohmann::json& j);
};

struct TokenizerBundle {
  TokenizerConfig config;
  NoiseSchedule schedule;
  QFormerEncoder encoder;
  DenoiserNet denoiser;
  Codebook codebook;
  GraphDecoder decoder;

  /// Fresh, untrained components for the given widths.
  static TokenizerBundle create(const TokenizerConfig& cfg, Eigen::Index embed_width,
                                Eigen::Index feature_width);

  Eigen::Index latent_width() const { return codebook.vectors.cols(); }
  nn::ParamSet params() const;
};

struct TokenizerLog {
  std::vector<LossParts> epochs;
  double codebook_utilization = 0.0;
};

/// Latent block for one subgraph: encoder output, or (no_encoder) a seeded
/// selection of K node embeddings padded by repetition.
ad::Var latent_for(const TokenizerBundle& tok, const Mat& node_embeddings, std::uint64_t key);
Mat latent_for_value(const TokenizerBundle& tok, const Mat& node_embeddings, std::uint64_t key);

std::pair<TokenizerBundle, TokenizerLog> train_tokenizer(const std::vector<EgoSubgraph>& subgraphs,
                                                         const GnnModel& gnn,
                                                         const TokenizerConfig& cfg);

/// Fraction of codebook entries hit by quantizing the clean latents of
/// `subgraphs`.
double codebook_utilization(const TokenizerBundle& tok, const std::vector<EgoSubgraph>& subgraphs,
                            const GnnModel& gnn);

/// Token grids S_T ... S_0 for one source subgraph (SFT data).
std::vector<TokenGrid> make_trajectory(const TokenizerBundle& tok, const GnnModel& gnn,
                                       const EgoSubgraph& sub, std::uint64_t seed);

/// Decodes a token block into a refined subgraph: features X_hat and
/// adjacency thresholded at 0.5. `sub` supplies the decoder queries.
EgoSubgraph decode_tokens(const TokenizerBundle& tok, const TokenGrid& tokens,
                          const EgoSubgraph& sub);

void save_tokenizer(const TokenizerBundle& tok, const std::filesystem::path& path,
                    const std::string& config_hash = {});
TokenizerBundle load_tokenizer(const std::filesystem::path& path);

}  // namespace grail
