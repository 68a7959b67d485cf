#include "grail/tokenizer.hpp"

#include "grail/checkpoint.hpp"
#include "grail/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace grail {

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  require(steps >= 1, "diffusion needs T >= 1");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
          "schedule needs 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha.assign(s.beta.size(), 1.0);
  s.alpha_bar.assign(s.beta.size(), 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_min + (beta_max - beta_min) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

namespace {
void check_step(int t, const NoiseSchedule& sched) {
  require(t >= 1 && t <= sched.steps,
          "diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps) + "]");
}
}  // namespace

Mat forward_diffuse(const Mat& z0, int t, const Mat& eps, const NoiseSchedule& sched) {
  check_step(t, sched);
  require_dims(z0.rows() == eps.rows() && z0.cols() == eps.cols(), "noise shape != latent shape");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

// ---------------------------------------------------------------------------
// Networks

QFormerEncoder::QFormerEncoder(int k, Eigen::Index input_width, Eigen::Index width, int heads,
                               Rng& rng)
    : queries(ad::parameter(gaussian(k, width, rng, 1.0))),
      self_attn(width, width, width, heads, rng),
      self_norm(width),
      cross_attn(width, input_width, width, heads, rng),
      cross_norm(width),
      out({width, 2 * width, width}, rng, nn::Activation::Gelu) {
  require(k >= 1, "encoder needs K >= 1 query tokens");
}

ad::Var QFormerEncoder::forward(const ad::Var& h) const {
  require(h.rows() >= 1, "encoder input has no nodes");
  require_dims(h.cols() == input_width(), "encoder input width " + std::to_string(h.cols()) +
                                              " != " + std::to_string(input_width()));
  ad::Var q = self_norm(queries + self_attn(queries, queries));
  ad::Var hq = cross_norm(q + cross_attn(q, h));
  return out(hq);
}

nn::ParamSet QFormerEncoder::params() const {
  nn::ParamSet p;
  p.add("queries", queries);
  p.append(self_attn.params(), "self.");
  p.append(self_norm.params(), "self_norm.");
  p.append(cross_attn.params(), "cross.");
  p.append(cross_norm.params(), "cross_norm.");
  p.append(out.params(), "out.");
  return p;
}

Mat timestep_embedding(int t, Eigen::Index width) {
  Mat e(1, width);
  for (Eigen::Index i = 0; i < width; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
    e(0, i) = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

DenoiserNet::DenoiserNet(int k, Eigen::Index width, Eigen::Index hidden, Rng& rng)
    : slots(ad::parameter(gaussian(k, hidden, rng, 0.02))),
      input(width, hidden, rng),
      time(32, hidden, rng),
      body({hidden, hidden, width}, rng, nn::Activation::Gelu) {}

ad::Var DenoiserNet::forward(const ad::Var& zt, int t) const {
  require_dims(zt.rows() == slots.rows() && zt.cols() == input.weight.rows(),
               "denoiser input must be K x d");
  ad::Var temb = time(ad::constant(timestep_embedding(t, time_width)));
  ad::Var h = ad::add_row(input(zt) + slots, temb);
  return body(ad::gelu(h));
}

Mat DenoiserNet::predict(const Mat& zt, int t) const {
  ad::NoGradGuard guard;
  return forward(ad::constant(zt), t).value();
}

nn::ParamSet DenoiserNet::params() const {
  nn::ParamSet p;
  p.add("slots", slots);
  p.append(input.params(), "in.");
  p.append(time.params(), "time.");
  p.append(body.params(), "body.");
  return p;
}

nn::ParamSet Codebook::params() const {
  nn::ParamSet p;
  p.add("vectors", vectors);
  return p;
}

GraphDecoder::GraphDecoder(Eigen::Index feature_width, Eigen::Index width, int heads, Rng& rng)
    : query_mlp({feature_width, width, width}, rng, nn::Activation::Gelu),
      cross_attn(width, width, width, heads, rng),
      feature_head({width, width, feature_width}, rng, nn::Activation::Gelu) {}

DecodeResult GraphDecoder::forward(const ad::Var& z_hat, const ad::Var& x) const {
  require_dims(x.cols() == query_mlp.layers.front().weight.rows(),
               "decoder feature width " + std::to_string(x.cols()) + " != " +
                   std::to_string(query_mlp.layers.front().weight.rows()));
  require_dims(z_hat.cols() == cross_attn.wk.weight.rows(), "decoder latent width mismatch");
  DecodeResult r;
  ad::Var q = query_mlp(x);
  r.h_rec = cross_attn(q, z_hat);
  r.x_hat = feature_head(r.h_rec);
  // blocked GEMM is not bitwise symmetric; average with the transpose
  ad::Var gram = ad::matmul(r.h_rec, ad::transpose(r.h_rec));
  r.a_hat = ad::sigmoid(ad::scale(ad::add(gram, ad::transpose(gram)), 0.5));
  return r;
}

nn::ParamSet GraphDecoder::params() const {
  nn::ParamSet p;
  p.append(query_mlp.params(), "query.");
  p.append(cross_attn.params(), "cross.");
  p.append(feature_head.params(), "head.");
  return p;
}

// ---------------------------------------------------------------------------
// Operations

ad::Var encode(const QFormerEncoder& enc, const ad::Var& h) { return enc.forward(h); }

Mat encode(const QFormerEncoder& enc, const Mat& h) {
  ad::NoGradGuard guard;
  return enc.forward(ad::constant(h)).value();
}

Mat denoise_step(const Mat& zt, int t, const Mat& eps_pred, const NoiseSchedule& sched,
                 const Mat& eps_sample) {
  check_step(t, sched);
  const auto i = static_cast<std::size_t>(t);
  const double a = sched.alpha[i];
  const double b = sched.beta[i];
  const double ab = sched.alpha_bar[i];
  Mat mu = (zt - (b / std::sqrt(1.0 - ab)) * eps_pred) / std::sqrt(a);
  if (t > 1) mu += std::sqrt(b) * eps_sample;
  return mu;
}

Mat denoise_step(const Mat& zt, int t, const DenoiserNet& dn, const NoiseSchedule& sched,
                 const Mat& eps_sample) {
  return denoise_step(zt, t, dn.predict(zt, t), sched, eps_sample);
}

ad::Var diffusion_loss(const DenoiserNet& dn, const ad::Var& z0, int t, const Mat& eps,
                       const NoiseSchedule& sched) {
  check_step(t, sched);
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  ad::Var zt = ad::add_const(ad::scale(z0, std::sqrt(ab)), std::sqrt(1.0 - ab) * eps);
  return ad::mean_squares(ad::sub(ad::constant(eps), dn.forward(zt, t)));
}

NoiseStream seeded_noise(std::uint64_t seed) {
  return [seed](int t, Eigen::Index rows, Eigen::Index cols) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    return gaussian(rows, cols, rng);
  };
}

NoiseStream zero_noise() {
  return [](int, Eigen::Index rows, Eigen::Index cols) { return Mat::Zero(rows, cols).eval(); };
}

std::vector<Mat> build_trajectory(const DenoiserNet& dn, const NoiseSchedule& sched,
                                  const Mat& z_start, const NoiseStream& noise) {
  std::vector<Mat> traj{z_start};
  traj.reserve(static_cast<std::size_t>(sched.steps) + 1);
  for (int t = sched.steps; t >= 1; --t) {
    traj.push_back(denoise_step(traj.back(), t, dn, sched, noise(t, z_start.rows(), z_start.cols())));
  }
  return traj;
}

std::vector<int> nearest_codes(const Mat& z, const Mat& codebook) {
  require(codebook.rows() > 0, "empty codebook");
  require_dims(z.cols() == codebook.cols(), "latent width != codebook width");
  // direct differences, not the expanded form: duplicate codebook rows must
  // tie exactly so the lowest index wins
  std::vector<int> codes(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index j = 0; j < codebook.rows(); ++j) {
      const double d = (z.row(i) - codebook.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    codes[static_cast<std::size_t>(i)] = arg;
  }
  return codes;
}

TokenGrid quantize(const Mat& z, const Codebook& cb, int step) {
  require(cb.size() > 0, "empty codebook");
  return TokenGrid{step, nearest_codes(z, cb.vectors.value())};
}

Mat dequantize(const TokenGrid& s, const Codebook& cb) {
  const Mat& p = cb.vectors.value();
  Mat out(static_cast<Eigen::Index>(s.ids.size()), p.cols());
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    require(s.ids[i] >= 0 && s.ids[i] < p.rows(),
            "token id " + std::to_string(s.ids[i]) + " outside codebook [0, " +
                std::to_string(p.rows()) + ")");
    out.row(static_cast<Eigen::Index>(i)) = p.row(s.ids[i]);
  }
  return out;
}

DecodeResult decode(const GraphDecoder& dec, const ad::Var& z_hat, const ad::Var& x) {
  return dec.forward(z_hat, x);
}

ad::Var quant_loss(const ad::Var& z, const Codebook& cb) {
  const std::vector<int> codes = nearest_codes(z.value(), cb.vectors.value());
  ad::Var p = ad::gather_rows(cb.vectors, codes);
  return ad::sum_squares(ad::sub(ad::detach(z), p)) + ad::sum_squares(ad::sub(z, ad::detach(p)));
}

ad::Var straight_through(const ad::Var& z, const Codebook& cb) {
  const std::vector<int> codes = nearest_codes(z.value(), cb.vectors.value());
  Mat p(z.rows(), z.cols());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    p.row(static_cast<Eigen::Index>(i)) = cb.vectors.value().row(codes[i]);
  }
  return ad::add_const(z, p - z.value());
}

ad::Var dec_loss(const ad::Var& x_hat, const ad::Var& a_hat, const Mat& x, const Mat& a) {
  require_dims(x_hat.rows() == x.rows() && x_hat.cols() == x.cols(), "X_hat shape != X shape");
  return ad::bce_offdiag(a_hat, a) + ad::sum_squares(ad::add_const(x_hat, -x));
}

double dec_loss(const Mat& x_hat, const Mat& a_hat, const Mat& x, const Mat& a) {
  return dec_loss(ad::constant(x_hat), ad::constant(a_hat), x, a).item();
}

double total_loss(const LossParts& parts, const LossWeights& w) {
  return parts.diff + w.quant * parts.quant + w.dec * parts.dec;
}

ad::Var total_loss(const ad::Var& diff, const ad::Var& quant, const ad::Var& dec,
                   const LossWeights& w) {
  return diff + ad::scale(quant, w.quant) + ad::scale(dec, w.dec);
}

// ---------------------------------------------------------------------------
// Config / bundle

nlohmann::json TokenizerConfig::to_json() const {
  return {{"K", query_tokens},
          {"M", codebook_size},
          {"T", steps},
          {"beta_min", beta_min},
          {"beta_max", beta_max},
          {"heads", heads},
          {"denoiser_hidden", denoiser_hidden},
          {"lambda1", weights.quant},
          {"lambda2", weights.dec},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"kmeans_warmup", kmeans_warmup},
          {"kmeans_iterations", kmeans_iterations},
          {"no_encoder", no_encoder},
          {"no_diffusion", no_diffusion},
          {"perturb_ratio", perturb_ratio},
          {"seed", seed}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  c.query_tokens = j.value("K", c.query_tokens);
  c.codebook_size = j.value("M", c.codebook_size);
  c.steps = j.value("T", c.steps);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.heads = j.value("heads", c.heads);
  c.denoiser_hidden = j.value("denoiser_hidden", c.denoiser_hidden);
  c.weights.quant = j.value("lambda1", c.weights.quant);
  c.weights.dec = j.value("lambda2", c.weights.dec);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.kmeans_warmup = j.value("kmeans_warmup", c.kmeans_warmup);
  c.kmeans_iterations = j.value("kmeans_iterations", c.kmeans_iterations);
  c.no_encoder = j.value("no_encoder", c.no_encoder);
  c.no_diffusion = j.value("no_diffusion", c.no_diffusion);
  c.perturb_ratio = j.value("perturb_ratio", c.perturb_ratio);
  c.seed = j.value("seed", c.seed);
  return c;
}

TokenizerBundle TokenizerBundle::create(const TokenizerConfig& cfg, Eigen::Index embed_width,
                                        Eigen::Index feature_width) {
  require(cfg.query_tokens >= 1, "K must be >= 1");
  require(cfg.codebook_size >= 1, "M must be >= 1");
  require(cfg.weights.quant >= 0.0 && cfg.weights.dec >= 0.0, "loss weights must be >= 0");
  Rng rng(derive_seed(cfg.seed, 0x70c));
  TokenizerBundle b;
  b.config = cfg;
  b.schedule = make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max);
  const Eigen::Index d = embed_width;
  b.encoder = QFormerEncoder(cfg.query_tokens, embed_width, d, cfg.heads, rng);
  b.denoiser = DenoiserNet(cfg.query_tokens, d, cfg.denoiser_hidden, rng);
  b.codebook.vectors = ad::parameter(gaussian(cfg.codebook_size, d, rng, 1.0));
  b.decoder = GraphDecoder(feature_width, d, cfg.heads, rng);
  return b;
}

nn::ParamSet TokenizerBundle::params() const {
  nn::ParamSet p;
  p.append(encoder.params(), "enc.");
  p.append(denoiser.params(), "dn.");
  p.append(codebook.params(), "cb.");
  p.append(decoder.params(), "dec.");
  return p;
}

Mat latent_for_value(const TokenizerBundle& tok, const Mat& node_embeddings, std::uint64_t key) {
  ad::NoGradGuard guard;
  return latent_for(tok, node_embeddings, key).value();
}

ad::Var latent_for(const TokenizerBundle& tok, const Mat& node_embeddings, std::uint64_t key) {
  if (!tok.config.no_encoder) return tok.encoder.forward(ad::constant(node_embeddings));
  const auto p = static_cast<int>(node_embeddings.rows());
  const int k = tok.config.query_tokens;
  require(p >= 1, "subgraph has no nodes");
  std::vector<int> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(tok.config.seed ^ 0x5e1ec7ULL, key));
  std::shuffle(order.begin(), order.end(), rng);
  Mat z(k, node_embeddings.cols());
  for (int i = 0; i < k; ++i) z.row(i) = node_embeddings.row(order[static_cast<std::size_t>(i % p)]);
  return ad::constant(std::move(z));
}

namespace {

Mat kmeans(const Mat& data, int k, int iterations, Rng& rng) {
  const Eigen::Index n = data.rows();
  Mat centers(k, data.cols());
  // k-means++ seeding
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = data.row(pick(rng));
  Eigen::VectorXd d2 = (data.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = pick(rng);
    if (total > 0.0) {
      double r = unif(rng) * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2(i);
        if (r <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = data.row(chosen);
    d2 = d2.cwiseMin((data.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  for (int it = 0; it < iterations; ++it) {
    const std::vector<int> assign = nearest_codes(data, centers);
    Mat sums = Mat::Zero(k, data.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += data.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      }
    }
  }
  // Duplicate centers (fewer distinct points than k) get a small jitter so
  // the codebook stays injective.
  std::normal_distribution<double> jitter(0.0, 1e-3);
  for (int c = 1; c < k; ++c) {
    for (int o = 0; o < c; ++o) {
      if ((centers.row(c) - centers.row(o)).squaredNorm() < 1e-18) {
        for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(c, j) += jitter(rng);
        break;
      }
    }
  }
  return centers;
}

}  // namespace

double codebook_utilization(const TokenizerBundle& tok, const std::vector<EgoSubgraph>& subgraphs,
                            const GnnModel& gnn) {
  std::set<int> used;
  for (const auto& sub : subgraphs) {
    const Mat z = latent_for_value(tok, embed(gnn, sub), static_cast<std::uint64_t>(sub.center));
    for (int c : quantize(z, tok.codebook).ids) used.insert(c);
  }
  return static_cast<double>(used.size()) / tok.codebook.size();
}

std::pair<TokenizerBundle, TokenizerLog> train_tokenizer(const std::vector<EgoSubgraph>& subgraphs,
                                                         const GnnModel& gnn,
                                                         const TokenizerConfig& cfg) {
  require(!subgraphs.empty(), "train_tokenizer needs at least one subgraph");
  require(cfg.batch_size >= 1 && cfg.epochs >= 0, "bad batch size or epoch count");
  TokenizerBundle tok =
      TokenizerBundle::create(cfg, gnn.hidden_dim(), subgraphs.front().features.cols());

  std::vector<Mat> embeddings;
  embeddings.reserve(subgraphs.size());
  for (const auto& sub : subgraphs) embeddings.push_back(embed(gnn, sub));

  Rng rng(derive_seed(cfg.seed, 0x7a1));
  {
    const std::size_t warm = std::min<std::size_t>(subgraphs.size(),
                                                   static_cast<std::size_t>(std::max(1, cfg.kmeans_warmup)));
    std::vector<Mat> latents;
    Eigen::Index rows = 0;
    for (std::size_t i = 0; i < warm; ++i) {
      latents.push_back(latent_for_value(tok, embeddings[i], static_cast<std::uint64_t>(subgraphs[i].center)));
      rows += latents.back().rows();
    }
    Mat data(rows, tok.latent_width());
    Eigen::Index off = 0;
    for (const auto& z : latents) {
      data.middleRows(off, z.rows()) = z;
      off += z.rows();
    }
    tok.codebook.vectors.mutable_value() = kmeans(data, cfg.codebook_size, cfg.kmeans_iterations, rng);
  }

  nn::ParamSet params;
  if (!cfg.no_encoder) params.append(tok.encoder.params(), "enc.");
  if (!cfg.no_diffusion) params.append(tok.denoiser.params(), "dn.");
  params.append(tok.codebook.params(), "cb.");
  params.append(tok.decoder.params(), "dec.");
  nn::Adam opt(params, {.lr = cfg.lr, .clip_norm = 10.0});

  std::vector<std::size_t> order(subgraphs.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<int> step_dist(1, cfg.steps);

  TokenizerLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossParts sums;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);
      opt.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const EgoSubgraph& sub = subgraphs[idx];
        ad::Var z = latent_for(tok, embeddings[idx], static_cast<std::uint64_t>(sub.center));

        ad::Var l_diff = ad::scalar(0.0);
        if (!cfg.no_diffusion) {
          const int t = step_dist(rng);
          const Mat eps = gaussian(z.rows(), z.cols(), rng);
          l_diff = diffusion_loss(tok.denoiser, z, t, eps, tok.schedule);
        }
        ad::Var l_quant = quant_loss(z, tok.codebook);
        DecodeResult rec = decode(tok.decoder, straight_through(z, tok.codebook),
                                  ad::constant(sub.features));
        ad::Var l_dec = dec_loss(rec.x_hat, rec.a_hat, sub.features, sub.adjacency);
        ad::Var total = total_loss(l_diff, l_quant, l_dec, cfg.weights);
        ad::scale(total, inv_b).backward();

        sums.diff += l_diff.item();
        sums.quant += l_quant.item();
        sums.dec += l_dec.item();
      }
      opt.step();
    }
    const double n = static_cast<double>(subgraphs.size());
    log.epochs.push_back({sums.diff / n, sums.quant / n, sums.dec / n});
  }
  log.codebook_utilization = codebook_utilization(tok, subgraphs, gnn);
  return {std::move(tok), std::move(log)};
}

std::vector<TokenGrid> make_trajectory(const TokenizerBundle& tok, const GnnModel& gnn,
                                       const EgoSubgraph& sub, std::uint64_t seed) {
  const int T = tok.config.steps;
  std::vector<TokenGrid> grids;
  grids.reserve(static_cast<std::size_t>(T) + 1);
  const auto key = static_cast<std::uint64_t>(sub.center);
  if (tok.config.no_diffusion) {
    for (int t = T; t >= 0; --t) {
      const double ratio = tok.config.perturb_ratio * static_cast<double>(t) / T;
      const EgoSubgraph noisy = perturb_edges(sub, ratio, ratio, derive_seed(seed, static_cast<std::uint64_t>(t)));
      grids.push_back(quantize(latent_for_value(tok, embed(gnn, noisy), key), tok.codebook, t));
    }
    return grids;
  }
  const Mat z0 = latent_for_value(tok, embed(gnn, sub), key);
  Rng rng(derive_seed(seed, 0xf0));
  const Mat zt = forward_diffuse(z0, T, gaussian(z0.rows(), z0.cols(), rng), tok.schedule);
  const auto traj = build_trajectory(tok.denoiser, tok.schedule, zt, seeded_noise(derive_seed(seed, 0xf1)));
  for (std::size_t i = 0; i < traj.size(); ++i) {
    grids.push_back(quantize(traj[i], tok.codebook, T - static_cast<int>(i)));
  }
  return grids;
}

EgoSubgraph decode_tokens(const TokenizerBundle& tok, const TokenGrid& tokens,
                          const EgoSubgraph& sub) {
  ad::NoGradGuard guard;
  const DecodeResult r = decode(tok.decoder, ad::constant(dequantize(tokens, tok.codebook)),
                                ad::constant(sub.features));
  EgoSubgraph out = sub;
  out.features = r.x_hat.value();
  const Mat& a = r.a_hat.value();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.adjacency(i, j) = (i != j && a(i, j) > 0.5) ? 1.0 : 0.0;
    }
  }
  return out;
}

void save_tokenizer(const TokenizerBundle& tok, const std::filesystem::path& path,
                    const std::string& config_hash) {
  TensorArchive ar;
  ar.meta = {{"kind", "tokenizer"},
             {"config", tok.config.to_json()},
             {"embed_width", tok.encoder.input_width()},
             {"feature_width", tok.decoder.query_mlp.layers.front().weight.rows()},
             {"config_hash", config_hash}};
  ar.put("", tok.params());
  write_archive(path, ar);
}

TokenizerBundle load_tokenizer(const std::filesystem::path& path) {
  const TensorArchive ar = read_archive(path);
  expect_kind(ar, "tokenizer", path);
  TokenizerBundle tok = TokenizerBundle::create(TokenizerConfig::from_json(ar.meta.at("config")),
                                                ar.meta.at("embed_width").get<Eigen::Index>(),
                                                ar.meta.at("feature_width").get<Eigen::Index>());
  nn::ParamSet p = tok.params();
  ar.restore("", p);
  return tok;
}

}  // namespace grail
