#pragma once

#include "grail/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace grail {

using Rng = std::mt19937_64;

Mat gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0);
Mat xavier(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);

namespace nn {

using ad::Var;

/// Named, ordered view over a model's trainable leaves. Order is stable and
/// defines the checkpoint layout.
class ParamSet {
 public:
  void add(std::string name, Var v) { items_.emplace_back(std::move(name), std::move(v)); }
  void append(const ParamSet& other, const std::string& prefix);

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  std::vector<Mat> values() const;
  void load_values(const std::vector<Mat>& values);
  /// Copies values from another ParamSet with identical layout.
  void copy_from(const ParamSet& other);
  /// Sum of squared differences against a snapshot.
  double distance2(const std::vector<Mat>& snapshot) const;

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool with_bias = true);
  Var operator()(const Var& x) const;
  ParamSet params() const;
};

enum class Activation { Relu, Gelu, Tanh, Identity };

Var activate(const Var& x, Activation act);

/// Stack of Linear layers with `act` between them (not after the last).
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::Relu;

  Mlp() = default;
  Mlp(const std::vector<Eigen::Index>& widths, Rng& rng, Activation act = Activation::Relu);
  Var operator()(const Var& x) const;
  ParamSet params() const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index width);
  Var operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta); }
  ParamSet params() const;
};

/// Multi-head scaled dot-product attention. Queries come from `query_src`,
/// keys and values from `kv_src`; optional additive mask (0 / -inf).
struct Attention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  Eigen::Index width = 0;

  Attention() = default;
  Attention(Eigen::Index query_width, Eigen::Index kv_width, Eigen::Index width, int heads,
            Rng& rng);
  Var operator()(const Var& query_src, const Var& kv_src, const Mat* mask = nullptr) const;
  ParamSet params() const;
};

Mat causal_mask(Eigen::Index n);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

class Adam {
 public:
  Adam(ParamSet params, AdamConfig cfg);
  /// Applies one update from the gradients currently held by the params.
  void step();
  void zero_grad() { params_.zero_grad(); }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

 private:
  ParamSet params_;
  AdamConfig cfg_;
  std::vector<Mat> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace nn
}  // namespace grail
