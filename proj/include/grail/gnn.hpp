#pragma once

#include "grail/autograd.hpp"
#include "grail/graph.hpp"
#include "grail/nn.hpp"

#include <filesystem>
#include <utility>
#include <vector>

namespace grail {

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
Mat normalize_adjacency(const Mat& adjacency);
SpMat normalize_adjacency(const Graph& g);

/// activation(A_norm * H * W).
Mat gcn_layer(const Mat& h, const Mat& a_norm, const Mat& w, nn::Activation act);

/// Frozen source model: a GCN stack followed by a linear classifier.
/// Hidden layers use `activation`; the last GCN layer is linear and its
/// output is the node embedding.
struct GnnModel {
  std::vector<nn::Linear> layers;
  nn::Linear classifier;
  nn::Activation activation = nn::Activation::Relu;

  GnnModel() = default;
  GnnModel(Eigen::Index in_dim, Eigen::Index hidden, int layer_count, int classes, Rng& rng,
           nn::Activation act = nn::Activation::Relu);

  Eigen::Index input_dim() const { return layers.front().weight.rows(); }
  Eigen::Index hidden_dim() const { return layers.back().weight.cols(); }
  int class_count() const { return static_cast<int>(classifier.weight.cols()); }

  ad::Var forward_embed(const SpMat& a_norm, const ad::Var& x) const;
  nn::ParamSet params() const;
};

struct PredictionTable {
  Mat probs;                // n x C, rows on the simplex
  std::vector<int> labels;  // argmax per row
};

struct PretrainConfig {
  int epochs = 200;
  double lr = 0.01;
  double weight_decay = 5e-4;
  int hidden = 256;
  int layers = 2;
  /// Fraction of labeled nodes held out to report validation accuracy.
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> loss;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

/// Full-batch cross-entropy training on the labeled source graph.
std::pair<GnnModel, PretrainLog> pretrain_source(const Graph& g, const PretrainConfig& cfg);

Mat embed(const GnnModel& m, const Graph& g);
Mat embed(const GnnModel& m, const EgoSubgraph& sub);
/// Embedding and prediction for an explicit (adjacency, features) pair.
Mat embed(const GnnModel& m, const Mat& adjacency, const Mat& features);

PredictionTable predict(const GnnModel& m, const Graph& g);
PredictionTable predict(const GnnModel& m, const Mat& adjacency, const Mat& features);
PredictionTable predict_from_embedding(const GnnModel& m, const Mat& embedding);

/// (1/n) sum_i sum_c p_ic log p_ic with 0 log 0 = 0.
double mean_negative_entropy(const PredictionTable& t);
double mean_negative_entropy(const Mat& probs);

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
};

F1Scores micro_macro_f1(std::span<const int> predicted, std::span<const int> truth, int classes);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

void save_gnn(const GnnModel& m, const std::filesystem::path& path,
              const std::string& config_hash = {});
GnnModel load_gnn(const std::filesystem::path& path);

}  // namespace grail
