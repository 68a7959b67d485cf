#include "grail/gnn.hpp"

#include "grail/checkpoint.hpp"
#include "grail/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace grail {

Mat normalize_adjacency(const Mat& adjacency) {
  require_dims(adjacency.rows() == adjacency.cols(), "adjacency must be square");
  const Eigen::Index n = adjacency.rows();
  Mat a = adjacency + Mat::Identity(n, n);
  Eigen::VectorXd inv_sqrt = a.rowwise().sum().array().rsqrt();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

SpMat normalize_adjacency(const Graph& g) {
  const int n = g.node_count();
  std::vector<double> inv_sqrt(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    inv_sqrt[static_cast<std::size_t>(v)] =
        1.0 / std::sqrt(static_cast<double>(g.neighbors(v).size()) + 1.0);
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(g.edge_count() * 2 + static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    const double dv = inv_sqrt[static_cast<std::size_t>(v)];
    trip.emplace_back(v, v, dv * dv);
    for (int u : g.neighbors(v)) trip.emplace_back(v, u, dv * inv_sqrt[static_cast<std::size_t>(u)]);
  }
  SpMat a(n, n);
  a.setFromTriplets(trip.begin(), trip.end());
  return a;
}

Mat gcn_layer(const Mat& h, const Mat& a_norm, const Mat& w, nn::Activation act) {
  require_dims(a_norm.rows() == a_norm.cols() && a_norm.cols() == h.rows(),
               "gcn_layer: A_norm must be p x p with p = rows(H)");
  require_dims(h.cols() == w.rows(), "gcn_layer: H width != W rows");
  ad::NoGradGuard guard;
  return nn::activate(ad::constant(a_norm * h * w), act).value();
}

GnnModel::GnnModel(Eigen::Index in_dim, Eigen::Index hidden, int layer_count, int classes,
                   Rng& rng, nn::Activation act)
    : activation(act) {
  require(layer_count >= 1, "GNN needs at least one layer");
  require(classes >= 1, "GNN needs at least one class");
  Eigen::Index width = in_dim;
  for (int l = 0; l < layer_count; ++l) {
    layers.emplace_back(width, hidden, rng);
    width = hidden;
  }
  classifier = nn::Linear(hidden, classes, rng);
}

ad::Var GnnModel::forward_embed(const SpMat& a_norm, const ad::Var& x) const {
  require_dims(x.cols() == input_dim(), "feature width " + std::to_string(x.cols()) +
                                            " != model input width " +
                                            std::to_string(input_dim()));
  ad::Var h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = ad::add_row(ad::matmul(a_norm, ad::matmul(h, layers[l].weight)), layers[l].bias);
    if (l + 1 < layers.size()) h = nn::activate(h, activation);
  }
  return h;
}

nn::ParamSet GnnModel::params() const {
  nn::ParamSet p;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    p.append(layers[l].params(), "gcn" + std::to_string(l) + ".");
  }
  p.append(classifier.params(), "cls.");
  return p;
}

namespace {

std::vector<int> argmax_rows(const Mat& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

SpMat to_sparse(const Mat& dense) { return dense.sparseView(); }

}  // namespace

std::pair<GnnModel, PretrainLog> pretrain_source(const Graph& g, const PretrainConfig& cfg) {
  require(g.has_labels(), "pretrain_source needs a labeled graph");
  require(cfg.epochs >= 0, "epochs must be >= 0");
  require(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0, "val_fraction outside [0,1)");

  Rng rng(cfg.seed);
  GnnModel model(g.feature_dim(), cfg.hidden, cfg.layers, g.class_count(), rng);

  std::vector<int> order(static_cast<std::size_t>(g.node_count()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(order.size()));
  std::vector<int> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<int> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  require(!train.empty(), "no training nodes left after the validation split");

  std::vector<int> train_y;
  for (int v : train) train_y.push_back(g.labels()[static_cast<std::size_t>(v)]);

  const SpMat a_norm = normalize_adjacency(g);
  const ad::Var x = ad::constant(g.features());
  nn::ParamSet params = model.params();
  nn::Adam opt(params, {.lr = cfg.lr});

  PretrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.zero_grad();
    ad::Var logits = model.classifier(model.forward_embed(a_norm, x));
    ad::Var loss = ad::cross_entropy(ad::gather_rows(logits, train), train_y);
    ad::Var objective = loss;
    if (cfg.weight_decay > 0.0) {
      for (const auto& l : model.layers) {
        objective = objective + ad::scale(ad::sum_squares(l.weight), 0.5 * cfg.weight_decay);
      }
    }
    objective.backward();
    opt.step();
    log.loss.push_back(loss.item());
  }

  const PredictionTable pred = predict(model, g);
  auto acc_on = [&](const std::vector<int>& nodes) {
    if (nodes.empty()) return 0.0;
    int hit = 0;
    for (int v : nodes) {
      hit += pred.labels[static_cast<std::size_t>(v)] == g.labels()[static_cast<std::size_t>(v)];
    }
    return static_cast<double>(hit) / static_cast<double>(nodes.size());
  };
  log.train_accuracy = acc_on(train);
  log.val_accuracy = acc_on(val);
  return {std::move(model), std::move(log)};
}

Mat embed(const GnnModel& m, const Graph& g) {
  ad::NoGradGuard guard;
  return m.forward_embed(normalize_adjacency(g), ad::constant(g.features())).value();
}

Mat embed(const GnnModel& m, const Mat& adjacency, const Mat& features) {
  require_dims(adjacency.rows() == features.rows(), "adjacency and features disagree on p");
  ad::NoGradGuard guard;
  return m.forward_embed(to_sparse(normalize_adjacency(adjacency)), ad::constant(features))
      .value();
}

Mat embed(const GnnModel& m, const EgoSubgraph& sub) {
  return embed(m, sub.adjacency, sub.features);
}

PredictionTable predict_from_embedding(const GnnModel& m, const Mat& embedding) {
  ad::NoGradGuard guard;
  PredictionTable t;
  t.probs = ad::softmax_rows(m.classifier(ad::constant(embedding))).value();
  t.labels = argmax_rows(t.probs);
  return t;
}

PredictionTable predict(const GnnModel& m, const Graph& g) {
  return predict_from_embedding(m, embed(m, g));
}

PredictionTable predict(const GnnModel& m, const Mat& adjacency, const Mat& features) {
  return predict_from_embedding(m, embed(m, adjacency, features));
}

double mean_negative_entropy(const Mat& probs) {
  require(probs.rows() >= 1, "entropy of an empty prediction table");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    if (p > 0.0) total += p * std::log(p);
  }
  return total / static_cast<double>(probs.rows());
}

double mean_negative_entropy(const PredictionTable& t) { return mean_negative_entropy(t.probs); }

F1Scores micro_macro_f1(std::span<const int> predicted, std::span<const int> truth, int classes) {
  require(predicted.size() == truth.size(), "prediction and truth lengths differ");
  require(classes >= 1, "classes must be >= 1");
  std::vector<double> tp(static_cast<std::size_t>(classes)), fp(tp.size()), fn(tp.size());
  std::vector<bool> seen(tp.size(), false);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int y = truth[i];
    const int p = predicted[i];
    require(y >= 0 && y < classes && p >= 0 && p < classes, "label outside [0, C)");
    seen[static_cast<std::size_t>(y)] = seen[static_cast<std::size_t>(p)] = true;
    if (y == p) {
      tp[static_cast<std::size_t>(y)] += 1;
    } else {
      fp[static_cast<std::size_t>(p)] += 1;
      fn[static_cast<std::size_t>(y)] += 1;
    }
  }
  F1Scores out;
  double stp = 0, sfp = 0, sfn = 0;
  int counted = 0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    stp += tp[c];
    sfp += fp[c];
    sfn += fn[c];
    if (!seen[c]) continue;
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    out.macro += denom > 0 ? 2 * tp[c] / denom : 0.0;
    ++counted;
  }
  const double denom = 2 * stp + sfp + sfn;
  out.micro = denom > 0 ? 2 * stp / denom : 0.0;
  out.macro = counted > 0 ? out.macro / counted : 0.0;
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  require(predicted.size() == truth.size(), "prediction and truth lengths differ");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

void save_gnn(const GnnModel& m, const std::filesystem::path& path,
              const std::string& config_hash) {
  TensorArchive ar;
  ar.meta = {{"kind", "gnn"},
             {"layers", m.layers.size()},
             {"input_dim", m.input_dim()},
             {"hidden", m.hidden_dim()},
             {"classes", m.class_count()},
             {"activation", static_cast<int>(m.activation)},
             {"config_hash", config_hash}};
  ar.put("", m.params());
  write_archive(path, ar);
}

GnnModel load_gnn(const std::filesystem::path& path) {
  const TensorArchive ar = read_archive(path);
  expect_kind(ar, "gnn", path);
  Rng rng(0);
  GnnModel m(ar.meta.at("input_dim").get<Eigen::Index>(), ar.meta.at("hidden").get<Eigen::Index>(),
             ar.meta.at("layers").get<int>(), ar.meta.at("classes").get<int>(), rng,
             static_cast<nn::Activation>(ar.meta.at("activation").get<int>()));
  nn::ParamSet p = m.params();
  ar.restore("", p);
  return m;
}

}  // namespace grail
