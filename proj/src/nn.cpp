#include "grail/nn.hpp"

#include "grail/errors.hpp"

#include <cmath>
#include <limits>

namespace grail {

Mat gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat xavier(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Mat m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

namespace nn {

void ParamSet::append(const ParamSet& other, const std::string& prefix) {
  for (const auto& [name, v] : other.items_) items_.emplace_back(prefix + name, v);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, v] : items_) v.zero_grad();
}

std::vector<Mat> ParamSet::values() const {
  std::vector<Mat> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v.value());
  return out;
}

void ParamSet::load_values(const std::vector<Mat>& values) {
  require(values.size() == items_.size(), "parameter count mismatch on load");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& v = items_[i].second;
    require_dims(values[i].rows() == v.rows() && values[i].cols() == v.cols(),
                 "parameter shape mismatch for " + items_[i].first);
    v.mutable_value() = values[i];
  }
}

void ParamSet::copy_from(const ParamSet& other) { load_values(other.values()); }

double ParamSet::distance2(const std::vector<Mat>& snapshot) const {
  require(snapshot.size() == items_.size(), "snapshot layout mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < snapshot.size(); ++i) {
    d += (items_[i].second.value() - snapshot[i]).squaredNorm();
  }
  return d;
}

Linear::Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool with_bias)
    : weight(ad::parameter(xavier(in, out, rng))) {
  if (with_bias) bias = ad::parameter(Mat::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_row(y, bias) : y;
}

ParamSet Linear::params() const {
  ParamSet p;
  p.add("weight", weight);
  if (bias.defined()) p.add("bias", bias);
  return p;
}

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::Relu: return ad::relu(x);
    case Activation::Gelu: return ad::gelu(x);
    case Activation::Tanh: return ad::tanh(x);
    case Activation::Identity: return x;
  }
  return x;
}

Mlp::Mlp(const std::vector<Eigen::Index>& widths, Rng& rng, Activation act) : act(act) {
  require(widths.size() >= 2, "Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.emplace_back(widths[i], widths[i + 1], rng);
  }
}

Var Mlp::operator()(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = activate(h, act);
  }
  return h;
}

ParamSet Mlp::params() const {
  ParamSet p;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    p.append(layers[i].params(), "l" + std::to_string(i) + ".");
  }
  return p;
}

LayerNorm::LayerNorm(Eigen::Index width)
    : gamma(ad::parameter(Mat::Ones(1, width))), beta(ad::parameter(Mat::Zero(1, width))) {}

ParamSet LayerNorm::params() const {
  ParamSet p;
  p.add("gamma", gamma);
  p.add("beta", beta);
  return p;
}

Attention::Attention(Eigen::Index query_width, Eigen::Index kv_width, Eigen::Index width,
                     int heads, Rng& rng)
    : wq(query_width, width, rng),
      wk(kv_width, width, rng),
      wv(kv_width, width, rng),
      wo(width, width, rng),
      heads(heads),
      width(width) {
  require(heads >= 1 && width % heads == 0, "attention width must divide into heads");
}

Var Attention::operator()(const Var& query_src, const Var& kv_src, const Mat* mask) const {
  Var q = wq(query_src);
  Var k = wk(kv_src);
  Var v = wv(kv_src);
  const Eigen::Index dh = width / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
    if (mask != nullptr) scores = ad::add_const(scores, *mask);
    outs.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  Var joined = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return wo(joined);
}

ParamSet Attention::params() const {
  ParamSet p;
  p.append(wq.params(), "q.");
  p.append(wk.params(), "k.");
  p.append(wv.params(), "v.");
  p.append(wo.params(), "o.");
  return p;
}

Mat causal_mask(Eigen::Index n) {
  Mat m = Mat::Zero(n, n);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = ninf;
  }
  return m;
}

Adam::Adam(ParamSet params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [_, v] : params_.items()) {
    m_.push_back(Mat::Zero(v.rows(), v.cols()));
    v_.push_back(Mat::Zero(v.rows(), v.cols()));
  }
}

void Adam::step() {
  ++t_;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double norm2 = 0.0;
    for (const auto& [_, v] : params_.items()) {
      if (v.node()->grad.size() != 0) norm2 += v.node()->grad.squaredNorm();
    }
    const double norm = std::sqrt(norm2);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Var v = items[i].second;
    const Mat& g = v.node()->grad;
    if (g.size() == 0) {
      m_[i] *= cfg_.beta1;
      v_[i] *= cfg_.beta2;
    } else {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * scale * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * (scale * g).cwiseAbs2();
    }
    v.mutable_value().array() -=
        cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace nn
}  // namespace grail
