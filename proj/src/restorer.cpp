#include "grail/restorer.hpp"

#include "grail/checkpoint.hpp"
#include "grail/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace grail {

int serialized_length(int k, int steps) { return (steps + 1) * k + steps + 2; }

std::vector<int> serialize_trajectory(const std::vector<TokenGrid>& traj) {
  require(!traj.empty(), "empty trajectory");
  const std::size_t k = traj.front().ids.size();
  require(k > 0, "trajectory block has no tokens");
  std::vector<int> seq{kBos};
  for (std::size_t b = 0; b < traj.size(); ++b) {
    require(traj[b].ids.size() == k, "ragged trajectory: block " + std::to_string(b) + " has " +
                                         std::to_string(traj[b].ids.size()) + " tokens, expected " +
                                         std::to_string(k));
    if (b > 0) seq.push_back(kSep);
    for (int c : traj[b].ids) {
      require(c >= 0, "negative graph code in trajectory");
      seq.push_back(code_to_token(c));
    }
  }
  seq.push_back(kEos);
  return seq;
}

std::vector<TokenGrid> deserialize_trajectory(std::span<const int> seq, int k) {
  require(k >= 1, "K must be >= 1");
  require(seq.size() >= 3 && seq.front() == kBos && seq.back() == kEos,
          "sequence must start with BOS and end with EOS");
  std::vector<TokenGrid> blocks;
  TokenGrid cur;
  for (std::size_t i = 1; i + 1 < seq.size(); ++i) {
    const int t = seq[i];
    if (t == kSep) {
      require(static_cast<int>(cur.ids.size()) == k,
              "block ending at position " + std::to_string(i) + " has " +
                  std::to_string(cur.ids.size()) + " tokens, expected " + std::to_string(k));
      blocks.push_back(std::move(cur));
      cur = {};
    } else {
      require(is_graph_token(t), "unexpected special token " + std::to_string(t) +
                                     " at position " + std::to_string(i));
      cur.ids.push_back(token_to_code(t));
    }
  }
  require(static_cast<int>(cur.ids.size()) == k, "final block has " +
                                                     std::to_string(cur.ids.size()) +
                                                     " tokens, expected " + std::to_string(k));
  blocks.push_back(std::move(cur));
  const int steps = static_cast<int>(blocks.size()) - 1;
  for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].step = steps - static_cast<int>(b);
  return blocks;
}

// ---------------------------------------------------------------------------

nlohmann::json RestorerConfig::to_json() const {
  return {{"codes", codes}, {"width", width}, {"layers", layers},
          {"heads", heads}, {"context", context}, {"seed", seed}};
}

RestorerConfig RestorerConfig::from_json(const nlohmann::json& j) {
  RestorerConfig c;
  c.codes = j.value("codes", c.codes);
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.context = j.value("context", c.context);
  c.seed = j.value("seed", c.seed);
  return c;
}

RestorerLM::RestorerLM(const RestorerConfig& cfg) : cfg_(cfg) {
  require(cfg.codes >= 1, "restorer needs at least one graph code");
  require(cfg.width >= 1 && cfg.layers >= 1 && cfg.context >= 2, "bad restorer shape");
  require(cfg.width % cfg.heads == 0, "restorer width must divide into heads");
  Rng rng(derive_seed(cfg.seed, 0x1a));
  const Eigen::Index w = cfg.width;
  tok_embed_ = ad::parameter(gaussian(cfg.vocab_size(), w, rng, 0.02));
  pos_embed_ = ad::parameter(gaussian(cfg.context, w, rng, 0.02));
  for (int l = 0; l < cfg.layers; ++l) {
    DecoderBlock b;
    b.ln1 = nn::LayerNorm(w);
    b.attn = nn::Attention(w, w, w, cfg.heads, rng);
    b.ln2 = nn::LayerNorm(w);
    b.mlp = nn::Mlp({w, 4 * w, w}, rng, nn::Activation::Gelu);
    blocks_.push_back(std::move(b));
  }
  ln_f_ = nn::LayerNorm(w);
  head_ = nn::Linear(w, cfg.vocab_size(), rng);
}

ad::Var RestorerLM::logits(std::span<const int> tokens) const {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  require(n >= 1, "empty token sequence");
  require(n <= cfg_.context, "sequence length " + std::to_string(n) + " exceeds context " +
                                 std::to_string(cfg_.context));
  for (int t : tokens) require(t >= 0 && t < vocab_size(), "token id " + std::to_string(t) + " outside vocabulary");
  ad::Var x = ad::gather_rows(tok_embed_, tokens) + ad::slice_rows(pos_embed_, 0, n);
  const Mat mask = nn::causal_mask(n);
  for (const auto& b : blocks_) {
    ad::Var h = b.ln1(x);
    x = x + b.attn(h, h, &mask);
    x = x + b.mlp(b.ln2(x));
  }
  return head_(ln_f_(x));
}

Mat RestorerLM::logits_value(std::span<const int> tokens) const {
  ad::NoGradGuard guard;
  return logits(tokens).value();
}

nn::ParamSet RestorerLM::params() const {
  nn::ParamSet p;
  p.add("tok_embed", tok_embed_);
  p.add("pos_embed", pos_embed_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    p.append(blocks_[l].ln1.params(), pre + "ln1.");
    p.append(blocks_[l].attn.params(), pre + "attn.");
    p.append(blocks_[l].ln2.params(), pre + "ln2.");
    p.append(blocks_[l].mlp.params(), pre + "mlp.");
  }
  p.append(ln_f_.params(), "ln_f.");
  p.append(head_.params(), "head.");
  return p;
}

RestorerLM RestorerLM::clone() const {
  RestorerLM copy(cfg_);
  nn::ParamSet dst = copy.params();
  dst.copy_from(params());
  return copy;
}

RestorerLM::Cache RestorerLM::start_cache() const {
  Cache c;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    c.keys.emplace_back(cfg_.context, cfg_.width);
    c.values.emplace_back(cfg_.context, cfg_.width);
  }
  return c;
}

RowVec RestorerLM::step(Cache& cache, int token) const {
  require(cache.length < cfg_.context, "context exhausted");
  require(token >= 0 && token < vocab_size(), "token id outside vocabulary");
  ad::NoGradGuard guard;
  const int pos = cache.length;
  Mat x = tok_embed_.value().row(token) + pos_embed_.value().row(pos);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const DecoderBlock& b = blocks_[l];
    const ad::Var h = b.ln1(ad::constant(x));
    cache.keys[l].row(pos) = b.attn.wk(h).value();
    cache.values[l].row(pos) = b.attn.wv(h).value();
    const Mat q = b.attn.wq(h).value();
    const Eigen::Index dh = b.attn.width / b.attn.heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat joined(1, b.attn.width);
    for (int hd = 0; hd < b.attn.heads; ++hd) {
      const auto keys = cache.keys[l].block(0, hd * dh, pos + 1, dh);
      const auto vals = cache.values[l].block(0, hd * dh, pos + 1, dh);
      RowVec scores = (q.block(0, hd * dh, 1, dh) * keys.transpose()) * inv;
      scores = (scores.array() - scores.maxCoeff()).exp();
      scores /= scores.sum();
      joined.block(0, hd * dh, 1, dh) = scores * vals;
    }
    x += b.attn.wo(ad::constant(joined)).value();
    x += b.mlp(b.ln2(ad::constant(x))).value();
  }
  cache.length = pos + 1;
  return head_(ln_f_(ad::constant(x))).value();
}

// ---------------------------------------------------------------------------

ad::Var sft_loss_var(const RestorerLM& lm, std::span<const int> seq) {
  require(seq.size() >= 2, "sft_loss needs at least two tokens");
  require(static_cast<int>(seq.size()) <= lm.context(),
          "sequence length " + std::to_string(seq.size()) + " exceeds context " +
              std::to_string(lm.context()));
  ad::Var logits = lm.logits(seq.first(seq.size() - 1));
  return ad::cross_entropy(logits, seq.subspan(1));
}

double sft_loss(const RestorerLM& lm, std::span<const int> seq) {
  ad::NoGradGuard guard;
  return sft_loss_var(lm, seq).item();
}

void TokenCorpus::validate() const {
  require(k >= 1 && steps >= 0 && codes >= 1, "corpus header needs K >= 1, T >= 0, M >= 1");
  const auto expected = static_cast<std::size_t>(serialized_length(k, steps));
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    require(s.size() == expected, "trajectory " + std::to_string(i) + " has length " +
                                      std::to_string(s.size()) + ", expected " +
                                      std::to_string(expected));
    for (const auto& block : deserialize_trajectory(s, k)) {
      for (int c : block.ids) {
        require(c < codes, "trajectory " + std::to_string(i) + " uses code " + std::to_string(c) +
                               " outside codebook of size " + std::to_string(codes));
      }
    }
  }
}

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const nlohmann::json header = {{"K", corpus.k},
                                 {"T", corpus.steps},
                                 {"M", corpus.codes},
                                 {"specials", {{"BOS", kBos}, {"EOS", kEos}, {"SEP", kSep}}},
                                 {"version", kCorpusVersion}};
  out << header.dump() << '\n';
  for (const auto& s : corpus.sequences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

TokenCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open corpus " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty corpus file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ":1: bad header: " + e.what());
  }
  if (header.value("version", -1) != kCorpusVersion) {
    throw SchemaError(path.string() + ": unsupported corpus version");
  }
  const auto& sp = header.at("specials");
  if (sp.value("BOS", -1) != kBos || sp.value("EOS", -1) != kEos || sp.value("SEP", -1) != kSep) {
    throw SchemaError(path.string() + ": special-token map differs from this build");
  }
  TokenCorpus c;
  c.k = header.at("K").get<int>();
  c.steps = header.at("T").get<int>();
  c.codes = header.at("M").get<int>();
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<int> seq;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        seq.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad token '" + tok + "'");
      }
    }
    c.sequences.push_back(std::move(seq));
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return c;
}

SftLog train_sft(RestorerLM& lm, const TokenCorpus& corpus, const SftConfig& cfg) {
  require(!corpus.sequences.empty(), "train_sft needs a nonempty corpus");
  require(cfg.lr > 0.0 && cfg.epochs >= 0, "bad SFT learning rate or epoch count");
  nn::Adam opt(lm.params(), {.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  Rng rng(derive_seed(cfg.seed, 0x5f7));
  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  int budget = cfg.epochs * static_cast<int>(order.size());
  if (cfg.max_steps > 0) budget = std::min(budget, cfg.max_steps);
  SftLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && log.steps >= cfg.max_steps) break;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int count = 0;
    for (std::size_t i : order) {
      if (cfg.max_steps > 0 && log.steps >= cfg.max_steps) break;
      if (cfg.linear_decay) opt.set_lr(cfg.lr * (1.0 - static_cast<double>(log.steps) / budget));
      opt.zero_grad();
      ad::Var loss = sft_loss_var(lm, corpus.sequences[i]);
      loss.backward();
      opt.step();
      total += loss.item();
      ++count;
      ++log.steps;
    }
    log.epoch_loss.push_back(total / count);
    if (cfg.target_loss > 0.0 && log.epoch_loss.back() < cfg.target_loss) break;
  }
  return log;
}

// ---------------------------------------------------------------------------

std::vector<char> allowed_next(std::span<const int> prefix, int k, int max_blocks, int vocab) {
  require(!prefix.empty() && prefix.front() == kBos, "prefix must start with BOS");
  std::vector<char> allowed(static_cast<std::size_t>(vocab), 0);
  int in_block = 0;
  int complete = 0;
  bool boundary = false;
  for (std::size_t i = 1; i < prefix.size(); ++i) {
    const int t = prefix[i];
    if (t == kEos) return allowed;
    if (t == kSep) {
      boundary = false;
      continue;
    }
    boundary = false;
    if (++in_block == k) {
      in_block = 0;
      ++complete;
      boundary = true;
    }
  }
  if (boundary) {
    allowed[kEos] = 1;
    if (max_blocks <= 0 || complete < max_blocks) allowed[kSep] = 1;
  } else {
    std::fill(allowed.begin() + kSpecialCount, allowed.end(), 1);
  }
  return allowed;
}

namespace {

int default_max_blocks(const RestorerLM& lm, int k) { return (lm.context() - 1) / (k + 1); }

int sample_token(const RowVec& logits, const std::vector<char>& allowed, const SamplingConfig& cfg,
                 Rng& rng) {
  std::vector<int> cand;
  for (std::size_t i = 0; i < allowed.size(); ++i) {
    if (allowed[i]) cand.push_back(static_cast<int>(i));
  }
  require(!cand.empty(), "no token allowed");
  if (cand.size() == 1) return cand.front();
  if (cfg.temperature <= 0.0) {
    return *std::max_element(cand.begin(), cand.end(),
                             [&](int a, int b) { return logits(a) < logits(b); });
  }
  if (cfg.top_k > 0 && static_cast<std::size_t>(cfg.top_k) < cand.size()) {
    std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) { return logits(a) > logits(b); });
    cand.resize(static_cast<std::size_t>(cfg.top_k));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int c : cand) mx = std::max(mx, logits(c) / cfg.temperature);
  std::vector<double> w;
  w.reserve(cand.size());
  for (int c : cand) w.push_back(std::exp(logits(c) / cfg.temperature - mx));
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return cand[dist(rng)];
}

}  // namespace

Generation generate(const RestorerLM& lm, std::span<const int> prompt, int k,
                    const SamplingConfig& cfg) {
  require(k >= 1, "K must be >= 1");
  require(prompt.size() == static_cast<std::size_t>(k) + 1 && prompt.front() == kBos,
          "prompt must be BOS followed by one block of " + std::to_string(k) + " graph tokens");
  for (std::size_t i = 1; i < prompt.size(); ++i) {
    require(is_graph_token(prompt[i]) && prompt[i] < lm.vocab_size(),
            "prompt position " + std::to_string(i) + " is not a graph token");
  }
  const int cap = default_max_blocks(lm, k);
  require(cap >= 1, "context too short for one block");
  const int max_blocks = cfg.max_blocks > 0 ? std::min(cfg.max_blocks, cap) : cap;

  Rng rng(cfg.seed);
  Generation g;
  g.tokens.assign(prompt.begin(), prompt.end());
  RestorerLM::Cache cache = lm.start_cache();
  RowVec logits;
  for (int t : prompt) logits = lm.step(cache, t);
  while (true) {
    const std::vector<char> allowed = allowed_next(g.tokens, k, max_blocks, lm.vocab_size());
    if (std::none_of(allowed.begin(), allowed.end(), [](char c) { return c != 0; })) break;
    const int next = sample_token(logits, allowed, cfg, rng);
    g.tokens.push_back(next);
    if (next == kEos) {
      g.finished = true;
      break;
    }
    if (static_cast<int>(g.tokens.size()) >= lm.context()) break;
    logits = lm.step(cache, next);
  }

  TokenGrid cur;
  for (std::size_t i = 1; i < g.tokens.size(); ++i) {
    const int t = g.tokens[i];
    if (!is_graph_token(t)) continue;
    cur.ids.push_back(token_to_code(t));
    if (static_cast<int>(cur.ids.size()) == k) {
      g.blocks.push_back(std::move(cur));
      cur = {};
    }
  }
  const int last = static_cast<int>(g.blocks.size()) - 1;
  for (std::size_t b = 0; b < g.blocks.size(); ++b) g.blocks[b].step = last - static_cast<int>(b);
  return g;
}

PolicyEval policy_eval(const RestorerLM& lm, std::span<const int> seq, int prompt_len, int k,
                       int max_blocks) {
  require(prompt_len >= 1 && static_cast<std::size_t>(prompt_len) <= seq.size(),
          "prompt length outside sequence");
  const int vocab = lm.vocab_size();
  const int cap = default_max_blocks(lm, k);
  const int blocks = max_blocks > 0 ? std::min(max_blocks, cap) : cap;
  std::vector<int> rows, targets;
  std::vector<std::vector<char>> masks;
  for (std::size_t j = static_cast<std::size_t>(prompt_len); j < seq.size(); ++j) {
    auto allowed = allowed_next(seq.first(j), k, blocks, vocab);
    require(allowed[static_cast<std::size_t>(seq[j])] != 0,
            "token at position " + std::to_string(j) + " violates block framing");
    if (std::count(allowed.begin(), allowed.end(), 1) <= 1) continue;
    rows.push_back(static_cast<int>(j) - 1);
    targets.push_back(seq[j]);
    masks.push_back(std::move(allowed));
  }
  PolicyEval ev;
  ev.positions = rows;
  if (rows.empty()) {
    ev.token_logp = ad::constant(Mat::Zero(0, 1));
    ev.dist_logp = ad::constant(Mat::Zero(0, vocab));
    return ev;
  }
  Mat penalty(static_cast<Eigen::Index>(rows.size()), vocab);
  for (std::size_t r = 0; r < masks.size(); ++r) {
    for (int v = 0; v < vocab; ++v) {
      penalty(static_cast<Eigen::Index>(r), v) = masks[r][static_cast<std::size_t>(v)] ? 0.0 : -1e9;
    }
  }
  ad::Var all = lm.logits(seq.first(seq.size() - 1));
  ev.dist_logp = ad::log_softmax_rows(ad::add_const(ad::gather_rows(all, rows), penalty));
  ev.token_logp = ad::pick(ev.dist_logp, targets);
  return ev;
}

void save_restorer(const RestorerLM& lm, const std::filesystem::path& path,
                   const std::string& config_hash) {
  TensorArchive ar;
  ar.meta = {{"kind", "restorer"}, {"config", lm.config().to_json()}, {"config_hash", config_hash}};
  ar.put("", lm.params());
  write_archive(path, ar);
}

RestorerLM load_restorer(const std::filesystem::path& path) {
  const TensorArchive ar = read_archive(path);
  expect_kind(ar, "restorer", path);
  RestorerLM lm(RestorerConfig::from_json(ar.meta.at("config")));
  nn::ParamSet p = lm.params();
  ar.restore("", p);
  return lm;
}

}  // namespace grail
