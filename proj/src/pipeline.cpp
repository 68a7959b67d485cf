#include "grail/pipeline.hpp"

#include "grail/checkpoint.hpp"
#include "grail/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace grail {

namespace {

using nlohmann::json;

// Every scalar field of PipelineConfig with its JSON pointer. Enums are
// handled separately in to_json / from_json.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  f("/version", c.version_proxy);
  f("/seed", c.cfg.seed);
  f("/data/source", c.cfg.source_path);
  f("/data/target", c.cfg.target_path);
  auto& s = c.cfg.synthetic;
  f("/data/synthetic/source_nodes", s.source_nodes);
  f("/data/synthetic/target_nodes", s.target_nodes);
  f("/data/synthetic/classes", s.classes);
  f("/data/synthetic/feature_dim", s.feature_dim);
  f("/data/synthetic/source_p_in", s.source_p_in);
  f("/data/synthetic/source_p_out", s.source_p_out);
  f("/data/synthetic/target_p_in", s.target_p_in);
  f("/data/synthetic/target_p_out", s.target_p_out);
  f("/data/synthetic/class_separation", s.class_separation);
  f("/data/synthetic/shift", s.shift);
  f("/data/synthetic/noise", s.noise);
  f("/data/synthetic/seed", s.seed);
  auto& g = c.cfg.gnn;
  f("/gnn/epochs", g.epochs);
  f("/gnn/lr", g.lr);
  f("/gnn/weight_decay", g.weight_decay);
  f("/gnn/hidden", g.hidden);
  f("/gnn/layers", g.layers);
  f("/gnn/val_fraction", g.val_fraction);
  f("/gnn/seed", g.seed);
  f("/ego/hops", c.cfg.ego_hops);
  f("/ego/max_nodes", c.cfg.ego_max_nodes);
  auto& t = c.cfg.tokenizer;
  f("/tokenizer/K", t.query_tokens);
  f("/tokenizer/M", t.codebook_size);
  f("/tokenizer/T", t.steps);
  f("/tokenizer/beta_min", t.beta_min);
  f("/tokenizer/beta_max", t.beta_max);
  f("/tokenizer/heads", t.heads);
  f("/tokenizer/denoiser_hidden", t.denoiser_hidden);
  f("/tokenizer/lambda1", t.weights.quant);
  f("/tokenizer/lambda2", t.weights.dec);
  f("/tokenizer/epochs", t.epochs);
  f("/tokenizer/batch_size", t.batch_size);
  f("/tokenizer/lr", t.lr);
  f("/tokenizer/kmeans_warmup", t.kmeans_warmup);
  f("/tokenizer/kmeans_iterations", t.kmeans_iterations);
  f("/tokenizer/no_encoder", t.no_encoder);
  f("/tokenizer/no_diffusion", t.no_diffusion);
  f("/tokenizer/perturb_ratio", t.perturb_ratio);
  f("/tokenizer/seed", t.seed);
  f("/tokenizer/subgraphs", c.cfg.tokenizer_subgraphs);
  f("/trajectories/per_subgraph", c.cfg.trajectories_per_subgraph);
  f("/restorer/width", c.cfg.lm_width);
  f("/restorer/layers", c.cfg.lm_layers);
  f("/restorer/heads", c.cfg.lm_heads);
  f("/sft/lr", c.cfg.sft.lr);
  f("/sft/epochs", c.cfg.sft.epochs);
  f("/sft/max_steps", c.cfg.sft.max_steps);
  f("/sft/target_loss", c.cfg.sft.target_loss);
  f("/sft/linear_decay", c.cfg.sft.linear_decay);
  f("/sft/clip_norm", c.cfg.sft.clip_norm);
  f("/sft/seed", c.cfg.sft.seed);
  auto& r = c.cfg.grpo;
  f("/grpo/group", r.group);
  f("/grpo/beta_kl", r.beta_kl);
  f("/grpo/lr", r.lr);
  f("/grpo/eps_std", r.eps_std);
  f("/grpo/temperature", r.temperature);
  f("/grpo/top_k", r.top_k);
  f("/grpo/clip_norm", r.clip_norm);
  f("/grpo/steps", c.cfg.grpo_steps);
  f("/grpo/prompts_per_step", c.cfg.grpo_prompts_per_step);
  f("/grpo/gamma", c.cfg.reward.gamma);
  f("/grpo/sigma", c.cfg.reward.sigma);
  f("/grpo/use_align", c.cfg.reward.use_align);
  f("/grpo/use_conf", c.cfg.reward.use_conf);
  f("/adapt/temperature", c.cfg.adapt_temperature);
}

template <class Cfg>
struct FieldView {
  Cfg& cfg;
  int version_proxy = kConfigVersion;
};

std::string format_name(GraphFormat f) { return f == GraphFormat::Archive ? "archive" : "dir"; }
std::string mode_name(AdaptMode m) { return m == AdaptMode::CenterOnly ? "center-only" : "stitch"; }

AdaptMode parse_mode(const std::string& s) {
  if (s == "center-only" || s == "center") return AdaptMode::CenterOnly;
  if (s == "stitch") return AdaptMode::Stitch;
  throw ContractError("unknown adapt mode '" + s + "' (expected center-only or stitch)");
}

}  // namespace

PipelineConfig PipelineConfig::defaults() { return PipelineConfig{}; }

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.gnn.hidden = 64;
  c.gnn.epochs = 200;
  c.ego_hops = 2;
  c.ego_max_nodes = 32;
  c.tokenizer.query_tokens = 8;
  c.tokenizer.codebook_size = 64;
  c.tokenizer.heads = 2;
  c.tokenizer.denoiser_hidden = 64;
  c.tokenizer.epochs = 30;
  c.tokenizer_subgraphs = 200;
  c.lm_width = 64;
  c.lm_layers = 2;
  c.lm_heads = 2;
  c.sft.lr = 1e-3;
  c.sft.epochs = 10;
  c.grpo.group = 4;
  c.grpo.lr = 1e-4;
  c.grpo_steps = 20;
  c.grpo_prompts_per_step = 4;
  c.synthetic.shift = 1.5;
  return c;
}

nlohmann::json PipelineConfig::to_json() const {
  PipelineConfig copy = *this;
  FieldView<PipelineConfig> view{copy};
  json j = json::object();
  visit_fields(view, [&](const char* ptr, auto& value) { j[json::json_pointer(ptr)] = value; });
  j[json::json_pointer("/data/format")] = format_name(format);
  j[json::json_pointer("/adapt/mode")] = mode_name(adapt_mode);
  return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("config must be a JSON object");
  const json flat = j.flatten();
  std::set<std::string> used;
  PipelineConfig c;
  FieldView<PipelineConfig> view{c};
  visit_fields(view, [&](const char* ptr, auto& value) {
    auto it = flat.find(ptr);
    if (it == flat.end()) return;
    used.insert(ptr);
    using T = std::decay_t<decltype(value)>;
    const bool ok = std::is_same_v<T, bool>          ? it->is_boolean()
                    : std::is_same_v<T, std::string> ? it->is_string()
                    : std::is_floating_point_v<T>    ? it->is_number()
                    : std::is_unsigned_v<T>          ? it->is_number_integer() && *it >= 0
                                                     : it->is_number_integer();
    if (!ok) throw SchemaError("config key '" + std::string(ptr) + "' has the wrong type");
    value = it->template get<T>();
  });
  if (view.version_proxy != kConfigVersion) {
    throw SchemaError("config version " + std::to_string(view.version_proxy) +
                      " unsupported (expected " + std::to_string(kConfigVersion) + ")");
  }
  for (auto [key, enum_key] : {std::pair{"/data/format", 0}, std::pair{"/adapt/mode", 1}}) {
    auto it = flat.find(key);
    if (it == flat.end()) continue;
    used.insert(key);
    if (!it->is_string()) throw SchemaError(std::string("config key '") + key + "' must be a string");
    if (enum_key == 0) {
      c.format = parse_graph_format(it->get<std::string>());
    } else {
      c.adapt_mode = parse_mode(it->get<std::string>());
    }
  }
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    if (!used.contains(it.key())) throw SchemaError("unknown config key '" + it.key() + "'");
  }
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  require(synthetic.source_nodes >= 1 && synthetic.target_nodes >= 1, "synthetic graphs need nodes");
  require(synthetic.classes >= 1 && synthetic.feature_dim >= 1, "synthetic classes/feature_dim >= 1");
  for (double p : {synthetic.source_p_in, synthetic.source_p_out, synthetic.target_p_in,
                   synthetic.target_p_out}) {
    require(p >= 0.0 && p <= 1.0, "edge probabilities must lie in [0,1]");
  }
  require(synthetic.noise >= 0.0, "synthetic noise must be >= 0");
  require(gnn.epochs >= 0 && gnn.lr > 0.0 && gnn.weight_decay >= 0.0, "bad gnn training settings");
  require(gnn.hidden >= 1 && gnn.layers >= 1, "gnn hidden/layers must be >= 1");
  require(gnn.val_fraction >= 0.0 && gnn.val_fraction < 1.0, "gnn.val_fraction outside [0,1)");
  require(ego_hops >= 0 && ego_max_nodes >= 1, "ego hops >= 0 and max_nodes >= 1 required");
  require(tokenizer.query_tokens >= 1, "tokenizer.K must be >= 1");
  require(tokenizer.codebook_size >= 1, "tokenizer.M must be >= 1");
  require(tokenizer.steps >= 1, "tokenizer.T must be >= 1");
  require(tokenizer.beta_min > 0.0 && tokenizer.beta_min <= tokenizer.beta_max &&
              tokenizer.beta_max < 1.0,
          "tokenizer schedule needs 0 < beta_min <= beta_max < 1");
  require(tokenizer.heads >= 1 && gnn.hidden % tokenizer.heads == 0,
          "tokenizer.heads must divide gnn.hidden");
  require(tokenizer.denoiser_hidden >= 1, "tokenizer.denoiser_hidden must be >= 1");
  require(tokenizer.weights.quant >= 0.0 && tokenizer.weights.dec >= 0.0, "lambda1/lambda2 must be >= 0");
  require(tokenizer.epochs >= 0 && tokenizer.batch_size >= 1 && tokenizer.lr > 0.0,
          "bad tokenizer training settings");
  require(tokenizer.kmeans_warmup >= 1 && tokenizer.kmeans_iterations >= 0, "bad k-means settings");
  require(tokenizer.perturb_ratio >= 0.0 && tokenizer.perturb_ratio <= 1.0,
          "tokenizer.perturb_ratio outside [0,1]");
  require(tokenizer_subgraphs >= 0 && trajectories_per_subgraph >= 1, "bad subgraph counts");
  require(lm_width >= 1 && lm_layers >= 1 && lm_heads >= 1 && lm_width % lm_heads == 0,
          "restorer heads must divide width");
  require(sft.lr > 0.0 && sft.epochs >= 0 && sft.max_steps >= 0 && sft.clip_norm >= 0.0 &&
              sft.target_loss >= 0.0,
          "bad sft settings");
  require(grpo.group >= 2, "grpo.group must be >= 2");
  require(grpo.beta_kl >= 0.0, "grpo.beta_kl must be >= 0");
  require(grpo.lr > 0.0 && grpo.eps_std > 0.0 && grpo.clip_norm >= 0.0, "bad grpo optimizer settings");
  require(grpo.top_k >= 0, "grpo.top_k must be >= 0");
  require(grpo_steps >= 0 && grpo_prompts_per_step >= 1, "bad grpo step counts");
  require(reward.gamma > 0.0, "grpo.gamma must be > 0");
  require(reward.sigma >= 0.0, "grpo.sigma must be >= 0 (0 = median heuristic)");
}

std::string PipelineConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string PipelineConfig::variant() const {
  std::vector<std::string> parts;
  if (tokenizer.no_encoder) parts.emplace_back("w/o Encoder");
  if (tokenizer.no_diffusion) parts.emplace_back("w/o Diff");
  if (!reward.use_align) parts.emplace_back("w/o Align");
  if (!reward.use_conf) parts.emplace_back("w/o Conf");
  if (parts.empty()) return "GRAIL";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  json j = json::object();
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      apply_override(j, line);
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return j;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ParseError("expected key=value, got '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    const auto e = s.find_last_not_of(" \t\r\"");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  std::string key = trim(assignment.substr(0, eq));
  const std::string raw = assignment.substr(eq + 1);
  if (key.empty()) throw ParseError("empty key in '" + assignment + "'");
  std::replace(key.begin(), key.end(), '.', '/');
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = trim(raw);
  }
  j[json::json_pointer("/" + key)] = value;
}

// ---------------------------------------------------------------------------
// Stages

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Data: return "data";
    case Stage::Pretrain: return "pretrain-gnn";
    case Stage::Tokenizer: return "train-tokenizer";
    case Stage::Trajectories: return "make-trajectories";
    case Stage::Sft: return "sft";
    case Stage::Grpo: return "grpo";
    case Stage::Adapt: return "adapt";
    case Stage::Eval: return "eval";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : kAllStages) {
    if (stage_name(s) == name) return s;
  }
  throw ContractError("unknown stage '" + name + "'");
}

std::vector<std::filesystem::path> RunPaths::outputs(Stage s) const {
  switch (s) {
    case Stage::Data: return {source(), target()};
    case Stage::Pretrain: return {gnn(), centroids()};
    case Stage::Tokenizer: return {tokenizer()};
    case Stage::Trajectories: return {corpus()};
    case Stage::Sft: return {lm_sft()};
    case Stage::Grpo: return {lm_grpo()};
    case Stage::Adapt: return {adapted()};
    case Stage::Eval: return {report()};
  }
  return {};
}

namespace {

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::uint64_t stage_seed(const PipelineConfig& cfg, std::uint64_t component_seed, std::uint64_t tag) {
  return derive_seed(derive_seed(cfg.seed, tag), component_seed);
}

void require_stage(Stage upstream, const PipelineConfig& cfg, const RunPaths& paths, Stage who) {
  for (const auto& p : paths.outputs(upstream)) {
    if (!std::filesystem::exists(p)) {
      throw StageDependencyError("stage '" + stage_name(who) + "' needs " + p.string() +
                                 " from stage '" + stage_name(upstream) + "'");
    }
  }
  if (!stage_complete(upstream, cfg, paths)) {
    throw StageDependencyError("stage '" + stage_name(who) + "': artifacts of stage '" +
                               stage_name(upstream) + "' in " + paths.dir.string() +
                               " were produced under a different configuration");
  }
}

void finish_stage(Stage s, const PipelineConfig& cfg, const RunPaths& paths, json log) {
  log["config_hash"] = cfg.hash();
  log["stage"] = stage_name(s);
  write_json(paths.stage_log(s), log);
}

std::vector<int> ordered_centers(int n, int cap, std::uint64_t seed) {
  std::vector<int> centers(static_cast<std::size_t>(n));
  std::iota(centers.begin(), centers.end(), 0);
  if (cap > 0 && cap < n) {
    Rng rng(seed);
    std::shuffle(centers.begin(), centers.end(), rng);
    centers.resize(static_cast<std::size_t>(cap));
    std::sort(centers.begin(), centers.end());
  }
  return centers;
}

std::vector<EgoSubgraph> source_subgraphs(const PipelineConfig& cfg, const Graph& source) {
  const std::uint64_t seed = derive_seed(cfg.seed, 0x5b);
  std::vector<EgoSubgraph> subs;
  for (int c : ordered_centers(source.node_count(), cfg.tokenizer_subgraphs, seed)) {
    subs.push_back(sample_ego(source, c, cfg.ego_hops, cfg.ego_max_nodes, seed));
  }
  return subs;
}

EgoSubgraph target_subgraph(const PipelineConfig& cfg, const Graph& target, int center) {
  return sample_ego(target, center, cfg.ego_hops, cfg.ego_max_nodes, derive_seed(cfg.seed, 0x7b));
}

TokenizerConfig effective_tokenizer(const PipelineConfig& cfg) {
  TokenizerConfig t = cfg.tokenizer;
  t.seed = stage_seed(cfg, t.seed, 0x70);
  return t;
}

RestorerConfig restorer_config(const PipelineConfig& cfg) {
  RestorerConfig r;
  r.codes = cfg.tokenizer.codebook_size;
  r.width = cfg.lm_width;
  r.layers = cfg.lm_layers;
  r.heads = cfg.lm_heads;
  r.context = serialized_length(cfg.tokenizer.query_tokens, cfg.tokenizer.steps);
  r.seed = derive_seed(cfg.seed, 0x1e);
  return r;
}

void stage_data(const PipelineConfig& cfg, const RunPaths& paths) {
  Graph source, target;
  if (!cfg.source_path.empty() || !cfg.target_path.empty()) {
    require(!cfg.source_path.empty() && !cfg.target_path.empty(),
            "data.source and data.target must be given together");
    source = load_graph(cfg.source_path, cfg.format);
    target = load_graph(cfg.target_path, cfg.format);
  } else {
    ShiftConfig sc = cfg.synthetic;
    sc.seed = stage_seed(cfg, sc.seed, 0xda);
    DomainPair pair = synth_shift(sc);
    source = std::move(pair.source);
    target = std::move(pair.target);
  }
  require(source.has_labels(), "source graph must be labeled");
  require_dims(source.feature_dim() == target.feature_dim(), "source and target feature widths differ");
  save_graph(source, paths.source());
  save_graph(target, paths.target());
  finish_stage(Stage::Data, cfg, paths,
               {{"source_nodes", source.node_count()},
                {"source_edges", source.edge_count()},
                {"target_nodes", target.node_count()},
                {"target_edges", target.edge_count()}});
}

void stage_pretrain(const PipelineConfig& cfg, const RunPaths& paths) {
  const Graph source = load_graph(paths.source());
  PretrainConfig pc = cfg.gnn;
  pc.seed = stage_seed(cfg, pc.seed, 0x9a);
  auto [gnn, log] = pretrain_source(source, pc);
  save_gnn(gnn, paths.gnn(), cfg.hash());
  save_centroids(build_centroids(embed(gnn, source), source.labels(), source.class_count()),
                 paths.centroids());
  finish_stage(Stage::Pretrain, cfg, paths,
               {{"loss_first", log.loss.empty() ? 0.0 : log.loss.front()},
                {"loss_final", log.loss.empty() ? 0.0 : log.loss.back()},
                {"train_accuracy", log.train_accuracy},
                {"val_accuracy", log.val_accuracy}});
}

void stage_tokenizer(const PipelineConfig& cfg, const RunPaths& paths) {
  const Graph source = load_graph(paths.source());
  const GnnModel gnn = load_gnn(paths.gnn());
  const auto subs = source_subgraphs(cfg, source);
  auto [tok, log] = train_tokenizer(subs, gnn, effective_tokenizer(cfg));
  save_tokenizer(tok, paths.tokenizer(), cfg.hash());
  json epochs = json::array();
  for (const auto& e : log.epochs) epochs.push_back({{"diff", e.diff}, {"quant", e.quant}, {"dec", e.dec}});
  finish_stage(Stage::Tokenizer, cfg, paths,
               {{"subgraphs", subs.size()}, {"epochs", epochs}, {"codebook_utilization", log.codebook_utilization}});
}

void stage_trajectories(const PipelineConfig& cfg, const RunPaths& paths) {
  const Graph source = load_graph(paths.source());
  const GnnModel gnn = load_gnn(paths.gnn());
  const TokenizerBundle tok = load_tokenizer(paths.tokenizer());
  TokenCorpus corpus;
  corpus.k = tok.config.query_tokens;
  corpus.steps = tok.config.steps;
  corpus.codes = tok.codebook.size();
  const std::uint64_t seed = derive_seed(cfg.seed, 0x7c);
  for (const auto& sub : source_subgraphs(cfg, source)) {
    for (int r = 0; r < cfg.trajectories_per_subgraph; ++r) {
      const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(sub.center) * 131 + static_cast<std::uint64_t>(r));
      corpus.sequences.push_back(serialize_trajectory(make_trajectory(tok, gnn, sub, s)));
    }
  }
  save_corpus(corpus, paths.corpus());
  finish_stage(Stage::Trajectories, cfg, paths, {{"trajectories", corpus.sequences.size()}});
}

void stage_sft(const PipelineConfig& cfg, const RunPaths& paths) {
  const TokenCorpus corpus = load_corpus(paths.corpus());
  RestorerLM lm(restorer_config(cfg));
  SftConfig sc = cfg.sft;
  sc.seed = stage_seed(cfg, sc.seed, 0x5f);
  const SftLog log = train_sft(lm, corpus, sc);
  save_restorer(lm, paths.lm_sft(), cfg.hash());
  finish_stage(Stage::Sft, cfg, paths, {{"epoch_loss", log.epoch_loss}, {"steps", log.steps}});
}

double heldout_reward(const std::vector<GrpoPrompt>& prompts, const RestorerLM& lm,
                      const TokenizerBundle& tok, const RewardFn& reward) {
  if (prompts.empty()) return 0.0;
  double total = 0.0;
  int count = 0;
  for (const auto& p : prompts) {
    SamplingConfig sc;
    sc.temperature = 0.0;
    sc.max_blocks = tok.config.steps + 1;
    const Generation gen = generate(lm, p.tokens, tok.config.query_tokens, sc);
    if (auto r = reward(p, gen)) {
      total += r->final;
      ++count;
    }
  }
  return count > 0 ? total / count : 0.0;
}

void stage_grpo(const PipelineConfig& cfg, const RunPaths& paths) {
  const Graph target = load_graph(paths.target());
  const GnnModel gnn = load_gnn(paths.gnn());
  const CentroidMatrix centroids = load_centroids(paths.centroids());
  const TokenizerBundle tok = load_tokenizer(paths.tokenizer());
  RestorerLM lm = load_restorer(paths.lm_sft());

  const int k = tok.config.query_tokens;
  const int max_blocks = tok.config.steps + 1;
  const std::uint64_t seed = derive_seed(cfg.seed, 0x6e);
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, target.node_count() - 1);
  auto draw_prompts = [&](int count) {
    std::vector<GrpoPrompt> out;
    for (int i = 0; i < count; ++i) out.push_back(make_prompt(tok, gnn, target_subgraph(cfg, target, pick(rng))));
    return out;
  };

  const std::vector<GrpoPrompt> heldout = draw_prompts(16);
  std::vector<GrpoPrompt> batch = draw_prompts(cfg.grpo_prompts_per_step);

  RewardConfig rc = cfg.reward;
  if (rc.sigma <= 0.0) {
    Eigen::Index rows = 0;
    std::vector<Mat> hs;
    for (const auto& p : batch) {
      hs.push_back(embed(gnn, p.sub));
      rows += hs.back().rows();
    }
    Mat pooled(rows, centroids.centroids.cols());
    Eigen::Index off = 0;
    for (const auto& h : hs) {
      pooled.middleRows(off, h.rows()) = h;
      off += h.rows();
    }
    rc.sigma = median_bandwidth(pooled, centroids.centroids);
  }
  const RewardFn reward = make_reward_fn(tok, gnn, centroids, rc);

  const double before = heldout_reward(heldout, lm, tok, reward);
  nn::Adam opt(lm.params(), {.lr = cfg.grpo.lr, .clip_norm = cfg.grpo.clip_norm});
  json curve = json::array();
  for (int step = 0; step < cfg.grpo_steps; ++step) {
    if (step > 0) batch = draw_prompts(cfg.grpo_prompts_per_step);
    const RestorerLM old = lm.clone();
    const GrpoStats st = grpo_step(lm, old, opt, batch, reward, cfg.grpo, k, max_blocks,
                                   derive_seed(seed, static_cast<std::uint64_t>(step) + 1));
    curve.push_back({{"reward", st.mean_reward},
                     {"align", st.mean_align},
                     {"conf", st.mean_conf},
                     {"kl", st.mean_kl},
                     {"failures", st.failures}});
  }
  const double after = heldout_reward(heldout, lm, tok, reward);
  save_restorer(lm, paths.lm_grpo(), cfg.hash());
  finish_stage(Stage::Grpo, cfg, paths,
               {{"sigma", rc.sigma},
                {"curve", curve},
                {"heldout_reward_before", before},
                {"heldout_reward_after", after}});
}

void stage_adapt(const PipelineConfig& cfg, const RunPaths& paths) {
  const Graph target = load_graph(paths.target());
  const GnnModel gnn = load_gnn(paths.gnn());
  const TokenizerBundle tok = load_tokenizer(paths.tokenizer());
  const RestorerLM lm = load_restorer(paths.lm_grpo());
  const std::uint64_t seed = derive_seed(cfg.seed, 0xad);

  std::vector<int> predictions(static_cast<std::size_t>(target.node_count()));
  std::vector<EgoSubgraph> refined;
  int fallbacks = 0;
  for (int v = 0; v < target.node_count(); ++v) {
    const EgoSubgraph sub = target_subgraph(cfg, target, v);
    SamplingConfig sc;
    sc.temperature = cfg.adapt_temperature;
    sc.seed = derive_seed(seed, static_cast<std::uint64_t>(v));
    Refinement r = refine_target(sub, tok, lm, gnn, sc);
    fallbacks += r.fallback ? 1 : 0;
    if (cfg.adapt_mode == AdaptMode::CenterOnly) {
      predictions[static_cast<std::size_t>(v)] =
          predict_from_embedding(gnn, embed(gnn, r.refined)).labels.front();
    } else {
      refined.push_back(std::move(r.refined));
    }
  }
  if (cfg.adapt_mode == AdaptMode::Stitch) {
    const Graph adapted = stitch(target, refined);
    save_graph(adapted, paths.adapted_graph());
    predictions = predict(gnn, adapted).labels;
  }
  write_json(paths.adapted(), {{"mode", mode_name(cfg.adapt_mode)},
                               {"predictions", predictions},
                               {"fallbacks", fallbacks},
                               {"config_hash", cfg.hash()}});
  finish_stage(Stage::Adapt, cfg, paths, {{"fallbacks", fallbacks}});
}

RunReport assemble_report(const PipelineConfig& cfg, const RunPaths& paths) {
  RunReport rep;
  rep.variant = cfg.variant();
  rep.config_hash = cfg.hash();
  for (Stage s : kAllStages) {
    if (s == Stage::Eval) continue;
    json log = read_json(paths.stage_log(s));
    log.erase("config_hash");
    log.erase("stage");
    rep.stages[stage_name(s)] = std::move(log);
  }
  const Graph target = load_graph(paths.target());
  const GnnModel gnn = load_gnn(paths.gnn());
  require(target.has_labels(), "evaluation needs target labels");
  const std::vector<int> adapted = read_json(paths.adapted()).at("predictions").get<std::vector<int>>();
  rep.metrics = evaluate(predict(gnn, target).labels, adapted, target.labels(), target.class_count());
  return rep;
}

void stage_eval(const PipelineConfig& cfg, const RunPaths& paths) {
  const RunReport rep = assemble_report(cfg, paths);
  write_json(paths.report(), rep.to_json(false));
  finish_stage(Stage::Eval, cfg, paths, json::object());
}

}  // namespace

bool stage_complete(Stage s, const PipelineConfig& cfg, const RunPaths& paths) {
  for (const auto& p : paths.outputs(s)) {
    if (!std::filesystem::exists(p)) return false;
  }
  const auto log = paths.stage_log(s);
  if (!std::filesystem::exists(log)) return false;
  try {
    return read_json(log).value("config_hash", std::string{}) == cfg.hash();
  } catch (const ParseError&) {
    return false;
  }
}

void run_stage(Stage s, const PipelineConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  std::filesystem::create_directories(paths.dir);
  auto needs = [&](std::initializer_list<Stage> ups) {
    for (Stage u : ups) require_stage(u, cfg, paths, s);
  };
  switch (s) {
    case Stage::Data: stage_data(cfg, paths); break;
    case Stage::Pretrain: needs({Stage::Data}); stage_pretrain(cfg, paths); break;
    case Stage::Tokenizer: needs({Stage::Data, Stage::Pretrain}); stage_tokenizer(cfg, paths); break;
    case Stage::Trajectories:
      needs({Stage::Data, Stage::Pretrain, Stage::Tokenizer});
      stage_trajectories(cfg, paths);
      break;
    case Stage::Sft: needs({Stage::Trajectories}); stage_sft(cfg, paths); break;
    case Stage::Grpo:
      needs({Stage::Data, Stage::Pretrain, Stage::Tokenizer, Stage::Sft});
      stage_grpo(cfg, paths);
      break;
    case Stage::Adapt:
      needs({Stage::Data, Stage::Pretrain, Stage::Tokenizer, Stage::Grpo});
      stage_adapt(cfg, paths);
      break;
    case Stage::Eval:
      needs({Stage::Data, Stage::Pretrain, Stage::Tokenizer, Stage::Trajectories, Stage::Sft,
             Stage::Grpo, Stage::Adapt});
      stage_eval(cfg, paths);
      break;
  }
}

// ---------------------------------------------------------------------------
// Evaluation and reports

nlohmann::json EvalResult::to_json() const {
  return {{"columns", {"Micro-F1", "Macro-F1"}},
          {"rows",
           {{{"name", baseline.name}, {"micro", baseline.micro}, {"macro", baseline.macro}},
            {{"name", adapted.name}, {"micro", adapted.micro}, {"macro", adapted.macro}}}},
          {"delta", {{"micro", delta_micro()}, {"macro", delta_macro()}}}};
}

EvalResult evaluate(std::span<const int> baseline_pred, std::span<const int> adapted_pred,
                    std::span<const int> truth, int classes) {
  const F1Scores b = micro_macro_f1(baseline_pred, truth, classes);
  const F1Scores a = micro_macro_f1(adapted_pred, truth, classes);
  return {{"direct transfer", b.micro, b.macro}, {"adapted", a.micro, a.macro}};
}

EvalResult evaluate(const GnnModel& gnn, const Graph& raw, const Graph& adapted,
                    std::span<const int> truth) {
  require(raw.node_count() == adapted.node_count(), "raw and adapted graphs differ in node count");
  require(static_cast<int>(truth.size()) == raw.node_count(), "one label per node required");
  return evaluate(predict(gnn, raw).labels, predict(gnn, adapted).labels, truth, gnn.class_count());
}

nlohmann::json RunReport::to_json(bool with_timing) const {
  json j = {{"variant", variant},
            {"config_hash", config_hash},
            {"stages", stages},
            {"metrics", metrics.to_json()}};
  if (with_timing) {
    json t = json::object();
    for (const auto& [name, sec] : seconds) t[name] = sec;
    j["seconds"] = t;
  }
  return j;
}

RunReport load_report(const RunPaths& paths) {
  const json j = read_json(paths.report());
  RunReport rep;
  rep.variant = j.at("variant").get<std::string>();
  rep.config_hash = j.at("config_hash").get<std::string>();
  rep.stages = j.at("stages");
  const auto& rows = j.at("metrics").at("rows");
  rep.metrics.baseline = {rows[0].at("name"), rows[0].at("micro"), rows[0].at("macro")};
  rep.metrics.adapted = {rows[1].at("name"), rows[1].at("micro"), rows[1].at("macro")};
  if (std::filesystem::exists(paths.timing())) {
    const json timing = read_json(paths.timing());
    for (const auto& [name, sec] : timing.items()) rep.seconds.emplace_back(name, sec.get<double>());
  }
  return rep;
}

RunReport run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& dir,
                       const RunOptions& opts) {
  cfg.validate();
  const RunPaths paths{dir};
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, double>> seconds;
  bool started = !opts.from.has_value();
  bool rerun = false;
  for (Stage s : kAllStages) {
    if (!started) {
      if (s != *opts.from) {
        if (!stage_complete(s, cfg, paths)) {
          throw StageDependencyError("cannot start at '" + stage_name(*opts.from) + "': stage '" +
                                     stage_name(s) + "' has no completed artifacts in " + dir.string());
        }
        continue;
      }
      started = true;
    } else if (opts.resume && !opts.from && !rerun && stage_complete(s, cfg, paths)) {
      continue;
    }
    // anything downstream of a recomputed stage is stale
    rerun = true;
    const auto t0 = std::chrono::steady_clock::now();
    run_stage(s, cfg, paths);
    seconds.emplace_back(stage_name(s),
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  RunReport rep = load_report(paths);
  rep.seconds = seconds;
  json t = json::object();
  for (const auto& [name, sec] : seconds) t[name] = sec;
  write_json(paths.timing(), t);
  return rep;
}

// ---------------------------------------------------------------------------

Mat pca_2d(const Mat& embeddings) {
  require(embeddings.rows() >= 1, "pca needs at least one row");
  const Mat centered = embeddings.rowwise() - embeddings.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) /
                              std::max<double>(1.0, static_cast<double>(embeddings.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = embeddings.cols();
  Mat out = Mat::Zero(embeddings.rows(), 2);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd axis = es.eigenvectors().col(d - 1 - c);
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0) axis = -axis;
    out.col(c) = centered * axis;
  }
  return out;
}

void emit_plot_data(const Mat& embeddings, std::span<const int> labels,
                    std::span<const std::string> domains, const std::filesystem::path& out) {
  require(static_cast<Eigen::Index>(labels.size()) == embeddings.rows() &&
              static_cast<Eigen::Index>(domains.size()) == embeddings.rows(),
          "plot data: embedding rows, labels and domains must align");
  const Mat xy = pca_2d(embeddings);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << "x,y,class,domain\n";
  char buf[64];
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g,%.10g", xy(i, 0), xy(i, 1));
    f << buf << ',' << labels[static_cast<std::size_t>(i)] << ',' << domains[static_cast<std::size_t>(i)] << '\n';
  }
}

}  // namespace grail
