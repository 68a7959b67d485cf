#include "grail/errors.hpp"
#include "grail/gnn.hpp"
#include "grail/graph.hpp"
#include "grail/grpo.hpp"
#include "grail/pipeline.hpp"
#include "grail/restorer.hpp"
#include "grail/tokenizer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace grail;

namespace {

constexpr int kExitContract = 2;
constexpr int kExitDependency = 3;

// Relative artifact paths resolve against $GRAIL_CHECKPOINT_ROOT when set.
fs::path artifact(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("GRAIL_CHECKPOINT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

fs::path input(const std::string& p, const std::string& producer) {
  fs::path path = artifact(p);
  if (!fs::exists(path)) {
    throw StageDependencyError(path.string() + " not found (produced by '" + producer + "')");
  }
  return path;
}

struct ConfigArgs {
  std::string file;
  std::string preset = "paper";
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "JSON or key = value config file");
    app->add_option("--preset", preset, "base configuration: paper or desk")
        ->check(CLI::IsMember({"paper", "desk"}));
    app->add_option("--set", sets, "override, e.g. --set grpo.group=8");
  }

  PipelineConfig build() const {
    nlohmann::json j = (preset == "desk" ? PipelineConfig::desk() : PipelineConfig::defaults()).to_json();
    if (!file.empty()) j.merge_patch(read_config_file(input(file, "user")));
    for (const auto& s : sets) apply_override(j, s);
    return PipelineConfig::from_json(j);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<EgoSubgraph> all_egos(const Graph& g, const PipelineConfig& cfg, int cap) {
  std::vector<EgoSubgraph> subs;
  const int n = cap > 0 ? std::min(cap, g.node_count()) : g.node_count();
  for (int v = 0; v < n; ++v) subs.push_back(sample_ego(g, v, cfg.ego_hops, cfg.ego_max_nodes, cfg.seed));
  return subs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grail: test-time graph domain adaptation by latent restoration"};
  app.require_subcommand(1);
  std::string format = "archive";
  app.add_option("--format", format, "graph container: archive or dir");

  // pretrain-gnn
  auto* pre = app.add_subcommand("pretrain-gnn", "train the source GNN");
  ConfigArgs pre_cfg;
  pre_cfg.attach(pre);
  std::string pre_graph, pre_out = "gnn.ckpt", pre_centroids;
  pre->add_option("--graph", pre_graph, "labeled source graph")->required();
  pre->add_option("--out", pre_out, "model checkpoint");
  pre->add_option("--centroids", pre_centroids, "also write the source class centroids");

  // train-tokenizer
  auto* tt = app.add_subcommand("train-tokenizer", "train encoder, diffusion, codebook and decoder");
  ConfigArgs tt_cfg;
  tt_cfg.attach(tt);
  std::string tt_graph, tt_gnn, tt_out = "tok.ckpt";
  std::optional<int> tt_k, tt_m, tt_t, tt_epochs;
  std::optional<double> tt_l1, tt_l2;
  bool tt_no_enc = false, tt_no_diff = false;
  tt->add_option("--graph", tt_graph, "source graph")->required();
  tt->add_option("--gnn", tt_gnn, "source GNN checkpoint")->required();
  tt->add_option("--out", tt_out, "tokenizer checkpoint");
  tt->add_option("--K", tt_k, "query tokens");
  tt->add_option("--M", tt_m, "codebook size");
  tt->add_option("--T", tt_t, "diffusion steps");
  tt->add_option("--lambda1", tt_l1, "quantization loss weight");
  tt->add_option("--lambda2", tt_l2, "decoder loss weight");
  tt->add_option("--epochs", tt_epochs, "training epochs");
  tt->add_flag("--no-encoder", tt_no_enc, "ablation: bypass the query encoder");
  tt->add_flag("--no-diffusion", tt_no_diff, "ablation: edge-perturbation trajectories");

  // make-trajectories
  auto* mt = app.add_subcommand("make-trajectories", "write the restoration token corpus");
  ConfigArgs mt_cfg;
  mt_cfg.attach(mt);
  std::string mt_tok, mt_gnn, mt_graph, mt_out = "corpus.tok";
  mt->add_option("--tok", mt_tok, "tokenizer checkpoint")->required();
  mt->add_option("--gnn", mt_gnn, "source GNN checkpoint")->required();
  mt->add_option("--graph", mt_graph, "source graph")->required();
  mt->add_option("--out", mt_out, "corpus file");

  // sft
  auto* sft = app.add_subcommand("sft", "supervised training of the restorer");
  ConfigArgs sft_cfg;
  sft_cfg.attach(sft);
  std::string sft_corpus, sft_out = "lm.ckpt";
  std::optional<double> sft_lr;
  std::optional<int> sft_epochs;
  sft->add_option("--corpus", sft_corpus, "token corpus")->required();
  sft->add_option("--out", sft_out, "restorer checkpoint");
  sft->add_option("--lr", sft_lr, "learning rate");
  sft->add_option("--epochs", sft_epochs, "epochs");

  // generate
  auto* gen = app.add_subcommand("generate", "restore one prompt block");
  std::string gen_lm, gen_prompt;
  std::uint64_t gen_seed = 0;
  double gen_temp = 1.0;
  int gen_topk = 0, gen_blocks = 0;
  gen->add_option("--lm", gen_lm, "restorer checkpoint")->required();
  gen->add_option("--prompt", gen_prompt, "file of K whitespace-separated graph codes")->required();
  gen->add_option("--seed", gen_seed, "sampling seed");
  gen->add_option("--temperature", gen_temp, "0 selects greedy decoding");
  gen->add_option("--top-k", gen_topk, "top-k truncation (0 = off)");
  gen->add_option("--max-blocks", gen_blocks, "block limit including the prompt");

  // grpo
  auto* gr = app.add_subcommand("grpo", "reward-aligned post-training of the restorer");
  ConfigArgs gr_cfg;
  gr_cfg.attach(gr);
  std::string gr_lm, gr_tok, gr_gnn, gr_target, gr_cent, gr_out = "lm_grpo.ckpt";
  std::optional<int> gr_g, gr_steps;
  std::optional<double> gr_beta, gr_gamma, gr_lr;
  bool gr_no_align = false, gr_no_conf = false;
  gr->add_option("--lm", gr_lm, "restorer checkpoint")->required();
  gr->add_option("--tok", gr_tok, "tokenizer checkpoint")->required();
  gr->add_option("--gnn", gr_gnn, "source GNN checkpoint")->required();
  gr->add_option("--target", gr_target, "target graph")->required();
  gr->add_option("--centroids", gr_cent, "source centroid file")->required();
  gr->add_option("--out", gr_out, "updated restorer checkpoint");
  gr->add_option("--g", gr_g, "group size");
  gr->add_option("--beta-kl", gr_beta, "KL penalty weight");
  gr->add_option("--gamma", gr_gamma, "alignment reward decay");
  gr->add_option("--lr", gr_lr, "learning rate");
  gr->add_option("--steps", gr_steps, "GRPO steps");
  gr->add_flag("--no-align", gr_no_align, "ablation: drop the alignment reward");
  gr->add_flag("--no-conf", gr_no_conf, "ablation: drop the confidence reward");

  // adapt
  auto* ad = app.add_subcommand("adapt", "refine every target ego-network");
  ConfigArgs ad_cfg;
  ad_cfg.attach(ad);
  std::string ad_lm, ad_tok, ad_gnn, ad_target, ad_out = "adapted.graph", ad_pred;
  ad->add_option("--lm", ad_lm, "restorer checkpoint")->required();
  ad->add_option("--tok", ad_tok, "tokenizer checkpoint")->required();
  ad->add_option("--gnn", ad_gnn, "source GNN checkpoint")->required();
  ad->add_option("--target", ad_target, "target graph")->required();
  ad->add_option("--out", ad_out, "stitched adapted graph");
  ad->add_option("--predictions", ad_pred, "also write center-only predictions (JSON)");

  // eval
  auto* ev = app.add_subcommand("eval", "direct transfer vs adapted Micro/Macro-F1");
  std::string ev_gnn, ev_target, ev_adapted, ev_pred;
  ev->add_option("--gnn", ev_gnn, "source GNN checkpoint")->required();
  ev->add_option("--target", ev_target, "raw labeled target graph")->required();
  auto* ev_a = ev->add_option("--adapted", ev_adapted, "adapted graph");
  auto* ev_p = ev->add_option("--predictions", ev_pred, "center-only predictions JSON");
  ev_a->excludes(ev_p);

  // emit-plot
  auto* ep = app.add_subcommand("emit-plot", "2-D PCA coordinates of node embeddings");
  std::string ep_gnn, ep_source, ep_target, ep_adapted, ep_out = "plot.csv";
  ep->add_option("--gnn", ep_gnn, "source GNN checkpoint")->required();
  ep->add_option("--source", ep_source, "source graph")->required();
  ep->add_option("--target", ep_target, "target graph")->required();
  ep->add_option("--adapted", ep_adapted, "adapted target graph");
  ep->add_option("--out", ep_out, "CSV output");

  // run-all
  auto* ra = app.add_subcommand("run-all", "every stage in order, resumable");
  ConfigArgs ra_cfg;
  ra_cfg.attach(ra);
  std::string ra_dir = "grail-run", ra_from;
  bool ra_fresh = false;
  int ra_repeats = 1;
  ra->add_option("--dir", ra_dir, "run directory (artifacts and report.json)");
  ra->add_option("--from", ra_from, "start at this stage; upstream artifacts must exist");
  ra->add_flag("--fresh", ra_fresh, "recompute stages even when artifacts exist");
  ra->add_option("--repeats", ra_repeats, "runs with seeds seed..seed+R-1; prints mean and std")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitContract;
  }

  try {
    const GraphFormat fmt = parse_graph_format(format);

    if (*pre) {
      const PipelineConfig cfg = pre_cfg.build();
      const Graph g = load_graph(input(pre_graph, "user"), fmt);
      auto [gnn, log] = pretrain_source(g, cfg.gnn);
      save_gnn(gnn, artifact(pre_out), cfg.hash());
      if (!pre_centroids.empty()) {
        save_centroids(build_centroids(embed(gnn, g), g.labels(), g.class_count()), artifact(pre_centroids));
      }
      std::cout << "loss " << (log.loss.empty() ? 0.0 : log.loss.back()) << " train_acc "
                << log.train_accuracy << " val_acc " << log.val_accuracy << '\n';
    } else if (*tt) {
      PipelineConfig cfg = tt_cfg.build();
      auto& t = cfg.tokenizer;
      if (tt_k) t.query_tokens = *tt_k;
      if (tt_m) t.codebook_size = *tt_m;
      if (tt_t) t.steps = *tt_t;
      if (tt_l1) t.weights.quant = *tt_l1;
      if (tt_l2) t.weights.dec = *tt_l2;
      if (tt_epochs) t.epochs = *tt_epochs;
      t.no_encoder = t.no_encoder || tt_no_enc;
      t.no_diffusion = t.no_diffusion || tt_no_diff;
      cfg.validate();
      const Graph g = load_graph(input(tt_graph, "user"), fmt);
      const GnnModel gnn = load_gnn(input(tt_gnn, "pretrain-gnn"));
      auto [tok, log] = train_tokenizer(all_egos(g, cfg, cfg.tokenizer_subgraphs), gnn, t);
      save_tokenizer(tok, artifact(tt_out), cfg.hash());
      for (std::size_t e = 0; e < log.epochs.size(); ++e) {
        std::cout << "epoch " << e + 1 << " diff " << log.epochs[e].diff << " quant "
                  << log.epochs[e].quant << " dec " << log.epochs[e].dec << '\n';
      }
      std::cout << "codebook_utilization " << log.codebook_utilization << '\n';
    } else if (*mt) {
      const PipelineConfig cfg = mt_cfg.build();
      const TokenizerBundle tok = load_tokenizer(input(mt_tok, "train-tokenizer"));
      const GnnModel gnn = load_gnn(input(mt_gnn, "pretrain-gnn"));
      const Graph g = load_graph(input(mt_graph, "user"), fmt);
      TokenCorpus corpus{tok.config.query_tokens, tok.config.steps, tok.codebook.size(), {}};
      for (const auto& sub : all_egos(g, cfg, cfg.tokenizer_subgraphs)) {
        corpus.sequences.push_back(serialize_trajectory(
            make_trajectory(tok, gnn, sub, derive_seed(cfg.seed, static_cast<std::uint64_t>(sub.center)))));
      }
      save_corpus(corpus, artifact(mt_out));
      std::cout << corpus.sequences.size() << " trajectories\n";
    } else if (*sft) {
      PipelineConfig cfg = sft_cfg.build();
      if (sft_lr) cfg.sft.lr = *sft_lr;
      if (sft_epochs) cfg.sft.epochs = *sft_epochs;
      cfg.validate();
      const TokenCorpus corpus = load_corpus(input(sft_corpus, "make-trajectories"));
      RestorerConfig rc;
      rc.codes = corpus.codes;
      rc.width = cfg.lm_width;
      rc.layers = cfg.lm_layers;
      rc.heads = cfg.lm_heads;
      rc.context = serialized_length(corpus.k, corpus.steps);
      rc.seed = cfg.seed;
      RestorerLM lm(rc);
      const SftLog log = train_sft(lm, corpus, cfg.sft);
      save_restorer(lm, artifact(sft_out), cfg.hash());
      for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
        std::cout << "epoch " << e + 1 << " loss " << log.epoch_loss[e] << '\n';
      }
    } else if (*gen) {
      const RestorerLM lm = load_restorer(input(gen_lm, "sft"));
      std::ifstream in(input(gen_prompt, "user"));
      std::vector<int> prompt{kBos};
      int code = 0;
      while (in >> code) prompt.push_back(code_to_token(code));
      if (!in.eof()) throw ParseError(gen_prompt + ": prompt must contain integer codes only");
      SamplingConfig sc{gen_temp, gen_topk, gen_seed, gen_blocks};
      const Generation out = generate(lm, prompt, static_cast<int>(prompt.size()) - 1, sc);
      for (const auto& b : out.blocks) {
        std::cout << "S_" << b.step << ':';
        for (int c : b.ids) std::cout << ' ' << c;
        std::cout << '\n';
      }
      if (!out.finished) std::cout << "(no EOS before the block limit)\n";
    } else if (*gr) {
      PipelineConfig cfg = gr_cfg.build();
      if (gr_g) cfg.grpo.group = *gr_g;
      if (gr_beta) cfg.grpo.beta_kl = *gr_beta;
      if (gr_gamma) cfg.reward.gamma = *gr_gamma;
      if (gr_lr) cfg.grpo.lr = *gr_lr;
      if (gr_steps) cfg.grpo_steps = *gr_steps;
      if (gr_no_align) cfg.reward.use_align = false;
      if (gr_no_conf) cfg.reward.use_conf = false;
      cfg.validate();
      RestorerLM lm = load_restorer(input(gr_lm, "sft"));
      const TokenizerBundle tok = load_tokenizer(input(gr_tok, "train-tokenizer"));
      const GnnModel gnn = load_gnn(input(gr_gnn, "pretrain-gnn"));
      const CentroidMatrix cent = load_centroids(input(gr_cent, "pretrain-gnn --centroids"));
      const Graph target = load_graph(input(gr_target, "user"), fmt);
      Rng rng(cfg.seed);
      std::uniform_int_distribution<int> pick(0, target.node_count() - 1);
      RewardConfig rc = cfg.reward;
      nn::Adam opt(lm.params(), {.lr = cfg.grpo.lr, .clip_norm = cfg.grpo.clip_norm});
      for (int step = 0; step < cfg.grpo_steps; ++step) {
        std::vector<GrpoPrompt> batch;
        for (int i = 0; i < cfg.grpo_prompts_per_step; ++i) {
          batch.push_back(make_prompt(tok, gnn, sample_ego(target, pick(rng), cfg.ego_hops, cfg.ego_max_nodes, cfg.seed)));
        }
        if (rc.sigma <= 0.0) rc.sigma = median_bandwidth(embed(gnn, batch.front().sub), cent.centroids);
        const RestorerLM old = lm.clone();
        const GrpoStats st = grpo_step(lm, old, opt, batch, make_reward_fn(tok, gnn, cent, rc), cfg.grpo,
                                       tok.config.query_tokens, tok.config.steps + 1,
                                       derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
        std::cout << "step " << step + 1 << " reward " << st.mean_reward << " kl " << st.mean_kl
                  << " failures " << st.failures << '\n';
        if (st.failures > 0) std::cerr << "warning: " << st.failures << " candidates failed to decode\n";
      }
      save_restorer(lm, artifact(gr_out), cfg.hash());
    } else if (*ad) {
      const PipelineConfig cfg = ad_cfg.build();
      const RestorerLM lm = load_restorer(input(ad_lm, "grpo"));
      const TokenizerBundle tok = load_tokenizer(input(ad_tok, "train-tokenizer"));
      const GnnModel gnn = load_gnn(input(ad_gnn, "pretrain-gnn"));
      const Graph target = load_graph(input(ad_target, "user"), fmt);
      std::vector<EgoSubgraph> refined;
      std::vector<int> center_pred;
      int fallbacks = 0;
      for (const auto& sub : all_egos(target, cfg, 0)) {
        SamplingConfig sc;
        sc.temperature = cfg.adapt_temperature;
        sc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(sub.center));
        Refinement r = refine_target(sub, tok, lm, gnn, sc);
        fallbacks += r.fallback;
        center_pred.push_back(predict_from_embedding(gnn, embed(gnn, r.refined)).labels.front());
        refined.push_back(std::move(r.refined));
      }
      if (fallbacks > 0) std::cerr << "warning: " << fallbacks << " subgraphs fell back to identity\n";
      save_graph(stitch(target, refined), artifact(ad_out), fmt);
      if (!ad_pred.empty()) {
        write_text(artifact(ad_pred), nlohmann::json{{"mode", "center-only"}, {"predictions", center_pred}}.dump() + "\n");
      }
    } else if (*ev) {
      const GnnModel gnn = load_gnn(input(ev_gnn, "pretrain-gnn"));
      const Graph raw = load_graph(input(ev_target, "user"), fmt);
      require(raw.has_labels(), "eval needs a labeled target graph");
      std::vector<int> adapted;
      if (!ev_adapted.empty()) {
        adapted = predict(gnn, load_graph(input(ev_adapted, "adapt"), fmt)).labels;
      } else if (!ev_pred.empty()) {
        std::ifstream in(input(ev_pred, "adapt --predictions"));
        adapted = nlohmann::json::parse(in).at("predictions").get<std::vector<int>>();
      } else {
        adapted = predict(gnn, raw).labels;
      }
      require(adapted.size() == raw.labels().size(), "adapted predictions do not cover the target");
      const EvalResult r = evaluate(predict(gnn, raw).labels, adapted, raw.labels(), raw.class_count());
      std::printf("%-16s %9s %9s\n", "", "Micro-F1", "Macro-F1");
      std::printf("%-16s %9.2f %9.2f\n", r.baseline.name.c_str(), 100 * r.baseline.micro, 100 * r.baseline.macro);
      std::printf("%-16s %9.2f %9.2f\n", r.adapted.name.c_str(), 100 * r.adapted.micro, 100 * r.adapted.macro);
      std::printf("%-16s %+9.2f %+9.2f\n", "delta", 100 * r.delta_micro(), 100 * r.delta_macro());
    } else if (*ep) {
      const GnnModel gnn = load_gnn(input(ep_gnn, "pretrain-gnn"));
      std::vector<std::pair<std::string, Graph>> graphs;
      graphs.emplace_back("source", load_graph(input(ep_source, "user"), fmt));
      graphs.emplace_back("target", load_graph(input(ep_target, "user"), fmt));
      if (!ep_adapted.empty()) graphs.emplace_back("adapted", load_graph(input(ep_adapted, "adapt"), fmt));
      std::vector<Mat> parts;
      std::vector<int> labels;
      std::vector<std::string> domains;
      Eigen::Index rows = 0;
      for (const auto& [name, g] : graphs) {
        parts.push_back(embed(gnn, g));
        rows += parts.back().rows();
        for (int v = 0; v < g.node_count(); ++v) {
          labels.push_back(g.has_labels() ? g.labels()[static_cast<std::size_t>(v)] : -1);
          domains.push_back(name);
        }
      }
      Mat all(rows, parts.front().cols());
      Eigen::Index off = 0;
      for (const auto& p : parts) {
        all.middleRows(off, p.rows()) = p;
        off += p.rows();
      }
      emit_plot_data(all, labels, domains, artifact(ep_out));
    } else if (*ra) {
      const PipelineConfig base = ra_cfg.build();
      RunOptions opts;
      opts.resume = !ra_fresh;
      if (!ra_from.empty()) opts.from = parse_stage(ra_from);
      std::vector<RunReport> reports;
      for (int r = 0; r < ra_repeats; ++r) {
        PipelineConfig cfg = base;
        cfg.seed = base.seed + static_cast<std::uint64_t>(r);
        const fs::path dir = ra_repeats == 1 ? artifact(ra_dir) : artifact(ra_dir) / ("seed" + std::to_string(cfg.seed));
        reports.push_back(run_pipeline(cfg, dir, opts));
        const auto& m = reports.back().metrics;
        std::printf("[%s] seed %llu  direct %.2f/%.2f  adapted %.2f/%.2f  (Micro/Macro-F1 %%)\n",
                    reports.back().variant.c_str(), static_cast<unsigned long long>(cfg.seed),
                    100 * m.baseline.micro, 100 * m.baseline.macro, 100 * m.adapted.micro, 100 * m.adapted.macro);
      }
      if (ra_repeats > 1) {
        double mean = 0, sq = 0;
        for (const auto& rep : reports) mean += rep.metrics.delta_micro();
        mean /= ra_repeats;
        for (const auto& rep : reports) sq += (rep.metrics.delta_micro() - mean) * (rep.metrics.delta_micro() - mean);
        std::printf("Micro-F1 delta over %d runs: %+.2f +- %.2f\n", ra_repeats, 100 * mean,
                    100 * std::sqrt(sq / ra_repeats));
      }
    }
  } catch (const StageDependencyError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDependency;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
