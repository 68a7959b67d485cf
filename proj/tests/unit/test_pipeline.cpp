#include "support.hpp"

#include "grail/errors.hpp"
#include "grail/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace grail;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "grail_test_pipeline" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// small enough that every stage runs in well under a second
PipelineConfig tiny() {
  PipelineConfig c;
  c.seed = 5;
  c.synthetic.source_nodes = 60;
  c.synthetic.target_nodes = 40;
  c.synthetic.feature_dim = 4;
  c.synthetic.shift = 1.0;
  c.synthetic.source_p_in = 0.1;
  c.synthetic.target_p_in = 0.1;
  c.gnn.hidden = 8;
  c.gnn.epochs = 30;
  c.ego_max_nodes = 8;
  c.tokenizer.query_tokens = 2;
  c.tokenizer.codebook_size = 8;
  c.tokenizer.steps = 2;
  c.tokenizer.heads = 2;
  c.tokenizer.denoiser_hidden = 8;
  c.tokenizer.epochs = 1;
  c.tokenizer.batch_size = 4;
  c.tokenizer.kmeans_warmup = 4;
  c.tokenizer_subgraphs = 10;
  c.lm_width = 8;
  c.lm_layers = 1;
  c.lm_heads = 2;
  c.sft.epochs = 1;
  c.sft.lr = 1e-3;
  c.grpo.group = 2;
  c.grpo_steps = 2;
  c.grpo_prompts_per_step = 2;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

TEST_CASE("config json round trip") {
  for (const PipelineConfig& c : {PipelineConfig::defaults(), PipelineConfig::desk(), tiny()}) {
    const json j = c.to_json();
    const PipelineConfig back = PipelineConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.hash() == c.hash());
  }
  PipelineConfig odd = tiny();
  odd.adapt_mode = AdaptMode::Stitch;
  odd.format = GraphFormat::Directory;
  odd.reward.use_conf = false;
  odd.seed = 0xffffffffffffULL;
  CHECK(PipelineConfig::from_json(odd.to_json()).to_json() == odd.to_json());
}

TEST_CASE("config defaults") {
  const auto d = PipelineConfig::defaults();
  CHECK(d.tokenizer.query_tokens == 128);
  CHECK(d.tokenizer.codebook_size == 128);
  CHECK(d.grpo.lr == 2e-6);
  CHECK(d.sft.lr == 1e-4);
  CHECK(d.tokenizer.steps == 10);
  CHECK(d.tokenizer.weights.quant == 0.4);
  CHECK(d.tokenizer.weights.dec == 1.0);
  CHECK(d.gnn.hidden == 256);
}

TEST_CASE("config schema errors") {
  json j = tiny().to_json();
  json unknown = j;
  unknown["grpo"]["groups"] = 3;
  CHECK_THROWS_AS(PipelineConfig::from_json(unknown), SchemaError);
  json wrong_type = j;
  wrong_type["grpo"]["group"] = "three";
  CHECK_THROWS_AS(PipelineConfig::from_json(wrong_type), SchemaError);
  json frac = j;
  frac["grpo"]["group"] = 2.5;
  CHECK_THROWS_AS(PipelineConfig::from_json(frac), SchemaError);
  json version = j;
  version["version"] = 2;
  CHECK_THROWS_AS(PipelineConfig::from_json(version), SchemaError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json::array()), SchemaError);
  json mode = j;
  mode["adapt"]["mode"] = "everywhere";
  CHECK_THROWS_AS(PipelineConfig::from_json(mode), ContractError);

  json bad_group = j;
  bad_group["grpo"]["group"] = 1;
  CHECK_THROWS_AS(PipelineConfig::from_json(bad_group), ContractError);
  json bad_heads = j;
  bad_heads["restorer"]["heads"] = 3;
  CHECK_THROWS_AS(PipelineConfig::from_json(bad_heads), ContractError);
  json bad_gamma = j;
  bad_gamma["grpo"]["gamma"] = 0.0;
  CHECK_THROWS_AS(PipelineConfig::from_json(bad_gamma), ContractError);

  // partial documents fill in from defaults
  json partial = {{"seed", 9}, {"grpo", {{"group", 4}}}};
  auto c = PipelineConfig::from_json(partial);
  CHECK(c.seed == 9);
  CHECK(c.grpo.group == 4);
  CHECK(c.tokenizer.codebook_size == PipelineConfig::defaults().tokenizer.codebook_size);
}

TEST_CASE("variant labels") {
  PipelineConfig c = tiny();
  CHECK(c.variant() == "GRAIL");
  c.tokenizer.no_encoder = true;
  CHECK(c.variant() == "w/o Encoder");
  c.tokenizer.no_encoder = false;
  c.tokenizer.no_diffusion = true;
  CHECK(c.variant() == "w/o Diff");
  c.tokenizer.no_diffusion = false;
  c.reward.use_align = false;
  CHECK(c.variant() == "w/o Align");
  c.reward.use_align = true;
  c.reward.use_conf = false;
  CHECK(c.variant() == "w/o Conf");
  c.reward.use_align = false;
  CHECK(c.variant() == "w/o Align+w/o Conf");
}

TEST_CASE("config hash") {
  const auto a = tiny();
  auto b = tiny();
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.grpo.beta_kl += 1e-9;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("key-value config files and overrides") {
  const auto dir = fresh_dir("cfg");
  {
    std::ofstream f(dir / "a.conf");
    f << "# desk run\n"
         "seed = 11\n"
         "grpo.group = 6   # trailing comment\n"
         "adapt.mode = stitch\n"
         "\n"
         "data.source = \"graphs/src.graph\"\n"
         "grpo.use_align = false\n";
  }
  json j = read_config_file(dir / "a.conf");
  auto c = PipelineConfig::from_json(j);
  CHECK(c.seed == 11);
  CHECK(c.grpo.group == 6);
  CHECK(c.adapt_mode == AdaptMode::Stitch);
  CHECK(c.source_path == "graphs/src.graph");
  CHECK_FALSE(c.reward.use_align);

  {
    std::ofstream f(dir / "b.json");
    f << tiny().to_json().dump(2);
  }
  CHECK(PipelineConfig::from_json(read_config_file(dir / "b.json")).hash() == tiny().hash());

  apply_override(j, "tokenizer.T=7");
  apply_override(j, "sft.lr = 0.5");
  CHECK(j["tokenizer"]["T"] == 7);
  CHECK(j["sft"]["lr"] == 0.5);
  CHECK_THROWS_AS(apply_override(j, "no-equals-sign"), ParseError);
  CHECK_THROWS_AS(apply_override(j, "=3"), ParseError);

  {
    std::ofstream f(dir / "c.conf");
    f << "seed = 1\njunk line\n";
  }
  try {
    read_config_file(dir / "c.conf");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  {
    std::ofstream f(dir / "d.json");
    f << "{\"seed\": ";
  }
  CHECK_THROWS_AS(read_config_file(dir / "d.json"), ParseError);
  CHECK_THROWS_AS(read_config_file(dir / "missing.conf"), ParseError);
}

TEST_CASE("stage names") {
  for (Stage s : kAllStages) CHECK(parse_stage(stage_name(s)) == s);
  CHECK_THROWS_AS(parse_stage("warmup"), ContractError);
}

// ---------------------------------------------------------------------------
// stages

TEST_CASE("full run is deterministic and resumable") {
  const PipelineConfig cfg = tiny();
  const auto a = fresh_dir("run_a");
  const auto b = fresh_dir("run_b");
  const RunReport ra = run_pipeline(cfg, a);
  run_pipeline(cfg, b);
  CHECK(slurp(RunPaths{a}.report()) == slurp(RunPaths{b}.report()));
  CHECK(ra.variant == "GRAIL");
  CHECK(ra.config_hash == cfg.hash());
  CHECK(ra.metrics.baseline.micro >= 0.0);
  CHECK(ra.metrics.adapted.micro <= 1.0);
  CHECK(ra.seconds.size() == std::size(kAllStages));
  for (Stage s : kAllStages) CHECK(stage_complete(s, cfg, RunPaths{a}));

  SUBCASE("resume after sft matches the uninterrupted run") {
    const auto c = fresh_dir("run_c");
    const RunPaths pc{c};
    for (Stage s : {Stage::Data, Stage::Pretrain, Stage::Tokenizer, Stage::Trajectories, Stage::Sft})
      run_stage(s, cfg, pc);
    const RunReport rc = run_pipeline(cfg, c, {.resume = true, .from = Stage::Grpo});
    CHECK(slurp(pc.report()) == slurp(RunPaths{a}.report()));
    CHECK(rc.seconds.size() == 3);
  }

  SUBCASE("completed stages are skipped on resume") {
    const std::string gnn_before = slurp(RunPaths{a}.gnn());
    fs::remove(RunPaths{a}.adapted());
    const RunReport again = run_pipeline(cfg, a);
    CHECK(again.seconds.size() == 2);  // adapt, eval
    CHECK(slurp(RunPaths{a}.gnn()) == gnn_before);
    CHECK(slurp(RunPaths{a}.report()) == slurp(RunPaths{b}.report()));
  }

  SUBCASE("report reload") {
    const RunReport back = load_report(RunPaths{a});
    CHECK(back.to_json() == ra.to_json());
    CHECK(back.seconds.size() == ra.seconds.size());
    CHECK(ra.to_json(true).contains("seconds"));
    CHECK_FALSE(ra.to_json().contains("seconds"));
  }
}

TEST_CASE("missing or foreign upstream artifacts") {
  const PipelineConfig cfg = tiny();
  const auto d = fresh_dir("deps");
  const RunPaths p{d};
  try {
    run_stage(Stage::Sft, cfg, p);
    FAIL("expected StageDependencyError");
  } catch (const StageDependencyError& e) {
    CHECK(std::string(e.what()).find("corpus.tok") != std::string::npos);
  }
  CHECK_THROWS_AS(run_pipeline(cfg, d, {.from = Stage::Grpo}), StageDependencyError);

  run_stage(Stage::Data, cfg, p);
  PipelineConfig other = cfg;
  other.seed = 6;
  CHECK(stage_complete(Stage::Data, cfg, p));
  CHECK_FALSE(stage_complete(Stage::Data, other, p));
  CHECK_THROWS_AS(run_stage(Stage::Pretrain, other, p), StageDependencyError);
  CHECK_FALSE(fs::exists(p.gnn()));
}

TEST_CASE("stitch mode writes an adapted graph") {
  PipelineConfig cfg = tiny();
  cfg.adapt_mode = AdaptMode::Stitch;
  const auto d = fresh_dir("stitch");
  const RunReport r = run_pipeline(cfg, d);
  CHECK(fs::exists(RunPaths{d}.adapted_graph()));
  CHECK(load_graph(RunPaths{d}.adapted_graph()).node_count() == cfg.synthetic.target_nodes);
  CHECK(r.metrics.adapted.micro >= 0.0);
}

// ---------------------------------------------------------------------------
// evaluation

TEST_CASE("evaluation rows") {
  std::vector<int> truth = {0, 1, 1, 0, 2};
  std::vector<int> base = {0, 1, 0, 0, 1};
  auto same = evaluate(base, base, truth, 3);
  CHECK(same.delta_micro() == 0.0);
  CHECK(same.delta_macro() == 0.0);
  auto better = evaluate(base, truth, truth, 3);
  CHECK(better.adapted.micro == 1.0);
  CHECK(better.baseline.micro == doctest::Approx(0.6));
  CHECK(better.delta_micro() == doctest::Approx(0.4));
  const json j = better.to_json();
  CHECK(j["columns"] == json({"Micro-F1", "Macro-F1"}));
  CHECK(j["rows"][0]["name"] == "direct transfer");
  CHECK(j["rows"][1]["name"] == "adapted");
}

TEST_CASE("identity adaptation leaves metrics unchanged") {
  ShiftConfig sc;
  sc.source_nodes = 80;
  sc.target_nodes = 60;
  sc.shift = 1.0;
  sc.seed = 3;
  auto data = synth_shift(sc);
  PretrainConfig pc;
  pc.hidden = 8;
  pc.epochs = 40;
  auto gnn = pretrain_source(data.source, pc).first;
  auto r = evaluate(gnn, data.target, data.target, data.target.labels());
  CHECK(r.delta_micro() == 0.0);
  CHECK(r.delta_macro() == 0.0);
  Graph small(3, {}, Mat::Zero(3, sc.feature_dim));
  CHECK_THROWS_AS(evaluate(gnn, data.target, small, data.target.labels()), ContractError);
}

TEST_CASE("leaked labels upper-bound the adaptation") {
  ShiftConfig sc;
  sc.source_nodes = 150;
  sc.target_nodes = 150;
  sc.shift = 1.5;
  sc.seed = 8;
  auto data = synth_shift(sc);
  auto leak = [](const Graph& g, double scale) {
    Mat x = g.features();
    for (int v = 0; v < g.node_count(); ++v) x(v, g.labels()[static_cast<std::size_t>(v)]) += scale;
    return Graph(g.node_count(), g.edges(), x, g.labels(), g.class_count());
  };
  const Graph source = leak(data.source, 6.0);
  PretrainConfig pc;
  pc.hidden = 16;
  pc.epochs = 100;
  auto gnn = pretrain_source(source, pc).first;
  const Graph adapted = leak(data.target, 6.0);
  auto r = evaluate(gnn, data.target, adapted, data.target.labels());
  MESSAGE("direct " << r.baseline.micro << " leaked " << r.adapted.micro);
  CHECK(r.delta_micro() > 0.0);
  CHECK(r.adapted.micro > 0.9);
}

// ---------------------------------------------------------------------------
// plot data

TEST_CASE("pca of planar points is a rigid motion") {
  Rng rng(1);
  Mat x = testutil::randn(30, 2, rng);
  x.col(0) *= 3.0;
  Mat y = pca_2d(x);
  const Mat cx = x.rowwise() - x.colwise().mean();
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j)
      CHECK(std::abs((cx.row(i) - cx.row(j)).norm() - (y.row(i) - y.row(j)).norm()) < 1e-9);
  // recovers the rotation: y^T y is diagonal
  const Mat g = y.transpose() * y;
  CHECK(std::abs(g(0, 1)) < 1e-9);
}

TEST_CASE("pca column variances are ordered") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = testutil::uniform_int(rng, 3, 40), d = testutil::uniform_int(rng, 2, 8);
    Mat x = testutil::randn(n, d, rng);
    for (int c = 0; c < d; ++c) x.col(c) *= testutil::uniform(rng, 0.1, 4.0);
    Mat y = pca_2d(x);
    CHECK(y.col(0).squaredNorm() >= y.col(1).squaredNorm() - 1e-9);
    // the first axis carries the top eigenvalue
    const Mat cx = x.rowwise() - x.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cx.transpose() * cx);
    CHECK(y.col(0).squaredNorm() == doctest::Approx(es.eigenvalues()(d - 1)).epsilon(1e-8));
  }
}

TEST_CASE("plot data is deterministic") {
  Rng rng(3);
  Mat x = testutil::randn(10, 5, rng);
  Mat twice(20, 5);
  twice << x, x;
  Mat y = pca_2d(twice);
  CHECK(y.topRows(10) == y.bottomRows(10));
  CHECK(pca_2d(x) == pca_2d(x));

  const auto dir = fresh_dir("plot");
  std::vector<int> labels(10, 1);
  std::vector<std::string> domains(10, "target");
  emit_plot_data(x, labels, domains, dir / "a.csv");
  emit_plot_data(x, labels, domains, dir / "b.csv");
  const std::string text = slurp(dir / "a.csv");
  CHECK(text == slurp(dir / "b.csv"));
  CHECK(text.rfind("x,y,class,domain\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 11);
  std::vector<int> short_labels(9, 0);
  CHECK_THROWS_AS(emit_plot_data(x, short_labels, domains, dir / "c.csv"), ContractError);
}
