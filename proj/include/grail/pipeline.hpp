#pragma once

// End-to-end orchestration: configuration, resumable stages with on-disk
// artifacts, evaluation against direct transfer, and plot-data export.

#include "grail/gnn.hpp"
#include "grail/graph.hpp"
#include "grail/grpo.hpp"
#include "grail/restorer.hpp"
#include "grail/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace grail {

inline constexpr int kConfigVersion = 1;

enum class AdaptMode { CenterOnly, Stitch };

struct PipelineConfig {
  std::uint64_t seed = 0;

  // data: explicit graph files, or a synthetic domain pair when empty
  std::string source_path;
  std::string target_path;
  GraphFormat format = GraphFormat::Archive;
  ShiftConfig synthetic;

  PretrainConfig gnn;

  int ego_hops = 2;
  int ego_max_nodes = 32;

  TokenizerConfig tokenizer;
  /// Source subgraphs used for tokenizer training and trajectories (0 = all).
  int tokenizer_subgraphs = 0;
  int trajectories_per_subgraph = 1;

  int lm_width = 128;
  int lm_layers = 4;
  int lm_heads = 4;
  SftConfig sft;

  GrpoConfig grpo;
  RewardConfig reward;
  int grpo_steps = 20;
  int grpo_prompts_per_step = 4;

  AdaptMode adapt_mode = AdaptMode::CenterOnly;
  double adapt_temperature = 0.0;

  /// Full-scale defaults.
  static PipelineConfig defaults();
  /// Small configuration that runs end to end in minutes on one core.
  static PipelineConfig desk();

  nlohmann::json to_json() const;
  /// Throws SchemaError on unknown keys or wrong types, ContractError on
  /// values outside module contracts.
  static PipelineConfig from_json(const nlohmann::json& j);
  void validate() const;
  /// Stable 64-bit FNV-1a hash of the canonical JSON, as 16 hex digits.
  std::string hash() const;
  /// Ablation label: "GRAIL", "w/o Encoder", "w/o Diff", "w/o Align",
  /// "w/o Conf", or a "+"-joined combination.
  std::string variant() const;
};

/// Reads JSON, or "key = value" lines with dotted keys ("grpo.group = 8").
nlohmann::json read_config_file(const std::filesystem::path& path);
/// Applies "dotted.key=value" (value parsed as JSON when possible).
void apply_override(nlohmann::json& j, const std::string& assignment);

// ---------------------------------------------------------------------------
// Stages

enum class Stage { Data, Pretrain, Tokenizer, Trajectories, Sft, Grpo, Adapt, Eval };

inline constexpr Stage kAllStages[] = {Stage::Data,         Stage::Pretrain, Stage::Tokenizer,
                                       Stage::Trajectories, Stage::Sft,      Stage::Grpo,
                                       Stage::Adapt,        Stage::Eval};

std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

/// Artifact layout inside a run directory.
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path source() const { return dir / "source.graph"; }
  std::filesystem::path target() const { return dir / "target.graph"; }
  std::filesystem::path gnn() const { return dir / "gnn.ckpt"; }
  std::filesystem::path centroids() const { return dir / "centroids.bin"; }
  std::filesystem::path tokenizer() const { return dir / "tokenizer.ckpt"; }
  std::filesystem::path corpus() const { return dir / "corpus.tok"; }
  std::filesystem::path lm_sft() const { return dir / "lm_sft.ckpt"; }
  std::filesystem::path lm_grpo() const { return dir / "lm_grpo.ckpt"; }
  std::filesystem::path adapted() const { return dir / "adapted.json"; }
  std::filesystem::path adapted_graph() const { return dir / "adapted.graph"; }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path timing() const { return dir / "timing.json"; }
  std::filesystem::path stage_log(Stage s) const { return dir / (stage_name(s) + ".log.json"); }
  /// Files a stage writes; the first one marks completion.
  std::vector<std::filesystem::path> outputs(Stage s) const;
};

/// Runs one stage, reading upstream artifacts from `paths`. Throws
/// StageDependencyError naming the missing file when an input is absent or
/// was produced under a different configuration.
void run_stage(Stage s, const PipelineConfig& cfg, const RunPaths& paths);

/// True when the stage's artifacts exist and carry this config's hash.
bool stage_complete(Stage s, const PipelineConfig& cfg, const RunPaths& paths);

struct EvalRow {
  std::string name;
  double micro = 0.0;
  double macro = 0.0;
};

struct EvalResult {
  EvalRow baseline;
  EvalRow adapted;
  double delta_micro() const { return adapted.micro - baseline.micro; }
  double delta_macro() const { return adapted.macro - baseline.macro; }
  nlohmann::json to_json() const;
};

EvalResult evaluate(std::span<const int> baseline_pred, std::span<const int> adapted_pred,
                    std::span<const int> truth, int classes);
/// Frozen GNN on the raw target vs. on the adapted target graph.
EvalResult evaluate(const GnnModel& gnn, const Graph& raw, const Graph& adapted,
                    std::span<const int> truth);

struct RunReport {
  std::string variant;
  std::string config_hash;
  nlohmann::json stages = nlohmann::json::object();
  EvalResult metrics;
  std::vector<std::pair<std::string, double>> seconds;

  /// Timing is excluded unless requested so that reports compare bytewise.
  nlohmann::json to_json(bool with_timing = false) const;
};

struct RunOptions {
  /// Reuse completed stages (matching config hash) instead of recomputing.
  bool resume = true;
  /// Start here; every upstream stage must already be complete.
  std::optional<Stage> from;
};

/// Executes the stages in order, persisting artifacts under `dir`, and
/// writes report.json (no timing) and timing.json.
RunReport run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& dir,
                       const RunOptions& opts = {});

/// Loads report.json / timing.json written by run_pipeline.
RunReport load_report(const RunPaths& paths);

// ---------------------------------------------------------------------------

/// Projects embeddings onto their top two principal axes and writes
/// "x,y,class,domain" CSV rows.
Mat pca_2d(const Mat& embeddings);
void emit_plot_data(const Mat& embeddings, std::span<const int> labels,
                    std::span<const std::string> domains, const std::filesystem::path& out);

}  // namespace grail
