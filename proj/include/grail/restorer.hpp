#pragma once

// Decoder-only transformer over graph tokens. Vocabulary layout: ids 0..2 are
// BOS, EOS, SEP; graph code c maps to token id c + 3.

#include "grail/autograd.hpp"
#include "grail/nn.hpp"
#include "grail/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <vector>

namespace grail {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kSep = 2;
inline constexpr int kSpecialCount = 3;

constexpr int code_to_token(int code) { return code + kSpecialCount; }
constexpr int token_to_code(int token) { return token - kSpecialCount; }
constexpr bool is_graph_token(int token) { return token >= kSpecialCount; }

/// (T+1)K + T + 2: BOS, T+1 blocks of K tokens, T separators, EOS.
int serialized_length(int k, int steps);

/// BOS S_T SEP S_{T-1} ... SEP S_0 EOS, graph codes offset by the specials.
std::vector<int> serialize_trajectory(const std::vector<TokenGrid>& traj);
/// Inverse of serialize_trajectory; steps are numbered T..0 by position.
std::vector<TokenGrid> deserialize_trajectory(std::span<const int> seq, int k);

struct RestorerConfig {
  int codes = 128;  // M
  int width = 128;
  int layers = 4;
  int heads = 4;
  int context = 1420;
  std::uint64_t seed = 0;

  int vocab_size() const { return codes + kSpecialCount; }
  nlohmann::json to_json() const;
  static RestorerConfig from_json(const nlohmann::json& j);
};

struct DecoderBlock {
  nn::LayerNorm ln1;
  nn::Attention attn;
  nn::LayerNorm ln2;
  nn::Mlp mlp;
};

class RestorerLM {
 public:
  RestorerLM() = default;
  explicit RestorerLM(const RestorerConfig& cfg);

  const RestorerConfig& config() const { return cfg_; }
  int vocab_size() const { return cfg_.vocab_size(); }
  int context() const { return cfg_.context; }

  /// Next-token logits for every position: L x V.
  ad::Var logits(std::span<const int> tokens) const;
  Mat logits_value(std::span<const int> tokens) const;

  nn::ParamSet params() const;
  /// Deep copy with independent parameter storage.
  RestorerLM clone() const;

  /// Key/value cache for incremental decoding without autograd.
  struct Cache {
    std::vector<Mat> keys;
    std::vector<Mat> values;
    int length = 0;
  };
  Cache start_cache() const;
  /// Appends one token and returns the logits row predicting the next one.
  RowVec step(Cache& cache, int token) const;

 private:
  RestorerConfig cfg_;
  ad::Var tok_embed_;  // V x width
  ad::Var pos_embed_;  // context x width
  std::vector<DecoderBlock> blocks_;
  nn::LayerNorm ln_f_;
  nn::Linear head_;
};

/// Mean next-token NLL over positions 1..L-1 (BOS is never a target).
ad::Var sft_loss_var(const RestorerLM& lm, std::span<const int> seq);
double sft_loss(const RestorerLM& lm, std::span<const int> seq);

struct TokenCorpus {
  int k = 0;
  int steps = 0;
  int codes = 0;
  std::vector<std::vector<int>> sequences;

  /// Throws ContractError unless every sequence parses into full blocks.
  void validate() const;
};

inline constexpr int kCorpusVersion = 1;

/// Line 1: JSON header {K, T, M, specials, version}; then one trajectory per
/// line as whitespace-separated token ids.
void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path);
TokenCorpus load_corpus(const std::filesystem::path& path);

struct SftConfig {
  double lr = 1e-4;
  int epochs = 10;
  /// Optional cap on optimizer steps (one sequence per step); 0 = no cap.
  int max_steps = 0;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  /// Stop after an epoch whose mean training loss is below this; 0 = off.
  double target_loss = 0.0;
  /// Decay lr linearly to zero over the step budget.
  bool linear_decay = false;
};

struct SftLog {
  std::vector<double> epoch_loss;
  int steps = 0;
};

/// Teacher-forced training in place; one sequence per optimizer step.
SftLog train_sft(RestorerLM& lm, const TokenCorpus& corpus, const SftConfig& cfg);

// ---------------------------------------------------------------------------
// Constrained generation

struct SamplingConfig {
  /// <= 0 selects greedy argmax decoding.
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t seed = 0;
  /// Total blocks including the prompt block; EOS is forced after this many.
  int max_blocks = 0;
};

/// Allowed next tokens after `prefix` under block framing: graph tokens
/// inside a block, SEP or EOS at a block boundary, EOS alone once
/// `max_blocks` blocks are complete, nothing after EOS.
std::vector<char> allowed_next(std::span<const int> prefix, int k, int max_blocks, int vocab);

struct Generation {
  std::vector<int> tokens;  // prompt + continuation
  std::vector<TokenGrid> blocks;
  bool finished = false;  // EOS emitted
};

/// Prompt must be BOS followed by exactly one K-token block.
Generation generate(const RestorerLM& lm, std::span<const int> prompt, int k,
                    const SamplingConfig& cfg);

/// Log-probabilities of each continuation token under the constrained
/// (masked, renormalized) policy; positions where only one token is allowed
/// are skipped. Also returns, per scored position, the full constrained
/// log-distribution for KL terms.
struct PolicyEval {
  ad::Var token_logp;  // n x 1
  ad::Var dist_logp;   // n x V (disallowed entries ~ -1e9)
  std::vector<int> positions;
};
PolicyEval policy_eval(const RestorerLM& lm, std::span<const int> seq, int prompt_len, int k,
                       int max_blocks);

void save_restorer(const RestorerLM& lm, const std::filesystem::path& path,
                   const std::string& config_hash = {});
RestorerLM load_restorer(const std::filesystem::path& path);

}  // namespace grail
