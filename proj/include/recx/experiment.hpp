#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "recx/agent.hpp"
#include "recx/chat.hpp"
#include "recx/corpus.hpp"
#include "recx/distill.hpp"
#include "recx/genpipe.hpp"
#include "recx/metrics.hpp"
#include "recx/recsys.hpp"

namespace recx {

inline constexpr const char* kToolName = "recextract";
inline constexpr const char* kToolVersion = "0.1.0";

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | file
  std::string sequences;             // one space-separated sequence per line
  std::string catalog;               // optional TSV; item_count is used without it
  std::size_t item_count = 0;
  SynthesisParams synthetic;
};

struct TargetSpec {
  std::string arch = "score";  // score | markov
  std::size_t dim = 16;
  double gamma = 0.7;
  double alpha = 0.1;  // markov popularity weight
  PretrainConfig pretrain;
  std::string checkpoint;  // empty means <output_dir>/target.bin
};

enum class ThreatMode { free, limited, available };
enum class GeneratorKind { random, autoregressive_random, agent };

struct ThreatSpec {
  ThreatMode mode = ThreatMode::free;
  std::size_t secret_users = 100;
  std::size_t prefix_cap = 10;
};

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::agent;
  bool exposure_mix = true;
  double coverage_fraction = 0.9;
  bool shuffle = true;
  std::size_t num_sequences = 5000;
  std::size_t target_length = 50;
  std::size_t items_per_query = 5;
};

struct SurrogateSpec {
  std::size_t dim = 16;
  double gamma = 0.7;
};

struct AgentSpec {
  std::string backend = "scripted";  // scripted | chat | replay
  double focus_weight = 4.0;
  double background_weight = 1.0;
  double position_bias = 1.0;
  bool avoid_history = false;  // zero weight for items the persona already picked
  LlmAgentConfig llm;
  ChatBackendConfig chat;
};

struct EvalSpec {
  std::size_t cutoff = 10;
  std::size_t num_negatives = 100;
  double ngram_epsilon = 1e-3;
  std::size_t max_users = 0;  // 0 evaluates every secret user
};

// Settings that never change results; left out of report config echoes.
struct RuntimeSpec {
  std::string output_dir = "run";
  std::size_t workers = 1;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  TargetSpec target;
  ThreatSpec threat;
  GeneratorSpec generator;
  std::size_t k = 100;
  SurrogateSpec surrogate;
  DistillConfig distill;
  DefenseConfig defense;
  AgentSpec agent;
  EvalSpec eval;
  RuntimeSpec runtime;
};

std::string to_string(ThreatMode m);
std::string to_string(GeneratorKind g);

// Every field, in a fixed order. Internal seeds (distill, pretrain, defense) are
// derived from the global seed and are not part of the document.
nlohmann::ordered_json config_to_json(const ExperimentConfig& config);
// Strict: unknown fields, wrong types and out-of-range values throw ConfigError
// naming the field path.
ExperimentConfig config_from_json(const nlohmann::json& doc);
// "a.b.c=value"; value is parsed as JSON when it parses, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Fills the derived seeds from config.seed.
ExperimentConfig resolve_seeds(ExperimentConfig config);

struct PreparedData {
  Catalog catalog;
  SequenceDataset sequences;
  SplitDataset split;
};

PreparedData prepare_data(const ExperimentConfig& config);
std::unique_ptr<Recommender> train_target(const ExperimentConfig& config, const PreparedData& data);

struct ManifestEntry {
  std::string name;
  std::filesystem::path path;
  std::string sha256;
};

struct RunManifest {
  std::string command;
  nlohmann::ordered_json config;
  std::vector<ManifestEntry> artifacts;
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;

  void add(const std::string& name, const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
  void save(const std::filesystem::path& path) const;
};

struct AttackOutcome {
  EvalReport report;
  SurrogateDataset surrogate_data;
  TrainedSurrogate surrogate;
  QueryLog log;
  std::size_t random_mix_sequences = 0;
};

struct AttackOptions {
  // Write progress, datasets, model, tables and report under runtime.output_dir.
  bool write_artifacts = false;
  RunManifest* manifest = nullptr;
};

// Generation, surrogate dataset, distillation and evaluation against the target.
// Throws BackendError when users failed; with artifacts on, finished users are kept
// in progress.jsonl and a rerun resumes from them.
AttackOutcome run_attack(const ExperimentConfig& config, const PreparedData& data, const Recommender& target,
                         const AttackOptions& options = {});

// ----- commands -----

struct CommandOptions {
  bool train_target_if_missing = false;
};

RunManifest cmd_prepare(const ExperimentConfig& config);
RunManifest cmd_train_target(const ExperimentConfig& config);
RunManifest cmd_attack(const ExperimentConfig& config, const CommandOptions& options = {});
// Columns k,agreement@1,agreement@10,ndcg@10,recall@10.
RunManifest cmd_sweep_k(const ExperimentConfig& config, std::vector<std::size_t> k_values,
                        const CommandOptions& options = {});
// Columns method,defense,N@10,R@10,Agr@1,Agr@10,target_N@10,target_R@10. A
// defense-off row comes first, then one row per p.
RunManifest cmd_defense_compare(const ExperimentConfig& config, const std::vector<double>& p_values,
                                const CommandOptions& options = {});
// Bias diagnostics from a query log: unseen curve, position histograms, chi-square.
RunManifest cmd_analyze(const std::filesystem::path& log_path, std::size_t item_count,
                        const std::filesystem::path& out_dir);
// Agreement and recommendation quality between two checkpoints on the configured data.
RunManifest cmd_evaluate(const ExperimentConfig& config, const std::filesystem::path& model_a,
                         const std::filesystem::path& model_b);

}  // namespace recx
