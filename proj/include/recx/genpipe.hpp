#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "recx/agent.hpp"
#include "recx/corpus.hpp"
#include "recx/recsys.hpp"
#include "recx/types.hpp"

namespace recx {

struct GenerationConfig {
  std::size_t num_sequences = 5000;
  std::size_t target_length = 50;
  std::size_t k = 100;
  std::size_t items_per_query = 5;
  bool shuffle_before_present = true;
  std::uint64_t seed = 0;
  std::size_t workers = 1;  // never changes results
};

struct QueryRecord {
  std::size_t user = 0;
  std::size_t round = 0;
  std::size_t prefix_length = 0;
  TopKList returned;  // target response as received, before any shuffle
  SelectionRecord selection;
  bool operator==(const QueryRecord&) const = default;
};

struct QueryLog {
  std::vector<QueryRecord> records;  // ordered by (user, round)
  bool operator==(const QueryLog&) const = default;
};

enum class Provenance { agent, random, secret };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct SurrogatePair {
  Sequence sequence;
  TopKList response;
  Provenance provenance = Provenance::agent;
  bool operator==(const SurrogatePair&) const = default;
};

struct SurrogateDataset {
  std::vector<SurrogatePair> pairs;
  std::size_t item_count = 0;
  std::size_t k = 0;
  DefenseConfig defense;  // settings in force when the responses were collected
  std::size_t size() const { return pairs.size(); }
  bool operator==(const SurrogateDataset& o) const {
    return pairs == o.pairs && item_count == o.item_count && k == o.k && defense.enabled == o.defense.enabled &&
           defense.replace_fraction == o.defense.replace_fraction && defense.seed == o.defense.seed;
  }
};

struct SequenceInput {
  Sequence sequence;
  Provenance provenance = Provenance::agent;
};

// Each position i.i.d. uniform over [0, item_count).
SequenceDataset generate_random_sequences(std::size_t item_count, std::size_t count, std::size_t length, Rng& rng);

// Builds a fresh sampler for one generated user.
using SamplerFactory = std::function<std::unique_ptr<Sampler>(std::size_t user, Rng& rng)>;

struct UserTrace {
  std::size_t user = 0;
  Sequence sequence;
  std::vector<QueryRecord> records;
};

struct GenerationResult {
  SequenceDataset sequences;
  QueryLog log;
  std::vector<std::size_t> users;  // generated user index of each sequence
  std::size_t failed_users = 0;
  std::vector<std::string> failures;
  std::size_t fallback_events = 0;
};

struct GenerationHooks {
  // Users already generated in an earlier run; they are reused as-is.
  const std::map<std::size_t, UserTrace>* completed = nullptr;
  // Called once per newly completed user (from worker threads, serialized).
  std::function<void(const UserTrace&)> on_user_done;
};

// Autoregressive interaction loop: seed item uniform over I, then repeatedly query
// top-k on the current prefix, optionally shuffle for display, let the sampler pick,
// append, until target_length items. Users fail independently.
GenerationResult generate_autoregressive(const Recommender& target, std::size_t item_count,
                                         const SamplerFactory& sampler_factory, const GenerationConfig& config,
                                         const DefenseConfig& defense, const GenerationHooks& hooks = {});

// Expected uniform draws to go from start_distinct to target_distinct collected items
// out of total: total * sum_{j=total-target+1}^{total-start} 1/j.
double expected_queries(std::size_t total, std::size_t start_distinct, std::size_t target_distinct);

struct ExposurePlan {
  std::size_t target_distinct = 0;
  double expected_samples = 0.0;
  std::size_t random_sequences = 0;  // ceil(expected_samples / sequence_length)
};

// Random-sequence budget that reaches coverage_fraction * |I| distinct items in expectation.
ExposurePlan plan_exposure_mix(std::size_t item_count, double coverage_fraction, std::size_t sequence_length,
                               std::size_t already_covered = 0);

// One target query per full sequence.
SurrogateDataset build_surrogate_dataset(const std::vector<SequenceInput>& sequences, const Recommender& target,
                                         std::size_t k, const DefenseConfig& defense);

// Secret training prefixes for the data-limited threat model.
std::vector<SequenceInput> secret_prefixes(const SequenceDataset& secret_train, std::size_t users,
                                           std::size_t prefix_cap);

std::size_t distinct_items(const SequenceDataset& data);

// Line-delimited JSON with a version header line.
void save_query_log(const QueryLog& log, const std::filesystem::path& path);
QueryLog load_query_log(const std::filesystem::path& path);
void save_surrogate_dataset(const SurrogateDataset& data, const std::filesystem::path& path);
SurrogateDataset load_surrogate_dataset(const std::filesystem::path& path);

// Per-user checkpoint lines used for resumable generation.
std::string user_trace_to_line(const UserTrace& trace);
UserTrace user_trace_from_line(const std::string& line);

}  // namespace recx
