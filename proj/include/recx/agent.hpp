#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "recx/chat.hpp"
#include "recx/corpus.hpp"
#include "recx/recsys.hpp"
#include "recx/types.hpp"

namespace recx {

// Keeps the first and last floor(size/2) items when the history exceeds size.
Sequence compress_memory(std::span<const ItemId> history, std::size_t size);

struct PreferenceProfile {
  std::string summary;
  std::size_t created_at_length = 0;
};

// Per-user agent memory. The preference profile is set at most once, and only
// after the history reaches ps_threshold items.
class AgentState {
 public:
  explicit AgentState(std::size_t mc_size = 10, std::size_t ps_threshold = 5);

  Sequence history;

  std::size_t mc_size() const { return mc_size_; }
  std::size_t ps_threshold() const { return ps_threshold_; }
  const std::optional<PreferenceProfile>& preference() const { return preference_; }
  bool preference_due() const { return !preference_ && history.size() >= ps_threshold_; }
  void set_preference(PreferenceProfile profile);

 private:
  std::size_t mc_size_;
  std::size_t ps_threshold_;
  std::optional<PreferenceProfile> preference_;
};

// One presentation of a list to the sampler and what it picked.
struct SelectionRecord {
  std::size_t round = 0;
  TopKList presented;  // as displayed (after any shuffle)
  std::vector<ItemId> chosen;
  std::vector<std::size_t> chosen_display_positions;  // 1-based, into presented
  std::vector<std::size_t> chosen_original_ranks;     // 1-based, into the unshuffled list
  bool operator==(const SelectionRecord&) const = default;
};

// Offline stand-in for an LLM user: category taste plus a display-position bias.
struct Persona {
  std::map<std::string, double> category_weights;
  double default_weight = 1.0;  // for categories not in the map
  double position_bias = 0.0;   // beta; weight factor p^-beta at display position p
  bool avoid_history = false;   // zero weight for items already consumed

  double weight_of(const std::string& category) const;
};

// Weighted sampling without replacement, w(item at position p) = catweight * p^-beta.
// If every remaining weight is zero the pick is uniform over what remains.
std::vector<ItemId> scripted_agent_select(const Persona& persona, const Catalog& catalog, const TopKList& presented,
                                          std::size_t count, Rng& rng,
                                          std::span<const ItemId> history = {});

// Persona with a single favoured category drawn uniformly from the catalog.
Persona sample_persona(const Catalog& catalog, double focus_weight, double background_weight,
                       double position_bias, Rng& rng, bool avoid_history = false);

// ----- prompt templates -----

inline constexpr int kPromptVersion = 1;

std::vector<ChatMessage> preference_prompt(const Catalog& catalog, std::span<const ItemId> history,
                                           const std::string& platform_description);
std::vector<ChatMessage> selection_prompt(const Catalog& catalog, std::span<const ItemId> compressed_memory,
                                          const std::optional<PreferenceProfile>& preference,
                                          const TopKList& presented, std::size_t count, bool strict);

// Reply -> 0-based indices into a list of list_size items. Empty optional when the
// reply has an out-of-range number or fewer than count distinct numbers.
std::optional<std::vector<std::size_t>> parse_selection_reply(const std::string& reply, std::size_t list_size,
                                                              std::size_t count);

// One chat call on first use; later calls return the cached profile without a request.
const PreferenceProfile& stabilize_preference(AgentState& state, ChatBackend& backend, const Catalog& catalog,
                                              const std::string& platform_description);

struct SelectionStats {
  std::size_t reprompts = 0;
  std::size_t fallbacks = 0;
};

// Prompted selection of count distinct items from presented. Appends them to the
// state's history. One stricter reprompt on an unusable reply, then a uniform fallback.
std::vector<ItemId> select_items(AgentState& state, const TopKList& presented, std::size_t count,
                                 ChatBackend& backend, const Catalog& catalog,
                                 const std::string& platform_description, Rng& rng,
                                 SelectionStats* stats = nullptr);

// ----- samplers used by the generation loop -----

class Sampler {
 public:
  virtual ~Sampler() = default;
  // history is the user's sequence so far; returns count distinct items of presented.
  virtual std::vector<ItemId> select(std::span<const ItemId> history, const TopKList& presented,
                                     std::size_t count, Rng& rng) = 0;
  virtual std::size_t fallback_events() const { return 0; }
};

// Uniform choice from the presented list.
class RandomChoiceSampler final : public Sampler {
 public:
  std::vector<ItemId> select(std::span<const ItemId> history, const TopKList& presented, std::size_t count,
                             Rng& rng) override;
};

class ScriptedSampler final : public Sampler {
 public:
  ScriptedSampler(Persona persona, const Catalog& catalog) : persona_(std::move(persona)), catalog_(&catalog) {}
  std::vector<ItemId> select(std::span<const ItemId> history, const TopKList& presented, std::size_t count,
                             Rng& rng) override;
  const Persona& persona() const { return persona_; }

 private:
  Persona persona_;
  const Catalog* catalog_;
};

struct LlmAgentConfig {
  std::size_t mc_size = 10;
  std::size_t ps_threshold = 5;
  std::string platform_description =
      "An online store where users browse a ranked list of recommended products and pick what to view next.";
};

class LlmSampler final : public Sampler {
 public:
  LlmSampler(ChatBackend& backend, const Catalog& catalog, LlmAgentConfig config);
  std::vector<ItemId> select(std::span<const ItemId> history, const TopKList& presented, std::size_t count,
                             Rng& rng) override;
  std::size_t fallback_events() const override { return stats_.fallbacks; }
  const AgentState& state() const { return state_; }
  const SelectionStats& stats() const { return stats_; }

 private:
  ChatBackend* backend_;
  const Catalog* catalog_;
  LlmAgentConfig config_;
  AgentState state_;
  SelectionStats stats_;
};

}  // namespace recx
