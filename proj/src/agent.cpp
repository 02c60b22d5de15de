#include "recx/agent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace recx {

namespace {

std::string describe(const Catalog& catalog, ItemId id) {
  const auto& category = catalog.category(id);
  return category.empty() ? catalog.display_name(id) : catalog.display_name(id) + " [" + category + "]";
}

std::vector<ItemId> uniform_pick(const TopKList& presented, std::size_t count, Rng& rng) {
  std::vector<ItemId> pool = presented.items;
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(count);
  return pool;
}

void check_count(const TopKList& presented, std::size_t count) {
  if (count < 1 || count > presented.k())
    throw std::invalid_argument("selection count " + std::to_string(count) + " outside 1.." +
                                std::to_string(presented.k()));
}

}  // namespace

Sequence compress_memory(std::span<const ItemId> history, std::size_t size) {
  if (size < 2) throw std::invalid_argument("compress_memory: size must be >= 2");
  if (history.size() <= size) return Sequence(history.begin(), history.end());
  const std::size_t half = size / 2;
  Sequence out(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(half));
  out.insert(out.end(), history.end() - static_cast<std::ptrdiff_t>(half), history.end());
  return out;
}

AgentState::AgentState(std::size_t mc_size, std::size_t ps_threshold)
    : mc_size_(mc_size), ps_threshold_(ps_threshold) {
  if (mc_size < 2 || mc_size % 2 != 0) throw std::invalid_argument("AgentState: mc_size must be even and >= 2");
  if (ps_threshold < 1) throw std::invalid_argument("AgentState: ps_threshold must be >= 1");
}

void AgentState::set_preference(PreferenceProfile profile) {
  if (preference_) throw std::logic_error("preference profile is already set");
  if (history.size() < ps_threshold_)
    throw std::logic_error("preference requires a history of at least " + std::to_string(ps_threshold_) + " items");
  if (profile.summary.empty()) throw std::invalid_argument("preference summary is empty");
  preference_ = std::move(profile);
}

double Persona::weight_of(const std::string& category) const {
  const auto it = category_weights.find(category);
  return it == category_weights.end() ? default_weight : it->second;
}

std::vector<ItemId> scripted_agent_select(const Persona& persona, const Catalog& catalog, const TopKList& presented,
                                          std::size_t count, Rng& rng, std::span<const ItemId> history) {
  check_count(presented, count);
  if (persona.position_bias < 0.0) throw std::invalid_argument("position bias must be >= 0");
  const std::size_t n = presented.k();
  std::unordered_set<ItemId> seen;
  if (persona.avoid_history) seen.insert(history.begin(), history.end());

  std::vector<double> weights(n);
  for (std::size_t p = 0; p < n; ++p) {
    const ItemId id = presented.items[p];
    const double base = seen.count(id) ? 0.0 : persona.weight_of(catalog.category(id));
    weights[p] = base * std::pow(static_cast<double>(p + 1), -persona.position_bias);
  }
  std::vector<bool> taken(n, false);
  std::vector<ItemId> chosen;
  chosen.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      if (!taken[p]) total += weights[p];
    std::size_t pick = n;
    if (total > 0.0) {
      double r = uniform_real(rng) * total;
      for (std::size_t p = 0; p < n; ++p) {
        if (taken[p] || weights[p] == 0.0) continue;
        pick = p;
        r -= weights[p];
        if (r < 0.0) break;
      }
    } else {
      std::size_t skip = uniform_index(rng, n - c);
      for (std::size_t p = 0; p < n; ++p) {
        if (taken[p]) continue;
        if (skip-- == 0) {
          pick = p;
          break;
        }
      }
    }
    taken[pick] = true;
    chosen.push_back(presented.items[pick]);
  }
  return chosen;
}

Persona sample_persona(const Catalog& catalog, double focus_weight, double background_weight, double position_bias,
                       Rng& rng, bool avoid_history) {
  Persona persona;
  persona.position_bias = position_bias;
  persona.default_weight = background_weight;
  persona.avoid_history = avoid_history;
  const auto categories = catalog.categories();
  if (!categories.empty()) persona.category_weights[categories[uniform_index(rng, categories.size())]] = focus_weight;
  else persona.default_weight = 1.0;
  return persona;
}

std::vector<ChatMessage> preference_prompt(const Catalog& catalog, std::span<const ItemId> history,
                                           const std::string& platform_description) {
  std::ostringstream user;
  user << "Platform Description:\n" << platform_description << "\n\nHistory (oldest first):\n";
  for (ItemId id : history) user << "- " << describe(catalog, id) << '\n';
  user << "\nSummarize this user's preferences in a few sentences: the kinds of items they choose most often "
          "and any patterns in the order they choose them. Reply with the summary only.";
  return {{"system", "You are simulating one user of an online platform."}, {"user", user.str()}};
}

std::vector<ChatMessage> selection_prompt(const Catalog& catalog, std::span<const ItemId> compressed_memory,
                                          const std::optional<PreferenceProfile>& preference,
                                          const TopKList& presented, std::size_t count, bool strict) {
  std::ostringstream user;
  user << "Compressed Memory (earliest and most recent interactions):\n";
  for (ItemId id : compressed_memory) user << "- " << describe(catalog, id) << '\n';
  user << "\nPreference:\n" << (preference ? preference->summary : std::string("Not established yet.")) << "\n\n";
  user << "Rec List:\n";
  for (std::size_t i = 0; i < presented.k(); ++i) user << i + 1 << ". " << describe(catalog, presented.items[i]) << '\n';
  user << "\nAs this user, choose exactly " << count << " item(s) from the Rec List that you would interact with "
       << "next. Answer with the item numbers only, separated by commas.";
  if (strict)
    user << "\nYour previous answer could not be used. Reply with exactly " << count
         << " distinct numbers between 1 and " << presented.k() << ", separated by commas, and nothing else.";
  return {{"system", "You are simulating one user of an online platform."}, {"user", user.str()}};
}

std::optional<std::vector<std::size_t>> parse_selection_reply(const std::string& reply, std::size_t list_size,
                                                              std::size_t count) {
  std::vector<std::size_t> picks;
  std::unordered_set<std::size_t> seen;
  for (std::size_t i = 0; i < reply.size();) {
    if (!std::isdigit(static_cast<unsigned char>(reply[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
    if (j - i > 9) return std::nullopt;
    const std::size_t value = std::stoul(reply.substr(i, j - i));
    if (value < 1 || value > list_size) return std::nullopt;
    if (seen.insert(value).second) picks.push_back(value - 1);
    i = j;
  }
  if (picks.size() < count) return std::nullopt;
  picks.resize(count);
  return picks;
}

const PreferenceProfile& stabilize_preference(AgentState& state, ChatBackend& backend, const Catalog& catalog,
                                              const std::string& platform_description) {
  if (state.preference()) return *state.preference();
  if (state.history.size() < state.ps_threshold())
    throw std::logic_error("stabilize_preference: history shorter than ps_threshold");
  std::string summary = backend.complete(preference_prompt(catalog, state.history, platform_description));
  if (summary.find_first_not_of(" \t\r\n") == std::string::npos)
    throw BackendError("preference summary reply was empty");
  state.set_preference({std::move(summary), state.history.size()});
  return *state.preference();
}

std::vector<ItemId> select_items(AgentState& state, const TopKList& presented, std::size_t count,
                                 ChatBackend& backend, const Catalog& catalog,
                                 const std::string& platform_description, Rng& rng, SelectionStats* stats) {
  check_count(presented, count);
  if (state.preference_due()) stabilize_preference(state, backend, catalog, platform_description);
  const Sequence memory = compress_memory(state.history, state.mc_size());

  std::vector<ItemId> chosen;
  for (int attempt = 0; attempt < 2 && chosen.empty(); ++attempt) {
    if (attempt == 1 && stats) ++stats->reprompts;
    const auto reply = backend.complete(selection_prompt(catalog, memory, state.preference(), presented, count, attempt == 1));
    if (const auto picks = parse_selection_reply(reply, presented.k(), count)) {
      for (std::size_t idx : *picks) chosen.push_back(presented.items[idx]);
    }
  }
  if (chosen.empty()) {
    if (stats) ++stats->fallbacks;
    chosen = uniform_pick(presented, count, rng);
  }
  state.history.insert(state.history.end(), chosen.begin(), chosen.end());
  return chosen;
}

std::vector<ItemId> RandomChoiceSampler::select(std::span<const ItemId>, const TopKList& presented, std::size_t count,
                                                Rng& rng) {
  check_count(presented, count);
  return uniform_pick(presented, count, rng);
}

std::vector<ItemId> ScriptedSampler::select(std::span<const ItemId> history, const TopKList& presented,
                                            std::size_t count, Rng& rng) {
  return scripted_agent_select(persona_, *catalog_, presented, count, rng, history);
}

LlmSampler::LlmSampler(ChatBackend& backend, const Catalog& catalog, LlmAgentConfig config)
    : backend_(&backend), catalog_(&catalog), config_(std::move(config)), state_(config_.mc_size, config_.ps_threshold) {}

std::vector<ItemId> LlmSampler::select(std::span<const ItemId> history, const TopKList& presented, std::size_t count,
                                       Rng& rng) {
  state_.history.assign(history.begin(), history.end());
  return select_items(state_, presented, count, *backend_, *catalog_, config_.platform_description, rng, &stats_);
}

}  // namespace recx
