#include "recx/genpipe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>
#include <unordered_map>

#include <json.hpp>

namespace recx {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json record_to_json(const QueryRecord& r) {
  return json{{"user", r.user},
              {"round", r.round},
              {"prefix_length", r.prefix_length},
              {"returned", r.returned.items},
              {"presented", r.selection.presented.items},
              {"chosen", r.selection.chosen},
              {"display_positions", r.selection.chosen_display_positions},
              {"original_ranks", r.selection.chosen_original_ranks}};
}

QueryRecord record_from_json(const json& j) {
  QueryRecord r;
  r.user = j.at("user").get<std::size_t>();
  r.round = j.at("round").get<std::size_t>();
  r.prefix_length = j.at("prefix_length").get<std::size_t>();
  r.returned.items = j.at("returned").get<std::vector<ItemId>>();
  r.selection.round = r.round;
  r.selection.presented.items = j.at("presented").get<std::vector<ItemId>>();
  r.selection.chosen = j.at("chosen").get<std::vector<ItemId>>();
  r.selection.chosen_display_positions = j.at("display_positions").get<std::vector<std::size_t>>();
  r.selection.chosen_original_ranks = j.at("original_ranks").get<std::vector<std::size_t>>();
  return r;
}

json read_header(std::istream& in, const std::string& format, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header");
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != format)
    throw DataError(path.string() + ": not a " + format + " file");
  if (header.value("version", 0) != kFormatVersion)
    throw DataError(path.string() + ": unsupported version");
  return header;
}

UserTrace generate_user(const Recommender& target, std::size_t item_count, Sampler& sampler,
                        const GenerationConfig& config, const DefenseConfig& defense, std::size_t user, Rng& rng) {
  UserTrace trace;
  trace.user = user;
  trace.sequence.push_back(static_cast<ItemId>(uniform_index(rng, item_count)));
  std::vector<std::size_t> perm(config.k);
  std::unordered_map<ItemId, std::size_t> display_of;
  for (std::size_t round = 0; trace.sequence.size() < config.target_length; ++round) {
    QueryRecord rec;
    rec.user = user;
    rec.round = round;
    rec.prefix_length = trace.sequence.size();
    rec.returned = query_topk(target, trace.sequence, config.k, defense);

    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (config.shuffle_before_present)
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
    rec.selection.round = round;
    rec.selection.presented.items.resize(config.k);
    display_of.clear();
    for (std::size_t i = 0; i < config.k; ++i) {
      rec.selection.presented.items[i] = rec.returned.items[perm[i]];
      display_of[rec.selection.presented.items[i]] = i;
    }

    const std::size_t want = std::min(config.items_per_query, config.target_length - trace.sequence.size());
    auto picks = sampler.select(trace.sequence, rec.selection.presented, want, rng);
    if (picks.size() != want) throw std::runtime_error("sampler returned " + std::to_string(picks.size()) +
                                                       " items, expected " + std::to_string(want));
    for (ItemId id : picks) {
      const auto it = display_of.find(id);
      if (it == display_of.end()) throw std::runtime_error("sampler chose item " + std::to_string(id) + " not presented");
      if (std::find(rec.selection.chosen_display_positions.begin(), rec.selection.chosen_display_positions.end(),
                    it->second + 1) != rec.selection.chosen_display_positions.end())
        throw std::runtime_error("sampler chose item " + std::to_string(id) + " twice");
      rec.selection.chosen.push_back(id);
      rec.selection.chosen_display_positions.push_back(it->second + 1);
      rec.selection.chosen_original_ranks.push_back(perm[it->second] + 1);
    }
    trace.sequence.insert(trace.sequence.end(), picks.begin(), picks.end());
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::agent: return "agent";
    case Provenance::random: return "random";
    case Provenance::secret: return "secret";
  }
  return "agent";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "agent") return Provenance::agent;
  if (s == "random") return Provenance::random;
  if (s == "secret") return Provenance::secret;
  throw DataError("unknown provenance '" + s + "'");
}

SequenceDataset generate_random_sequences(std::size_t item_count, std::size_t count, std::size_t length, Rng& rng) {
  if (length < 1) throw std::invalid_argument("generate_random_sequences: length must be >= 1");
  if (item_count < 1) throw std::invalid_argument("generate_random_sequences: empty item space");
  SequenceDataset data;
  data.item_count = item_count;
  data.sequences.resize(count);
  for (auto& seq : data.sequences) {
    seq.resize(length);
    for (auto& id : seq) id = static_cast<ItemId>(uniform_index(rng, item_count));
  }
  return data;
}

GenerationResult generate_autoregressive(const Recommender& target, std::size_t item_count,
                                         const SamplerFactory& sampler_factory, const GenerationConfig& config,
                                         const DefenseConfig& defense, const GenerationHooks& hooks) {
  if (item_count != target.item_count()) throw std::invalid_argument("generate_autoregressive: catalog size mismatch");
  if (config.num_sequences < 1) throw std::invalid_argument("generate_autoregressive: num_sequences must be >= 1");
  if (config.target_length < 1) throw std::invalid_argument("generate_autoregressive: target_length must be >= 1");
  if (config.items_per_query < 1 || config.items_per_query > config.k || config.k > item_count)
    throw std::invalid_argument("generate_autoregressive: need 1 <= items_per_query <= k <= |I|");

  struct Slot {
    std::optional<UserTrace> trace;
    std::string failure;
    std::size_t fallbacks = 0;
  };
  std::vector<Slot> slots(config.num_sequences);
  std::atomic<std::size_t> next{0};
  std::mutex hook_mutex;

  auto work = [&] {
    for (std::size_t user = next++; user < slots.size(); user = next++) {
      Slot& slot = slots[user];
      if (hooks.completed) {
        if (const auto it = hooks.completed->find(user); it != hooks.completed->end()) {
          slot.trace = it->second;
          continue;
        }
      }
      Rng rng = make_rng(config.seed, user, 0xa9e17);
      try {
        auto sampler = sampler_factory(user, rng);
        slot.trace = generate_user(target, item_count, *sampler, config, defense, user, rng);
        slot.fallbacks = sampler->fallback_events();
        if (hooks.on_user_done) {
          std::lock_guard lock(hook_mutex);
          hooks.on_user_done(*slot.trace);
        }
      } catch (const std::exception& e) {
        slot.trace.reset();
        slot.failure = "user " + std::to_string(user) + ": " + e.what();
      }
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(config.workers, 1, slots.size());
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  GenerationResult result;
  result.sequences.item_count = item_count;
  for (auto& slot : slots) {
    if (!slot.trace) {
      ++result.failed_users;
      result.failures.push_back(std::move(slot.failure));
      continue;
    }
    result.fallback_events += slot.fallbacks;
    result.users.push_back(slot.trace->user);
    result.sequences.sequences.push_back(std::move(slot.trace->sequence));
    for (auto& rec : slot.trace->records) result.log.records.push_back(std::move(rec));
  }
  return result;
}

double expected_queries(std::size_t total, std::size_t start_distinct, std::size_t target_distinct) {
  if (!(start_distinct < target_distinct && target_distinct <= total))
    throw std::invalid_argument("expected_queries: need 0 <= start < target <= total");
  // Smallest terms first.
  double sum = 0.0;
  for (std::size_t j = total - start_distinct; j >= total - target_distinct + 1; --j) sum += 1.0 / static_cast<double>(j);
  return static_cast<double>(total) * sum;
}

ExposurePlan plan_exposure_mix(std::size_t item_count, double coverage_fraction, std::size_t sequence_length,
                               std::size_t already_covered) {
  if (!(coverage_fraction > 0.0 && coverage_fraction <= 1.0))
    throw std::invalid_argument("plan_exposure_mix: coverage fraction must be in (0, 1]");
  if (sequence_length < 1) throw std::invalid_argument("plan_exposure_mix: sequence length must be >= 1");
  ExposurePlan plan;
  plan.target_distinct = static_cast<std::size_t>(std::ceil(coverage_fraction * static_cast<double>(item_count) - 1e-9));
  plan.target_distinct = std::clamp<std::size_t>(plan.target_distinct, 1, item_count);
  if (already_covered >= plan.target_distinct) return plan;
  plan.expected_samples = expected_queries(item_count, already_covered, plan.target_distinct);
  plan.random_sequences = static_cast<std::size_t>(std::ceil(plan.expected_samples / static_cast<double>(sequence_length)));
  return plan;
}

SurrogateDataset build_surrogate_dataset(const std::vector<SequenceInput>& sequences, const Recommender& target,
                                         std::size_t k, const DefenseConfig& defense) {
  SurrogateDataset data;
  data.item_count = target.item_count();
  data.k = k;
  data.defense = defense;
  data.pairs.reserve(sequences.size());
  for (const auto& in : sequences)
    data.pairs.push_back({in.sequence, query_topk(target, in.sequence, k, defense), in.provenance});
  return data;
}

std::vector<SequenceInput> secret_prefixes(const SequenceDataset& secret_train, std::size_t users,
                                           std::size_t prefix_cap) {
  if (prefix_cap < 1) throw std::invalid_argument("secret_prefixes: prefix cap must be >= 1");
  std::vector<SequenceInput> out;
  for (std::size_t u = 0; u < secret_train.size() && out.size() < users; ++u) {
    const auto& seq = secret_train.sequences[u];
    if (seq.empty()) continue;
    const std::size_t len = std::min(prefix_cap, seq.size());
    out.push_back({Sequence(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len)), Provenance::secret});
  }
  return out;
}

std::size_t distinct_items(const SequenceDataset& data) {
  std::vector<bool> seen(data.item_count, false);
  std::size_t n = 0;
  for (const auto& seq : data.sequences)
    for (ItemId id : seq)
      if (!seen[static_cast<std::size_t>(id)]) {
        seen[static_cast<std::size_t>(id)] = true;
        ++n;
      }
  return n;
}

void save_query_log(const QueryLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write query log");
  out << json{{"format", "recx.querylog"}, {"version", kFormatVersion}}.dump() << '\n';
  for (const auto& r : log.records) out << record_to_json(r).dump() << '\n';
}

QueryLog load_query_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open query log");
  read_header(in, "recx.querylog", path);
  QueryLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      log.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ": bad record: " + e.what());
    }
  }
  return log;
}

void save_surrogate_dataset(const SurrogateDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write surrogate dataset");
  out << json{{"format", "recx.surrogate"},
              {"version", kFormatVersion},
              {"item_count", data.item_count},
              {"k", data.k},
              {"defense",
               {{"enabled", data.defense.enabled},
                {"replace_fraction", data.defense.replace_fraction},
                {"seed", data.defense.seed}}}}
             .dump()
      << '\n';
  for (const auto& p : data.pairs)
    out << json{{"sequence", p.sequence}, {"response", p.response.items}, {"provenance", to_string(p.provenance)}}.dump()
        << '\n';
}

SurrogateDataset load_surrogate_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open surrogate dataset");
  const json header = read_header(in, "recx.surrogate", path);
  SurrogateDataset data;
  try {
    data.item_count = header.at("item_count").get<std::size_t>();
    data.k = header.at("k").get<std::size_t>();
    data.defense.enabled = header.at("defense").at("enabled").get<bool>();
    data.defense.replace_fraction = header.at("defense").at("replace_fraction").get<double>();
    data.defense.seed = header.at("defense").at("seed").get<std::uint64_t>();
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      data.pairs.push_back({j.at("sequence").get<Sequence>(), TopKList{j.at("response").get<std::vector<ItemId>>()},
                            provenance_from_string(j.at("provenance").get<std::string>())});
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return data;
}

std::string user_trace_to_line(const UserTrace& trace) {
  json records = json::array();
  for (const auto& r : trace.records) records.push_back(record_to_json(r));
  return json{{"user", trace.user}, {"sequence", trace.sequence}, {"records", records}}.dump();
}

UserTrace user_trace_from_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    UserTrace t;
    t.user = j.at("user").get<std::size_t>();
    t.sequence = j.at("sequence").get<Sequence>();
    for (const auto& r : j.at("records")) t.records.push_back(record_from_json(r));
    return t;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad user trace: ") + e.what());
  }
}

}  // namespace recx
