#include <doctest.h>

#include <algorithm>
#include <map>
#include <regex>
#include <set>

#include "helpers.hpp"
#include "recx/agent.hpp"

using namespace recx;

namespace {

Catalog shop() {
  std::vector<CatalogItem> items;
  const char* cats[] = {"Books", "Games", "Tools"};
  for (int i = 0; i < 30; ++i) items.push_back({i, "Thing " + std::to_string(i), cats[i % 3]});
  return Catalog(items);
}

// Replies with a fixed script; records prompts.
class ScriptedBackend : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string complete(const std::vector<ChatMessage>& messages) override {
    prompts.push_back(messages.back().content);
    const std::string r = replies_[std::min(count_, replies_.size() - 1)];
    ++count_;
    return r;
  }
  std::size_t request_count() const override { return count_; }
  std::vector<std::string> prompts;

 private:
  std::vector<std::string> replies_;
  std::size_t count_ = 0;
};

// Counts "[Category]" tags in the prompt and names the most frequent one.
class CategoryEchoBackend : public ChatBackend {
 public:
  std::string complete(const std::vector<ChatMessage>& messages) override {
    ++count_;
    std::map<std::string, int> counts;
    const std::regex tag(R"(\[([^\]]+)\])");
    const std::string& text = messages.back().content;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), tag); it != std::sregex_iterator(); ++it)
      ++counts[(*it)[1]];
    std::string best;
    int most = -1;
    for (const auto& [c, n] : counts)
      if (n > most) best = c, most = n;
    return "This user mostly picks " + best + ".";
  }
  std::size_t request_count() const override { return count_; }

 private:
  std::size_t count_ = 0;
};

TopKList list_of(std::vector<ItemId> v) { return TopKList{std::move(v)}; }

}  // namespace

TEST_CASE("memory compression keeps the first and last halves") {
  CHECK(compress_memory(Sequence{1, 2, 3, 4, 5, 6}, 4) == Sequence{1, 2, 5, 6});
  CHECK(compress_memory(Sequence{1, 2, 3}, 4) == Sequence{1, 2, 3});
  CHECK(compress_memory(Sequence{1, 2, 3, 4, 5, 6, 7}, 5) == Sequence{1, 2, 6, 7});
}

TEST_CASE("memory compression length and order property") {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Sequence h(uniform_index(rng, 30));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = static_cast<ItemId>(i);  // increasing, so order is checkable
    const std::size_t size = 2 + uniform_index(rng, 15);
    const auto out = compress_memory(h, size);
    CHECK(out.size() == (h.size() <= size ? h.size() : 2 * (size / 2)));
    CHECK(std::is_sorted(out.begin(), out.end()));
    CHECK(std::adjacent_find(out.begin(), out.end()) == out.end());
  }
}

TEST_CASE("preference profile lifecycle") {
  AgentState s(10, 5);
  CHECK_FALSE(s.preference());
  CHECK_FALSE(s.preference_due());
  s.history = {1, 2, 3, 4};
  CHECK_THROWS_AS(s.set_preference({"x", 4}), std::logic_error);
  s.history.push_back(5);
  CHECK(s.preference_due());
  s.set_preference({"likes books", 5});
  CHECK(s.preference()->summary == "likes books");
  CHECK_FALSE(s.preference_due());
  CHECK_THROWS_AS(s.set_preference({"other", 6}), std::logic_error);
  CHECK(s.preference()->summary == "likes books");
  CHECK_THROWS(AgentState(3, 5));
}

TEST_CASE("preference stabilization is cached") {
  const Catalog cat = shop();
  AgentState s;
  ScriptedBackend backend({"prefers tools"});
  s.history = {0, 1};
  CHECK_THROWS_AS(stabilize_preference(s, backend, cat, "shop"), std::logic_error);
  s.history = {0, 1, 2, 3, 4};
  CHECK(stabilize_preference(s, backend, cat, "shop").summary == "prefers tools");
  CHECK(backend.request_count() == 1);
  CHECK(stabilize_preference(s, backend, cat, "shop").summary == "prefers tools");
  CHECK(backend.request_count() == 1);
}

TEST_CASE("preference summary names the modal category") {
  const Catalog cat = shop();
  AgentState s;
  s.history = {1, 4, 7, 10, 0, 13};  // Games x5, Books x1
  CategoryEchoBackend backend;
  const auto& p = stabilize_preference(s, backend, cat, "A game store.");
  CHECK(p.summary.find("Games") != std::string::npos);
  CHECK(p.created_at_length == 6);
}

TEST_CASE("prompts carry the platform, memory, preference and numbered list") {
  const Catalog cat = shop();
  const auto pp = preference_prompt(cat, Sequence{0, 1}, "A shop.");
  CHECK(pp.back().content.find("Platform Description:\nA shop.") != std::string::npos);
  CHECK(pp.back().content.find("- Thing 1 [Games]") != std::string::npos);

  const auto sp = selection_prompt(cat, Sequence{2}, PreferenceProfile{"likes tools", 5}, list_of({5, 6}), 1, false);
  const std::string& t = sp.back().content;
  CHECK(t.find("Compressed Memory") != std::string::npos);
  CHECK(t.find("- Thing 2 [Tools]") != std::string::npos);
  CHECK(t.find("Preference:\nlikes tools") != std::string::npos);
  CHECK(t.find("1. Thing 5 [Tools]\n2. Thing 6 [Books]") != std::string::npos);
  const auto strict = selection_prompt(cat, Sequence{2}, std::nullopt, list_of({5, 6}), 1, true);
  CHECK(strict.back().content.size() > sp.back().content.size());
}

TEST_CASE("selection reply parsing") {
  CHECK(parse_selection_reply("3, 1", 5, 2) == std::vector<std::size_t>{2, 0});
  CHECK(parse_selection_reply("Items 2 and 2 then 4", 5, 2) == std::vector<std::size_t>{1, 3});
  CHECK(parse_selection_reply("1,2,3", 5, 2) == std::vector<std::size_t>{0, 1});
  CHECK_FALSE(parse_selection_reply("7", 5, 1));
  CHECK_FALSE(parse_selection_reply("0", 5, 1));
  CHECK_FALSE(parse_selection_reply("none", 5, 1));
  CHECK_FALSE(parse_selection_reply("1", 5, 2));
}

TEST_CASE("prompted selection: success, reprompt and fallback") {
  const Catalog cat = shop();
  const TopKList presented = list_of({10, 11, 12, 13});
  Rng rng = make_rng(1);

  SUBCASE("single candidate") {
    AgentState s;
    ScriptedBackend b({"1"});
    CHECK(select_items(s, list_of({7}), 1, b, cat, "shop", rng) == std::vector<ItemId>{7});
  }
  SUBCASE("direct answer") {
    AgentState s;
    ScriptedBackend b({"2, 4"});
    SelectionStats stats;
    CHECK(select_items(s, presented, 2, b, cat, "shop", rng, &stats) == std::vector<ItemId>{11, 13});
    CHECK(s.history == Sequence{11, 13});
    CHECK(stats.reprompts == 0);
  }
  SUBCASE("second answer used after a strict reprompt") {
    AgentState s;
    ScriptedBackend b({"item 9", "3"});
    SelectionStats stats;
    CHECK(select_items(s, presented, 1, b, cat, "shop", rng, &stats) == std::vector<ItemId>{12});
    CHECK(stats.reprompts == 1);
    CHECK(stats.fallbacks == 0);
    CHECK(b.prompts[1].find("could not be used") != std::string::npos);
  }
  SUBCASE("absent items fall back to a uniform pick from the list") {
    AgentState s;
    ScriptedBackend b({"99"});
    SelectionStats stats;
    const auto chosen = select_items(s, presented, 2, b, cat, "shop", rng, &stats);
    CHECK(stats.fallbacks == 1);
    CHECK(chosen.size() == 2);
    CHECK(chosen[0] != chosen[1]);
    for (ItemId id : chosen) CHECK(std::find(presented.items.begin(), presented.items.end(), id) != presented.items.end());
  }
  SUBCASE("preference is established once the threshold is reached") {
    AgentState s(10, 2);
    s.history = {0, 3};
    ScriptedBackend b({"likes books", "1"});
    select_items(s, presented, 1, b, cat, "shop", rng);
    REQUIRE(s.preference());
    CHECK(s.preference()->summary == "likes books");
    CHECK(b.prompts[1].find("Preference:\nlikes books") != std::string::npos);
    select_items(s, presented, 1, b, cat, "shop", rng);
    CHECK(s.preference()->summary == "likes books");
    CHECK(b.request_count() == 3);
  }
}

TEST_CASE("scripted persona picks its category when available") {
  const Catalog cat = shop();
  Persona p;
  p.category_weights = {{"Tools", 1.0}};
  p.default_weight = 0.0;
  Rng rng = make_rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ItemId> ids(12);
    for (int i = 0; i < 12; ++i) ids[i] = (trial + i) % 30;
    const auto chosen = scripted_agent_select(p, cat, list_of(ids), 3, rng);
    for (ItemId id : chosen) CHECK(cat.category(id) == "Tools");
  }
  // Nothing of the favoured category: still a valid pick.
  const auto fallback = scripted_agent_select(p, cat, list_of({0, 1}), 1, rng);
  CHECK((fallback[0] == 0 || fallback[0] == 1));
}

TEST_CASE("scripted agent with no position bias is uniform over positions") {
  const Catalog cat(20);
  Persona p;
  Rng rng = make_rng(7);
  std::vector<ItemId> ids(20);
  for (int i = 0; i < 20; ++i) ids[i] = i;
  std::vector<double> counts(20, 0.0);
  for (int t = 0; t < 10000; ++t) counts[scripted_agent_select(p, cat, list_of(ids), 1, rng)[0]] += 1;
  CHECK(pearson_uniform(counts) < chi_square_critical_01(19));
}

TEST_CASE("strong position bias concentrates on the top slot") {
  const Catalog cat(20);
  Persona p;
  p.position_bias = 5.0;
  Rng rng = make_rng(8);
  std::vector<ItemId> ids(20);
  for (int i = 0; i < 20; ++i) ids[i] = 19 - i;
  int top = 0;
  for (int t = 0; t < 1000; ++t) top += scripted_agent_select(p, cat, list_of(ids), 1, rng)[0] == 19;
  CHECK(top > 950);
}

TEST_CASE("without position bias selection probabilities follow items, not slots") {
  // Item 0 has weight 3, the rest 1: its pick rate must be 3/7 wherever it is shown.
  std::vector<CatalogItem> items;
  for (int i = 0; i < 5; ++i) items.push_back({i, "", i == 0 ? "A" : "B"});
  const Catalog cat(items);
  Persona p;
  p.category_weights = {{"A", 3.0}, {"B", 1.0}};
  Rng rng = make_rng(9);
  for (const auto& order : {std::vector<ItemId>{0, 1, 2, 3, 4}, std::vector<ItemId>{4, 3, 2, 1, 0}}) {
    int hits = 0;
    const int n = 20000;
    for (int t = 0; t < n; ++t) hits += scripted_agent_select(p, cat, list_of(order), 1, rng)[0] == 0;
    const double rate = static_cast<double>(hits) / n, expect = 3.0 / 7.0;
    CHECK(std::abs(rate - expect) < 4.0 * std::sqrt(expect * (1 - expect) / n));
  }
}

TEST_CASE("samplers always return distinct members of the presented list") {
  const Catalog cat = shop();
  Rng rng = make_rng(10);
  RandomChoiceSampler random;
  ScriptedSampler scripted(sample_persona(cat, 4.0, 1.0, 1.0, rng), cat);
  ScriptedBackend bad({"garbage"});
  LlmSampler llm(bad, cat, {});
  for (Sampler* s : std::vector<Sampler*>{&random, &scripted, &llm}) {
    for (int t = 0; t < 20; ++t) {
      std::vector<ItemId> ids(8);
      for (int i = 0; i < 8; ++i) ids[i] = (t * 3 + i) % 30;
      const Sequence history{ids[0], ids[1]};
      const auto chosen = s->select(history, list_of(ids), 3, rng);
      CHECK(chosen.size() == 3);
      std::set<ItemId> uniq(chosen.begin(), chosen.end());
      CHECK(uniq.size() == 3);
      for (ItemId id : chosen) CHECK(std::find(ids.begin(), ids.end(), id) != ids.end());
    }
  }
  CHECK(llm.fallback_events() == 20);
}

TEST_CASE("sampled personas favour one catalog category and skip consumed items") {
  const Catalog cat = shop();
  Rng rng = make_rng(12);
  const Persona p = sample_persona(cat, 5.0, 0.5, 2.0, rng, true);
  CHECK(p.category_weights.size() == 1);
  CHECK(p.category_weights.begin()->second == 5.0);
  CHECK(p.default_weight == 0.5);
  CHECK(p.position_bias == 2.0);
  const Sequence history{3, 4};
  for (int t = 0; t < 50; ++t) {
    const auto chosen = scripted_agent_select(p, cat, list_of({3, 4, 5}), 1, rng, history);
    CHECK(chosen[0] == 5);
  }
}
