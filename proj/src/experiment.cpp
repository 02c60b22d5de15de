#include "recx/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "recx/digest.hpp"

namespace recx {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(ThreatMode m) {
  switch (m) {
    case ThreatMode::free: return "free";
    case ThreatMode::limited: return "limited";
    case ThreatMode::available: return "available";
  }
  return "?";
}

std::string to_string(GeneratorKind g) {
  switch (g) {
    case GeneratorKind::random: return "random";
    case GeneratorKind::autoregressive_random: return "autoregressive-random";
    case GeneratorKind::agent: return "agent";
  }
  return "?";
}

namespace {

// ----- config binding -----
// One description of the config layout drives both reading and writing.

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

class Reader {
 public:
  Reader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  void field(const char* key, bool& v) {
    if (const json* j = take(key)) {
      if (!j->is_boolean()) throw ConfigError(join(path_, key) + ": expected true or false");
      v = j->get<bool>();
    }
  }
  void field(const char* key, std::size_t& v) {
    if (const json* j = take(key)) {
      if (!j->is_number_integer() || (!j->is_number_unsigned() && j->get<std::int64_t>() < 0))
        throw ConfigError(join(path_, key) + ": expected a non-negative integer");
      v = j->get<std::size_t>();
    }
  }
  void field(const char* key, double& v) {
    if (const json* j = take(key)) {
      if (!j->is_number()) throw ConfigError(join(path_, key) + ": expected a number");
      v = j->get<double>();
    }
  }
  void field(const char* key, std::string& v) {
    if (const json* j = take(key)) {
      if (!j->is_string()) throw ConfigError(join(path_, key) + ": expected a string");
      v = j->get<std::string>();
    }
  }
  template <typename E>
  void choice(const char* key, E& v, const std::vector<std::pair<std::string, E>>& options) {
    std::string s;
    field(key, s);
    if (s.empty() && !doc_.contains(key)) return;
    std::string allowed;
    for (const auto& [name, value] : options) {
      if (name == s) {
        v = value;
        return;
      }
      allowed += (allowed.empty() ? "" : ", ") + name;
    }
    throw ConfigError(join(path_, key) + ": unknown value \"" + s + "\" (expected one of " + allowed + ")");
  }
  void object(const char* key, const std::function<void(Reader&)>& body) {
    if (const json* j = take(key)) {
      Reader sub(*j, join(path_, key));
      body(sub);
      sub.finish();
    }
  }
  void finish() const {
    for (const auto& [key, _] : doc_.items())
      if (!seen_.count(key)) throw ConfigError(join(path_, key) + ": unknown field");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <typename T>
  void field(const char* key, T& v) {
    doc[key] = v;
  }
  template <typename E>
  void choice(const char* key, E& v, const std::vector<std::pair<std::string, E>>& options) {
    for (const auto& [name, value] : options)
      if (value == v) doc[key] = name;
  }
  void object(const char* key, const std::function<void(Writer&)>& body) {
    Writer sub;
    body(sub);
    doc[key] = std::move(sub.doc);
  }

  ordered_json doc = ordered_json::object();
};

template <typename B>
void bind(B& b, ExperimentConfig& c) {
  b.field("seed", c.seed);
  b.object("dataset", [&](B& d) {
    d.choice("source", c.dataset.source, std::vector<std::pair<std::string, std::string>>{{"synthetic", "synthetic"}, {"file", "file"}});
    d.field("sequences", c.dataset.sequences);
    d.field("catalog", c.dataset.catalog);
    d.field("item_count", c.dataset.item_count);
    d.object("synthetic", [&](B& s) {
      auto& p = c.dataset.synthetic;
      s.field("item_count", p.item_count);
      s.field("user_count", p.user_count);
      s.field("mean_length", p.mean_length);
      s.field("latent_dim", p.latent_dim);
      s.field("seed", p.seed);
      s.field("category_count", p.category_count);
      s.field("sharpness", p.sharpness);
      s.field("recency", p.recency);
      s.field("popularity_spread", p.popularity_spread);
    });
  });
  b.object("target", [&](B& t) {
    t.choice("arch", c.target.arch, std::vector<std::pair<std::string, std::string>>{{"score", "score"}, {"markov", "markov"}});
    t.field("dim", c.target.dim);
    t.field("gamma", c.target.gamma);
    t.field("alpha", c.target.alpha);
    t.field("checkpoint", c.target.checkpoint);
    t.object("pretrain", [&](B& p) {
      p.field("epochs", c.target.pretrain.epochs);
      p.field("learning_rate", c.target.pretrain.learning_rate);
      p.field("negatives_per_positive", c.target.pretrain.negatives_per_positive);
      p.field("batch_size", c.target.pretrain.batch_size);
      p.field("weight_decay", c.target.pretrain.weight_decay);
    });
  });
  b.object("threat", [&](B& t) {
    t.choice("mode", c.threat.mode,
             std::vector<std::pair<std::string, ThreatMode>>{
                 {"free", ThreatMode::free}, {"limited", ThreatMode::limited}, {"available", ThreatMode::available}});
    t.field("secret_users", c.threat.secret_users);
    t.field("prefix_cap", c.threat.prefix_cap);
  });
  b.object("generator", [&](B& g) {
    g.choice("kind", c.generator.kind,
             std::vector<std::pair<std::string, GeneratorKind>>{{"random", GeneratorKind::random},
                                                                {"autoregressive-random", GeneratorKind::autoregressive_random},
                                                                {"agent", GeneratorKind::agent}});
    g.field("exposure_mix", c.generator.exposure_mix);
    g.field("coverage_fraction", c.generator.coverage_fraction);
    g.field("shuffle", c.generator.shuffle);
    g.field("num_sequences", c.generator.num_sequences);
    g.field("target_length", c.generator.target_length);
    g.field("items_per_query", c.generator.items_per_query);
  });
  b.field("k", c.k);
  b.object("surrogate", [&](B& s) {
    s.field("dim", c.surrogate.dim);
    s.field("gamma", c.surrogate.gamma);
  });
  b.object("distill", [&](B& d) {
    d.field("margin_order", c.distill.margin_order);
    d.field("margin_negative", c.distill.margin_negative);
    d.field("negatives_per_pair", c.distill.negatives_per_pair);
    d.field("epochs", c.distill.epochs);
    d.field("learning_rate", c.distill.learning_rate);
    d.field("weight_decay", c.distill.weight_decay);
    d.field("warmup_steps", c.distill.warmup_steps);
    d.field("batch_size", c.distill.batch_size);
    d.field("validation_fraction", c.distill.validation_fraction);
    d.field("keep_best", c.distill.keep_best);
  });
  b.object("defense", [&](B& d) {
    d.field("enabled", c.defense.enabled);
    d.field("replace_fraction", c.defense.replace_fraction);
  });
  b.object("agent", [&](B& a) {
    a.choice("backend", c.agent.backend,
             std::vector<std::pair<std::string, std::string>>{{"scripted", "scripted"}, {"chat", "chat"}, {"replay", "replay"}});
    a.field("focus_weight", c.agent.focus_weight);
    a.field("background_weight", c.agent.background_weight);
    a.field("position_bias", c.agent.position_bias);
    a.field("avoid_history", c.agent.avoid_history);
    a.field("mc_size", c.agent.llm.mc_size);
    a.field("ps_threshold", c.agent.llm.ps_threshold);
    a.field("platform_description", c.agent.llm.platform_description);
    a.object("chat", [&](B& h) {
      h.field("endpoint", c.agent.chat.endpoint);
      h.field("model", c.agent.chat.model);
      h.field("api_key_env", c.agent.chat.api_key_env);
      h.field("timeout_seconds", c.agent.chat.timeout_seconds);
      h.field("max_retries", c.agent.chat.max_retries);
      h.field("temperature", c.agent.chat.temperature);
      h.field("initial_backoff_seconds", c.agent.chat.initial_backoff_seconds);
      h.field("max_in_flight", c.agent.chat.max_in_flight);
      std::string transcript = c.agent.chat.transcript_path.string();
      h.field("transcript", transcript);
      c.agent.chat.transcript_path = transcript;
    });
  });
  b.object("eval", [&](B& e) {
    e.field("cutoff", c.eval.cutoff);
    e.field("num_negatives", c.eval.num_negatives);
    e.field("ngram_epsilon", c.eval.ngram_epsilon);
    e.field("max_users", c.eval.max_users);
  });
  b.object("runtime", [&](B& r) {
    r.field("output_dir", c.runtime.output_dir);
    r.field("workers", c.runtime.workers);
  });
}

void require(bool ok, const std::string& path, const std::string& message) {
  if (!ok) throw ConfigError(path + ": " + message);
}

void check(const ExperimentConfig& c) {
  if (c.dataset.source == "file") {
    require(!c.dataset.sequences.empty(), "dataset.sequences", "required when dataset.source is \"file\"");
    require(!c.dataset.catalog.empty() || c.dataset.item_count >= 2, "dataset.catalog",
            "give a catalog file or dataset.item_count >= 2");
  } else {
    require(c.dataset.synthetic.item_count >= 2, "dataset.synthetic.item_count", "must be >= 2");
    require(c.dataset.synthetic.user_count >= 1, "dataset.synthetic.user_count", "must be >= 1");
    require(c.dataset.synthetic.mean_length >= 3.0, "dataset.synthetic.mean_length", "must be >= 3");
    require(c.dataset.synthetic.latent_dim >= 1, "dataset.synthetic.latent_dim", "must be >= 1");
  }
  require(c.target.dim >= 1, "target.dim", "must be >= 1");
  require(c.target.gamma > 0.0 && c.target.gamma <= 1.0, "target.gamma", "must be in (0, 1]");
  require(c.target.alpha >= 0.0, "target.alpha", "must be >= 0");
  require(c.target.pretrain.batch_size >= 1, "target.pretrain.batch_size", "must be >= 1");
  require(c.target.pretrain.negatives_per_positive >= 1, "target.pretrain.negatives_per_positive", "must be >= 1");
  require(c.threat.prefix_cap >= 1, "threat.prefix_cap", "must be >= 1");
  require(c.generator.coverage_fraction > 0.0 && c.generator.coverage_fraction <= 1.0,
          "generator.coverage_fraction", "must be in (0, 1]");
  require(c.generator.num_sequences >= 1, "generator.num_sequences", "must be >= 1");
  require(c.generator.target_length >= 2, "generator.target_length", "must be >= 2");
  require(c.generator.items_per_query >= 1, "generator.items_per_query", "must be >= 1");
  require(c.generator.items_per_query <= c.k, "generator.items_per_query", "must not exceed k");
  require(c.k >= 2, "k", "must be >= 2");
  require(c.surrogate.dim >= 1, "surrogate.dim", "must be >= 1");
  require(c.surrogate.gamma > 0.0 && c.surrogate.gamma <= 1.0, "surrogate.gamma", "must be in (0, 1]");
  require(c.distill.margin_order >= 0.0, "distill.margin_order", "must be >= 0");
  require(c.distill.margin_negative >= 0.0, "distill.margin_negative", "must be >= 0");
  require(c.distill.learning_rate > 0.0, "distill.learning_rate", "must be > 0");
  require(c.distill.batch_size >= 1, "distill.batch_size", "must be >= 1");
  require(c.distill.validation_fraction >= 0.0 && c.distill.validation_fraction < 1.0,
          "distill.validation_fraction", "must be in [0, 1)");
  require(c.defense.replace_fraction >= 0.0 && c.defense.replace_fraction < 1.0, "defense.replace_fraction",
          "must be in [0, 1)");
  require(c.agent.llm.mc_size >= 2 && c.agent.llm.mc_size % 2 == 0, "agent.mc_size", "must be even and >= 2");
  require(c.agent.llm.ps_threshold >= 1, "agent.ps_threshold", "must be >= 1");
  require(c.agent.focus_weight >= 0.0, "agent.focus_weight", "must be >= 0");
  require(c.agent.background_weight >= 0.0, "agent.background_weight", "must be >= 0");
  require(c.agent.chat.max_in_flight >= 1, "agent.chat.max_in_flight", "must be >= 1");
  require(c.eval.cutoff >= 1, "eval.cutoff", "must be >= 1");
  require(c.eval.ngram_epsilon > 0.0, "eval.ngram_epsilon", "must be > 0");
  require(!c.runtime.output_dir.empty(), "runtime.output_dir", "must not be empty");
  require(c.runtime.workers >= 1, "runtime.workers", "must be >= 1");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum SeedTag : std::uint64_t { tag_target = 1, tag_generation, tag_mix, tag_surrogate, tag_distill, tag_defense, tag_eval };

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write");
  out << text;
}

std::filesystem::path out_dir(const ExperimentConfig& c) {
  std::filesystem::path dir = c.runtime.output_dir;
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path target_path(const ExperimentConfig& c) {
  return c.target.checkpoint.empty() ? std::filesystem::path(c.runtime.output_dir) / "target.bin"
                                     : std::filesystem::path(c.target.checkpoint);
}

ordered_json report_echo(const ExperimentConfig& c) {
  ordered_json j = config_to_json(c);
  j.erase("runtime");
  return j;
}

// Generation-relevant part of the config; progress files from other settings are refused.
std::string generation_fingerprint(const ExperimentConfig& c) {
  ordered_json j = config_to_json(c);
  for (const char* key : {"runtime", "distill", "surrogate", "eval"}) j.erase(key);
  return sha256_hex(j.dump());
}

class ProgressFile {
 public:
  ProgressFile(std::filesystem::path path, const std::string& fingerprint) : path_(std::move(path)) {
    const json header = {{"format", "recx.progress"}, {"version", 1}, {"fingerprint", fingerprint}};
    if (std::filesystem::exists(path_)) {
      std::ifstream in(path_, std::ios::binary);
      std::string line;
      std::getline(in, line);
      const json got = json::parse(line, nullptr, false);
      if (got.is_discarded() || got != header)
        throw ConfigError("runtime.output_dir: " + path_.string() +
                          " was written by a different generation config; remove it to start over");
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
          UserTrace t = user_trace_from_line(line);
          completed_[t.user] = std::move(t);
        } catch (const std::exception&) {
          break;  // torn final line from an interrupted run
        }
      }
      in.close();
      rewrite(header);
    } else {
      out_.open(path_, std::ios::binary);
      if (!out_) throw DataError(path_.string() + ": cannot write");
      out_ << header.dump() << '\n' << std::flush;
    }
  }

  const std::map<std::size_t, UserTrace>& completed() const { return completed_; }
  void append(const UserTrace& t) { out_ << user_trace_to_line(t) << '\n' << std::flush; }

 private:
  void rewrite(const json& header) {
    out_.open(path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError(path_.string() + ": cannot write");
    out_ << header.dump() << '\n';
    for (const auto& [_, t] : completed_) out_ << user_trace_to_line(t) << '\n';
    out_ << std::flush;
  }

  std::filesystem::path path_;
  std::ofstream out_;
  std::map<std::size_t, UserTrace> completed_;
};

std::unique_ptr<ChatBackend> make_backend(const ExperimentConfig& c) {
  if (c.agent.backend == "chat") {
    ChatBackendConfig chat = c.agent.chat;
    if (chat.transcript_path.empty())
      chat.transcript_path = std::filesystem::path(c.runtime.output_dir) / "transcript.jsonl";
    return std::make_unique<HttpChatBackend>(chat);
  }
  if (c.agent.backend == "replay") {
    if (c.agent.chat.transcript_path.empty())
      throw ConfigError("agent.chat.transcript: required for the replay backend");
    return std::make_unique<ReplayChatBackend>(c.agent.chat.transcript_path, c.agent.chat.model,
                                               c.agent.chat.temperature);
  }
  return nullptr;
}

struct Generated {
  std::vector<SequenceInput> inputs;
  SequenceDataset corpus;
  QueryLog log;
  std::size_t random_mix = 0;
  std::size_t failed_users = 0;
  std::size_t fallback_events = 0;
  std::vector<std::string> failures;
};

Generated generate(const ExperimentConfig& c, const PreparedData& data, const Recommender& target,
                   const AttackOptions& options) {
  Generated g;
  g.corpus.item_count = data.catalog.size();
  const std::size_t n = data.catalog.size();
  const auto& gen = c.generator;

  if (c.threat.mode == ThreatMode::available) {
    for (const auto& in : secret_prefixes(data.split.train, data.split.train.size(), c.threat.prefix_cap)) {
      g.corpus.sequences.push_back(in.sequence);
      g.inputs.push_back(in);
    }
    return g;
  }

  if (gen.kind == GeneratorKind::random) {
    Rng rng = make_rng(derive_seed(c.seed, tag_generation));
    g.corpus = generate_random_sequences(n, gen.num_sequences, gen.target_length, rng);
    for (const auto& s : g.corpus.sequences) g.inputs.push_back({s, Provenance::random});
  } else {
    std::size_t random_count = 0;
    if (gen.exposure_mix)
      random_count = std::min(gen.num_sequences,
                              plan_exposure_mix(n, gen.coverage_fraction, gen.target_length).random_sequences);
    const std::size_t agent_count = gen.num_sequences - random_count;

    if (agent_count > 0) {
      GenerationConfig gc;
      gc.num_sequences = agent_count;
      gc.target_length = gen.target_length;
      gc.k = c.k;
      gc.items_per_query = gen.items_per_query;
      gc.shuffle_before_present = gen.shuffle;
      gc.seed = derive_seed(c.seed, tag_generation);
      gc.workers = c.runtime.workers;

      std::unique_ptr<ChatBackend> backend;
      SamplerFactory factory;
      const Catalog& catalog = data.catalog;
      if (gen.kind == GeneratorKind::autoregressive_random) {
        factory = [](std::size_t, Rng&) { return std::make_unique<RandomChoiceSampler>(); };
      } else if (c.agent.backend == "scripted") {
        const AgentSpec a = c.agent;
        factory = [a, &catalog](std::size_t, Rng& rng) {
          Persona p = sample_persona(catalog, a.focus_weight, a.background_weight, a.position_bias, rng, a.avoid_history);
          return std::make_unique<ScriptedSampler>(std::move(p), catalog);
        };
      } else {
        backend = make_backend(c);
        ChatBackend* b = backend.get();
        const LlmAgentConfig llm = c.agent.llm;
        factory = [b, &catalog, llm](std::size_t, Rng&) { return std::make_unique<LlmSampler>(*b, catalog, llm); };
      }

      std::unique_ptr<ProgressFile> progress;
      GenerationHooks hooks;
      if (options.write_artifacts) {
        progress = std::make_unique<ProgressFile>(out_dir(c) / "progress.jsonl", generation_fingerprint(c));
        hooks.completed = &progress->completed();
        hooks.on_user_done = [&progress](const UserTrace& t) { progress->append(t); };
      }
      GenerationResult r = generate_autoregressive(target, n, factory, gc, c.defense, hooks);
      g.failed_users = r.failed_users;
      g.fallback_events = r.fallback_events;
      g.failures = std::move(r.failures);
      if (g.failed_users > 0) {
        std::string msg = std::to_string(g.failed_users) + " of " + std::to_string(agent_count) +
                          " generated users failed";
        if (options.write_artifacts) msg += "; finished users are kept in progress.jsonl and a rerun resumes";
        if (!g.failures.empty()) msg += "; first: " + g.failures.front();
        throw BackendError(msg);
      }
      g.log = std::move(r.log);
      const Provenance prov = gen.kind == GeneratorKind::agent ? Provenance::agent : Provenance::random;
      for (auto& s : r.sequences.sequences) {
        g.inputs.push_back({s, prov});
        g.corpus.sequences.push_back(std::move(s));
      }
    }
    if (random_count > 0) {
      Rng rng = make_rng(derive_seed(c.seed, tag_mix));
      SequenceDataset extra = generate_random_sequences(n, random_count, gen.target_length, rng);
      for (auto& s : extra.sequences) {
        g.inputs.push_back({s, Provenance::random});
        g.corpus.sequences.push_back(std::move(s));
      }
      g.random_mix = random_count;
    }
  }

  if (c.threat.mode == ThreatMode::limited)
    for (const auto& in : secret_prefixes(data.split.train, c.threat.secret_users, c.threat.prefix_cap)) {
      g.corpus.sequences.push_back(in.sequence);
      g.inputs.push_back(in);
    }
  return g;
}

std::vector<std::size_t> eval_users(const ExperimentConfig& c, const SplitDataset& split) {
  const std::size_t n = c.eval.max_users ? std::min(c.eval.max_users, split.user_count()) : split.user_count();
  std::vector<std::size_t> users(n);
  for (std::size_t i = 0; i < n; ++i) users[i] = i;
  return users;
}

SplitDataset subset(const SplitDataset& split, const std::vector<std::size_t>& users) {
  if (users.size() == split.user_count()) return split;
  SplitDataset s;
  s.train.item_count = split.train.item_count;
  s.excluded_users = split.excluded_users;
  for (std::size_t u : users) {
    s.train.sequences.push_back(split.train.sequences[u]);
    s.validation_items.push_back(split.validation_items[u]);
    s.test_items.push_back(split.test_items[u]);
    s.user_index.push_back(split.user_index[u]);
  }
  return s;
}

std::pair<double, double> agreement(const Recommender& a, const Recommender& b, const SplitDataset& split) {
  double a1 = 0.0, a10 = 0.0;
  const std::size_t k = std::min<std::size_t>(10, a.item_count());
  for (std::size_t u = 0; u < split.user_count(); ++u) {
    const Sequence h = split.test_history(u);
    const TopKList la = query_topk(a, h, k);
    const TopKList lb = query_topk(b, h, k);
    a1 += agreement_at_k(la, lb, 1);
    a10 += agreement_at_k(la, lb, k);
  }
  const double users = static_cast<double>(std::max<std::size_t>(1, split.user_count()));
  return {a1 / users, a10 / users};
}

void write_table(const std::filesystem::path& path, const std::string& header,
                 const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write");
  out << header << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v;
  return s.str();
}

std::unique_ptr<Recommender> obtain_target(const ExperimentConfig& c, const PreparedData& data,
                                           const CommandOptions& options, RunManifest& manifest) {
  const std::filesystem::path path = target_path(c);
  if (std::filesystem::exists(path)) {
    auto model = load_recommender(path);
    if (model->item_count() != data.catalog.size())
      throw DataError(path.string() + ": checkpoint has " + std::to_string(model->item_count()) +
                      " items but the dataset has " + std::to_string(data.catalog.size()));
    manifest.add("target", path);
    return model;
  }
  if (!options.train_target_if_missing)
    throw ConfigError("target.checkpoint: " + path.string() + " does not exist (run train-target or pass --train-target)");
  auto model = train_target(c, data);
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  if (auto* s = dynamic_cast<ScoreModel*>(model.get())) save_model(*s, path);
  else save_model(dynamic_cast<MarkovModel&>(*model), path);
  manifest.add("target", path);
  return model;
}

template <typename F>
RunManifest timed(const std::string& command, const ExperimentConfig& c, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  RunManifest m;
  m.command = command;
  m.config = config_to_json(c);
  m.seed = c.seed;
  body(m);
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace

nlohmann::ordered_json config_to_json(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  Writer w;
  bind(w, copy);
  return w.doc;
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig c;
  Reader r(doc, "");
  bind(r, c);
  r.finish();
  check(c);
  return resolve_seeds(c);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set " + assignment + ": empty path component");
    if (!node->is_object()) throw ConfigError(path.substr(0, start ? start - 1 : 0) + ": not an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    json& child = (*node)[key];
    if (child.is_null()) child = json::object();
    node = &child;
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

ExperimentConfig resolve_seeds(ExperimentConfig c) {
  c.target.pretrain.seed = derive_seed(c.seed, tag_target);
  c.distill.seed = derive_seed(c.seed, tag_distill);
  c.defense.seed = derive_seed(c.seed, tag_defense);
  return c;
}

PreparedData prepare_data(const ExperimentConfig& c) {
  PreparedData d;
  if (c.dataset.source == "file") {
    d.catalog = c.dataset.catalog.empty() ? Catalog(c.dataset.item_count) : load_catalog(c.dataset.catalog);
    d.sequences = load_sequences(c.dataset.sequences, d.catalog);
  } else {
    std::tie(d.catalog, d.sequences) = synthesize_secret_data(c.dataset.synthetic);
  }
  d.split = split_leave_two(d.sequences);
  if (d.split.user_count() == 0) throw DataError("dataset: no user has three or more interactions");
  return d;
}

std::unique_ptr<Recommender> train_target(const ExperimentConfig& c, const PreparedData& data) {
  if (c.target.arch == "markov") return std::make_unique<MarkovModel>(train_markov_target(data.split.train, c.target.alpha));
  ScoreModel init = init_score_model(data.catalog.size(), c.target.dim, c.target.gamma, derive_seed(c.seed, tag_target));
  return std::make_unique<ScoreModel>(pretrain_target(std::move(init), data.split.train, c.target.pretrain).model);
}

void RunManifest::add(const std::string& name, const std::filesystem::path& path) {
  artifacts.push_back({name, path, sha256_file(path)});
}

nlohmann::ordered_json RunManifest::to_json() const {
  ordered_json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["command"] = command;
  j["seed"] = seed;
  j["wall_clock_seconds"] = wall_clock_seconds;
  j["config"] = config;
  ordered_json list = ordered_json::array();
  for (const auto& a : artifacts) list.push_back({{"name", a.name}, {"path", a.path.string()}, {"sha256", a.sha256}});
  j["artifacts"] = std::move(list);
  return j;
}

void RunManifest::save(const std::filesystem::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

AttackOutcome run_attack(const ExperimentConfig& c, const PreparedData& data, const Recommender& target,
                         const AttackOptions& options) {
  if (target.item_count() != data.catalog.size()) throw DataError("target and dataset catalog sizes differ");
  if (c.k > data.catalog.size())
    throw ConfigError("k: " + std::to_string(c.k) + " exceeds the catalog size " + std::to_string(data.catalog.size()));
  const std::size_t n = data.catalog.size();

  Generated g = generate(c, data, target, options);
  if (g.inputs.empty()) throw DataError("no surrogate sequences were produced");

  SurrogateDataset ds = build_surrogate_dataset(g.inputs, target, c.k, c.defense);
  if (c.threat.mode == ThreatMode::free)
    for (const auto& p : ds.pairs)
      if (p.provenance == Provenance::secret) throw std::logic_error("secret data in a data-free surrogate dataset");
  ScoreModel init = init_score_model(n, c.surrogate.dim, c.surrogate.gamma, derive_seed(c.seed, tag_surrogate));
  TrainedSurrogate trained = train_surrogate(ds, std::move(init), c.distill);
  AttackOutcome out{EvalReport{}, std::move(ds), std::move(trained), std::move(g.log), g.random_mix};

  const SplitDataset eval_split = subset(data.split, eval_users(c, data.split));
  EvalReport& rep = out.report;
  std::tie(rep.agreement_at_1, rep.agreement_at_10) = agreement(target, out.surrogate.model, eval_split);
  if (n > c.eval.num_negatives + 1) {
    RecQualityConfig rq;
    rq.cutoff = c.eval.cutoff;
    rq.num_negatives = c.eval.num_negatives;
    rq.seed = derive_seed(c.seed, tag_eval);
    rq.list_length = c.k;
    const RecQuality sq = rec_quality(out.surrogate.model, eval_split, rq);
    rq.defense = c.defense;
    const RecQuality tq = rec_quality(target, eval_split, rq);
    rep.ndcg_at_10 = sq.ndcg;
    rep.recall_at_10 = sq.recall;
    rep.target_ndcg_at_10 = tq.ndcg;
    rep.target_recall_at_10 = tq.recall;
  }
  rep.ngram_div_1 = ngram_div(data.split.train, g.corpus, 1, c.eval.ngram_epsilon);
  rep.ngram_div_2 = ngram_div(data.split.train, g.corpus, 2, c.eval.ngram_epsilon);

  std::size_t queries = out.log.records.size() + out.surrogate_data.size();
  rep.counts = {{"secret_users", static_cast<double>(data.split.user_count())},
                {"excluded_users", static_cast<double>(data.split.excluded_users)},
                {"eval_users", static_cast<double>(eval_split.user_count())},
                {"surrogate_pairs", static_cast<double>(out.surrogate_data.size())},
                {"random_mix_sequences", static_cast<double>(g.random_mix)},
                {"failed_users", static_cast<double>(g.failed_users)},
                {"fallback_events", static_cast<double>(g.fallback_events)},
                {"distinct_items", static_cast<double>(distinct_items(g.corpus))},
                {"target_queries", static_cast<double>(queries)},
                {"best_epoch", static_cast<double>(out.surrogate.best_epoch)}};
  rep.config_echo = report_echo(c).dump();

  if (options.write_artifacts) {
    const auto dir = out_dir(c);
    RunManifest* m = options.manifest;
    auto keep = [&](const std::string& name, const std::filesystem::path& p) {
      if (m) m->add(name, p);
    };
    save_query_log(out.log, dir / "query_log.jsonl");
    keep("query_log", dir / "query_log.jsonl");
    save_surrogate_dataset(out.surrogate_data, dir / "surrogate_data.jsonl");
    keep("surrogate_data", dir / "surrogate_data.jsonl");
    save_model(out.surrogate.model, dir / "surrogate.bin");
    keep("surrogate", dir / "surrogate.bin");
    save_training_trace(out.surrogate, dir / "training_trace.csv");
    keep("training_trace", dir / "training_trace.csv");
    if (!out.log.records.empty()) {
      save_unseen_curve(unseen_item_curve(out.log, n), dir / "unseen_curve.csv");
      keep("unseen_curve", dir / "unseen_curve.csv");
      save_position_histogram(position_histogram(out.log, PositionView::display_position),
                              position_histogram(out.log, PositionView::original_rank), dir / "position_histogram.csv");
      keep("position_histogram", dir / "position_histogram.csv");
    }
    write_text(dir / "report.json", rep.to_json());
    keep("report", dir / "report.json");
  }
  return out;
}

RunManifest cmd_prepare(const ExperimentConfig& c) {
  return timed("prepare", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    const auto dir = out_dir(c) / "data";
    std::filesystem::create_directories(dir);
    save_catalog(d.catalog, dir / "catalog.tsv");
    m.add("catalog", dir / "catalog.tsv");
    save_sequences(d.sequences, dir / "sequences.txt");
    m.add("sequences", dir / "sequences.txt");
    save_split(d.split, dir / "split");
    for (const char* f : {"train.txt", "heldout.tsv", "excluded.txt"}) m.add(std::string("split/") + f, dir / "split" / f);
    m.save(out_dir(c) / "manifest.prepare.json");
  });
}

RunManifest cmd_train_target(const ExperimentConfig& c) {
  return timed("train-target", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    auto model = train_target(c, d);
    const auto path = target_path(c);
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    if (auto* s = dynamic_cast<ScoreModel*>(model.get())) save_model(*s, path);
    else save_model(dynamic_cast<MarkovModel&>(*model), path);
    m.add("target", path);
    std::cout << "target: " << path.string() << "\n";
    m.save(out_dir(c) / "manifest.train-target.json");
  });
}

RunManifest cmd_attack(const ExperimentConfig& c, const CommandOptions& options) {
  return timed("attack", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    auto target = obtain_target(c, d, options, m);
    AttackOptions ao;
    ao.write_artifacts = true;
    ao.manifest = &m;
    const AttackOutcome o = run_attack(c, d, *target, ao);
    std::cout << "agreement@1 " << num(o.report.agreement_at_1) << "  agreement@10 " << num(o.report.agreement_at_10)
              << "  ndcg@10 " << num(o.report.ndcg_at_10) << "  recall@10 " << num(o.report.recall_at_10) << "\n";
    m.save(out_dir(c) / "manifest.json");
  });
}

RunManifest cmd_sweep_k(const ExperimentConfig& c, std::vector<std::size_t> k_values, const CommandOptions& options) {
  if (k_values.empty()) throw ConfigError("k_values: empty");
  if (!std::is_sorted(k_values.begin(), k_values.end())) throw ConfigError("k_values: must be sorted");
  return timed("sweep-k", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    auto target = obtain_target(c, d, options, m);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t k : k_values) {
      ExperimentConfig ck = c;
      ck.k = k;
      ck.generator.items_per_query = std::min(ck.generator.items_per_query, k);
      ck.runtime.output_dir = (std::filesystem::path(c.runtime.output_dir) / ("k" + std::to_string(k))).string();
      AttackOptions ao;
      ao.write_artifacts = true;
      ao.manifest = &m;
      const EvalReport r = run_attack(ck, d, *target, ao).report;
      rows.push_back({std::to_string(k), num(r.agreement_at_1), num(r.agreement_at_10), num(r.ndcg_at_10),
                      num(r.recall_at_10)});
      std::cout << "k=" << k << "  agreement@10 " << num(r.agreement_at_10) << "\n";
    }
    const auto table = out_dir(c) / "sweep_k.csv";
    write_table(table, "k,agreement@1,agreement@10,ndcg@10,recall@10", rows);
    m.add("sweep_k", table);
    m.save(out_dir(c) / "manifest.sweep-k.json");
  });
}

RunManifest cmd_defense_compare(const ExperimentConfig& c, const std::vector<double>& p_values,
                                const CommandOptions& options) {
  for (double p : p_values)
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("p_values: each p must be in [0, 1)");
  return timed("defense-compare", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    auto target = obtain_target(c, d, options, m);
    std::vector<double> ps = p_values;
    ps.insert(ps.begin(), -1.0);  // defense off
    std::vector<std::vector<std::string>> rows;
    for (double p : ps) {
      ExperimentConfig cp = c;
      cp.defense.enabled = p >= 0.0;
      if (cp.defense.enabled) cp.defense.replace_fraction = p;
      const std::string label = cp.defense.enabled ? num(p) : "off";
      cp.runtime.output_dir = (std::filesystem::path(c.runtime.output_dir) / ("defense_" + label)).string();
      AttackOptions ao;
      ao.write_artifacts = true;
      ao.manifest = &m;
      const EvalReport r = run_attack(cp, d, *target, ao).report;
      rows.push_back({to_string(c.generator.kind), label, num(r.ndcg_at_10), num(r.recall_at_10), num(r.agreement_at_1),
                      num(r.agreement_at_10), num(r.target_ndcg_at_10), num(r.target_recall_at_10)});
      std::cout << "defense " << label << "  agreement@10 " << num(r.agreement_at_10) << "  target recall@10 "
                << num(r.target_recall_at_10) << "\n";
    }
    const auto table = out_dir(c) / "defense_compare.csv";
    write_table(table, "method,defense,N@10,R@10,Agr@1,Agr@10,target_N@10,target_R@10", rows);
    m.add("defense_compare", table);
    m.save(out_dir(c) / "manifest.defense-compare.json");
  });
}

RunManifest cmd_analyze(const std::filesystem::path& log_path, std::size_t item_count,
                        const std::filesystem::path& dir) {
  const auto start = std::chrono::steady_clock::now();
  RunManifest m;
  m.command = "analyze";
  m.config = {{"log", log_path.string()}, {"item_count", item_count}, {"output_dir", dir.string()}};
  const QueryLog log = load_query_log(log_path);
  m.add("query_log", log_path);
  if (log.records.empty()) throw DataError(log_path.string() + ": no queries to analyze");
  std::filesystem::create_directories(dir);

  const auto curve = unseen_item_curve(log, item_count);
  save_unseen_curve(curve, dir / "unseen_curve.csv");
  m.add("unseen_curve", dir / "unseen_curve.csv");
  const auto display = position_histogram(log, PositionView::display_position);
  const auto original = position_histogram(log, PositionView::original_rank);
  save_position_histogram(display, original, dir / "position_histogram.csv");
  m.add("position_histogram", dir / "position_histogram.csv");

  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, hist] : {std::pair{"display_position", display}, std::pair{"original_rank", original}}) {
    const ChiSquareResult r = chi_square_uniform(hist);
    std::ostringstream p;
    p.precision(6);
    p << r.p_value;
    rows.push_back({name, num(r.statistic), std::to_string(r.dof), p.str()});
    std::cout << name << ": chi-square " << num(r.statistic) << " dof " << r.dof << " p " << p.str() << "\n";
  }
  write_table(dir / "position_uniformity.csv", "view,chi_square,dof,p_value", rows);
  m.add("position_uniformity", dir / "position_uniformity.csv");
  std::cout << "unseen after " << curve.back().first << " queries: " << curve.back().second << " of " << item_count
            << "\n";
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  m.save(dir / "manifest.analyze.json");
  return m;
}

RunManifest cmd_evaluate(const ExperimentConfig& c, const std::filesystem::path& model_a,
                         const std::filesystem::path& model_b) {
  return timed("evaluate", c, [&](RunManifest& m) {
    const PreparedData d = prepare_data(c);
    auto a = load_recommender(model_a);
    auto b = load_recommender(model_b);
    m.add("model_a", model_a);
    m.add("model_b", model_b);
    if (a->item_count() != d.catalog.size() || b->item_count() != d.catalog.size())
      throw DataError("evaluate: checkpoint and dataset catalog sizes differ");
    const SplitDataset split = subset(d.split, eval_users(c, d.split));
    const auto [a1, a10] = agreement(*a, *b, split);
    std::vector<std::vector<std::string>> rows;
    RecQualityConfig rq;
    rq.cutoff = c.eval.cutoff;
    rq.num_negatives = c.eval.num_negatives;
    rq.seed = derive_seed(c.seed, tag_eval);
    for (const auto& [name, model] : {std::pair{"a", a.get()}, std::pair{"b", b.get()}}) {
      RecQuality q;
      if (d.catalog.size() > rq.num_negatives + 1) q = rec_quality(*model, split, rq);
      rows.push_back({name, num(q.ndcg), num(q.recall), num(a1), num(a10)});
      std::cout << name << ": ndcg@" << rq.cutoff << " " << num(q.ndcg) << "  recall@" << rq.cutoff << " "
                << num(q.recall) << "\n";
    }
    std::cout << "agreement@1 " << num(a1) << "  agreement@10 " << num(a10) << "\n";
    const auto table = out_dir(c) / "evaluate.csv";
    write_table(table, "model,N@10,R@10,Agr@1,Agr@10", rows);
    m.add("evaluate", table);
    m.save(out_dir(c) / "manifest.evaluate.json");
  });
}

}  // namespace recx
