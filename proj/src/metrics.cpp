#include "recx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace recx {

double agreement_at_k(const TopKList& a, const TopKList& b, std::size_t k) {
  if (k < 1) throw std::invalid_argument("agreement_at_k: K must be >= 1");
  if (a.k() < k || b.k() < k) throw std::invalid_argument("agreement_at_k: lists shorter than K");
  std::unordered_set<ItemId> first(a.items.begin(), a.items.begin() + static_cast<std::ptrdiff_t>(k));
  std::size_t shared = 0;
  for (std::size_t i = 0; i < k; ++i) shared += first.count(b.items[i]);
  return static_cast<double>(shared) / static_cast<double>(k);
}

RecQuality rec_quality(const Recommender& model, const SplitDataset& splits, const RecQualityConfig& config) {
  const std::size_t n = model.item_count();
  if (n <= config.num_negatives + 1)
    throw std::invalid_argument("rec_quality: catalog of " + std::to_string(n) + " items is too small for " +
                                std::to_string(config.num_negatives) + " negatives");
  if (config.cutoff < 1) throw std::invalid_argument("rec_quality: cutoff must be >= 1");

  RecQuality q;
  std::vector<bool> excluded(n, false);
  std::vector<ItemId> pool;
  std::vector<std::size_t> list_position(n);
  for (std::size_t u = 0; u < splits.user_count(); ++u) {
    const Sequence history = splits.test_history(u);
    const ItemId positive = splits.test_items[u];
    std::fill(excluded.begin(), excluded.end(), false);
    for (ItemId id : history) excluded[static_cast<std::size_t>(id)] = true;
    excluded[static_cast<std::size_t>(positive)] = true;
    pool.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (!excluded[i]) pool.push_back(static_cast<ItemId>(i));
    Rng rng = make_rng(config.seed, u, 0x9e7);
    const std::size_t negs = std::min(config.num_negatives, pool.size());
    for (std::size_t i = 0; i < negs; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);

    const Eigen::VectorXd scores = model.score_all(history);
    // Lower key ranks first.
    auto before = [&](ItemId a, ItemId b) {
      if (list_position[static_cast<std::size_t>(a)] != list_position[static_cast<std::size_t>(b)])
        return list_position[static_cast<std::size_t>(a)] < list_position[static_cast<std::size_t>(b)];
      if (scores(a) != scores(b)) return scores(a) > scores(b);
      return a < b;
    };
    const std::size_t unlisted = std::numeric_limits<std::size_t>::max();
    std::fill(list_position.begin(), list_position.end(), unlisted);
    if (config.defense.enabled) {
      const TopKList shown = query_topk(model, history, std::min(config.list_length, n), config.defense);
      for (std::size_t r = 0; r < shown.k(); ++r) list_position[static_cast<std::size_t>(shown.items[r])] = r;
    }
    std::size_t rank = 1;
    for (std::size_t i = 0; i < negs; ++i) rank += before(pool[i], positive);

    ++q.users;
    if (rank <= config.cutoff) {
      q.recall += 1.0;
      q.ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
  }
  if (q.users) {
    q.recall /= static_cast<double>(q.users);
    q.ndcg /= static_cast<double>(q.users);
  }
  return q;
}

NGramDistribution count_ngrams(const SequenceDataset& corpus, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("count_ngrams: N must be 1 or 2");
  NGramDistribution dist;
  dist.n = n;
  for (const auto& seq : corpus.sequences) {
    if (n == 1) {
      for (ItemId id : seq) ++dist.counts[static_cast<std::uint32_t>(id)];
      dist.total += seq.size();
    } else {
      for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        const std::uint64_t key =
            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(seq[t])) << 32) | static_cast<std::uint32_t>(seq[t + 1]);
        ++dist.counts[key];
        ++dist.total;
      }
    }
  }
  return dist;
}

double ngram_div(const NGramDistribution& p, const NGramDistribution& q, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("ngram_div: epsilon must be > 0");
  if (p.n != q.n) throw std::invalid_argument("ngram_div: N differs");
  if (p.total == 0 || q.total == 0) throw std::invalid_argument("ngram_div: empty corpus");

  std::size_t support = 0;
  {
    auto a = p.counts.begin();
    auto b = q.counts.begin();
    while (a != p.counts.end() || b != q.counts.end()) {
      ++support;
      if (b == q.counts.end() || (a != p.counts.end() && a->first < b->first)) ++a;
      else if (a == p.counts.end() || b->first < a->first) ++b;
      else {
        ++a;
        ++b;
      }
    }
  }
  const long double eps = epsilon;
  const long double p_norm = static_cast<long double>(p.total) + eps * static_cast<long double>(support);
  const long double q_norm = static_cast<long double>(q.total) + eps * static_cast<long double>(support);
  long double kl = 0.0L;
  auto a = p.counts.begin();
  auto b = q.counts.begin();
  while (a != p.counts.end() || b != q.counts.end()) {
    long double cp = 0.0L, cq = 0.0L;
    if (b == q.counts.end() || (a != p.counts.end() && a->first < b->first)) {
      cp = static_cast<long double>(a->second);
      ++a;
    } else if (a == p.counts.end() || b->first < a->first) {
      cq = static_cast<long double>(b->second);
      ++b;
    } else {
      cp = static_cast<long double>(a->second);
      cq = static_cast<long double>(b->second);
      ++a;
      ++b;
    }
    const long double pe = (cp + eps) / p_norm;
    const long double qe = (cq + eps) / q_norm;
    kl += pe * std::log(pe / qe);
  }
  return static_cast<double>(kl);
}

double ngram_div(const SequenceDataset& p, const SequenceDataset& q, int n, double epsilon) {
  if (p.empty() || q.empty()) throw std::invalid_argument("ngram_div: empty corpus");
  return ngram_div(count_ngrams(p, n), count_ngrams(q, n), epsilon);
}

std::vector<std::pair<std::size_t, std::size_t>> unseen_item_curve(const QueryLog& log, std::size_t item_count) {
  std::vector<std::pair<std::size_t, std::size_t>> curve;
  if (log.records.empty()) return curve;
  std::vector<bool> seen(item_count, false);
  std::size_t unseen = item_count;
  curve.emplace_back(0, unseen);
  for (std::size_t r = 0; r < log.records.size(); ++r) {
    for (ItemId id : log.records[r].returned.items) {
      if (id < 0 || static_cast<std::size_t>(id) >= item_count)
        throw std::invalid_argument("unseen_item_curve: item outside catalog");
      if (!seen[static_cast<std::size_t>(id)]) {
        seen[static_cast<std::size_t>(id)] = true;
        --unseen;
      }
    }
    curve.emplace_back(r + 1, unseen);
  }
  return curve;
}

std::vector<std::uint64_t> position_histogram(const QueryLog& log, PositionView view) {
  std::size_t width = 0;
  for (const auto& r : log.records) width = std::max(width, r.selection.presented.k());
  std::vector<std::uint64_t> hist(width, 0);
  for (const auto& r : log.records) {
    const auto& positions = view == PositionView::display_position ? r.selection.chosen_display_positions
                                                                   : r.selection.chosen_original_ranks;
    for (std::size_t p : positions) {
      if (p < 1 || p > width) throw std::invalid_argument("position_histogram: position out of range");
      ++hist[p - 1];
    }
  }
  return hist;
}

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("regularized_gamma_q: need a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return std::max(0.0, 1.0 - sum * std::exp(log_prefix));
  }
  // Continued fraction for Q(a, x), modified Lentz.
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(log_prefix) * h;
}

ChiSquareResult chi_square_uniform(const std::vector<std::uint64_t>& counts) {
  if (counts.size() < 2) throw std::invalid_argument("chi_square_uniform: need at least 2 bins");
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw std::invalid_argument("chi_square_uniform: no observations");
  const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
  ChiSquareResult r;
  for (auto c : counts) {
    const double diff = static_cast<double>(c) - expected;
    r.statistic += diff * diff / expected;
  }
  r.dof = counts.size() - 1;
  r.p_value = regularized_gamma_q(static_cast<double>(r.dof) / 2.0, r.statistic / 2.0);
  return r;
}

ShuffleOverlap shuffle_overlap(const Recommender& model, const SequenceDataset& sequences, std::size_t k, Rng& rng) {
  ShuffleOverlap out;
  double sum = 0.0;
  for (const auto& seq : sequences.sequences) {
    if (seq.size() < 2) {
      ++out.excluded_single;
      continue;
    }
    Sequence shuffled = seq;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[uniform_index(rng, i)]);
    sum += agreement_at_k(query_topk(model, seq, k), query_topk(model, shuffled, k), k);
    ++out.evaluated;
  }
  if (out.evaluated) out.mean_overlap = sum / static_cast<double>(out.evaluated);
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "recx.evalreport";
  j["version"] = 1;
  j["metrics"] = {{"agreement@1", agreement_at_1},
                  {"agreement@10", agreement_at_10},
                  {"ndcg@10", ndcg_at_10},
                  {"recall@10", recall_at_10},
                  {"target_ndcg@10", target_ndcg_at_10},
                  {"target_recall@10", target_recall_at_10},
                  {"ngram_div@1", ngram_div_1},
                  {"ngram_div@2", ngram_div_2}};
  j["counts"] = counts;
  j["config"] = config_echo.empty() ? nlohmann::ordered_json::object() : nlohmann::ordered_json::parse(config_echo);
  return j.dump(2) + "\n";
}

void save_unseen_curve(const std::vector<std::pair<std::size_t, std::size_t>>& curve,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write");
  out << "round,unseen\n";
  for (const auto& [round, unseen] : curve) out << round << ',' << unseen << '\n';
}

void save_position_histogram(const std::vector<std::uint64_t>& display, const std::vector<std::uint64_t>& original,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write");
  out << "position,display_count,original_rank_count\n";
  const std::size_t n = std::max(display.size(), original.size());
  for (std::size_t i = 0; i < n; ++i)
    out << i + 1 << ',' << (i < display.size() ? display[i] : 0) << ',' << (i < original.size() ? original[i] : 0)
        << '\n';
}

}  // namespace recx
