#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "recx/corpus.hpp"
#include "recx/genpipe.hpp"
#include "recx/recsys.hpp"

namespace recx {

// |first K of a  ∩  first K of b| / K
double agreement_at_k(const TopKList& a, const TopKList& b, std::size_t k);

struct RecQualityConfig {
  std::size_t cutoff = 10;
  std::size_t num_negatives = 100;
  std::uint64_t seed = 0;
  // When enabled, candidates are ranked by the defended top-`list_length` list
  // first, then by score; this is what a user of the defended service sees.
  DefenseConfig defense;
  std::size_t list_length = 100;
};

struct RecQuality {
  double recall = 0.0;
  double ndcg = 0.0;
  std::size_t users = 0;
};

// Each user's test item is ranked against uniformly sampled negatives that avoid
// the user's history and the positive. Ties rank by ascending id.
RecQuality rec_quality(const Recommender& model, const SplitDataset& splits, const RecQualityConfig& config);

// N-gram counts keyed by packed ids (N = 1: id; N = 2: first << 32 | second).
struct NGramDistribution {
  int n = 1;
  std::map<std::uint64_t, std::uint64_t> counts;
  std::uint64_t total = 0;
};

NGramDistribution count_ngrams(const SequenceDataset& corpus, int n);

// KL(P_eps || Q_eps) in nats over the union of observed n-grams with additive smoothing
// P_eps(g) = (c_P(g) + eps) / (total_P + eps * |support|).
double ngram_div(const NGramDistribution& p, const NGramDistribution& q, double epsilon);
double ngram_div(const SequenceDataset& p, const SequenceDataset& q, int n, double epsilon);

// (round, unseen) pairs; round 0 is before any query, then one point per logged query.
std::vector<std::pair<std::size_t, std::size_t>> unseen_item_curve(const QueryLog& log, std::size_t item_count);

enum class PositionView { display_position, original_rank };

// Counts indexed by position - 1, sized to the longest presented list.
std::vector<std::uint64_t> position_histogram(const QueryLog& log, PositionView view);

// Pearson chi-square statistic against a uniform expectation and its upper-tail p-value.
struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};
ChiSquareResult chi_square_uniform(const std::vector<std::uint64_t>& counts);

// Regularized upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);

struct ShuffleOverlap {
  double mean_overlap = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded_single = 0;
};

// Mean |topk(x) ∩ topk(shuffle(x))| / k over sequences of length >= 2.
ShuffleOverlap shuffle_overlap(const Recommender& model, const SequenceDataset& sequences, std::size_t k, Rng& rng);

// Attack-side summary, serialized with fixed formatting so equal runs are byte-identical.
struct EvalReport {
  double agreement_at_1 = 0.0;
  double agreement_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
  double recall_at_10 = 0.0;
  double target_ndcg_at_10 = 0.0;
  double target_recall_at_10 = 0.0;
  double ngram_div_1 = 0.0;
  double ngram_div_2 = 0.0;
  std::map<std::string, double> counts;  // dataset sizes, coverage, failures, ...
  std::string config_echo;              // JSON text of the run configuration
  std::string to_json() const;
};

// CSV writers for plotting.
void save_unseen_curve(const std::vector<std::pair<std::size_t, std::size_t>>& curve,
                       const std::filesystem::path& path);
void save_position_histogram(const std::vector<std::uint64_t>& display, const std::vector<std::uint64_t>& original,
                             const std::filesystem::path& path);

}  // namespace recx
