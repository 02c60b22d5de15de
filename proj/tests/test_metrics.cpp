#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "recx/metrics.hpp"

using namespace recx;

namespace {

// Scores fixed per item, independent of history.
class FixedScores : public Recommender {
 public:
  explicit FixedScores(Eigen::VectorXd s) : s_(std::move(s)) {}
  std::size_t item_count() const override { return static_cast<std::size_t>(s_.size()); }
  Eigen::VectorXd score_all(std::span<const ItemId>) const override { return s_; }

 private:
  Eigen::VectorXd s_;
};

// One user whose history is {0, 1} and whose test item is `positive`.
SplitDataset one_user(ItemId positive, std::size_t items) {
  return split_leave_two({{{0, 1, positive}}, items});
}

double kl_oracle(const std::map<std::uint64_t, double>& p, const std::map<std::uint64_t, double>& q, double eps) {
  std::map<std::uint64_t, int> support;
  double tp = 0, tq = 0;
  for (auto& [g, c] : p) support[g], tp += c;
  for (auto& [g, c] : q) support[g], tq += c;
  const double s = static_cast<double>(support.size());
  double kl = 0;
  for (auto& [g, _] : support) {
    const double cp = p.count(g) ? p.at(g) : 0.0, cq = q.count(g) ? q.at(g) : 0.0;
    const double a = (cp + eps) / (tp + eps * s), b = (cq + eps) / (tq + eps * s);
    kl += a * std::log(a / b);
  }
  return kl;
}

}  // namespace

TEST_CASE("agreement examples") {
  const TopKList a{{1, 2, 3, 4}}, b{{4, 3, 9, 8}};
  CHECK(agreement_at_k(a, a, 4) == 1.0);
  CHECK(agreement_at_k(a, b, 4) == 0.5);
  CHECK(agreement_at_k(a, b, 1) == 0.0);
  CHECK(agreement_at_k(TopKList{{1, 2}}, TopKList{{2, 1}}, 2) == 1.0);
  CHECK_THROWS(agreement_at_k(a, b, 0));
  CHECK_THROWS(agreement_at_k(a, b, 5));
}

TEST_CASE("agreement is symmetric and bounded") {
  Rng rng = make_rng(2);
  for (int t = 0; t < 100; ++t) {
    Eigen::VectorXd s1(30), s2(30);
    for (Eigen::Index i = 0; i < 30; ++i) s1(i) = uniform_real(rng), s2(i) = uniform_real(rng);
    const TopKList a = top_k_of(s1, 10), b = top_k_of(s2, 10);
    const std::size_t k = 1 + uniform_index(rng, 10);
    const double x = agreement_at_k(a, b, k);
    CHECK(x == agreement_at_k(b, a, k));
    CHECK((x >= 0.0 && x <= 1.0));
  }
}

TEST_CASE("rec quality ranks the test item among sampled negatives") {
  const std::size_t n = 200;
  RecQualityConfig cfg;
  cfg.num_negatives = 100;

  Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(n, 0.0, 1.0);  // item 199 scores highest
  SUBCASE("positive on top") {
    const auto q = rec_quality(FixedScores(s), one_user(199, n), cfg);
    CHECK(q.users == 1);
    CHECK(q.recall == 1.0);
    CHECK(q.ndcg == doctest::Approx(1.0));
  }
  SUBCASE("positive last") {
    s(5) = -1.0;
    const auto q = rec_quality(FixedScores(s), one_user(5, n), cfg);
    CHECK(q.recall == 0.0);
    CHECK(q.ndcg == 0.0);
  }
  SUBCASE("exactly one negative above") {
    // Every candidate is sampled when the pool has 100 items.
    const std::size_t m = 103;  // history {0, 1}, positive, 100 negatives
    Eigen::VectorXd t = Eigen::VectorXd::Zero(m);
    t(50) = 1.0;
    t(60) = 2.0;
    const auto q = rec_quality(FixedScores(t), one_user(50, m), cfg);
    CHECK(q.recall == 1.0);
    CHECK(q.ndcg == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
  }
  SUBCASE("ties rank by ascending id") {
    const std::size_t m = 103;
    const Eigen::VectorXd flat = Eigen::VectorXd::Zero(m);
    // Item 2 ties with everything and has the smallest id among candidates.
    CHECK(rec_quality(FixedScores(flat), one_user(2, m), cfg).ndcg == doctest::Approx(1.0));
    // Item 102 loses every tie: rank 101.
    CHECK(rec_quality(FixedScores(flat), one_user(102, m), cfg).recall == 0.0);
  }
  CHECK_THROWS(rec_quality(FixedScores(Eigen::VectorXd::Zero(101)), one_user(50, 101), cfg));
}

TEST_CASE("ndcg never exceeds recall") {
  const auto [cat, data] = synthesize_secret_data({.item_count = 150, .user_count = 80, .mean_length = 8, .seed = 4});
  const auto split = split_leave_two(data);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto q = rec_quality(init_score_model(150, 4, 0.7, seed), split, {.seed = seed});
    CHECK(q.ndcg <= q.recall);
    CHECK(q.users == split.user_count());
  }
}

TEST_CASE("a defended service ranks its shown list first") {
  const std::size_t n = 150;
  const Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(n, 0.0, 1.0);
  RecQualityConfig cfg;
  cfg.list_length = 10;
  cfg.defense = {.enabled = true, .replace_fraction = 0.5, .seed = 1};
  const auto split = one_user(149, n);
  const auto shown = query_topk(FixedScores(s), split.test_history(0), 10, cfg.defense);
  const bool kept = std::find(shown.items.begin(), shown.items.end(), 149) != shown.items.end();
  const auto q = rec_quality(FixedScores(s), split, cfg);
  if (kept) CHECK(q.recall == 1.0);
  cfg.defense.enabled = false;
  CHECK(rec_quality(FixedScores(s), split, cfg).ndcg == doctest::Approx(1.0));
}

TEST_CASE("n-gram divergence examples") {
  // P = {a: 2}, Q = {b: 2}, eps = 1: (3/4, 1/4) against (1/4, 3/4).
  const SequenceDataset p{{{0, 0}}, 2}, q{{{1, 1}}, 2};
  CHECK(ngram_div(p, q, 1, 1.0) == doctest::Approx(0.5 * std::log(3.0)).epsilon(1e-12));
  CHECK(ngram_div(p, p, 1, 1e-3) == 0.0);
  CHECK(ngram_div(p, p, 2, 1e-3) == 0.0);
  CHECK_THROWS(ngram_div(p, q, 1, 0.0));
  CHECK_THROWS(ngram_div(p, SequenceDataset{{}, 2}, 1, 1e-3));
  CHECK_THROWS(count_ngrams(p, 3));
}

TEST_CASE("bigram keys keep order") {
  const auto d = count_ngrams({{{1, 2, 1}}, 3}, 2);
  CHECK(d.total == 2);
  CHECK(d.counts.at((1ull << 32) | 2) == 1);
  CHECK(d.counts.at((2ull << 32) | 1) == 1);
}

TEST_CASE("n-gram divergence matches an oracle and is non-negative") {
  Rng rng = make_rng(33);
  for (int t = 0; t < 100; ++t) {
    const auto a = generate_random_sequences(6, 1 + uniform_index(rng, 5), 2 + uniform_index(rng, 6), rng);
    const auto b = generate_random_sequences(6, 1 + uniform_index(rng, 5), 2 + uniform_index(rng, 6), rng);
    for (int n : {1, 2}) {
      const double d = ngram_div(a, b, n, 1e-3);
      CHECK(d >= 0.0);
      std::map<std::uint64_t, double> cp, cq;
      for (auto& [g, c] : count_ngrams(a, n).counts) cp[g] = static_cast<double>(c);
      for (auto& [g, c] : count_ngrams(b, n).counts) cq[g] = static_cast<double>(c);
      CHECK(d == doctest::Approx(kl_oracle(cp, cq, 1e-3)).epsilon(1e-9));
    }
  }
}

TEST_CASE("unseen item curve") {
  CHECK(unseen_item_curve({}, 5).empty());
  QueryLog log;
  log.records.push_back({.returned = TopKList{{0, 1}}});
  log.records.push_back({.returned = TopKList{{1, 2}}});
  log.records.push_back({.returned = TopKList{{2, 0}}});
  const auto c = unseen_item_curve(log, 5);
  const std::vector<std::pair<std::size_t, std::size_t>> want{{0, 5}, {1, 3}, {2, 2}, {3, 2}};
  CHECK(c == want);
  for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i].second <= c[i - 1].second);
}

TEST_CASE("position histograms") {
  QueryLog log;
  QueryRecord r;
  r.selection.presented = TopKList{{5, 6, 7}};
  r.selection.chosen_display_positions = {1, 3};
  r.selection.chosen_original_ranks = {2, 2};
  log.records.push_back(r);
  CHECK(position_histogram(log, PositionView::display_position) == std::vector<std::uint64_t>{1, 0, 1});
  CHECK(position_histogram(log, PositionView::original_rank) == std::vector<std::uint64_t>{0, 2, 0});
}

TEST_CASE("regularized upper incomplete gamma against closed forms") {
  for (double x : {0.0, 0.1, 0.5, 1.0, 2.5, 7.0, 20.0, 60.0}) {
    CHECK(regularized_gamma_q(1.0, x) == doctest::Approx(std::exp(-x)).epsilon(1e-12));
    CHECK(regularized_gamma_q(0.5, x) == doctest::Approx(std::erfc(std::sqrt(x))).epsilon(1e-10));
    CHECK(regularized_gamma_q(2.0, x) == doctest::Approx((1.0 + x) * std::exp(-x)).epsilon(1e-12));
  }
  CHECK_THROWS(regularized_gamma_q(0.0, 1.0));
  CHECK_THROWS(regularized_gamma_q(1.0, -1.0));
}

TEST_CASE("chi-square uniformity test") {
  const auto even = chi_square_uniform({10, 10, 10});
  CHECK(even.statistic == 0.0);
  CHECK(even.dof == 2);
  CHECK(even.p_value == doctest::Approx(1.0));
  // dof 2: p = exp(-stat / 2).
  const auto skew = chi_square_uniform({20, 10, 0});
  CHECK(skew.statistic == doctest::Approx(20.0));
  CHECK(skew.p_value == doctest::Approx(std::exp(-10.0)).epsilon(1e-10));
  CHECK_THROWS(chi_square_uniform({5}));
  CHECK_THROWS(chi_square_uniform({0, 0}));
}

TEST_CASE("shuffle overlap") {
  const SequenceDataset seqs{{{1, 2, 3}, {4}, {5, 6, 7, 8}, {0, 9}}, 10};
  Rng rng = make_rng(4);
  const auto unordered = shuffle_overlap(init_score_model(10, 3, 1.0, 3), seqs, 5, rng);
  CHECK(unordered.mean_overlap == doctest::Approx(1.0));
  CHECK(unordered.evaluated == 3);
  CHECK(unordered.excluded_single == 1);

  const auto [cat, data] = synthesize_secret_data({.item_count = 60, .user_count = 100, .mean_length = 8, .seed = 1});
  const auto markov = train_markov_target(data, 0.1);
  const auto o = shuffle_overlap(markov, data, 10, rng);
  CHECK(o.mean_overlap < 1.0);
  CHECK(o.mean_overlap > 0.0);
}

TEST_CASE("report and csv output") {
  EvalReport r;
  r.agreement_at_10 = 0.5;
  r.counts["eval_users"] = 3;
  r.config_echo = R"({"k":100})";
  const std::string text = r.to_json();
  CHECK(text.find("\"format\": \"recx.evalreport\"") != std::string::npos);
  CHECK(text.find("\"agreement@10\": 0.5") != std::string::npos);
  CHECK(text.find("\"eval_users\": 3") != std::string::npos);
  CHECK(text.back() == '\n');
  CHECK(text == r.to_json());

  TempDir dir;
  save_unseen_curve({{0, 5}, {1, 3}}, dir / "u.csv");
  CHECK(read_file(dir / "u.csv") == "round,unseen\n0,5\n1,3\n");
  save_position_histogram({1, 2}, {3}, dir / "p.csv");
  CHECK(read_file(dir / "p.csv") == "position,display_count,original_rank_count\n1,1,3\n2,2,0\n");
}
