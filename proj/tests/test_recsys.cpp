#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "helpers.hpp"
#include "recx/optim.hpp"
#include "recx/recsys.hpp"

using namespace recx;

namespace {

std::vector<ItemId> ids(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

// Plain re-statement of the scorer for oracle use.
long double oracle_score(const EmbeddingMatrix<long double>& e, const std::vector<ItemId>& x, double gamma,
                         ItemId item) {
  long double num = 0, den = 0;
  std::vector<long double> h(e.cols(), 0.0L);
  for (std::size_t j = 0; j < x.size(); ++j) {
    const long double w = std::pow(static_cast<long double>(gamma), static_cast<long double>(x.size() - 1 - j));
    den += w;
    for (Eigen::Index c = 0; c < e.cols(); ++c) h[c] += w * e(x[j], c);
  }
  for (Eigen::Index c = 0; c < e.cols(); ++c) num += h[c] / den * e(item, c);
  return num;
}

}  // namespace

TEST_CASE("markov counts and popularity") {
  const auto m = train_markov_target({{{1, 2}, {1, 2}}, 4}, 0.0);
  CHECK(m.transition_count(1, 2) == 2.0);
  CHECK(m.transition_count(2, 1) == 0.0);

  const auto m2 = train_markov_target({{{1, 2, 3}}, 4}, 0.0);
  CHECK(m2.transition_count(1, 2) == 1.0);
  CHECK(m2.transition_count(2, 3) == 1.0);
  CHECK(m2.popularity()(0) == 0.0);
  CHECK(m2.popularity()(1) == 1.0);
  CHECK(m2.popularity()(2) == 1.0);
  CHECK(m2.popularity()(3) == 1.0);
}

TEST_CASE("markov scoring") {
  const auto m = train_markov_target({{{1, 2}, {1, 2}}, 4}, 0.0);
  const auto s = m.score_all(ids({1}));
  CHECK(s(2) == 2.0);
  CHECK(s(0) == 0.0);
  CHECK(s(1) == 0.0);
  CHECK(s(3) == 0.0);

  SUBCASE("context with no outgoing transitions falls back to popularity") {
    const auto p = train_markov_target({{{0, 1}, {2, 1}, {2, 1, 3}}, 5}, 0.5);
    const auto s4 = p.score_all(ids({4}));
    CHECK(query_topk(p, ids({4}), 3).items == ids({1, 2, 0}));
    CHECK(s4(1) == doctest::Approx(0.5 * 3));
  }
}

TEST_CASE("markov scoring equals a brute-force recount") {
  Rng rng = make_rng(11);
  SequenceDataset data{{}, 7};
  for (int u = 0; u < 30; ++u) {
    Sequence s;
    for (int t = 0; t < 6; ++t) s.push_back(static_cast<ItemId>(uniform_index(rng, 7)));
    data.sequences.push_back(s);
  }
  const double alpha = 0.3;
  const auto m = train_markov_target(data, alpha);
  for (ItemId last = 0; last < 7; ++last) {
    const auto s = m.score_all(ids({0, last}));
    for (ItemId i = 0; i < 7; ++i) {
      double count = 0, pop = 0;
      for (const auto& seq : data.sequences) {
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) count += seq[t] == last && seq[t + 1] == i;
        for (ItemId x : seq) pop += x == i;
      }
      CHECK(s(i) == doctest::Approx(count + alpha * pop));
    }
  }
}

TEST_CASE("score model examples") {
  EmbeddingMatrix<double> zero = EmbeddingMatrix<double>::Zero(4, 3);
  CHECK(ScoreModel(zero, 0.5).score_all(ids({1, 2})).isZero());

  EmbeddingMatrix<double> e(3, 1);
  e << 1, 2, 3;
  const auto s = ScoreModel(e, 1.0).score_all(ids({0}));
  CHECK(s(0) == 1.0);
  CHECK(s(1) == 2.0);
  CHECK(s(2) == 3.0);

  CHECK_THROWS(ScoreModel(e, 0.0));
  CHECK_THROWS(ScoreModel(e, 1.5));
  CHECK_THROWS(ScoreModel(e, 1.0).score_all(ids({3})));
}

TEST_CASE("score model matches the weighted-average oracle") {
  const ScoreModel m = init_score_model(9, 4, 0.6, 2);
  const EmbeddingMatrix<long double> el = m.embeddings().cast<long double>();
  const std::vector<ItemId> x{3, 1, 4, 1, 5};
  const auto s = m.score_all(x);
  for (ItemId i = 0; i < 9; ++i) CHECK(s(i) == doctest::Approx(static_cast<double>(oracle_score(el, x, 0.6, i))).epsilon(1e-12));
}

TEST_CASE("top-k ordering and ties") {
  Eigen::VectorXd s(3);
  s << 1, 2, 3;
  CHECK(top_k_of(s, 2).items == ids({2, 1}));
  s << 5, 5, 5;
  CHECK(top_k_of(s, 3).items == ids({0, 1, 2}));
  CHECK_THROWS(top_k_of(s, 0));
  CHECK_THROWS(top_k_of(s, 4));
}

TEST_CASE("tie order does not depend on where equal scores sit") {
  // Same multiset of scores assigned to different ids: ties always resolve by id.
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd s(12);
    for (int i = 0; i < 12; ++i) s(i) = static_cast<double>(uniform_index(rng, 3));
    const auto list = top_k_of(s, 12);
    for (std::size_t r = 1; r < list.k(); ++r) {
      const ItemId a = list.items[r - 1], b = list.items[r];
      CHECK((s(a) > s(b) || (s(a) == s(b) && a < b)));
    }
  }
}

TEST_CASE("defense replaces floor(p*k) positions with items from outside the list") {
  const ScoreModel m = init_score_model(50, 4, 0.8, 1);
  const std::vector<ItemId> x{1, 2, 3};
  const auto plain = query_topk(m, x, 10);
  DefenseConfig d{true, 0.1, 99};
  CHECK(d.replaced_count(10) == 1);
  CHECK(DefenseConfig{true, 0.3, 0}.replaced_count(10) == 3);
  CHECK(DefenseConfig{false, 0.3, 0}.replaced_count(10) == 0);

  const auto defended = query_topk(m, x, 10, d);
  validate(defended, 50);
  std::size_t changed = 0;
  const std::set<ItemId> original(plain.items.begin(), plain.items.end());
  for (std::size_t r = 0; r < 10; ++r) {
    if (defended.items[r] != plain.items[r]) {
      ++changed;
      CHECK(original.count(defended.items[r]) == 0);
    }
  }
  CHECK(changed == 1);
  CHECK(query_topk(m, x, 10, d) == defended);
}

TEST_CASE("top-k lists are always k distinct valid ids") {
  const ScoreModel m = init_score_model(30, 3, 0.5, 8);
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ItemId> x(1 + uniform_index(rng, 6));
    for (auto& v : x) v = static_cast<ItemId>(uniform_index(rng, 30));
    const std::size_t k = 1 + uniform_index(rng, 30);
    DefenseConfig d{trial % 2 == 0, 0.25, static_cast<std::uint64_t>(trial)};
    const auto list = query_topk(m, x, k, d);
    CHECK(list.k() == k);
    CHECK_NOTHROW(validate(list, 30));
  }
}

TEST_CASE("ranking is invariant under positive scaling of the embeddings") {
  ScoreModel m = init_score_model(40, 5, 0.7, 3);
  const std::vector<ItemId> x{4, 9, 2};
  const auto before = query_topk(m, x, 40);
  m.embeddings() *= 3.5;
  CHECK(query_topk(m, x, 40) == before);
}

TEST_CASE("initialization bounds and seeding") {
  const auto a = init_score_model(20, 9, 0.5, 1);
  const auto b = init_score_model(20, 9, 0.5, 1);
  const auto c = init_score_model(20, 9, 0.5, 2);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.embeddings().cwiseAbs().maxCoeff() <= 0.1 / 3.0);
}

TEST_CASE("pairwise loss gradient matches central differences") {
  // loss = softplus(s(neg) - s(pos)) on one prefix, recomputed from scratch in long double.
  Rng rng = make_rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const ScoreModel m = init_score_model(8, 3, 0.7, 100 + trial);
    EmbeddingMatrix<long double> e = m.embeddings().cast<long double>() * 20.0L;
    const std::vector<ItemId> x{static_cast<ItemId>(uniform_index(rng, 8)), static_cast<ItemId>(uniform_index(rng, 8))};
    const ItemId pos = static_cast<ItemId>(uniform_index(rng, 8));
    const ItemId neg = static_cast<ItemId>((pos + 1 + uniform_index(rng, 7)) % 8);
    auto loss = [&](const EmbeddingMatrix<long double>& p) {
      const long double d = oracle_score(p, x, 0.7, neg) - oracle_score(p, x, 0.7, pos);
      return std::log1p(std::exp(d));
    };
    const auto h = encode_history(e, x, 0.7);
    const std::vector<ItemId> items{pos, neg};
    const auto s = score_items(e, h, items);
    const long double sig = 1.0L / (1.0L + std::exp(-(s(1) - s(0))));
    Vector<long double> g(2);
    g << -sig, sig;
    EmbeddingMatrix<long double> grad = EmbeddingMatrix<long double>::Zero(8, 3);
    backprop_scores(e, x, 0.7, h, items, g, grad);

    const long double step = 1e-6L;
    for (Eigen::Index r = 0; r < 8; ++r)
      for (Eigen::Index c = 0; c < 3; ++c) {
        auto up = e, down = e;
        up(r, c) += step;
        down(r, c) -= step;
        const long double fd = (loss(up) - loss(down)) / (2 * step);
        const long double denom = std::max(1e-8L, std::abs(fd) + std::abs(grad(r, c)));
        CHECK(static_cast<double>(std::abs(fd - grad(r, c)) / denom) < 1e-4);
      }
  }
}

TEST_CASE("pretraining learns a deterministic transition") {
  SequenceDataset data{{}, 6};
  for (int i = 0; i < 200; ++i) data.sequences.push_back({1, 2});
  PretrainConfig cfg;
  cfg.epochs = 40;
  cfg.learning_rate = 0.05;
  const auto result = pretrain_target(init_score_model(6, 4, 0.8, 1), data, cfg);
  CHECK(query_topk(result.model, ids({1}), 1).items == ids({2}));
  CHECK(result.loss_trace.back() < result.loss_trace.front());

  cfg.epochs = 0;
  const auto init = init_score_model(6, 4, 0.8, 1);
  CHECK(pretrain_target(init, data, cfg).model == init);
}

TEST_CASE("pretraining is reproducible") {
  SequenceDataset data{{{0, 1, 2}, {2, 3, 4}, {4, 0, 1}}, 5};
  PretrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 3;
  const auto a = pretrain_target(init_score_model(5, 2, 0.5, 1), data, cfg);
  const auto b = pretrain_target(init_score_model(5, 2, 0.5, 1), data, cfg);
  CHECK(a.model == b.model);
  CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("AdamW first step moves each parameter by the learning rate") {
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  AdamW<double> opt(1, 3, cfg);
  AdamW<double>::Matrix p(1, 3), g(1, 3);
  p << 1, 1, 1;
  g << 2, -0.5, 0;
  opt.step(p, g);
  CHECK(p(0, 0) == doctest::Approx(0.99));
  CHECK(p(0, 1) == doctest::Approx(1.01));
  CHECK(p(0, 2) == doctest::Approx(1.0));

  AdamConfig warm = cfg;
  warm.warmup_steps = 4;
  AdamW<double> w(1, 1, warm);
  CHECK(w.current_learning_rate() == doctest::Approx(0.0025));
}

TEST_CASE("checkpoints round-trip bit-exact") {
  TempDir dir;
  const auto m = init_score_model(17, 5, 0.65, 9);
  save_model(m, dir / "s.bin");
  CHECK(load_score_model(dir / "s.bin") == m);
  auto any = load_recommender(dir / "s.bin");
  CHECK(dynamic_cast<ScoreModel*>(any.get()) != nullptr);

  const auto mk = train_markov_target({{{1, 2, 3}, {3, 1}}, 5}, 0.25);
  save_model(mk, dir / "m.bin");
  const auto back = load_markov_model(dir / "m.bin");
  CHECK(back.alpha() == 0.25);
  CHECK(back.popularity() == mk.popularity());
  CHECK(back.score_all(ids({3})) == mk.score_all(ids({3})));
  CHECK(dynamic_cast<MarkovModel*>(load_recommender(dir / "m.bin").get()) != nullptr);

  write_file(dir / "junk.bin", "not a model");
  CHECK_THROWS_AS(load_recommender(dir / "junk.bin"), DataError);
  CHECK_THROWS_AS(load_score_model(dir / "m.bin"), DataError);
}
