#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "recx/embedding.hpp"
#include "recx/genpipe.hpp"
#include "recx/recsys.hpp"
#include "recx/types.hpp"

namespace recx {

// Ranking distillation loss over surrogate scores:
//   1/(k-1) * sum_{i<k}  max(0, s_top[i+1] - s_top[i] + margin_order)
// + 1/k     * sum_{i<=k} max(0, s_neg[i mod n] - s_top[i] + margin_negative)
// s_top is ordered by the target's ranking. Negatives cycle when fewer than k and
// only the first k are used when more; the second term vanishes when there are none.
template <typename Scalar>
Scalar distill_loss(const Eigen::Ref<const Vector<Scalar>>& s_top, const Eigen::Ref<const Vector<Scalar>>& s_neg,
                    double margin_order, double margin_negative) {
  const Eigen::Index k = s_top.size();
  if (k < 2) throw std::invalid_argument("distill_loss: k must be >= 2");
  Scalar order(0);
  for (Eigen::Index i = 0; i + 1 < k; ++i)
    order += std::max(Scalar(0), s_top(i + 1) - s_top(i) + static_cast<Scalar>(margin_order));
  Scalar loss = order / static_cast<Scalar>(k - 1);
  const Eigen::Index n = s_neg.size();
  if (n > 0) {
    Scalar neg(0);
    for (Eigen::Index i = 0; i < k; ++i)
      neg += std::max(Scalar(0), s_neg(i % n) - s_top(i) + static_cast<Scalar>(margin_negative));
    loss += neg / static_cast<Scalar>(k);
  }
  return loss;
}

// dL/ds for the same loss; zero branch at hinge kinks.
template <typename Scalar>
void distill_score_grad(const Eigen::Ref<const Vector<Scalar>>& s_top, const Eigen::Ref<const Vector<Scalar>>& s_neg,
                        double margin_order, double margin_negative, Vector<Scalar>& grad_top,
                        Vector<Scalar>& grad_neg) {
  const Eigen::Index k = s_top.size();
  if (k < 2) throw std::invalid_argument("distill_score_grad: k must be >= 2");
  const Eigen::Index n = s_neg.size();
  grad_top = Vector<Scalar>::Zero(k);
  grad_neg = Vector<Scalar>::Zero(n);
  const Scalar order_scale = Scalar(1) / static_cast<Scalar>(k - 1);
  for (Eigen::Index i = 0; i + 1 < k; ++i) {
    if (s_top(i + 1) - s_top(i) + static_cast<Scalar>(margin_order) > Scalar(0)) {
      grad_top(i + 1) += order_scale;
      grad_top(i) -= order_scale;
    }
  }
  if (n == 0) return;
  const Scalar neg_scale = Scalar(1) / static_cast<Scalar>(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    if (s_neg(i % n) - s_top(i) + static_cast<Scalar>(margin_negative) > Scalar(0)) {
      grad_neg(i % n) += neg_scale;
      grad_top(i) -= neg_scale;
    }
  }
}

// Loss for one (history, target list, negatives) triple, accumulating its
// embedding gradient into grad.
template <typename Derived, typename GradDerived>
typename Derived::Scalar distill_accumulate(const Eigen::MatrixBase<Derived>& embeddings, std::span<const ItemId> history,
                                            double gamma, std::span<const ItemId> ranked, std::span<const ItemId> negatives,
                                            double margin_order, double margin_negative,
                                            Eigen::MatrixBase<GradDerived>& grad) {
  using Scalar = typename Derived::Scalar;
  const Vector<Scalar> h = encode_history(embeddings, history, gamma);
  const Vector<Scalar> s_top = score_items(embeddings, h, ranked);
  const Vector<Scalar> s_neg = score_items(embeddings, h, negatives);
  Vector<Scalar> g_top, g_neg;
  distill_score_grad<Scalar>(s_top, s_neg, margin_order, margin_negative, g_top, g_neg);

  std::vector<ItemId> items(ranked.begin(), ranked.end());
  items.insert(items.end(), negatives.begin(), negatives.end());
  Vector<Scalar> g(static_cast<Eigen::Index>(items.size()));
  g << g_top, g_neg;
  backprop_scores(embeddings, history, gamma, h, items, g, grad);
  return distill_loss<Scalar>(s_top, s_neg, margin_order, margin_negative);
}

// Full embedding-table subgradient of the distillation loss for one pair.
template <typename Derived>
EmbeddingMatrix<typename Derived::Scalar> distill_grad(const Eigen::MatrixBase<Derived>& embeddings,
                                                       std::span<const ItemId> history, double gamma,
                                                       std::span<const ItemId> ranked,
                                                       std::span<const ItemId> negatives, double margin_order,
                                                       double margin_negative) {
  using Scalar = typename Derived::Scalar;
  EmbeddingMatrix<Scalar> grad = EmbeddingMatrix<Scalar>::Zero(embeddings.rows(), embeddings.cols());
  distill_accumulate(embeddings, history, gamma, ranked, negatives, margin_order, margin_negative, grad);
  return grad;
}

// n_neg items uniform without replacement from I \ list.
std::vector<ItemId> sample_negatives(std::size_t item_count, const TopKList& list, std::size_t n_neg, Rng& rng);

// DCG of the surrogate list with relevance 1 for items in the target list,
// normalized by the target list's own DCG.
double validation_ndcg(const TopKList& surrogate, const TopKList& target);

struct DistillConfig {
  double margin_order = 0.5;
  double margin_negative = 0.5;
  std::size_t negatives_per_pair = 0;  // 0 means k
  std::size_t epochs = 300;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 64;
  double validation_fraction = 0.05;
  bool keep_best = true;  // restore the parameters of the best validation epoch
  std::uint64_t seed = 0;
};

struct TrainedSurrogate {
  ScoreModel model;
  std::vector<double> loss_trace;
  std::vector<double> validation_ndcg_trace;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
};

TrainedSurrogate train_surrogate(const SurrogateDataset& data, ScoreModel init, const DistillConfig& config);

// "epoch,loss,val_ndcg" with a header row.
void save_training_trace(const TrainedSurrogate& trained, const std::filesystem::path& path);

}  // namespace recx
