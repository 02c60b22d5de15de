#pragma once

// Scalar-generic pieces of the embedding scorer:
//   h(x) = sum_j w_j E[x_j] / sum_j w_j,   w_j = gamma^(T-1-j)
//   score(x, i) = <h(x), E[i]>
// Templated on the embedding expression so gradient checks can run in
// extended precision against the same formulas the trainer uses.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "recx/types.hpp"

namespace recx {

template <typename Scalar>
using EmbeddingMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Normalized decay weights, one per history position (most recent last).
template <typename Scalar>
std::vector<Scalar> history_weights(std::size_t length, double gamma) {
  std::vector<Scalar> w(length);
  Scalar total(0);
  Scalar current(1);
  for (std::size_t j = length; j-- > 0;) {
    w[j] = current;
    total += current;
    current *= static_cast<Scalar>(gamma);
  }
  for (auto& v : w) v /= total;
  return w;
}

template <typename Derived>
Vector<typename Derived::Scalar> encode_history(const Eigen::MatrixBase<Derived>& embeddings,
                                                std::span<const ItemId> history, double gamma) {
  using Scalar = typename Derived::Scalar;
  if (history.empty()) throw std::invalid_argument("encode_history: empty history");
  const auto w = history_weights<Scalar>(history.size(), gamma);
  Vector<Scalar> h = Vector<Scalar>::Zero(embeddings.cols());
  for (std::size_t j = 0; j < history.size(); ++j) h += w[j] * embeddings.row(history[j]).transpose();
  return h;
}

// Scores of the listed items only.
template <typename Derived>
Vector<typename Derived::Scalar> score_items(const Eigen::MatrixBase<Derived>& embeddings,
                                             const Vector<typename Derived::Scalar>& encoded,
                                             std::span<const ItemId> items) {
  Vector<typename Derived::Scalar> s(static_cast<Eigen::Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) s(static_cast<Eigen::Index>(i)) = embeddings.row(items[i]).dot(encoded);
  return s;
}

// Chain rule from item-score gradients back to the embedding table.
// grad_scores[i] is dL/dscore(items[i]); accumulates into grad (same shape as embeddings).
template <typename Derived, typename GradDerived>
void backprop_scores(const Eigen::MatrixBase<Derived>& embeddings, std::span<const ItemId> history,
                     double gamma, const Vector<typename Derived::Scalar>& encoded,
                     std::span<const ItemId> items,
                     const Vector<typename Derived::Scalar>& grad_scores,
                     Eigen::MatrixBase<GradDerived>& grad) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> grad_encoded = Vector<Scalar>::Zero(embeddings.cols());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Scalar g = grad_scores(static_cast<Eigen::Index>(i));
    if (g == Scalar(0)) continue;
    grad.row(items[i]) += g * encoded.transpose();
    grad_encoded += g * embeddings.row(items[i]).transpose();
  }
  const auto w = history_weights<Scalar>(history.size(), gamma);
  for (std::size_t j = 0; j < history.size(); ++j) grad.row(history[j]) += w[j] * grad_encoded.transpose();
}

}  // namespace recx
