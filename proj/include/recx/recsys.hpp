#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "recx/corpus.hpp"
#include "recx/embedding.hpp"
#include "recx/types.hpp"

namespace recx {

// Ranked recommendation list, rank 1 first. Items are distinct.
struct TopKList {
  std::vector<ItemId> items;

  std::size_t k() const { return items.size(); }
  bool operator==(const TopKList&) const = default;
};

// Throws std::invalid_argument if the list has duplicates or ids outside [0, item_count).
void validate(const TopKList& list, std::size_t item_count);

// Black-box scoring interface shared by targets and surrogates.
class Recommender {
 public:
  virtual ~Recommender() = default;
  virtual std::size_t item_count() const = 0;
  // Unnormalized next-item scores over the full catalog.
  virtual Eigen::VectorXd score_all(std::span<const ItemId> history) const = 0;
};

// First-order transition counts with popularity smoothing:
//   score(i | x) = count(last(x) -> i) + alpha * pop(i)
class MarkovModel final : public Recommender {
 public:
  MarkovModel(std::size_t item_count, double alpha);

  std::size_t item_count() const override { return static_cast<std::size_t>(popularity_.size()); }
  Eigen::VectorXd score_all(std::span<const ItemId> history) const override;

  double alpha() const { return alpha_; }
  double transition_count(ItemId from, ItemId to) const { return transitions_.coeff(from, to); }
  const Eigen::VectorXd& popularity() const { return popularity_; }
  const Eigen::SparseMatrix<double, Eigen::RowMajor>& transitions() const { return transitions_; }

  friend MarkovModel train_markov_target(const SequenceDataset& data, double alpha);
  friend MarkovModel load_markov(std::istream& in);

 private:
  double alpha_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> transitions_;
  Eigen::VectorXd popularity_;
};

MarkovModel train_markov_target(const SequenceDataset& data, double alpha);

// Item-embedding scorer with an exponentially decayed history average.
class ScoreModel final : public Recommender {
 public:
  ScoreModel(EmbeddingMatrix<double> embeddings, double gamma);

  std::size_t item_count() const override { return static_cast<std::size_t>(embeddings_.rows()); }
  Eigen::VectorXd score_all(std::span<const ItemId> history) const override;

  std::size_t dim() const { return static_cast<std::size_t>(embeddings_.cols()); }
  double gamma() const { return gamma_; }
  const EmbeddingMatrix<double>& embeddings() const { return embeddings_; }
  EmbeddingMatrix<double>& embeddings() { return embeddings_; }

  bool operator==(const ScoreModel& other) const {
    return gamma_ == other.gamma_ && embeddings_.rows() == other.embeddings_.rows() &&
           embeddings_.cols() == other.embeddings_.cols() && embeddings_ == other.embeddings_;
  }

 private:
  EmbeddingMatrix<double> embeddings_;
  double gamma_;
};

// Entries i.i.d. uniform in [-0.1/sqrt(d), 0.1/sqrt(d)].
ScoreModel init_score_model(std::size_t item_count, std::size_t dim, double gamma, std::uint64_t seed);

// Random-replacement defense applied to every returned list.
struct DefenseConfig {
  bool enabled = false;
  double replace_fraction = 0.1;
  std::uint64_t seed = 0;

  std::size_t replaced_count(std::size_t k) const;
};

// Top-k by descending score, ties by ascending id. History items are not filtered.
// With the defense on, floor(p*k) uniformly chosen positions get items drawn from
// outside the original list; the draw is seeded by (defense seed, x, k) so the
// response is a pure function of the query.
TopKList query_topk(const Recommender& model, std::span<const ItemId> history, std::size_t k,
                    const DefenseConfig& defense = {});

// Ranking of a precomputed score vector (no defense).
TopKList top_k_of(const Eigen::VectorXd& scores, std::size_t k);

// Replaces positions of an undefended list in place.
void apply_defense(TopKList& list, std::size_t item_count, std::span<const ItemId> history,
                   const DefenseConfig& defense);

struct PretrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 0.01;
  std::size_t negatives_per_positive = 4;
  std::size_t batch_size = 128;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ScoreModel model;
  std::vector<double> loss_trace;  // mean pair loss per epoch
};

// Pairwise training on every (prefix, next item) pair:
//   loss = softplus(s_neg - s_pos) per sampled negative.
PretrainResult pretrain_target(ScoreModel model, const SequenceDataset& data, const PretrainConfig& config);

// Binary checkpoints with a magic/version header; parameters round-trip bit-exact.
void save_model(const ScoreModel& model, const std::filesystem::path& path);
void save_model(const MarkovModel& model, const std::filesystem::path& path);
ScoreModel load_score_model(const std::filesystem::path& path);
MarkovModel load_markov_model(const std::filesystem::path& path);
// Sniffs the header and returns whichever model the file holds.
std::unique_ptr<Recommender> load_recommender(const std::filesystem::path& path);

}  // namespace recx
