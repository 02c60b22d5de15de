#include "recx/distill.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "recx/optim.hpp"

namespace recx {

std::vector<ItemId> sample_negatives(std::size_t item_count, const TopKList& list, std::size_t n_neg, Rng& rng) {
  if (item_count <= list.k())
    throw std::invalid_argument("sample_negatives: need more items than the list length");
  std::vector<bool> listed(item_count, false);
  for (ItemId id : list.items) listed[static_cast<std::size_t>(id)] = true;
  std::vector<ItemId> pool;
  pool.reserve(item_count - list.k());
  for (std::size_t i = 0; i < item_count; ++i)
    if (!listed[i]) pool.push_back(static_cast<ItemId>(i));
  n_neg = std::min(n_neg, pool.size());
  for (std::size_t i = 0; i < n_neg; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  pool.resize(n_neg);
  return pool;
}

double validation_ndcg(const TopKList& surrogate, const TopKList& target) {
  if (surrogate.k() != target.k()) throw std::invalid_argument("validation_ndcg: list lengths differ");
  if (target.k() == 0) throw std::invalid_argument("validation_ndcg: empty lists");
  std::unordered_set<ItemId> relevant(target.items.begin(), target.items.end());
  double dcg = 0.0;
  double ideal = 0.0;
  for (std::size_t r = 0; r < surrogate.k(); ++r) {
    const double discount = 1.0 / std::log2(static_cast<double>(r) + 2.0);
    ideal += discount;
    if (relevant.count(surrogate.items[r])) dcg += discount;
  }
  return dcg / ideal;
}

TrainedSurrogate train_surrogate(const SurrogateDataset& data, ScoreModel init, const DistillConfig& config) {
  if (data.pairs.empty()) throw std::invalid_argument("train_surrogate: empty surrogate dataset");
  if (init.item_count() != data.item_count)
    throw std::invalid_argument("train_surrogate: model and dataset catalog sizes differ");
  if (config.margin_order < 0.0 || config.margin_negative < 0.0)
    throw std::invalid_argument("train_surrogate: margins must be >= 0");
  for (const auto& p : data.pairs)
    if (p.response.k() < 2) throw std::invalid_argument("train_surrogate: response lists need k >= 2");

  TrainedSurrogate result{std::move(init), {}, {}, 0};
  if (config.epochs == 0) return result;

  const std::size_t item_count = data.item_count;
  Rng rng = make_rng(config.seed, 0, 0xd157);

  std::vector<std::size_t> order(data.pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::size_t n_val = 0;
  if (order.size() >= 2 && config.validation_fraction > 0.0)
    n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(order.size()))), 1,
        order.size() - 1);
  std::vector<std::size_t> validation(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (validation.empty()) validation = train;

  auto& emb = result.model.embeddings();
  const double gamma = result.model.gamma();
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.weight_decay = config.weight_decay;
  adam.warmup_steps = config.warmup_steps;
  AdamW<double> optimizer(emb.rows(), emb.cols(), adam);
  EmbeddingMatrix<double> grad = EmbeddingMatrix<double>::Zero(emb.rows(), emb.cols());
  EmbeddingMatrix<double> best = emb;
  double best_ndcg = -std::numeric_limits<double>::infinity();
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train.size(); start += batch) {
      const std::size_t end = std::min(train.size(), start + batch);
      grad.setZero();
      for (std::size_t b = start; b < end; ++b) {
        const auto& pair = data.pairs[train[b]];
        const std::size_t k = pair.response.k();
        std::vector<ItemId> negatives;
        if (item_count > k) {
          const std::size_t want = config.negatives_per_pair ? config.negatives_per_pair : k;
          negatives = sample_negatives(item_count, pair.response, want, rng);
        }
        epoch_loss += distill_accumulate(emb, pair.sequence, gamma, pair.response.items, negatives,
                                         config.margin_order, config.margin_negative, grad);
      }
      grad /= static_cast<double>(end - start);
      optimizer.step(emb, grad);
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(train.size()));

    double ndcg = 0.0;
    for (std::size_t idx : validation) {
      const auto& pair = data.pairs[idx];
      ndcg += validation_ndcg(top_k_of(result.model.score_all(pair.sequence), pair.response.k()), pair.response);
    }
    ndcg /= static_cast<double>(validation.size());
    result.validation_ndcg_trace.push_back(ndcg);
    if (ndcg > best_ndcg) {
      best_ndcg = ndcg;
      best = emb;
      result.best_epoch = epoch + 1;
    }
  }
  if (config.keep_best) emb = best;
  else result.best_epoch = config.epochs;
  return result;
}

void save_training_trace(const TrainedSurrogate& trained, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write trace");
  out.precision(17);
  out << "epoch,loss,val_ndcg\n";
  for (std::size_t e = 0; e < trained.loss_trace.size(); ++e)
    out << e + 1 << ',' << trained.loss_trace[e] << ',' << trained.validation_ndcg_trace[e] << '\n';
}

}  // namespace recx
