#include "recx/recsys.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "recx/optim.hpp"

namespace recx {

namespace {

constexpr std::array<char, 4> kScoreMagic{'R', 'X', 'S', 'M'};
constexpr std::array<char, 4> kMarkovMagic{'R', 'X', 'M', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a(std::span<const ItemId> items, std::uint64_t k) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  mix(k);
  for (ItemId id : items) mix(static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)));
  return h;
}

void check_history(std::span<const ItemId> history, std::size_t item_count) {
  if (history.empty()) throw std::invalid_argument("score_all: empty history");
  for (ItemId id : history)
    if (id < 0 || static_cast<std::size_t>(id) >= item_count)
      throw std::invalid_argument("score_all: item id " + std::to_string(id) + " outside catalog");
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint");
  return v;
}

std::array<char, 4> read_magic(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in) throw DataError("checkpoint too short");
  return magic;
}

void expect_version(std::istream& in) {
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
}

ScoreModel read_score_body(std::istream& in) {
  expect_version(in);
  const auto rows = read_pod<std::uint64_t>(in);
  const auto cols = read_pod<std::uint64_t>(in);
  const auto gamma = read_pod<double>(in);
  EmbeddingMatrix<double> e(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(e.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint");
  return ScoreModel(std::move(e), gamma);
}

}  // namespace

MarkovModel load_markov(std::istream& in);

void validate(const TopKList& list, std::size_t item_count) {
  std::unordered_set<ItemId> seen;
  for (ItemId id : list.items) {
    if (id < 0 || static_cast<std::size_t>(id) >= item_count)
      throw std::invalid_argument("top-k list has id " + std::to_string(id) + " outside catalog");
    if (!seen.insert(id).second) throw std::invalid_argument("top-k list repeats id " + std::to_string(id));
  }
}

MarkovModel::MarkovModel(std::size_t item_count, double alpha)
    : alpha_(alpha),
      transitions_(static_cast<Eigen::Index>(item_count), static_cast<Eigen::Index>(item_count)),
      popularity_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(item_count))) {
  if (alpha < 0.0) throw std::invalid_argument("markov smoothing alpha must be >= 0");
}

Eigen::VectorXd MarkovModel::score_all(std::span<const ItemId> history) const {
  check_history(history, item_count());
  Eigen::VectorXd scores = alpha_ * popularity_;
  for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(transitions_, history.back()); it; ++it)
    scores(it.col()) += it.value();
  return scores;
}

MarkovModel train_markov_target(const SequenceDataset& data, double alpha) {
  if (data.empty()) throw std::invalid_argument("train_markov_target: empty dataset");
  validate(data);
  MarkovModel model(data.item_count, alpha);
  std::vector<Eigen::Triplet<double>> triplets;
  for (const auto& seq : data.sequences) {
    for (std::size_t t = 0; t < seq.size(); ++t) {
      model.popularity_(seq[t]) += 1.0;
      if (t + 1 < seq.size()) triplets.emplace_back(seq[t], seq[t + 1], 1.0);
    }
  }
  model.transitions_.setFromTriplets(triplets.begin(), triplets.end());
  return model;
}

ScoreModel::ScoreModel(EmbeddingMatrix<double> embeddings, double gamma)
    : embeddings_(std::move(embeddings)), gamma_(gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("ScoreModel: gamma must be in (0, 1]");
  if (embeddings_.cols() < 1) throw std::invalid_argument("ScoreModel: dim must be >= 1");
  if (embeddings_.rows() < 1) throw std::invalid_argument("ScoreModel: empty item table");
}

Eigen::VectorXd ScoreModel::score_all(std::span<const ItemId> history) const {
  check_history(history, item_count());
  return embeddings_ * encode_history(embeddings_, history, gamma_);
}

ScoreModel init_score_model(std::size_t item_count, std::size_t dim, double gamma, std::uint64_t seed) {
  if (dim < 1) throw std::invalid_argument("init_score_model: dim must be >= 1");
  if (item_count < 1) throw std::invalid_argument("init_score_model: item_count must be >= 1");
  Rng rng = make_rng(seed, 0, 0x1417);
  const double bound = 0.1 / std::sqrt(static_cast<double>(dim));
  EmbeddingMatrix<double> e(static_cast<Eigen::Index>(item_count), static_cast<Eigen::Index>(dim));
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) e(r, c) = bound * (2.0 * uniform_real(rng) - 1.0);
  return ScoreModel(std::move(e), gamma);
}

std::size_t DefenseConfig::replaced_count(std::size_t k) const {
  if (!enabled) return 0;
  // The epsilon guards products such as 0.3 * 10 landing just under an integer.
  return static_cast<std::size_t>(std::floor(replace_fraction * static_cast<double>(k) + 1e-9));
}

TopKList top_k_of(const Eigen::VectorXd& scores, std::size_t k) {
  const auto n = static_cast<std::size_t>(scores.size());
  if (k < 1 || k > n) throw std::invalid_argument("top-k: k=" + std::to_string(k) + " outside 1.." + std::to_string(n));
  std::vector<ItemId> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto better = [&scores](ItemId a, ItemId b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  order.resize(k);
  return TopKList{std::move(order)};
}

void apply_defense(TopKList& list, std::size_t item_count, std::span<const ItemId> history,
                   const DefenseConfig& defense) {
  const std::size_t k = list.k();
  std::size_t replace = defense.replaced_count(k);
  if (replace == 0) return;
  if (defense.replace_fraction < 0.0 || defense.replace_fraction >= 1.0)
    throw std::invalid_argument("defense replace_fraction must be in [0, 1)");
  Rng rng = make_rng(defense.seed, fnv1a(history, k), 0xdefe);

  std::vector<bool> listed(item_count, false);
  for (ItemId id : list.items) listed[static_cast<std::size_t>(id)] = true;
  std::vector<ItemId> outside;
  outside.reserve(item_count - k);
  for (std::size_t i = 0; i < item_count; ++i)
    if (!listed[i]) outside.push_back(static_cast<ItemId>(i));
  replace = std::min(replace, outside.size());

  std::vector<std::size_t> positions(k);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  for (std::size_t r = 0; r < replace; ++r) {
    std::swap(positions[r], positions[r + uniform_index(rng, k - r)]);
    const std::size_t pick = r + uniform_index(rng, outside.size() - r);
    std::swap(outside[r], outside[pick]);
    list.items[positions[r]] = outside[r];
  }
}

TopKList query_topk(const Recommender& model, std::span<const ItemId> history, std::size_t k,
                    const DefenseConfig& defense) {
  const std::size_t n = model.item_count();
  if (k < 1 || k > n) throw std::invalid_argument("query_topk: k=" + std::to_string(k) + " outside 1.." + std::to_string(n));
  TopKList list = top_k_of(model.score_all(history), k);
  apply_defense(list, n, history, defense);
  return list;
}

PretrainResult pretrain_target(ScoreModel model, const SequenceDataset& data, const PretrainConfig& config) {
  if (data.empty()) throw std::invalid_argument("pretrain_target: empty dataset");
  validate(data);
  if (data.item_count != model.item_count())
    throw std::invalid_argument("pretrain_target: dataset and model catalog sizes differ");
  if (data.item_count < 2) throw std::invalid_argument("pretrain_target: need >= 2 items for negatives");

  struct Pair {
    std::uint32_t user;
    std::uint32_t position;  // index of the positive; prefix is [0, position)
  };
  std::vector<Pair> pairs;
  for (std::size_t u = 0; u < data.sequences.size(); ++u)
    for (std::size_t t = 1; t < data.sequences[u].size(); ++t)
      pairs.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(t)});

  PretrainResult result{std::move(model), {}};
  if (pairs.empty() || config.epochs == 0) return result;

  auto& emb = result.model.embeddings();
  const double gamma = result.model.gamma();
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.weight_decay = config.weight_decay;
  AdamW<double> optimizer(emb.rows(), emb.cols(), adam);
  EmbeddingMatrix<double> grad = EmbeddingMatrix<double>::Zero(emb.rows(), emb.cols());

  Rng rng = make_rng(config.seed, 0, 0xb9);
  const std::size_t negs = std::max<std::size_t>(1, config.negatives_per_positive);
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  std::vector<ItemId> items(negs + 1);
  Vector<double> grad_scores(static_cast<Eigen::Index>(negs + 1));

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < pairs.size(); start += batch) {
      const std::size_t end = std::min(pairs.size(), start + batch);
      grad.setZero();
      for (std::size_t p = start; p < end; ++p) {
        const auto& seq = data.sequences[pairs[p].user];
        const std::span<const ItemId> prefix(seq.data(), pairs[p].position);
        const ItemId pos = seq[pairs[p].position];
        items[0] = pos;
        for (std::size_t j = 1; j <= negs; ++j) {
          auto neg = static_cast<ItemId>(uniform_index(rng, data.item_count - 1));
          if (neg >= pos) ++neg;
          items[j] = neg;
        }
        const auto h = encode_history(emb, prefix, gamma);
        const auto s = score_items(emb, h, items);
        grad_scores.setZero();
        for (std::size_t j = 1; j <= negs; ++j) {
          const double diff = s(static_cast<Eigen::Index>(j)) - s(0);
          // softplus(d) and its derivative sigmoid(d), both stable for large |d|.
          epoch_loss += (diff > 0 ? diff + std::log1p(std::exp(-diff)) : std::log1p(std::exp(diff))) / static_cast<double>(negs);
          const double sig = 1.0 / (1.0 + std::exp(-diff));
          grad_scores(static_cast<Eigen::Index>(j)) += sig / static_cast<double>(negs);
          grad_scores(0) -= sig / static_cast<double>(negs);
        }
        backprop_scores(emb, prefix, gamma, h, items, grad_scores, grad);
      }
      grad /= static_cast<double>(end - start);
      optimizer.step(emb, grad);
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(pairs.size()));
  }
  return result;
}

void save_model(const ScoreModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write checkpoint");
  out.write(kScoreMagic.data(), 4);
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(model.embeddings().rows()));
  write_pod(out, static_cast<std::uint64_t>(model.embeddings().cols()));
  write_pod(out, model.gamma());
  out.write(reinterpret_cast<const char*>(model.embeddings().data()),
            static_cast<std::streamsize>(model.embeddings().size() * sizeof(double)));
}

void save_model(const MarkovModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot write checkpoint");
  out.write(kMarkovMagic.data(), 4);
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(model.item_count()));
  write_pod(out, model.alpha());
  out.write(reinterpret_cast<const char*>(model.popularity().data()),
            static_cast<std::streamsize>(model.popularity().size() * sizeof(double)));
  const auto& t = model.transitions();
  write_pod(out, static_cast<std::uint64_t>(t.nonZeros()));
  for (Eigen::Index r = 0; r < t.outerSize(); ++r) {
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(t, r); it; ++it) {
      write_pod(out, static_cast<std::int32_t>(it.row()));
      write_pod(out, static_cast<std::int32_t>(it.col()));
      write_pod(out, it.value());
    }
  }
}

MarkovModel load_markov(std::istream& in) {
  expect_version(in);
  const auto n = read_pod<std::uint64_t>(in);
  const auto alpha = read_pod<double>(in);
  MarkovModel model(n, alpha);
  in.read(reinterpret_cast<char*>(model.popularity_.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint");
  const auto nnz = read_pod<std::uint64_t>(in);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(nnz);
  for (std::uint64_t i = 0; i < nnz; ++i) {
    const auto r = read_pod<std::int32_t>(in);
    const auto c = read_pod<std::int32_t>(in);
    const auto v = read_pod<double>(in);
    if (r < 0 || c < 0 || static_cast<std::uint64_t>(r) >= n || static_cast<std::uint64_t>(c) >= n)
      throw DataError("checkpoint transition index out of range");
    triplets.emplace_back(r, c, v);
  }
  model.transitions_.setFromTriplets(triplets.begin(), triplets.end());
  return model;
}

ScoreModel load_score_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  if (read_magic(in) != kScoreMagic) throw DataError(path.string() + ": not a score-model checkpoint");
  return read_score_body(in);
}

MarkovModel load_markov_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  if (read_magic(in) != kMarkovMagic) throw DataError(path.string() + ": not a markov checkpoint");
  return load_markov(in);
}

std::unique_ptr<Recommender> load_recommender(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  const auto magic = read_magic(in);
  if (magic == kScoreMagic) return std::make_unique<ScoreModel>(read_score_body(in));
  if (magic == kMarkovMagic) return std::make_unique<MarkovModel>(load_markov(in));
  throw DataError(path.string() + ": unknown checkpoint format");
}

}  // namespace recx
