#include "recx/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>

namespace recx {

namespace {

std::string io_error(const std::filesystem::path& path, const std::string& what) {
  return path.string() + ": " + what;
}

double standard_normal(Rng& rng) {
  // Box-Muller; avoids implementation-defined std::normal_distribution.
  double u1;
  do {
    u1 = uniform_real(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform_real(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t poisson(Rng& rng, double mean) {
  if (mean <= 0.0) return 0;
  if (mean > 60.0) {
    const double v = std::round(mean + std::sqrt(mean) * standard_normal(rng));
    return v < 0.0 ? 0 : static_cast<std::size_t>(v);
  }
  const double limit = std::exp(-mean);
  std::size_t k = 0;
  double p = uniform_real(rng);
  while (p > limit) {
    ++k;
    p *= uniform_real(rng);
  }
  return k;
}

}  // namespace

Catalog::Catalog(std::size_t item_count) {
  if (item_count < 2) throw std::invalid_argument("catalog needs at least 2 items");
  items_.resize(item_count);
  for (std::size_t i = 0; i < item_count; ++i) items_[i].id = static_cast<ItemId>(i);
}

Catalog::Catalog(std::vector<CatalogItem> items) {
  if (items.size() < 2) throw std::invalid_argument("catalog needs at least 2 items");
  items_.resize(items.size());
  std::vector<bool> seen(items.size(), false);
  for (auto& item : items) {
    if (item.id < 0 || static_cast<std::size_t>(item.id) >= items.size())
      throw DataError("catalog id " + std::to_string(item.id) + " outside 0.." +
                      std::to_string(items.size() - 1));
    if (seen[static_cast<std::size_t>(item.id)])
      throw DataError("duplicate catalog id " + std::to_string(item.id));
    seen[static_cast<std::size_t>(item.id)] = true;
    items_[static_cast<std::size_t>(item.id)] = std::move(item);
  }
}

std::string Catalog::display_name(ItemId id) const {
  const auto& item = (*this)[id];
  return item.title.empty() ? "Item " + std::to_string(id) : item.title;
}

std::vector<std::string> Catalog::categories() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& item : items_) {
    if (!item.category.empty() && seen.insert(item.category).second) out.push_back(item.category);
  }
  return out;
}

std::size_t SequenceDataset::interaction_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

Sequence SplitDataset::test_history(std::size_t user) const {
  Sequence h = train.sequences.at(user);
  h.push_back(validation_items.at(user));
  return h;
}

void validate(const SequenceDataset& data) {
  for (std::size_t u = 0; u < data.sequences.size(); ++u) {
    const auto& seq = data.sequences[u];
    if (seq.empty()) throw DataError("sequence " + std::to_string(u) + " is empty");
    for (ItemId id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= data.item_count)
        throw DataError("sequence " + std::to_string(u) + " has item id " + std::to_string(id) +
                        " outside catalog of " + std::to_string(data.item_count));
    }
  }
}

SequenceDataset load_sequences(const std::filesystem::path& path, const Catalog& catalog) {
  std::ifstream in(path);
  if (!in) throw DataError(io_error(path, "cannot open sequence file"));
  SequenceDataset data;
  data.item_count = catalog.size();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string token;
    Sequence seq;
    while (tokens >> token) {
      long long value = 0;
      const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
      if (ec != std::errc() || ptr != token.data() + token.size())
        throw DataError(io_error(path, "line " + std::to_string(line_no) + ": non-integer token '" +
                                           token + "'"));
      if (value < 0 || static_cast<unsigned long long>(value) >= catalog.size())
        throw DataError(io_error(path, "line " + std::to_string(line_no) + ": item id " +
                                           std::to_string(value) + " out of range for " +
                                           std::to_string(catalog.size()) + " items"));
      seq.push_back(static_cast<ItemId>(value));
    }
    if (!seq.empty()) data.sequences.push_back(std::move(seq));
  }
  return data;
}

void save_sequences(const SequenceDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(io_error(path, "cannot write sequence file"));
  for (const auto& seq : data.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
}

Catalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(io_error(path, "cannot open catalog file"));
  std::string line;
  std::vector<CatalogItem> items;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("id\t", 0) == 0) continue;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() > 3)
      throw DataError(io_error(path, "line " + std::to_string(line_no) + ": too many fields"));
    CatalogItem item;
    const auto& id = fields[0];
    const auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), item.id);
    if (ec != std::errc() || ptr != id.data() + id.size())
      throw DataError(io_error(path, "line " + std::to_string(line_no) + ": bad id '" + id + "'"));
    if (fields.size() > 1) item.title = fields[1];
    if (fields.size() > 2) item.category = fields[2];
    items.push_back(std::move(item));
  }
  return Catalog(std::move(items));
}

void save_catalog(const Catalog& catalog, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(io_error(path, "cannot write catalog file"));
  out << "id\ttitle\tcategory\n";
  for (const auto& item : catalog.items()) out << item.id << '\t' << item.title << '\t' << item.category << '\n';
}

SplitDataset split_leave_two(const SequenceDataset& data) {
  SplitDataset split;
  split.train.item_count = data.item_count;
  for (std::size_t u = 0; u < data.sequences.size(); ++u) {
    const auto& seq = data.sequences[u];
    if (seq.size() < 3) {
      ++split.excluded_users;
      continue;
    }
    split.train.sequences.emplace_back(seq.begin(), seq.end() - 2);
    split.validation_items.push_back(seq[seq.size() - 2]);
    split.test_items.push_back(seq.back());
    split.user_index.push_back(u);
  }
  return split;
}

void save_split(const SplitDataset& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_sequences(split.train, dir / "train.txt");
  std::ofstream out(dir / "heldout.tsv", std::ios::binary);
  if (!out) throw DataError(io_error(dir / "heldout.tsv", "cannot write"));
  out << "user\tvalidation\ttest\n";
  for (std::size_t u = 0; u < split.test_items.size(); ++u)
    out << split.user_index[u] << '\t' << split.validation_items[u] << '\t' << split.test_items[u] << '\n';
  std::ofstream meta(dir / "excluded.txt", std::ios::binary);
  meta << split.excluded_users << '\n';
}

SplitDataset load_split(const std::filesystem::path& dir, const Catalog& catalog) {
  SplitDataset split;
  split.train = load_sequences(dir / "train.txt", catalog);
  std::ifstream in(dir / "heldout.tsv");
  if (!in) throw DataError(io_error(dir / "heldout.tsv", "cannot open"));
  std::string line;
  std::getline(in, line);
  std::size_t user;
  long long val, test;
  while (in >> user >> val >> test) {
    if (val < 0 || test < 0 || static_cast<std::size_t>(val) >= catalog.size() ||
        static_cast<std::size_t>(test) >= catalog.size())
      throw DataError(io_error(dir / "heldout.tsv", "item id out of range"));
    split.user_index.push_back(user);
    split.validation_items.push_back(static_cast<ItemId>(val));
    split.test_items.push_back(static_cast<ItemId>(test));
  }
  if (split.test_items.size() != split.train.size())
    throw DataError(io_error(dir, "train and held-out user counts differ"));
  std::ifstream meta(dir / "excluded.txt");
  if (meta) meta >> split.excluded_users;
  return split;
}

std::pair<Catalog, SequenceDataset> synthesize_secret_data(const SynthesisParams& p) {
  if (p.item_count < 2) throw std::invalid_argument("synthesize_secret_data: item_count must be >= 2");
  if (p.user_count < 1) throw std::invalid_argument("synthesize_secret_data: user_count must be >= 1");
  if (!(p.mean_length > 0.0)) throw std::invalid_argument("synthesize_secret_data: mean_length must be > 0");
  if (p.latent_dim < 1) throw std::invalid_argument("synthesize_secret_data: latent_dim must be >= 1");
  if (p.item_count < 3) throw std::invalid_argument("synthesize_secret_data: need >= 3 items for length-3 users");

  const std::size_t n = p.item_count;
  const std::size_t dim = p.latent_dim;
  const std::size_t cats =
      p.category_count ? p.category_count : std::max<std::size_t>(2, std::min<std::size_t>(10, n / 10));

  Rng rng = make_rng(p.seed, 0, 0x5ec7e7);
  auto normal_matrix = [&](Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = standard_normal(rng);
    return m;
  };

  const Eigen::MatrixXd centers = normal_matrix(static_cast<Eigen::Index>(cats), static_cast<Eigen::Index>(dim));

  // Balanced but scrambled category assignment.
  std::vector<std::size_t> category(n);
  for (std::size_t i = 0; i < n; ++i) category[i] = i % cats;
  for (std::size_t i = n; i > 1; --i) std::swap(category[i - 1], category[uniform_index(rng, i)]);

  Eigen::MatrixXd items = 0.5 * normal_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) items.row(static_cast<Eigen::Index>(i)) += centers.row(static_cast<Eigen::Index>(category[i]));
  items /= std::sqrt(static_cast<double>(dim));
  Eigen::VectorXd popularity(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) popularity(static_cast<Eigen::Index>(i)) = p.popularity_spread * standard_normal(rng);

  std::vector<CatalogItem> meta(n);
  for (std::size_t i = 0; i < n; ++i) {
    meta[i].id = static_cast<ItemId>(i);
    meta[i].title = "Item " + std::to_string(i);
    meta[i].category = "Category " + std::to_string(category[i]);
  }

  SequenceDataset data;
  data.item_count = n;
  data.sequences.reserve(p.user_count);
  Eigen::VectorXd logits(static_cast<Eigen::Index>(n));
  std::vector<double> weights(n);
  for (std::size_t u = 0; u < p.user_count; ++u) {
    Rng user_rng = make_rng(p.seed, u + 1, 0x5ec7e7);
    const std::size_t pref = uniform_index(user_rng, cats);
    Eigen::VectorXd user = centers.row(static_cast<Eigen::Index>(pref)).transpose();
    for (std::size_t d = 0; d < dim; ++d) user(static_cast<Eigen::Index>(d)) += 0.5 * standard_normal(user_rng);
    user /= std::sqrt(static_cast<double>(dim));

    std::size_t length = 3 + poisson(user_rng, p.mean_length - 3.0);
    length = std::min(length, n);

    const Eigen::VectorXd affinity = items * user;
    Sequence seq;
    seq.reserve(length);
    std::vector<bool> used(n, false);
    for (std::size_t t = 0; t < length; ++t) {
      if (seq.empty()) {
        logits = affinity;
      } else {
        const Eigen::VectorXd transition = items * items.row(seq.back()).transpose();
        logits = (1.0 - p.recency) * affinity + p.recency * transition;
      }
      logits = p.sharpness * logits + popularity;
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i]) max_logit = std::max(max_logit, logits(static_cast<Eigen::Index>(i)));
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        weights[i] = used[i] ? 0.0 : std::exp(logits(static_cast<Eigen::Index>(i)) - max_logit);
        total += weights[i];
      }
      double r = uniform_real(user_rng) * total;
      std::size_t pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (weights[i] == 0.0) continue;
        pick = i;
        r -= weights[i];
        if (r < 0.0) break;
      }
      used[pick] = true;
      seq.push_back(static_cast<ItemId>(pick));
    }
    data.sequences.push_back(std::move(seq));
  }
  return {Catalog(std::move(meta)), std::move(data)};
}

}  // namespace recx
