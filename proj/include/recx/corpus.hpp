#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "recx/types.hpp"

namespace recx {

struct CatalogItem {
  ItemId id = 0;
  std::string title;
  std::string category;
  bool operator==(const CatalogItem&) const = default;
};

// The item space. Ids are dense and cover exactly 0..size()-1.
class Catalog {
 public:
  Catalog() = default;
  // Anonymous catalog with no metadata.
  explicit Catalog(std::size_t item_count);
  // Items may arrive in any order but must cover 0..n-1 exactly once.
  explicit Catalog(std::vector<CatalogItem> items);

  std::size_t size() const { return items_.size(); }
  bool contains(ItemId id) const { return id >= 0 && static_cast<std::size_t>(id) < items_.size(); }
  const CatalogItem& operator[](ItemId id) const { return items_.at(static_cast<std::size_t>(id)); }
  const std::vector<CatalogItem>& items() const { return items_; }

  // Title when present, otherwise "Item <id>".
  std::string display_name(ItemId id) const;
  const std::string& category(ItemId id) const { return (*this)[id].category; }

  // Distinct non-empty category names in first-seen order.
  std::vector<std::string> categories() const;

  bool operator==(const Catalog&) const = default;

 private:
  std::vector<CatalogItem> items_;
};

struct SequenceDataset {
  std::vector<Sequence> sequences;
  std::size_t item_count = 0;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }
  std::size_t interaction_count() const;
  bool operator==(const SequenceDataset&) const = default;
};

// Leave-last-two split. Users shorter than three items are dropped and counted.
struct SplitDataset {
  SequenceDataset train;
  std::vector<ItemId> validation_items;
  std::vector<ItemId> test_items;
  std::vector<std::size_t> user_index;  // position of each kept user in the source dataset
  std::size_t excluded_users = 0;

  std::size_t user_count() const { return test_items.size(); }
  // Train sequence plus validation item: the history seen before the test item.
  Sequence test_history(std::size_t user) const;
};

// Throws DataError if any id is outside the catalog or a sequence is empty.
void validate(const SequenceDataset& data);

SequenceDataset load_sequences(const std::filesystem::path& path, const Catalog& catalog);
void save_sequences(const SequenceDataset& data, const std::filesystem::path& path);

// Tab-delimited: header "id\ttitle\tcategory", one row per item.
Catalog load_catalog(const std::filesystem::path& path);
void save_catalog(const Catalog& catalog, const std::filesystem::path& path);

SplitDataset split_leave_two(const SequenceDataset& data);
void save_split(const SplitDataset& split, const std::filesystem::path& dir);
SplitDataset load_split(const std::filesystem::path& dir, const Catalog& catalog);

struct SynthesisParams {
  std::size_t item_count = 200;
  std::size_t user_count = 1000;
  double mean_length = 10.0;
  std::size_t latent_dim = 8;
  std::uint64_t seed = 0;
  // 0 selects max(2, min(10, item_count / 10)).
  std::size_t category_count = 0;
  // Inverse temperature of the per-step softmax; higher means sparser, more predictable data.
  double sharpness = 3.0;
  // Weight of the last consumed item against the user vector in the step logits.
  double recency = 0.5;
  // Std-dev of per-item popularity offsets.
  double popularity_spread = 0.5;
};

// Latent-factor user/item model with a recency-weighted transition blend.
// Users never repeat an item. A pure function of params.
std::pair<Catalog, SequenceDataset> synthesize_secret_data(const SynthesisParams& params);

}  // namespace recx
