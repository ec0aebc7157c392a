#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "medvqa/image.hpp"

namespace medvqa {

enum class Category { modality, plane, organ, abnormality };

inline constexpr std::array<Category, 4> kCategories = {Category::modality, Category::plane, Category::organ,
                                                        Category::abnormality};

std::string_view category_name(Category c);
// Accepts the canonical lower-case names; throws ConfigError otherwise.
Category parse_category(std::string_view name);
// Maps a record file name such as "C2_Plane_train.txt" to its category.
std::optional<Category> category_from_filename(std::string_view filename);

// One (image, question, answer, category) record. Samples that share an
// image_id share the raster.
struct VqaSample {
  std::string image_id;
  std::shared_ptr<const Image> image;
  std::string question;
  std::string answer;
  Category category = Category::modality;
};

struct LoadOptions {
  // Resize every image to image_size x image_size; 0 keeps the stored size.
  int image_size = 0;
  bool load_images = true;
};

// Reads per-category `image_id|question|answer` files from root_dir (or its
// QAPairsByCategory/ subfolder when present) and the matching images from its
// image folder ("images/" or any "*images" folder).
std::vector<VqaSample> load_vqamed(const std::filesystem::path& root_dir, const LoadOptions& options = {});

// Writes samples in the same layout load_vqamed reads: one record file per
// category and PNG images under images/.
void write_vqamed(const std::filesystem::path& root_dir, std::span<const VqaSample> samples);

// Exact-match `raw|canonical` table applied after normalisation.
class SynonymTable {
 public:
  SynonymTable() = default;
  static SynonymTable from_pairs(std::span<const std::pair<std::string, std::string>> pairs);
  static SynonymTable load(const std::filesystem::path& path);

  // Input must already be normalised.
  std::optional<std::string> lookup(std::string_view normalized) const;
  bool empty() const { return table_.empty(); }
  size_t size() const { return table_.size(); }

 private:
  std::unordered_map<std::string, std::string> table_;
};

std::string normalize_answer(std::string_view raw, const SynonymTable* synonyms = nullptr);

// Lower-cased words; ASCII punctuation and whitespace separate tokens and are
// dropped. Bytes outside ASCII are kept as word characters.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::int64_t pad_id = 0;
  static constexpr std::int64_t unk_id = 1;
  static constexpr std::string_view pad_token = "<pad>";
  static constexpr std::string_view unk_token = "<unk>";

  Vocabulary();
  // Tokens listed in id order starting at id 2.
  static Vocabulary from_tokens(std::span<const std::string> tokens);

  std::int64_t id(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  bool contains(std::string_view token) const;
  std::vector<std::int64_t> encode(std::string_view text) const;
  std::vector<std::string> decode(std::span<const std::int64_t> ids) const;

  // Includes PAD and UNK.
  size_t size() const { return id_to_token_.size(); }
  // Non-special tokens in id order.
  std::vector<std::string> regular_tokens() const;

 private:
  std::unordered_map<std::string, std::int64_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Tokens with frequency >= min_freq over all questions, ordered by
// descending frequency then lexicographically.
Vocabulary build_vocabulary(std::span<const VqaSample> samples, int min_freq = 1);
Vocabulary build_vocabulary(std::span<const std::string> questions, int min_freq = 1);

class AnswerClassMap {
 public:
  AnswerClassMap() = default;
  static AnswerClassMap from_lists(std::vector<std::string> answers, std::vector<std::int64_t> frequencies);

  std::optional<std::int64_t> class_of(std::string_view normalized_answer) const;
  const std::string& answer(std::int64_t class_id) const;
  std::int64_t frequency(std::int64_t class_id) const;
  size_t size() const { return class_to_answer_.size(); }
  const std::vector<std::string>& answers() const { return class_to_answer_; }
  const std::vector<std::int64_t>& frequencies() const { return frequency_; }

 private:
  std::unordered_map<std::string, std::int64_t> answer_to_class_;
  std::vector<std::string> class_to_answer_;
  std::vector<std::int64_t> frequency_;
};

// Classes over distinct normalised answers, by descending frequency then
// lexicographic order.
AnswerClassMap build_answer_classes(std::span<const VqaSample> samples, const SynonymTable* synonyms = nullptr);
AnswerClassMap build_answer_classes(std::span<const std::string> answers, const SynonymTable* synonyms = nullptr);

// Which category "owns" each normalised answer: the category in which it
// occurs most often (ties resolved in category order).
std::map<std::string, Category> answer_categories(std::span<const VqaSample> samples,
                                                  const SynonymTable* synonyms = nullptr);

inline constexpr std::string_view kOtherBucket = "<other>";

struct PrefixNode {
  std::string word;
  double fraction = 0.0;  // of all questions
  std::vector<PrefixNode> children;
};

struct PrefixTree {
  PrefixNode root;  // root.fraction == 1 when any question exists
  int depth = 4;
  double prune = 0.02;

  int height() const;
};

// Distribution of the first `depth` question words. Children whose fraction
// is below `prune` are merged into a single kOtherBucket leaf.
PrefixTree question_prefix_distribution(std::span<const std::string> questions, int depth = 4, double prune = 0.02);
PrefixTree question_prefix_distribution(std::span<const VqaSample> samples, int depth = 4, double prune = 0.02);

struct AnswerLengthStats {
  size_t total = 0;
  std::map<int, size_t> counts;       // words -> answers
  std::map<int, double> fractions;    // words -> fraction
  std::map<int, double> cumulative;   // words -> fraction with length <= words
  double fraction_one_word = 0.0;
  double fraction_one_to_three = 0.0;
};

AnswerLengthStats answer_length_stats(std::span<const std::string> answers);
AnswerLengthStats answer_length_stats(std::span<const VqaSample> samples);

struct Fold {
  std::vector<size_t> train;  // sample indices, ascending
  std::vector<size_t> test;
};

// Repeated seeded random splits grouped by image_id. Each fold is an
// independent train_frac / (1 - train_frac) split of the distinct images.
std::vector<Fold> split_cv(std::span<const VqaSample> samples, int folds = 5, double train_frac = 0.8,
                           std::uint64_t seed = 0);

template <typename T>
std::vector<T> select(std::span<const T> items, std::span<const size_t> indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (size_t i : indices) out.push_back(items[i]);
  return out;
}

}  // namespace medvqa
