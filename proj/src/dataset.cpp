#include "medvqa/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "medvqa/error.hpp"
#include "text_util.hpp"

namespace fs = std::filesystem;

namespace medvqa {

std::string_view category_name(Category c) {
  switch (c) {
    case Category::modality: return "modality";
    case Category::plane: return "plane";
    case Category::organ: return "organ";
    case Category::abnormality: return "abnormality";
  }
  return "unknown";
}

Category parse_category(std::string_view name) {
  std::string lower = text::to_lower(name);
  for (Category c : kCategories) {
    if (lower == category_name(c)) return c;
  }
  throw ConfigError("unknown question category '" + std::string(name) + "'");
}

std::optional<Category> category_from_filename(std::string_view filename) {
  std::string lower = text::to_lower(filename);
  // abnormality first: it is the only name that could overlap with free text
  for (Category c : {Category::abnormality, Category::modality, Category::plane, Category::organ}) {
    if (lower.find(category_name(c)) != std::string::npos) return c;
  }
  return std::nullopt;
}

namespace {

fs::path find_image_dir(const fs::path& root) {
  if (fs::is_directory(root / "images")) return root / "images";
  std::vector<fs::path> candidates;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    std::string name = text::to_lower(entry.path().filename().string());
    if (name.size() >= 6 && name.ends_with("images")) candidates.push_back(entry.path());
  }
  std::sort(candidates.begin(), candidates.end());
  return candidates.empty() ? fs::path{} : candidates.front();
}

std::unordered_map<std::string, fs::path> index_images(const fs::path& dir) {
  static const std::set<std::string> extensions = {".png", ".jpg", ".jpeg"};
  std::unordered_map<std::string, fs::path> index;
  if (dir.empty()) return index;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && extensions.count(text::to_lower(entry.path().extension().string()))) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) index.emplace(f.stem().string(), f);
  return index;
}

}  // namespace

std::vector<VqaSample> load_vqamed(const fs::path& root_dir, const LoadOptions& options) {
  if (!fs::is_directory(root_dir)) {
    throw DataError("dataset directory does not exist: " + root_dir.string());
  }
  // Release copies keep the per-category files in QAPairsByCategory/ next to
  // an uncategorised All_QA_Pairs file.
  const fs::path record_dir = fs::is_directory(root_dir / "QAPairsByCategory") ? root_dir / "QAPairsByCategory" : root_dir;
  std::vector<fs::path> record_files;
  for (const auto& entry : fs::directory_iterator(record_dir)) {
    if (entry.is_regular_file() && text::to_lower(entry.path().extension().string()) == ".txt") {
      record_files.push_back(entry.path());
    }
  }
  std::sort(record_files.begin(), record_files.end());

  std::vector<VqaSample> samples;
  for (const auto& file : record_files) {
    auto category = category_from_filename(file.filename().string());
    if (!category) {
      throw ConfigError("cannot infer question category from file name " + file.string());
    }
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (text::trim(line).empty()) continue;
      auto fields = text::split(line, '|');
      if (fields.size() != 3) {
        throw ParseError(file.string() + ":" + std::to_string(line_no) + ": expected 3 '|'-separated fields, got " +
                         std::to_string(fields.size()));
      }
      VqaSample s;
      s.image_id = std::string(text::trim(fields[0]));
      s.question = std::string(text::trim(fields[1]));
      s.answer = std::string(text::trim(fields[2]));
      s.category = *category;
      if (s.image_id.empty()) {
        throw ParseError(file.string() + ":" + std::to_string(line_no) + ": empty image id");
      }
      if (s.question.empty()) {
        throw ParseError(file.string() + ":" + std::to_string(line_no) + ": empty question");
      }
      samples.push_back(std::move(s));
    }
  }
  if (!options.load_images || samples.empty()) return samples;

  auto index = index_images(find_image_dir(root_dir));
  std::vector<std::string> missing;
  std::set<std::string> seen_missing;
  for (const auto& s : samples) {
    if (!index.count(s.image_id) && seen_missing.insert(s.image_id).second) missing.push_back(s.image_id);
  }
  if (!missing.empty()) {
    std::string msg = "missing image files for " + std::to_string(missing.size()) + " image id(s): ";
    for (size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : "") + missing[i];
    throw DataError(msg);
  }

  std::unordered_map<std::string, std::shared_ptr<const Image>> cache;
  for (auto& s : samples) {
    auto it = cache.find(s.image_id);
    if (it == cache.end()) {
      Image img = load_image(index.at(s.image_id));
      if (options.image_size > 0) img = resize_image(img, options.image_size, options.image_size);
      it = cache.emplace(s.image_id, std::make_shared<const Image>(std::move(img))).first;
    }
    s.image = it->second;
  }
  return samples;
}

void write_vqamed(const fs::path& root_dir, std::span<const VqaSample> samples) {
  fs::create_directories(root_dir / "images");
  std::map<Category, std::ofstream> files;
  for (Category c : kCategories) {
    auto path = root_dir / (std::string(category_name(c)) + ".txt");
    files[c].open(path, std::ios::binary | std::ios::trunc);
    if (!files[c]) throw DataError("cannot write " + path.string());
  }
  std::set<std::string> written;
  for (const auto& s : samples) {
    for (const std::string* field : {&s.image_id, &s.question, &s.answer}) {
      if (field->find_first_of("|\n\r") != std::string::npos) {
        throw DataError("field contains a record separator: " + *field);
      }
    }
    files[s.category] << s.image_id << '|' << s.question << '|' << s.answer << '\n';
    if (s.image && written.insert(s.image_id).second) {
      save_png(*s.image, root_dir / "images" / (s.image_id + ".png"));
    }
  }
}

SynonymTable SynonymTable::from_pairs(std::span<const std::pair<std::string, std::string>> pairs) {
  std::unordered_map<std::string, std::string> raw;
  for (const auto& [from, to] : pairs) {
    std::string key = normalize_answer(from);
    std::string value = normalize_answer(to);
    if (key != value) raw[key] = value;
  }
  // Resolve chains so that lookups are idempotent.
  SynonymTable table;
  for (const auto& [key, value] : raw) {
    std::string current = value;
    size_t steps = 0;
    for (auto it = raw.find(current); it != raw.end(); it = raw.find(current)) {
      current = it->second;
      if (++steps > raw.size()) throw ParseError("synonym table contains a cycle through '" + key + "'");
    }
    if (current != key) table.table_[key] = current;
  }
  return table;
}

SynonymTable SynonymTable::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open synonym table " + path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto trimmed = text::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    auto fields = text::split(trimmed, '|');
    if (fields.size() != 2) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 'raw|canonical'");
    }
    pairs.emplace_back(std::string(fields[0]), std::string(fields[1]));
  }
  return from_pairs(pairs);
}

std::optional<std::string> SynonymTable::lookup(std::string_view normalized) const {
  auto it = table_.find(std::string(normalized));
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

std::string normalize_answer(std::string_view raw, const SynonymTable* synonyms) {
  auto strip = [](char c) { return text::is_space(c) || text::is_punct(c); };
  size_t begin = 0, end = raw.size();
  while (begin < end && strip(raw[begin])) ++begin;
  while (end > begin && strip(raw[end - 1])) --end;

  std::string out;
  out.reserve(end - begin);
  bool pending_space = false;
  for (size_t i = begin; i < end; ++i) {
    char c = raw[i];
    if (text::is_space(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(text::lower(c));
  }
  if (synonyms) {
    if (auto canonical = synonyms->lookup(out)) return *canonical;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    if (text::is_word(c)) {
      current.push_back(text::lower(c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary::Vocabulary() {
  id_to_token_ = {std::string(pad_token), std::string(unk_token)};
  token_to_id_[std::string(pad_token)] = pad_id;
  token_to_id_[std::string(unk_token)] = unk_id;
}

Vocabulary Vocabulary::from_tokens(std::span<const std::string> tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (t.empty() || v.token_to_id_.count(t)) {
      throw ConfigError("vocabulary tokens must be non-empty and unique: '" + t + "'");
    }
    v.token_to_id_[t] = static_cast<std::int64_t>(v.id_to_token_.size());
    v.id_to_token_.push_back(t);
  }
  return v;
}

std::int64_t Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || id >= static_cast<std::int64_t>(id_to_token_.size())) {
    throw ConfigError("token id out of range: " + std::to_string(id));
  }
  return id_to_token_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return token_to_id_.count(std::string(token)) > 0; }

std::vector<std::int64_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int64_t> ids;
  for (const auto& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::int64_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token(i));
  return out;
}

std::vector<std::string> Vocabulary::regular_tokens() const {
  return {id_to_token_.begin() + 2, id_to_token_.end()};
}

namespace {

template <typename Count>
std::vector<std::string> rank_by_frequency(const std::map<std::string, Count>& counts, Count min_count) {
  std::vector<std::pair<std::string, Count>> items;
  for (const auto& [k, n] : counts) {
    if (n >= min_count) items.emplace_back(k, n);
  }
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  for (auto& [k, n] : items) out.push_back(std::move(k));
  return out;
}

}  // namespace

Vocabulary build_vocabulary(std::span<const std::string> questions, int min_freq) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& q : questions) {
    for (auto& t : tokenize(q)) ++counts[t];
  }
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  // std::map iteration is lexicographic; the stable sort keeps that order within ties.
  return Vocabulary::from_tokens(rank_by_frequency<std::int64_t>(counts, std::max(min_freq, 1)));
}

Vocabulary build_vocabulary(std::span<const VqaSample> samples, int min_freq) {
  std::vector<std::string> questions;
  questions.reserve(samples.size());
  for (const auto& s : samples) questions.push_back(s.question);
  return build_vocabulary(questions, min_freq);
}

AnswerClassMap AnswerClassMap::from_lists(std::vector<std::string> answers, std::vector<std::int64_t> frequencies) {
  if (answers.size() != frequencies.size()) {
    throw ConfigError("answer list and frequency list differ in length");
  }
  AnswerClassMap m;
  for (size_t i = 0; i < answers.size(); ++i) {
    if (!m.answer_to_class_.emplace(answers[i], static_cast<std::int64_t>(i)).second) {
      throw ConfigError("duplicate answer class '" + answers[i] + "'");
    }
  }
  m.class_to_answer_ = std::move(answers);
  m.frequency_ = std::move(frequencies);
  return m;
}

std::optional<std::int64_t> AnswerClassMap::class_of(std::string_view normalized_answer) const {
  auto it = answer_to_class_.find(std::string(normalized_answer));
  if (it == answer_to_class_.end()) return std::nullopt;
  return it->second;
}

const std::string& AnswerClassMap::answer(std::int64_t class_id) const {
  if (class_id < 0 || class_id >= static_cast<std::int64_t>(class_to_answer_.size())) {
    throw ConfigError("answer class out of range: " + std::to_string(class_id));
  }
  return class_to_answer_[static_cast<size_t>(class_id)];
}

std::int64_t AnswerClassMap::frequency(std::int64_t class_id) const {
  answer(class_id);
  return frequency_[static_cast<size_t>(class_id)];
}

AnswerClassMap build_answer_classes(std::span<const std::string> answers, const SynonymTable* synonyms) {
  if (answers.empty()) throw DataError("cannot build answer classes from an empty sample set");
  std::map<std::string, std::int64_t> counts;
  for (const auto& a : answers) ++counts[normalize_answer(a, synonyms)];
  auto ranked = rank_by_frequency<std::int64_t>(counts, 0);
  std::vector<std::int64_t> freq;
  for (const auto& a : ranked) freq.push_back(counts.at(a));
  return AnswerClassMap::from_lists(std::move(ranked), std::move(freq));
}

AnswerClassMap build_answer_classes(std::span<const VqaSample> samples, const SynonymTable* synonyms) {
  std::vector<std::string> answers;
  answers.reserve(samples.size());
  for (const auto& s : samples) answers.push_back(s.answer);
  return build_answer_classes(answers, synonyms);
}

std::map<std::string, Category> answer_categories(std::span<const VqaSample> samples, const SynonymTable* synonyms) {
  std::map<std::string, std::array<size_t, 4>> counts;
  for (const auto& s : samples) {
    auto& c = counts[normalize_answer(s.answer, synonyms)];
    ++c[static_cast<size_t>(s.category)];
  }
  std::map<std::string, Category> owner;
  for (const auto& [answer, c] : counts) {
    size_t best = static_cast<size_t>(std::max_element(c.begin(), c.end()) - c.begin());
    owner[answer] = kCategories[best];
  }
  return owner;
}

int PrefixTree::height() const {
  auto rec = [](auto& self, const PrefixNode& node) -> int {
    int h = 0;
    for (const auto& child : node.children) h = std::max(h, 1 + self(self, child));
    return h;
  };
  return rec(rec, root);
}

namespace {

void grow_prefix(PrefixNode& node, const std::vector<std::vector<std::string>>& token_lists,
                 const std::vector<size_t>& members, size_t level, int depth, double prune, double total) {
  if (static_cast<int>(level) >= depth) return;
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t idx : members) {
    if (level < token_lists[idx].size()) groups[token_lists[idx][level]].push_back(idx);
  }
  std::vector<PrefixNode> kept;
  double other = 0.0;
  std::vector<std::vector<size_t>> kept_members;
  for (auto& [word, group] : groups) {
    double fraction = static_cast<double>(group.size()) / total;
    if (fraction < prune) {
      other += fraction;
      continue;
    }
    kept.push_back(PrefixNode{word, fraction, {}});
    kept_members.push_back(std::move(group));
  }
  std::vector<size_t> order(kept.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return kept[a].fraction > kept[b].fraction; });
  for (size_t i : order) {
    grow_prefix(kept[i], token_lists, kept_members[i], level + 1, depth, prune, total);
    node.children.push_back(std::move(kept[i]));
  }
  if (other > 0.0) node.children.push_back(PrefixNode{std::string(kOtherBucket), other, {}});
}

}  // namespace

PrefixTree question_prefix_distribution(std::span<const std::string> questions, int depth, double prune) {
  if (depth < 1) throw ConfigError("prefix depth must be at least 1");
  if (prune < 0.0 || prune > 1.0) throw ConfigError("prune fraction must lie in [0,1]");
  PrefixTree tree;
  tree.depth = depth;
  tree.prune = prune;
  tree.root.word = "";
  if (questions.empty()) return tree;
  tree.root.fraction = 1.0;
  std::vector<std::vector<std::string>> token_lists;
  token_lists.reserve(questions.size());
  for (const auto& q : questions) token_lists.push_back(tokenize(q));
  std::vector<size_t> all(questions.size());
  std::iota(all.begin(), all.end(), 0);
  grow_prefix(tree.root, token_lists, all, 0, depth, prune, static_cast<double>(questions.size()));
  return tree;
}

PrefixTree question_prefix_distribution(std::span<const VqaSample> samples, int depth, double prune) {
  std::vector<std::string> questions;
  for (const auto& s : samples) questions.push_back(s.question);
  return question_prefix_distribution(questions, depth, prune);
}

AnswerLengthStats answer_length_stats(std::span<const std::string> answers) {
  AnswerLengthStats stats;
  stats.total = answers.size();
  for (const auto& a : answers) {
    std::istringstream words{a};
    int n = 0;
    std::string w;
    while (words >> w) ++n;
    ++stats.counts[n];
  }
  if (stats.total == 0) return stats;
  double total = static_cast<double>(stats.total);
  size_t running = 0, one_to_three = 0;
  for (const auto& [len, count] : stats.counts) {
    stats.fractions[len] = static_cast<double>(count) / total;
    running += count;
    stats.cumulative[len] = static_cast<double>(running) / total;
    if (len >= 1 && len <= 3) one_to_three += count;
  }
  stats.fraction_one_word = stats.counts.count(1) ? static_cast<double>(stats.counts.at(1)) / total : 0.0;
  stats.fraction_one_to_three = static_cast<double>(one_to_three) / total;
  return stats;
}

AnswerLengthStats answer_length_stats(std::span<const VqaSample> samples) {
  std::vector<std::string> answers;
  for (const auto& s : samples) answers.push_back(s.answer);
  return answer_length_stats(answers);
}

std::vector<Fold> split_cv(std::span<const VqaSample> samples, int folds, double train_frac, std::uint64_t seed) {
  if (folds < 1) throw ConfigError("folds must be at least 1");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train_frac must lie strictly between 0 and 1");

  std::vector<std::string> images;
  std::unordered_map<std::string, size_t> image_index;
  for (const auto& s : samples) {
    if (image_index.emplace(s.image_id, images.size()).second) images.push_back(s.image_id);
  }
  const size_t n_images = images.size();
  const auto n_train = static_cast<size_t>(std::llround(train_frac * static_cast<double>(n_images)));
  if (n_train < 1 || n_train >= n_images) {
    throw DataError("too few images (" + std::to_string(n_images) + ") for a " + std::to_string(train_frac) +
                    " train split");
  }

  std::vector<Fold> result;
  for (int f = 0; f < folds; ++f) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(f)};
    std::mt19937_64 rng(seq);
    std::vector<size_t> order(n_images);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> in_train(n_images, false);
    for (size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;

    Fold fold;
    for (size_t i = 0; i < samples.size(); ++i) {
      (in_train[image_index.at(samples[i].image_id)] ? fold.train : fold.test).push_back(i);
    }
    result.push_back(std::move(fold));
  }
  return result;
}

}  // namespace medvqa
