#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medvqa/augment.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/model.hpp"

namespace medvqa {

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 1e-4;  // Adam
  int batch_size = 64;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  // Stop when validation accuracy has not improved for this many epochs and
  // restore the best weights; 0 disables. Needs a validation set.
  int early_stop_patience = 0;
  // Stop once an epoch's running train accuracy reaches this value; 0 disables.
  double stop_at_train_accuracy = 0.0;
  // Deterministic kernels and a single intra-op thread.
  bool deterministic = true;
  // JSON-lines log, one record per epoch and split; empty disables.
  std::string log_path;

  void validate() const;
  nlohmann::json to_json() const;
  void merge_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // epoch whose weights the model holds on return
  size_t skipped_samples = 0;  // answers outside the class map
};

// Trains in place. Samples whose answer is not a model class are skipped.
// Throws DivergenceError naming the epoch and batch on a non-finite loss.
TrainResult train(VqaSystem& system, std::span<const VqaSample> train_samples, const TrainConfig& cfg,
                  std::span<const VqaSample> validation = {}, const SynonymTable* synonyms = nullptr);

struct Confusion {
  Category category = Category::modality;
  std::string gold;
  std::string predicted;
  size_t count = 0;
};

struct EvalReport {
  double overall_accuracy = 0.0;
  size_t n_total = 0;
  size_t n_correct = 0;
  std::map<Category, double> per_category_accuracy;
  std::map<Category, size_t> n_per_category;
  std::map<Category, size_t> correct_per_category;
  std::vector<Confusion> confusions;  // errors, most frequent first
  int fold_id = -1;
  std::uint64_t seed = 0;
  std::string variant;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  // category,n,correct,accuracy rows plus an "overall" row.
  std::string to_csv() const;
};

// Exact match after normalisation; micro-averaged overall accuracy.
EvalReport evaluate_predictions(std::span<const VqaSample> samples, std::span<const std::string> predicted_answers,
                                const SynonymTable* synonyms = nullptr);
EvalReport evaluate(VqaSystem& system, std::span<const VqaSample> samples, const SynonymTable* synonyms = nullptr);
std::vector<std::string> predicted_answers(VqaSystem& system, std::span<const VqaSample> samples);

// "0.56±0.01"
std::string format_mean_std(double mean, double stdev, int decimals = 2);

struct CrossValSummary {
  std::vector<EvalReport> folds;
  double mean = 0.0;
  double stdev = 0.0;  // population standard deviation over folds
  std::map<Category, std::pair<double, double>> per_category;  // mean, stdev
  std::string variant;

  std::string summary() const { return format_mean_std(mean, stdev); }
  nlohmann::json to_json() const;
};

// Trains and evaluates one fold; receives the fold's derived seed.
using FoldRunner = std::function<EvalReport(int fold, std::span<const VqaSample> train,
                                            std::span<const VqaSample> test, std::uint64_t seed)>;

std::uint64_t fold_seed(std::uint64_t master_seed, int fold);

CrossValSummary cross_validate(std::span<const VqaSample> samples, int folds, double train_frac,
                               std::uint64_t master_seed, const FoldRunner& runner);

struct CrossValOptions {
  int folds = 5;
  double train_frac = 0.8;
  int min_token_freq = 1;
  const SynonymTable* synonyms = nullptr;
};

// Per fold: vocabulary and answer classes from the training part, a freshly
// seeded model, train(), evaluate() on the held-out part.
CrossValSummary cross_validate(const ModelConfig& model_cfg, std::span<const VqaSample> samples,
                               const TrainConfig& train_cfg, const CrossValOptions& options = {});

// Builds vocabulary, answer classes and answer categories from samples and a
// model sized to them.
VqaSystem build_system_for(const ModelConfig& cfg, std::span<const VqaSample> samples, std::uint64_t seed,
                           int min_token_freq = 1, const SynonymTable* synonyms = nullptr);

struct RateCount {
  size_t count = 0;
  size_t total = 0;
  double rate() const { return total == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(total); }
};

struct AnswerTypeReport {
  // Predicted answer owned by a different category than the question's.
  RateCount category_misclassified;
  std::map<Category, RateCount> category_misclassified_by_category;
  // Gold is yes/no and prediction is not, or the other way round.
  RateCount yes_no_type_errors;
  // "X or Y" questions answered with something other than X or Y.
  RateCount option_violations;

  nlohmann::json to_json() const;
};

// The two candidate answers of an "X or Y" question, if it has that form:
// X is matched against the words before "or" (as a suffix), Y against the
// words after it (as a prefix, leading articles dropped).
bool has_options(const std::string& question);
bool answers_from_options(const std::string& question, const std::string& normalized_answer);

AnswerTypeReport answer_type_analysis(std::span<const VqaSample> samples, std::span<const std::string> predictions,
                                      const std::map<std::string, Category>& answer_categories,
                                      const SynonymTable* synonyms = nullptr);

struct ComparisonRow {
  std::string variant;
  double accuracy = 0.0;
  std::optional<double> stdev;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;  // descending accuracy
  std::string text;
  std::string csv;
};

// Throws ConfigError when rows is empty or an accuracy is not finite.
ComparisonTable model_comparison_table(std::vector<ComparisonRow> rows);

// Reads an EvalReport or cross-validation summary JSON as a table row.
ComparisonRow comparison_row_from_json(const nlohmann::json& j, const std::string& fallback_name);

}  // namespace medvqa
