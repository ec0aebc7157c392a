#include "medvqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <ATen/Context.h>

#include "medvqa/archive.hpp"
#include "medvqa/error.hpp"
#include "text_util.hpp"

using nlohmann::json;

namespace medvqa {

namespace {

json augment_json(const AugmentConfig& a) {
  return {{"brightness_contrast_delta", a.brightness_contrast_delta},
          {"brightness_contrast_prob", a.brightness_contrast_prob},
          {"translate_rotate_magnitude", a.translate_rotate_magnitude},
          {"translate_rotate_prob", a.translate_rotate_prob},
          {"gaussian_blur_prob", a.gaussian_blur_prob},
          {"blur_kernel", a.blur_kernel},
          {"blur_sigma", a.blur_sigma},
          {"gaussian_noise_prob", a.gaussian_noise_prob},
          {"noise_sigma", a.noise_sigma},
          {"crop_prob", a.crop_prob},
          {"crop_scale_min", a.crop_scale_min},
          {"hflip_prob", a.hflip_prob}};
}

void merge_augment(const json& j, AugmentConfig& a) {
  if (j.is_string() && j.get<std::string>() == "none") {
    a = AugmentConfig::none();
    return;
  }
  const json known = augment_json(a);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in augment");
  }
  auto rd = [&](const char* k, auto& out) {
    if (j.contains(k)) out = j[k].get<std::remove_reference_t<decltype(out)>>();
  };
  rd("brightness_contrast_delta", a.brightness_contrast_delta);
  rd("brightness_contrast_prob", a.brightness_contrast_prob);
  rd("translate_rotate_magnitude", a.translate_rotate_magnitude);
  rd("translate_rotate_prob", a.translate_rotate_prob);
  rd("gaussian_blur_prob", a.gaussian_blur_prob);
  rd("blur_kernel", a.blur_kernel);
  rd("blur_sigma", a.blur_sigma);
  rd("gaussian_noise_prob", a.gaussian_noise_prob);
  rd("noise_sigma", a.noise_sigma);
  rd("crop_prob", a.crop_prob);
  rd("crop_scale_min", a.crop_scale_min);
  rd("hflip_prob", a.hflip_prob);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string fixed(double v, int decimals) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << v;
  return s.str();
}

struct Encoded {
  std::vector<const VqaSample*> samples;
  std::vector<std::int64_t> labels;
  std::vector<std::vector<std::int64_t>> tokens;
};

Encoded encode_samples(const VqaSystem& sys, std::span<const VqaSample> samples, const SynonymTable* synonyms,
                       size_t& skipped) {
  Encoded e;
  for (const auto& s : samples) {
    auto cls = sys.answers.class_of(normalize_answer(s.answer, synonyms));
    if (!cls) {
      ++skipped;
      continue;
    }
    if (!s.image) throw DataError("sample for image " + s.image_id + " has no image loaded");
    e.samples.push_back(&s);
    e.labels.push_back(*cls);
    e.tokens.push_back(encode_question_text(sys.vocab, s.question));
  }
  return e;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (early_stop_patience < 0) throw ConfigError("early_stop_patience must be non-negative");
  if (stop_at_train_accuracy < 0.0 || stop_at_train_accuracy > 1.0) {
    throw ConfigError("stop_at_train_accuracy must lie in [0,1]");
  }
  augment.validate();
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"seed", seed},
          {"augment", augment_json(augment)},
          {"early_stop_patience", early_stop_patience},
          {"stop_at_train_accuracy", stop_at_train_accuracy},
          {"deterministic", deterministic},
          {"log_path", log_path}};
}

void TrainConfig::merge_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    static const std::set<std::string> keys = {"epochs", "learning_rate", "batch_size", "seed", "augment",
                                               "early_stop_patience", "stop_at_train_accuracy", "deterministic",
                                               "log_path"};
    for (const auto& [key, value] : j.items()) {
      if (!keys.count(key)) throw ConfigError("unknown key '" + key + "' in train config");
    }
    if (j.contains("epochs")) epochs = j["epochs"].get<int>();
    if (j.contains("learning_rate")) learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) batch_size = j["batch_size"].get<int>();
    if (j.contains("seed")) seed = j["seed"].get<std::uint64_t>();
    if (j.contains("augment")) merge_augment(j["augment"], augment);
    if (j.contains("early_stop_patience")) early_stop_patience = j["early_stop_patience"].get<int>();
    if (j.contains("stop_at_train_accuracy")) stop_at_train_accuracy = j["stop_at_train_accuracy"].get<double>();
    if (j.contains("deterministic")) deterministic = j["deterministic"].get<bool>();
    if (j.contains("log_path")) log_path = j["log_path"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

TrainResult train(VqaSystem& sys, std::span<const VqaSample> train_samples, const TrainConfig& cfg,
                  std::span<const VqaSample> validation, const SynonymTable* synonyms) {
  cfg.validate();
  if (train_samples.empty()) throw DataError("training set is empty");
  if (cfg.early_stop_patience > 0 && validation.empty()) {
    throw ConfigError("early stopping needs a validation set");
  }
  TrainResult result;
  Encoded data = encode_samples(sys, train_samples, synonyms, result.skipped_samples);
  if (data.samples.empty()) throw DataError("no training sample has an answer among the model classes");

  if (cfg.deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);

  auto& model = sys.model;
  const auto dtype = model->parameters().front().scalar_type();
  const int input_size = sys.config.image_encoder.input_size;
  const int max_tokens = sys.config.question_encoder.max_tokens;
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw ConfigError("cannot write training log " + cfg.log_path);
  }

  std::vector<size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  double best_val = -1.0;
  int since_best = 0;
  NamedTensors best_state;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model->train();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    size_t correct = 0;
    int batch_no = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      ++batch_no;
      const size_t n = std::min(order.size() - start, static_cast<size_t>(cfg.batch_size));
      std::vector<torch::Tensor> pixels;
      std::vector<std::vector<std::int64_t>> seqs;
      std::vector<std::int64_t> labels;
      for (size_t i = 0; i < n; ++i) {
        const size_t idx = order[start + i];
        pixels.push_back(preprocess_image(augment(*data.samples[idx]->image, cfg.augment, rng), input_size));
        seqs.push_back(data.tokens[idx]);
        labels.push_back(data.labels[idx]);
      }
      auto tokens = make_token_batch(seqs, max_tokens);
      auto target = torch::tensor(labels, torch::kInt64);
      auto logits = model->forward(torch::stack(pixels).to(dtype), tokens.ids, tokens.lengths);
      auto loss = torch::nn::functional::cross_entropy(logits, target);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw DivergenceError("loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_no));
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(n);
      correct += static_cast<size_t>(logits.argmax(1).eq(target).sum().item<std::int64_t>());
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = loss_sum / static_cast<double>(order.size());
    entry.accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (log) {
      log << json{{"epoch", epoch}, {"split", "train"}, {"loss", entry.loss}, {"accuracy", entry.accuracy}}.dump()
          << '\n';
    }
    if (!validation.empty()) {
      entry.val_accuracy = evaluate(sys, validation, synonyms).overall_accuracy;
      if (log) log << json{{"epoch", epoch}, {"split", "val"}, {"accuracy", *entry.val_accuracy}}.dump() << '\n';
    }
    result.epochs.push_back(entry);
    result.best_epoch = epoch;

    if (cfg.early_stop_patience > 0) {
      if (*entry.val_accuracy > best_val) {
        best_val = *entry.val_accuracy;
        best_state = clone_state(module_state(*model));
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        break;
      }
    }
    if (cfg.stop_at_train_accuracy > 0.0 && entry.accuracy >= cfg.stop_at_train_accuracy) break;
  }

  if (cfg.early_stop_patience > 0 && !best_state.empty()) {
    TensorArchive best;
    best.tensors = std::move(best_state);
    apply_archive(*model, best);
    for (const auto& e : result.epochs) {
      if (e.val_accuracy && *e.val_accuracy == best_val) {
        result.best_epoch = e.epoch;
        break;
      }
    }
  }
  model->eval();
  return result;
}

json EvalReport::to_json() const {
  json per = json::object(), counts = json::object(), correct = json::object();
  for (const auto& [c, acc] : per_category_accuracy) per[std::string(category_name(c))] = acc;
  for (const auto& [c, n] : n_per_category) counts[std::string(category_name(c))] = n;
  for (const auto& [c, n] : correct_per_category) correct[std::string(category_name(c))] = n;
  json conf = json::array();
  for (const auto& c : confusions) {
    conf.push_back({{"category", category_name(c.category)}, {"gold", c.gold}, {"predicted", c.predicted},
                    {"count", c.count}});
  }
  json j = {{"overall_accuracy", overall_accuracy},
            {"n_total", n_total},
            {"n_correct", n_correct},
            {"per_category_accuracy", per},
            {"n_per_category", counts},
            {"correct_per_category", correct},
            {"confusions", conf},
            {"fold_id", fold_id},
            {"seed", seed}};
  if (!variant.empty()) j["variant"] = variant;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.n_total = j.value("n_total", size_t{0});
    r.n_correct = j.value("n_correct", size_t{0});
    const json per = j.value("per_category_accuracy", json::object());
    const json counts = j.value("n_per_category", json::object());
    const json correct = j.value("correct_per_category", json::object());
    for (const auto& [k, v] : per.items()) r.per_category_accuracy[parse_category(k)] = v.get<double>();
    for (const auto& [k, v] : counts.items()) r.n_per_category[parse_category(k)] = v.get<size_t>();
    for (const auto& [k, v] : correct.items()) r.correct_per_category[parse_category(k)] = v.get<size_t>();
    for (const auto& c : j.value("confusions", json::array())) {
      r.confusions.push_back({parse_category(c.at("category").get<std::string>()), c.at("gold").get<std::string>(),
                              c.at("predicted").get<std::string>(), c.at("count").get<size_t>()});
    }
    r.fold_id = j.value("fold_id", -1);
    r.seed = j.value("seed", std::uint64_t{0});
    r.variant = j.value("variant", std::string());
  } catch (const json::exception& e) {
    throw ParseError(std::string("evaluation report: ") + e.what());
  }
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "category,n,correct,accuracy\n";
  for (Category c : kCategories) {
    auto it = n_per_category.find(c);
    if (it == n_per_category.end()) continue;
    out << category_name(c) << ',' << it->second << ',' << correct_per_category.at(c) << ','
        << fixed(per_category_accuracy.at(c), 4) << '\n';
  }
  out << "overall," << n_total << ',' << n_correct << ',' << fixed(overall_accuracy, 4) << '\n';
  return out.str();
}

EvalReport evaluate_predictions(std::span<const VqaSample> samples, std::span<const std::string> predicted,
                                const SynonymTable* synonyms) {
  if (samples.size() != predicted.size()) throw ShapeError("evaluate: sample and prediction counts differ");
  EvalReport r;
  std::map<std::tuple<Category, std::string, std::string>, size_t> errors;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto gold = normalize_answer(samples[i].answer, synonyms);
    const auto pred = normalize_answer(predicted[i], synonyms);
    const Category c = samples[i].category;
    ++r.n_per_category[c];
    r.correct_per_category[c];
    if (gold == pred) {
      ++r.n_correct;
      ++r.correct_per_category[c];
    } else {
      ++errors[{c, gold, pred}];
    }
  }
  r.n_total = samples.size();
  r.overall_accuracy = r.n_total == 0 ? 0.0 : static_cast<double>(r.n_correct) / static_cast<double>(r.n_total);
  for (const auto& [c, n] : r.n_per_category) {
    r.per_category_accuracy[c] = static_cast<double>(r.correct_per_category[c]) / static_cast<double>(n);
  }
  for (const auto& [key, count] : errors) {
    r.confusions.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), count});
  }
  std::stable_sort(r.confusions.begin(), r.confusions.end(),
                   [](const Confusion& a, const Confusion& b) { return a.count > b.count; });
  return r;
}

std::vector<std::string> predicted_answers(VqaSystem& system, std::span<const VqaSample> samples) {
  std::vector<const Image*> images;
  std::vector<std::string> questions;
  for (const auto& s : samples) {
    if (!s.image) throw DataError("sample for image " + s.image_id + " has no image loaded");
    images.push_back(s.image.get());
    questions.push_back(s.question);
  }
  std::vector<std::string> out;
  for (const auto& p : predict_batch(system, images, questions, 1)) out.push_back(p.top_k.front().answer);
  return out;
}

EvalReport evaluate(VqaSystem& system, std::span<const VqaSample> samples, const SynonymTable* synonyms) {
  auto preds = predicted_answers(system, samples);
  auto report = evaluate_predictions(samples, preds, synonyms);
  report.variant = variant_name(system.config);
  return report;
}

std::string format_mean_std(double mean, double stdev, int decimals) {
  return fixed(mean, decimals) + "±" + fixed(stdev, decimals);
}

json CrossValSummary::to_json() const {
  json folds_json = json::array();
  for (const auto& f : folds) folds_json.push_back(f.to_json());
  json per = json::object();
  for (const auto& [c, ms] : per_category) {
    per[std::string(category_name(c))] = {{"mean", ms.first}, {"std", ms.second},
                                          {"summary", format_mean_std(ms.first, ms.second)}};
  }
  return {{"variant", variant}, {"mean", mean},     {"std", stdev}, {"std_kind", "population"},
          {"summary", summary()}, {"per_category", per}, {"folds", folds_json}};
}

std::uint64_t fold_seed(std::uint64_t master_seed, int fold) {
  return splitmix64(master_seed ^ splitmix64(static_cast<std::uint64_t>(fold) + 1));
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

}  // namespace

CrossValSummary cross_validate(std::span<const VqaSample> samples, int folds, double train_frac,
                               std::uint64_t master_seed, const FoldRunner& runner) {
  auto splits = split_cv(samples, folds, train_frac, master_seed);
  CrossValSummary summary;
  std::vector<double> overall;
  std::map<Category, std::vector<double>> per;
  for (size_t f = 0; f < splits.size(); ++f) {
    auto train_set = select(samples, std::span<const size_t>(splits[f].train));
    auto test_set = select(samples, std::span<const size_t>(splits[f].test));
    const auto seed = fold_seed(master_seed, static_cast<int>(f));
    EvalReport report = runner(static_cast<int>(f), train_set, test_set, seed);
    report.fold_id = static_cast<int>(f);
    report.seed = seed;
    overall.push_back(report.overall_accuracy);
    for (const auto& [c, acc] : report.per_category_accuracy) per[c].push_back(acc);
    if (summary.variant.empty()) summary.variant = report.variant;
    summary.folds.push_back(std::move(report));
  }
  std::tie(summary.mean, summary.stdev) = mean_std(overall);
  for (const auto& [c, values] : per) summary.per_category[c] = mean_std(values);
  return summary;
}

VqaSystem build_system_for(const ModelConfig& cfg, std::span<const VqaSample> samples, std::uint64_t seed,
                           int min_token_freq, const SynonymTable* synonyms) {
  auto vocab = build_vocabulary(samples, min_token_freq);
  auto answers = build_answer_classes(samples, synonyms);
  if (answers.size() < 2) throw DataError("training data has fewer than two distinct answers");
  ModelConfig sized = cfg;
  sized.n_classes = static_cast<int>(answers.size());
  return build_model(sized, std::move(vocab), std::move(answers), seed, answer_categories(samples, synonyms));
}

CrossValSummary cross_validate(const ModelConfig& model_cfg, std::span<const VqaSample> samples,
                               const TrainConfig& train_cfg, const CrossValOptions& options) {
  FoldRunner runner = [&](int fold, std::span<const VqaSample> train_set, std::span<const VqaSample> test_set,
                          std::uint64_t seed) {
    auto sys = build_system_for(model_cfg, train_set, seed, options.min_token_freq, options.synonyms);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    if (!tc.log_path.empty()) tc.log_path += ".fold" + std::to_string(fold);
    train(sys, train_set, tc, {}, options.synonyms);
    return evaluate(sys, test_set, options.synonyms);
  };
  auto summary = cross_validate(samples, options.folds, options.train_frac, train_cfg.seed, runner);
  summary.variant = variant_name(model_cfg);
  return summary;
}

json AnswerTypeReport::to_json() const {
  auto rc = [](const RateCount& r) { return json{{"count", r.count}, {"total", r.total}, {"rate", r.rate()}}; };
  json by = json::object();
  for (const auto& [c, r] : category_misclassified_by_category) by[std::string(category_name(c))] = rc(r);
  return {{"category_misclassification", rc(category_misclassified)},
          {"category_misclassification_by_category", by},
          {"yes_no_type_errors", rc(yes_no_type_errors)},
          {"option_violations", rc(option_violations)}};
}

namespace {

std::vector<std::string> words(std::string_view s) { return tokenize(s); }

bool split_options(const std::string& question, std::vector<std::string>& left, std::vector<std::string>& right) {
  auto w = words(question);
  auto it = std::find(w.begin(), w.end(), "or");
  if (it == w.end() || it == w.begin() || it + 1 == w.end()) return false;
  left.assign(w.begin(), it);
  right.assign(it + 1, w.end());
  while (!right.empty() && (right.front() == "a" || right.front() == "an" || right.front() == "the")) {
    right.erase(right.begin());
  }
  return !right.empty();
}

bool is_yes_no(const std::string& normalized) { return normalized == "yes" || normalized == "no"; }

}  // namespace

bool has_options(const std::string& question) {
  std::vector<std::string> l, r;
  return split_options(question, l, r);
}

bool answers_from_options(const std::string& question, const std::string& normalized_answer) {
  std::vector<std::string> left, right;
  if (!split_options(question, left, right)) return true;
  auto a = words(normalized_answer);
  if (a.empty()) return false;
  if (a.size() <= left.size() && std::equal(a.rbegin(), a.rend(), left.rbegin())) return true;
  if (a.size() <= right.size() && std::equal(a.begin(), a.end(), right.begin())) return true;
  return false;
}

AnswerTypeReport answer_type_analysis(std::span<const VqaSample> samples, std::span<const std::string> predictions,
                                      const std::map<std::string, Category>& answer_categories,
                                      const SynonymTable* synonyms) {
  if (samples.size() != predictions.size()) throw ShapeError("answer_type_analysis: sample and prediction counts differ");
  AnswerTypeReport r;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto gold = normalize_answer(s.answer, synonyms);
    const auto pred = normalize_answer(predictions[i], synonyms);

    auto& by_cat = r.category_misclassified_by_category[s.category];
    ++r.category_misclassified.total;
    ++by_cat.total;
    if (auto it = answer_categories.find(pred); it != answer_categories.end() && it->second != s.category) {
      ++r.category_misclassified.count;
      ++by_cat.count;
    }

    ++r.yes_no_type_errors.total;
    if (is_yes_no(gold) != is_yes_no(pred)) ++r.yes_no_type_errors.count;

    if (has_options(s.question)) {
      ++r.option_violations.total;
      if (!answers_from_options(s.question, pred)) ++r.option_violations.count;
    }
  }
  return r;
}

ComparisonTable model_comparison_table(std::vector<ComparisonRow> rows) {
  if (rows.empty()) throw ConfigError("comparison table needs at least one evaluated variant");
  for (const auto& row : rows) {
    if (!std::isfinite(row.accuracy)) throw ConfigError("variant '" + row.variant + "' has no accuracy");
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ComparisonRow& a, const ComparisonRow& b) { return a.accuracy > b.accuracy; });
  ComparisonTable t;
  std::vector<std::string> values;
  size_t name_w = std::string("Model").size(), value_w = std::string("Accuracy").size();
  for (const auto& row : rows) {
    values.push_back(row.stdev ? format_mean_std(row.accuracy, *row.stdev) : fixed(row.accuracy, 2));
    name_w = std::max(name_w, row.variant.size());
    value_w = std::max(value_w, values.back().size());
  }
  std::ostringstream text, csv;
  text << std::left << std::setw(static_cast<int>(name_w)) << "Model" << "  " << "Accuracy" << '\n';
  text << std::string(name_w, '-') << "  " << std::string(value_w, '-') << '\n';
  csv << "model,accuracy,std\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    text << std::left << std::setw(static_cast<int>(name_w)) << rows[i].variant << "  " << values[i] << '\n';
    std::string name = rows[i].variant;
    if (name.find_first_of(",\"") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : name) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
      name = quoted + "\"";
    }
    csv << name << ',' << fixed(rows[i].accuracy, 4) << ',' << (rows[i].stdev ? fixed(*rows[i].stdev, 4) : "") << '\n';
  }
  t.rows = std::move(rows);
  t.text = text.str();
  t.csv = csv.str();
  return t;
}

ComparisonRow comparison_row_from_json(const json& j, const std::string& fallback_name) {
  ComparisonRow row;
  try {
    row.variant = j.value("variant", std::string());
    if (row.variant.empty()) row.variant = fallback_name;
    if (j.contains("mean")) {
      row.accuracy = j["mean"].get<double>();
      if (j.contains("std")) row.stdev = j["std"].get<double>();
    } else if (j.contains("overall_accuracy")) {
      row.accuracy = j["overall_accuracy"].get<double>();
    } else {
      row.accuracy = std::numeric_limits<double>::quiet_NaN();
    }
  } catch (const json::exception& e) {
    throw ParseError("report " + fallback_name + ": " + e.what());
  }
  return row;
}

}  // namespace medvqa
