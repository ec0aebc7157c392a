// medvqa command line: data preparation, pretraining, training, evaluation,
// explanation and the HTTP service.
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "medvqa/archive.hpp"
#include "medvqa/contrastive.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/error.hpp"
#include "medvqa/explain.hpp"
#include "medvqa/image.hpp"
#include "medvqa/model.hpp"
#include "medvqa/service.hpp"
#include "medvqa/synthetic.hpp"
#include "medvqa/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace medvqa;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config file layout:
// {
//   "seed": 0,
//   "data":     {"root": "", "image_size": 0, "synonyms": "", "min_token_freq": 1},
//   "model":    ModelConfig,
//   "train":    TrainConfig,
//   "crossval": {"folds": 5, "train_frac": 0.8},
//   "pretrain": {"images": "", "temperature": 0.1, "batch_size": 128, "epochs": 80,
//                "projection_dim": 128, "learning_rate": 0.001}
// }
struct Settings {
  json raw = json::object();

  json section(const std::string& name) const { return raw.contains(name) ? raw[name] : json::object(); }
  template <typename T>
  T get(const std::string& sec, const std::string& key, T fallback) const {
    auto s = section(sec);
    return s.contains(key) ? s[key].get<T>() : fallback;
  }
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("-c,--config", common.config_path, "JSON config file");
  cmd->add_option("--set", common.overrides, "override a config value, e.g. --set train.epochs=10");
}

json parse_override_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return raw;
  }
}

Settings load_settings(const Common& common) {
  Settings s;
  if (!common.config_path.empty()) {
    std::ifstream in(common.config_path);
    if (!in) throw UsageError("cannot read config file " + common.config_path);
    try {
      s.raw = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config file " + common.config_path + " is not valid JSON: " + e.what());
    }
    if (!s.raw.is_object()) throw UsageError("config file " + common.config_path + " must hold a JSON object");
  }
  for (const auto& o : common.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key.path=value, got '" + o + "'");
    std::string pointer = "/" + o.substr(0, eq);
    for (auto& c : pointer) {
      if (c == '.') c = '/';
    }
    s.raw[json::json_pointer(pointer)] = parse_override_value(o.substr(eq + 1));
  }
  static const std::set<std::string> known = {"seed", "data", "model", "train", "crossval", "pretrain"};
  for (const auto& [key, value] : s.raw.items()) {
    if (!known.count(key)) throw ConfigError("unknown top-level config key '" + key + "'");
  }
  static const std::map<std::string, std::set<std::string>> flat = {
      {"data", {"root", "image_size", "synonyms", "min_token_freq"}}, {"crossval", {"folds", "train_frac"}}};
  for (const auto& [sec, keys] : flat) {
    const json part = s.section(sec);
    if (!part.is_object()) throw ConfigError("'" + sec + "' must be a JSON object");
    for (const auto& [key, value] : part.items()) {
      if (!keys.count(key)) throw ConfigError("unknown key '" + key + "' in " + sec);
    }
  }
  return s;
}

ModelConfig model_config(const Settings& s) { return ModelConfig::from_json(s.section("model")); }

TrainConfig train_config(const Settings& s) {
  TrainConfig tc;
  tc.seed = s.raw.value("seed", std::uint64_t{0});
  tc.merge_json(s.section("train"));
  tc.validate();
  return tc;
}

std::optional<SynonymTable> synonyms(const Settings& s) {
  auto path = s.get<std::string>("data", "synonyms", "");
  if (path.empty()) return std::nullopt;
  return SynonymTable::load(path);
}

std::string data_root(const Settings& s, const std::string& flag) {
  auto root = flag.empty() ? s.get<std::string>("data", "root", "") : flag;
  if (root.empty()) throw UsageError("no dataset given: pass --data or set data.root in the config");
  return root;
}

std::vector<VqaSample> load_samples(const Settings& s, const std::string& root, int default_size = 0) {
  LoadOptions opts;
  opts.image_size = s.get<int>("data", "image_size", default_size);
  auto samples = load_vqamed(root, opts);
  std::cerr << "loaded " << samples.size() << " samples from " << root << '\n';
  return samples;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  write_text(path, std::string(bytes.begin(), bytes.end()));
}

json prefix_json(const PrefixNode& node) {
  json children = json::array();
  for (const auto& c : node.children) children.push_back(prefix_json(c));
  json j = {{"word", node.word}, {"fraction", node.fraction}};
  if (!children.empty()) j["children"] = children;
  return j;
}

json dataset_stats(std::span<const VqaSample> samples, int depth, double prune) {
  json per = json::object();
  for (auto c : kCategories) per[std::string(category_name(c))] = 0;
  for (const auto& s : samples) per[std::string(category_name(s.category))] = per[std::string(category_name(s.category))].get<int>() + 1;
  auto lengths = answer_length_stats(samples);
  json hist = json::object(), cum = json::object();
  for (const auto& [w, f] : lengths.fractions) hist[std::to_string(w)] = f;
  for (const auto& [w, f] : lengths.cumulative) cum[std::to_string(w)] = f;
  auto tree = question_prefix_distribution(samples, depth, prune);
  return {{"samples", samples.size()},
          {"per_category", per},
          {"distinct_answers", build_answer_classes(samples).size()},
          {"vocabulary_size", build_vocabulary(samples).size()},
          {"answer_lengths", {{"fractions", hist}, {"cumulative", cum},
                              {"fraction_one_word", lengths.fraction_one_word},
                              {"fraction_one_to_three", lengths.fraction_one_to_three}}},
          {"question_prefixes", prefix_json(tree.root)}};
}

std::atomic<HttpService*> g_service{nullptr};

void on_signal(int) {
  if (auto* s = g_service.load()) s->stop();
}

int run_serve(const std::string& models_flag, const std::string& bind_flag) {
  std::string models = models_flag;
  if (models.empty()) {
    if (const char* env = std::getenv("MEDVQA_MODEL_DIR")) models = env;
  }
  if (models.empty()) throw UsageError("no model directory: pass --models or set MEDVQA_MODEL_DIR");
  std::string bind = bind_flag;
  if (bind.empty()) {
    const char* env = std::getenv("MEDVQA_BIND");
    bind = env && *env ? env : "127.0.0.1:8080";
  }
  const auto [host, port] = parse_bind_address(bind);
  auto registry = ModelRegistry::load_dir(models);
  HttpService service(registry);
  const int bound = service.bind(host, port);
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "serving " << registry.size() << " model(s) on http://" << host << ":" << bound << '\n';
  service.serve();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medvqa: medical visual question answering toolkit"};
  app.require_subcommand(1);
  Common common;

  // data
  auto* data = app.add_subcommand("data", "dataset utilities");
  data->require_subcommand(1);
  auto* synth = data->add_subcommand("synth", "write a synthetic dataset");
  int synth_n = 200, synth_size = 64, synth_qpi = 2;
  std::uint64_t synth_seed = 0;
  std::string out;
  synth->add_option("--n", synth_n, "number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--image-size", synth_size, "image side in pixels")->check(CLI::Range(16, 1024));
  synth->add_option("--questions-per-image", synth_qpi, "questions per image")->check(CLI::Range(1, 4));
  synth->add_option("--out", out, "output directory")->required();
  add_common(synth, common);

  auto* stats = data->add_subcommand("stats", "dataset statistics as JSON");
  std::string data_dir;
  int prefix_depth = 4;
  double prefix_prune = 0.02;
  stats->add_option("--data", data_dir, "dataset root");
  stats->add_option("--depth", prefix_depth, "question prefix depth")->check(CLI::PositiveNumber);
  stats->add_option("--prune", prefix_prune, "prefix prune threshold")->check(CLI::Range(0.0, 1.0));
  stats->add_option("--out", out, "also write the JSON here");
  add_common(stats, common);

  auto* prepare = data->add_subcommand("prepare", "load, resize and re-write a dataset");
  int prepare_size = 224;
  prepare->add_option("--data", data_dir, "raw dataset root");
  prepare->add_option("--image-size", prepare_size, "resize images to this side; 0 keeps them")
      ->check(CLI::Range(0, 4096));
  prepare->add_option("--out", out, "output directory")->required();
  add_common(prepare, common);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "contrastive image-encoder pretraining");
  std::string image_dir, loss_log;
  pretrain->add_option("--images", image_dir, "directory of unlabelled images");
  pretrain->add_option("--out", out, "weight archive to write")->required();
  pretrain->add_option("--loss-log", loss_log, "loss log JSON (default: <out>.loss.json)");
  add_common(pretrain, common);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model and save a checkpoint");
  std::string validation_dir;
  train_cmd->add_option("--data", data_dir, "training dataset root");
  train_cmd->add_option("--validation", validation_dir, "validation dataset root");
  train_cmd->add_option("--out", out, "checkpoint directory")->required();
  add_common(train_cmd, common);

  // crossval
  auto* crossval = app.add_subcommand("crossval", "repeated random-split cross-validation");
  crossval->add_option("--data", data_dir, "dataset root");
  crossval->add_option("--out", out, "summary JSON (a CSV is written next to it)")->required();
  add_common(crossval, common);

  // evaluate / analyze
  std::string checkpoint;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "accuracy report for a checkpoint");
  evaluate_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  evaluate_cmd->add_option("--data", data_dir, "test dataset root");
  evaluate_cmd->add_option("--out", out, "report JSON (a CSV is written next to it)");
  add_common(evaluate_cmd, common);

  auto* analyze = app.add_subcommand("analyze", "answer-type error analysis for a checkpoint");
  analyze->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  analyze->add_option("--data", data_dir, "test dataset root");
  analyze->add_option("--out", out, "report JSON");
  add_common(analyze, common);

  // explain
  auto* explain = app.add_subcommand("explain", "GradCAM overlay for one image and question");
  std::string image_path, question, attention_prefix;
  std::optional<std::int64_t> target;
  double alpha = 0.5;
  explain->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  explain->add_option("--image", image_path, "input image")->required();
  explain->add_option("--question", question, "question text")->required();
  explain->add_option("--target", target, "class id to explain (default: predicted)");
  explain->add_option("--alpha", alpha, "overlay opacity")->check(CLI::Range(0.0, 1.0));
  explain->add_option("--out", out, "overlay PNG")->required();
  explain->add_option("--attention-prefix", attention_prefix, "SAN only: write <prefix>_layer<k>.png per layer");
  add_common(explain, common);

  // compare
  auto* compare = app.add_subcommand("compare", "table of model variants from report JSON files");
  std::vector<std::string> reports;
  std::string csv_out;
  compare->add_option("--reports", reports, "report or cross-validation JSON files")->required();
  compare->add_option("--csv", csv_out, "also write the table as CSV");
  add_common(compare, common);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  std::string models_dir, bind;
  serve->add_option("--models", models_dir, "checkpoint directory (default: $MEDVQA_MODEL_DIR)");
  serve->add_option("--bind", bind, "host:port (default: $MEDVQA_BIND or 127.0.0.1:8080)");
  add_common(serve, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const Settings settings = load_settings(common);

    if (*synth) {
      SyntheticOptions opts;
      opts.image_size = synth_size;
      opts.questions_per_image = synth_qpi;
      auto ds = make_synthetic_dataset(synth_n, synth_seed, opts);
      write_vqamed(out, ds.samples);
      std::cout << json{{"samples", ds.samples.size()}, {"out", out}}.dump() << '\n';
      return 0;
    }
    if (*stats) {
      LoadOptions opts;
      opts.load_images = false;
      auto samples = load_vqamed(data_root(settings, data_dir), opts);
      auto j = dataset_stats(samples, prefix_depth, prefix_prune);
      if (!out.empty()) write_json(out, j);
      std::cout << j.dump(2) << '\n';
      return 0;
    }
    if (*prepare) {
      LoadOptions opts;
      opts.image_size = prepare_size;
      auto samples = load_vqamed(data_root(settings, data_dir), opts);
      write_vqamed(out, samples);
      std::cout << json{{"samples", samples.size()}, {"out", out}, {"image_size", prepare_size}}.dump() << '\n';
      return 0;
    }
    if (*pretrain) {
      auto model = model_config(settings);
      auto p = settings.section("pretrain");
      ContrastiveConfig cc;
      static const std::set<std::string> keys = {"images", "temperature", "batch_size", "epochs", "projection_dim",
                                                 "learning_rate"};
      for (const auto& [k, v] : p.items()) {
        if (!keys.count(k)) throw ConfigError("unknown key '" + k + "' in pretrain");
      }
      cc.temperature = p.value("temperature", cc.temperature);
      cc.batch_size = p.value("batch_size", cc.batch_size);
      cc.epochs = p.value("epochs", cc.epochs);
      cc.projection_dim = p.value("projection_dim", cc.projection_dim);
      cc.learning_rate = p.value("learning_rate", cc.learning_rate);
      std::string images = image_dir.empty() ? p.value("images", std::string()) : image_dir;
      if (images.empty()) throw UsageError("no image directory: pass --images or set pretrain.images");
      const std::string log = loss_log.empty() ? out + ".loss.json" : loss_log;
      auto result = pretrain_encoder(images, model.image_encoder, cc, settings.raw.value("seed", std::uint64_t{0}), out, log);
      std::cout << json{{"weights", out}, {"loss_log", log}, {"final_loss", result.epoch_loss.back()}}.dump() << '\n';
      return 0;
    }
    if (*train_cmd) {
      auto mc = model_config(settings);
      auto tc = train_config(settings);
      auto syn = synonyms(settings);
      auto samples = load_samples(settings, data_root(settings, data_dir));
      std::vector<VqaSample> validation;
      if (!validation_dir.empty()) validation = load_samples(settings, validation_dir);
      if (tc.log_path.empty()) tc.log_path = (fs::path(out) / "train_log.jsonl").string();
      fs::create_directories(out);
      auto sys = build_system_for(mc, samples, tc.seed, settings.get<int>("data", "min_token_freq", 1),
                                  syn ? &*syn : nullptr);
      auto result = train(sys, samples, tc, validation, syn ? &*syn : nullptr);
      sys.metadata["train"] = tc.to_json();
      sys.metadata["best_epoch"] = result.best_epoch;
      save_checkpoint(sys, out);
      const auto& last = result.epochs.back();
      json summary = {{"checkpoint", out},         {"variant", variant_name(sys.config)},
                      {"epochs", result.epochs.size()}, {"best_epoch", result.best_epoch},
                      {"loss", last.loss},         {"train_accuracy", last.accuracy},
                      {"skipped_samples", result.skipped_samples}};
      if (last.val_accuracy) summary["val_accuracy"] = *last.val_accuracy;
      std::cout << summary.dump() << '\n';
      return 0;
    }
    if (*crossval) {
      auto mc = model_config(settings);
      auto tc = train_config(settings);
      auto syn = synonyms(settings);
      auto samples = load_samples(settings, data_root(settings, data_dir));
      CrossValOptions opts;
      opts.folds = settings.get<int>("crossval", "folds", 5);
      opts.train_frac = settings.get<double>("crossval", "train_frac", 0.8);
      opts.min_token_freq = settings.get<int>("data", "min_token_freq", 1);
      opts.synonyms = syn ? &*syn : nullptr;
      auto cv = cross_validate(mc, samples, tc, opts);
      auto j = cv.to_json();
      write_json(out, j);
      std::ostringstream csv;
      csv << "fold,category,n,correct,accuracy\n";
      for (const auto& f : cv.folds) {
        std::istringstream rows(f.to_csv());
        std::string line;
        std::getline(rows, line);  // header
        while (std::getline(rows, line)) csv << f.fold_id << ',' << line << '\n';
      }
      write_text(fs::path(out).replace_extension(".csv"), csv.str());
      auto table = model_comparison_table({comparison_row_from_json(j, variant_name(mc))});
      std::cout << table.text;
      std::cout << "per category:";
      for (const auto& [c, ms] : cv.per_category) std::cout << ' ' << category_name(c) << '=' << format_mean_std(ms.first, ms.second);
      std::cout << '\n';
      return 0;
    }
    if (*evaluate_cmd || *analyze) {
      auto syn = synonyms(settings);
      auto sys = load_checkpoint(checkpoint);
      auto samples = load_samples(settings, data_root(settings, data_dir));
      json j;
      if (*evaluate_cmd) {
        auto report = evaluate(sys, samples, syn ? &*syn : nullptr);
        j = report.to_json();
        if (!out.empty()) write_text(fs::path(out).replace_extension(".csv"), report.to_csv());
      } else {
        auto preds = predicted_answers(sys, samples);
        j = answer_type_analysis(samples, preds, sys.answer_categories, syn ? &*syn : nullptr).to_json();
      }
      if (!out.empty()) write_json(out, j);
      std::cout << j.dump(2) << '\n';
      return 0;
    }
    if (*explain) {
      auto sys = load_checkpoint(checkpoint);
      auto image = load_image(image_path);
      auto pred = predict(sys, image, question, 3);
      auto cam = gradcam(sys, image, question, target);
      write_bytes(out, render_overlay(cam.heatmap, image, alpha));
      json j = {{"overlay", out},
                {"target_class", cam.heatmap.target_class},
                {"target_answer", sys.answers.answer(cam.heatmap.target_class)},
                {"predicted_answer", pred.top_k.front().answer},
                {"layer", cam.heatmap.layer_name},
                {"degenerate", cam.heatmap.degenerate}};
      if (!attention_prefix.empty()) {
        auto pngs = render_attention(attention_maps(sys, image, question), image);
        json files = json::array();
        for (size_t k = 0; k < pngs.size(); ++k) {
          auto path = attention_prefix + "_layer" + std::to_string(k + 1) + ".png";
          write_bytes(path, pngs[k]);
          files.push_back(path);
        }
        j["attention"] = files;
      }
      std::cout << j.dump() << '\n';
      return 0;
    }
    if (*compare) {
      std::vector<ComparisonRow> rows;
      for (const auto& r : reports) {
        std::ifstream in(r);
        if (!in) throw UsageError("cannot read report " + r);
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw DataError("report " + r + " is not valid JSON: " + e.what());
        }
        rows.push_back(comparison_row_from_json(j, fs::path(r).stem().string()));
      }
      auto table = model_comparison_table(std::move(rows));
      if (!csv_out.empty()) write_text(csv_out, table.csv);
      std::cout << table.text;
      return 0;
    }
    if (*serve) return run_serve(models_dir, bind);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
