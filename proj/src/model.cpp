#include "medvqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "medvqa/archive.hpp"
#include "medvqa/error.hpp"

namespace nn = torch::nn;
using nlohmann::json;

namespace medvqa {

std::string_view to_string(FusionKind f) { return f == FusionKind::concat ? "concat" : "san"; }

FusionKind parse_fusion(std::string_view s) {
  if (s == "concat") return FusionKind::concat;
  if (s == "san") return FusionKind::san;
  throw ConfigError("unknown fusion '" + std::string(s) + "' (expected concat or san)");
}

void ModelConfig::validate() const {
  image_encoder.validate();
  question_encoder.validate();
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2, got " + std::to_string(n_classes));
  if (head_hidden_dim <= 0) throw ConfigError("head_hidden_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  if (fusion == FusionKind::san && image_encoder.output_mode != OutputMode::spatial) {
    throw ConfigError("san fusion requires the spatial image output mode");
  }
  if (fusion == FusionKind::concat && image_encoder.output_mode != OutputMode::pooled) {
    throw ConfigError("concat fusion requires the pooled image output mode");
  }
  if (fusion == FusionKind::san) {
    SanConfig s = san;
    s.regions = std::max(s.regions, 1);
    s.validate();
  }
}

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it != j.end()) out = it->get<T>();
}

json image_json(const ImageEncoderConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"output_mode", to_string(c.output_mode)},
          {"feature_dim", c.feature_dim},
          {"input_size", c.input_size},
          {"pretrained_weights", c.pretrained_weights},
          {"batch_norm", c.batch_norm},
          {"width", c.width},
          {"depth", c.depth}};
}

void merge_image(const json& j, ImageEncoderConfig& c) {
  check_keys(j, {"arch", "output_mode", "feature_dim", "input_size", "pretrained_weights", "batch_norm", "width", "depth"},
             "image_encoder");
  if (j.contains("arch")) c.arch = parse_image_arch(j["arch"].get<std::string>());
  if (j.contains("output_mode")) c.output_mode = parse_output_mode(j["output_mode"].get<std::string>());
  read(j, "feature_dim", c.feature_dim);
  read(j, "input_size", c.input_size);
  read(j, "pretrained_weights", c.pretrained_weights);
  read(j, "batch_norm", c.batch_norm);
  read(j, "width", c.width);
  read(j, "depth", c.depth);
}

json question_json(const QuestionEncoderConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"embedding_dim", c.embedding_dim},
          {"hidden_dim", c.hidden_dim},
          {"layers", c.layers},
          {"max_tokens", c.max_tokens},
          {"heads", c.heads},
          {"ff_dim", c.ff_dim},
          {"dropout", c.dropout},
          {"pretrained_embeddings", c.pretrained_embeddings},
          {"pretrained_transformer", c.pretrained_transformer}};
}

void merge_question(const json& j, QuestionEncoderConfig& c) {
  check_keys(j,
             {"arch", "embedding_dim", "hidden_dim", "layers", "max_tokens", "heads", "ff_dim", "dropout",
              "pretrained_embeddings", "pretrained_transformer"},
             "question_encoder");
  if (j.contains("arch")) c.arch = parse_question_arch(j["arch"].get<std::string>());
  read(j, "embedding_dim", c.embedding_dim);
  read(j, "hidden_dim", c.hidden_dim);
  read(j, "layers", c.layers);
  read(j, "max_tokens", c.max_tokens);
  read(j, "heads", c.heads);
  read(j, "ff_dim", c.ff_dim);
  read(j, "dropout", c.dropout);
  read(j, "pretrained_embeddings", c.pretrained_embeddings);
  read(j, "pretrained_transformer", c.pretrained_transformer);
}

torch::Dtype param_dtype(const nn::Module& m) {
  auto params = m.parameters();
  return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

class EvalModeGuard {
 public:
  explicit EvalModeGuard(nn::Module& m) : module_(m), was_training_(m.is_training()) { module_.eval(); }
  ~EvalModeGuard() {
    if (was_training_) module_.train();
  }
  EvalModeGuard(const EvalModeGuard&) = delete;
  EvalModeGuard& operator=(const EvalModeGuard&) = delete;

 private:
  nn::Module& module_;
  bool was_training_;
};

}  // namespace

json ModelConfig::to_json() const {
  return {{"image_encoder", image_json(image_encoder)},
          {"question_encoder", question_json(question_encoder)},
          {"fusion", to_string(fusion)},
          {"san",
           {{"layers", san.layers},
            {"attention_hidden_dim", san.attention_hidden_dim},
            {"feature_dim", san.feature_dim},
            {"region_bias", san.region_bias}}},
          {"head_hidden_dim", head_hidden_dim},
          {"n_classes", n_classes},
          {"dropout", dropout}};
}

void ModelConfig::merge_json(const json& j) {
  try {
    check_keys(j, {"image_encoder", "question_encoder", "fusion", "san", "head_hidden_dim", "n_classes", "dropout"},
               "model config");
    if (j.contains("image_encoder")) merge_image(j["image_encoder"], image_encoder);
    if (j.contains("question_encoder")) merge_question(j["question_encoder"], question_encoder);
    if (j.contains("fusion")) fusion = parse_fusion(j["fusion"].get<std::string>());
    if (j.contains("san")) {
      const auto& s = j["san"];
      check_keys(s, {"layers", "attention_hidden_dim", "feature_dim", "region_bias", "regions"}, "san");
      read(s, "layers", san.layers);
      read(s, "attention_hidden_dim", san.attention_hidden_dim);
      read(s, "feature_dim", san.feature_dim);
      read(s, "region_bias", san.region_bias);
    }
    read(j, "head_hidden_dim", head_hidden_dim);
    read(j, "n_classes", n_classes);
    read(j, "dropout", dropout);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig cfg;
  cfg.merge_json(j);
  return cfg;
}

std::string variant_name(const ModelConfig& cfg) {
  std::string image;
  switch (cfg.image_encoder.arch) {
    case ImageArch::vgg_small: image = "VGG-small"; break;
    case ImageArch::vgg16: image = "VGG-16"; break;
    case ImageArch::resnet_small: image = "ResNet-small"; break;
    case ImageArch::resnet50: image = "ResNet-50"; break;
    case ImageArch::resnet152: image = "ResNet-152"; break;
  }
  if (!cfg.image_encoder.pretrained_weights.empty()) image += " (pretrained)";
  std::string question;
  if (cfg.question_encoder.arch == QuestionArch::lstm) {
    question = cfg.question_encoder.pretrained_embeddings.empty() ? "LSTM" : "LSTM (word vectors)";
  } else {
    question = cfg.question_encoder.pretrained_transformer.empty() ? "Transformer" : "BERT";
  }
  return image + " + " + question + " + " + (cfg.fusion == FusionKind::concat ? "Concatenation" : "SAN");
}

VqaModelImpl::VqaModelImpl(const ModelConfig& cfg, ImageEncoder image_encoder, QuestionEncoder question_encoder)
    : cfg_(cfg) {
  cfg_.validate();
  image_ = register_module("image_encoder", std::move(image_encoder));
  question_ = register_module("question_encoder", std::move(question_encoder));
  init_fusion_and_head();
}

VqaModelImpl::VqaModelImpl(const ModelConfig& cfg, std::int64_t vocab_size) : cfg_(cfg) {
  cfg_.validate();
  image_ = register_module("image_encoder", ImageEncoder(cfg_.image_encoder));
  question_ = register_module("question_encoder", QuestionEncoder(cfg_.question_encoder, vocab_size));
  init_fusion_and_head();
}

void VqaModelImpl::init_fusion_and_head() {
  std::int64_t head_in = 0;
  if (cfg_.fusion == FusionKind::concat) {
    head_in = image_->output_dim() + question_->output_dim();
  } else {
    auto [gh, gw] = image_->grid_shape();
    cfg_.san.regions = gh * gw;
    const int d = cfg_.san.feature_dim;
    region_proj_ = register_module("region_proj", nn::Linear(image_->output_dim(), d));
    question_proj_ = register_module("question_proj", nn::Linear(question_->output_dim(), d));
    san_ = register_module("san", SanFusion(cfg_.san));
    head_in = d;
  }
  head_ = register_module("head", nn::Sequential(nn::Linear(head_in, cfg_.head_hidden_dim), nn::ReLU(),
                                                 nn::Dropout(cfg_.dropout),
                                                 nn::Linear(cfg_.head_hidden_dim, cfg_.n_classes)));
}

torch::Tensor VqaModelImpl::encode_question(const torch::Tensor& ids, const torch::Tensor& lengths) {
  return question_->forward(ids, lengths);
}

ModelOutput VqaModelImpl::forward_from_trunk(const torch::Tensor& trunk_activations, const torch::Tensor& q) {
  auto image_features = image_->head(trunk_activations);
  ModelOutput out;
  if (cfg_.fusion == FusionKind::concat) {
    out.logits = head_->forward(concat_fuse(image_features, q));
    return out;
  }
  auto regions = torch::tanh(region_proj_(image_features));
  auto fused = san_->forward(regions, question_proj_(q));
  out.logits = head_->forward(fused.u);
  out.attention = std::move(fused.attention);
  return out;
}

ModelOutput VqaModelImpl::forward_detailed(const torch::Tensor& images, const torch::Tensor& ids,
                                           const torch::Tensor& lengths) {
  if (images.size(0) != ids.size(0)) throw ShapeError("image and question batch sizes differ");
  return forward_from_trunk(image_->trunk(images), encode_question(ids, lengths));
}

torch::Tensor VqaModelImpl::forward(const torch::Tensor& images, const torch::Tensor& ids,
                                    const torch::Tensor& lengths) {
  return forward_detailed(images, ids, lengths).logits;
}

std::int64_t VqaSystem::parameter_count() const { return medvqa::parameter_count(*model); }

VqaSystem build_model(const ModelConfig& cfg, Vocabulary vocab, AnswerClassMap answers, std::uint64_t seed,
                      std::map<std::string, Category> answer_categories) {
  cfg.validate();
  if (static_cast<size_t>(cfg.n_classes) != answers.size()) {
    throw ConfigError("n_classes is " + std::to_string(cfg.n_classes) + " but the answer map has " +
                      std::to_string(answers.size()) + " classes");
  }
  torch::manual_seed(seed);
  VqaSystem sys;
  sys.model = VqaModel(cfg, build_image_encoder(cfg.image_encoder), build_question_encoder(cfg.question_encoder, vocab));
  sys.config = sys.model->config();
  sys.vocab = std::move(vocab);
  sys.answers = std::move(answers);
  sys.answer_categories = std::move(answer_categories);
  return sys;
}

AnswerPrediction rank_logits(std::span<const double> logits, const AnswerClassMap& answers, int k) {
  const auto n = static_cast<int>(logits.size());
  if (n == 0) throw ShapeError("no logits to rank");
  if (k < 1 || k > n) throw ConfigError("k must lie in [1," + std::to_string(n) + "], got " + std::to_string(k));
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> prob(logits.size());
  double total = 0.0;
  for (size_t i = 0; i < prob.size(); ++i) total += (prob[i] = std::exp(logits[i] - mx));
  for (double& p : prob) p /= total;
  std::vector<std::int64_t> order(prob.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return prob[a] > prob[b]; });
  AnswerPrediction pred;
  pred.predicted_class = order.front();
  for (int i = 0; i < k; ++i) {
    const auto c = order[static_cast<size_t>(i)];
    pred.top_k.push_back({c, c < static_cast<std::int64_t>(answers.size()) ? answers.answer(c) : std::string(),
                          prob[static_cast<size_t>(c)]});
  }
  return pred;
}

std::vector<std::int64_t> encode_question_text(const Vocabulary& vocab, const std::string& question) {
  auto ids = vocab.encode(question);
  if (ids.empty()) throw DataError("question is empty");
  return ids;
}

TokenBatch question_batch(const VqaSystem& system, std::span<const std::string> questions) {
  std::vector<std::vector<std::int64_t>> seqs;
  seqs.reserve(questions.size());
  for (const auto& q : questions) seqs.push_back(encode_question_text(system.vocab, q));
  return make_token_batch(seqs, system.config.question_encoder.max_tokens);
}

std::vector<AnswerPrediction> predict_batch(VqaSystem& system, std::span<const Image* const> images,
                                            std::span<const std::string> questions, int k, int batch_size) {
  if (images.size() != questions.size()) throw ShapeError("predict_batch: image and question counts differ");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  EvalModeGuard guard(*system.model);
  torch::NoGradGuard no_grad;
  const auto dtype = param_dtype(*system.model);
  std::vector<AnswerPrediction> out;
  out.reserve(images.size());
  for (size_t start = 0; start < images.size(); start += static_cast<size_t>(batch_size)) {
    const size_t n = std::min(images.size() - start, static_cast<size_t>(batch_size));
    auto pixels = image_batch(images.subspan(start, n), system.config.image_encoder.input_size).to(dtype);
    auto tokens = question_batch(system, questions.subspan(start, n));
    auto logits = system.model->forward(pixels, tokens.ids, tokens.lengths).to(torch::kFloat64).contiguous();
    for (size_t i = 0; i < n; ++i) {
      auto row = logits[static_cast<std::int64_t>(i)];
      std::span<const double> values(row.data_ptr<double>(), static_cast<size_t>(row.numel()));
      out.push_back(rank_logits(values, system.answers, k));
    }
  }
  return out;
}

AnswerPrediction predict(VqaSystem& system, const Image& image, const std::string& question, int k) {
  const Image* images[] = {&image};
  const std::string questions[] = {question};
  return predict_batch(system, images, questions, k, 1).front();
}

void save_checkpoint(const VqaSystem& system, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  TensorArchive archive;
  archive.tensors = module_state(*system.model);
  archive.metadata = {{"kind", "vqa_model"}};
  save_archive(dir / "weights.bin", archive);

  json categories = json::object();
  for (const auto& [answer, cat] : system.answer_categories) categories[answer] = category_name(cat);
  json doc = {{"format", 1},
              {"config", system.config.to_json()},
              {"vocabulary", system.vocab.regular_tokens()},
              {"answers", system.answers.answers()},
              {"answer_frequencies", system.answers.frequencies()},
              {"answer_categories", categories},
              {"metadata", system.metadata}};
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw LoadError("cannot write " + (dir / "checkpoint.json").string());
  out << doc.dump(2) << '\n';
}

VqaSystem load_checkpoint(const std::filesystem::path& dir) {
  const auto json_path = dir / "checkpoint.json";
  std::ifstream in(json_path);
  if (!in) throw LoadError("cannot open checkpoint " + json_path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(json_path.string() + ": " + e.what());
  }
  ModelConfig cfg;
  std::vector<std::string> tokens, answers;
  std::vector<std::int64_t> frequencies;
  std::map<std::string, Category> categories;
  try {
    cfg = ModelConfig::from_json(doc.at("config"));
    tokens = doc.at("vocabulary").get<std::vector<std::string>>();
    answers = doc.at("answers").get<std::vector<std::string>>();
    frequencies = doc.at("answer_frequencies").get<std::vector<std::int64_t>>();
    const json owners = doc.value("answer_categories", json::object());
    for (const auto& [answer, cat] : owners.items()) {
      categories[answer] = parse_category(cat.get<std::string>());
    }
  } catch (const json::exception& e) {
    throw LoadError(json_path.string() + ": " + e.what());
  }
  // Weights come from the archive, so skip the pretrained-resource hooks.
  cfg.image_encoder.pretrained_weights.clear();
  cfg.question_encoder.pretrained_embeddings.clear();
  cfg.question_encoder.pretrained_transformer.clear();

  VqaSystem sys;
  sys.vocab = Vocabulary::from_tokens(tokens);
  sys.answers = AnswerClassMap::from_lists(std::move(answers), std::move(frequencies));
  sys.answer_categories = std::move(categories);
  sys.metadata = doc.value("metadata", json::object());
  sys.model = VqaModel(cfg, static_cast<std::int64_t>(sys.vocab.size()));
  sys.config = sys.model->config();
  apply_archive(*sys.model, load_archive(dir / "weights.bin"));
  sys.model->eval();
  return sys;
}

}  // namespace medvqa
