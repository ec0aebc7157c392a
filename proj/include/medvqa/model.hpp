#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvqa/dataset.hpp"
#include "medvqa/encoders.hpp"
#include "medvqa/fusion.hpp"

namespace medvqa {

enum class FusionKind { concat, san };

std::string_view to_string(FusionKind f);
FusionKind parse_fusion(std::string_view s);

struct ModelConfig {
  ImageEncoderConfig image_encoder;
  QuestionEncoderConfig question_encoder;
  FusionKind fusion = FusionKind::concat;
  SanConfig san;  // san.regions is filled in from the image grid
  int head_hidden_dim = 1024;
  int n_classes = 2;
  double dropout = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are a ConfigError.
  static ModelConfig from_json(const nlohmann::json& j);
  // Overlays the keys present in j onto this config.
  void merge_json(const nlohmann::json& j);
};

// Short human-readable name such as "VGG-small + LSTM + SAN".
std::string variant_name(const ModelConfig& cfg);

struct ModelOutput {
  torch::Tensor logits;                  // [B, n_classes]
  std::vector<torch::Tensor> attention;  // san only: one [B, m] per layer
};

class VqaModelImpl : public torch::nn::Module {
 public:
  VqaModelImpl(const ModelConfig& cfg, ImageEncoder image_encoder, QuestionEncoder question_encoder);
  VqaModelImpl(const ModelConfig& cfg, std::int64_t vocab_size);

  // images [B,3,S,S] (preprocessed), ids [B,T], lengths [B].
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& ids, const torch::Tensor& lengths);
  ModelOutput forward_detailed(const torch::Tensor& images, const torch::Tensor& ids, const torch::Tensor& lengths);
  // Continues from image trunk activations with an already encoded question.
  ModelOutput forward_from_trunk(const torch::Tensor& trunk_activations, const torch::Tensor& question_vector);
  torch::Tensor encode_question(const torch::Tensor& ids, const torch::Tensor& lengths);

  const ModelConfig& config() const { return cfg_; }
  ImageEncoder image_encoder() const { return image_; }
  QuestionEncoder question_encoder() const { return question_; }
  SanFusion san() const { return san_; }

 private:
  void init_fusion_and_head();

  ModelConfig cfg_;
  ImageEncoder image_{nullptr};
  QuestionEncoder question_{nullptr};
  torch::nn::Linear region_proj_{nullptr};
  torch::nn::Linear question_proj_{nullptr};
  SanFusion san_{nullptr};
  torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(VqaModel);

// Everything needed to answer questions: weights plus the text and answer
// mappings the weights were trained against.
struct VqaSystem {
  ModelConfig config;
  VqaModel model{nullptr};
  Vocabulary vocab;
  AnswerClassMap answers;
  std::map<std::string, Category> answer_categories;
  nlohmann::json metadata = nlohmann::json::object();

  std::int64_t parameter_count() const;
};

// Seeds torch with `seed` before creating parameters, so equal seeds give
// equal initial weights. n_classes must equal the answer map size.
VqaSystem build_model(const ModelConfig& cfg, Vocabulary vocab, AnswerClassMap answers, std::uint64_t seed = 0,
                      std::map<std::string, Category> answer_categories = {});

struct RankedAnswer {
  std::int64_t class_id = 0;
  std::string answer;
  double probability = 0.0;
};

struct AnswerPrediction {
  std::vector<RankedAnswer> top_k;
  std::int64_t predicted_class = 0;
};

// Softmax over the logits, ranked by probability with ties going to the
// lower class id.
AnswerPrediction rank_logits(std::span<const double> logits, const AnswerClassMap& answers, int k);

AnswerPrediction predict(VqaSystem& system, const Image& image, const std::string& question, int k = 5);
std::vector<AnswerPrediction> predict_batch(VqaSystem& system, std::span<const Image* const> images,
                                            std::span<const std::string> questions, int k = 1, int batch_size = 64);

// Token ids for a question; throws DataError when it has no tokens.
std::vector<std::int64_t> encode_question_text(const Vocabulary& vocab, const std::string& question);

TokenBatch question_batch(const VqaSystem& system, std::span<const std::string> questions);

// <dir>/weights.bin holds the tensors, <dir>/checkpoint.json the config,
// vocabulary, answer map and metadata.
void save_checkpoint(const VqaSystem& system, const std::filesystem::path& dir);
VqaSystem load_checkpoint(const std::filesystem::path& dir);

}  // namespace medvqa
