#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "medvqa/dataset.hpp"
#include "medvqa/image.hpp"

namespace medvqa {

enum class ImageArch { vgg_small, vgg16, resnet_small, resnet50, resnet152 };
enum class OutputMode { pooled, spatial };
enum class QuestionArch { lstm, transformer };

std::string_view to_string(ImageArch a);
std::string_view to_string(OutputMode m);
std::string_view to_string(QuestionArch a);
ImageArch parse_image_arch(std::string_view s);
OutputMode parse_output_mode(std::string_view s);
QuestionArch parse_question_arch(std::string_view s);

struct ImageEncoderConfig {
  ImageArch arch = ImageArch::vgg_small;
  OutputMode output_mode = OutputMode::pooled;
  // Size of the pooled feature vector. Spatial maps keep the backbone's
  // channel count.
  int feature_dim = 1024;
  int input_size = 224;
  std::string pretrained_weights;
  // vgg variants only; resnets always normalise.
  bool batch_norm = true;
  // Scale knobs for the small variants: base channel width and number of
  // conv blocks (vgg_small) or residual stages (resnet_small).
  int width = 16;
  int depth = 0;  // 0 = architecture default (5 blocks / 4 stages)

  void validate() const;
};

class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const ImageEncoderConfig& cfg);

  // pooled: [B, feature_dim]; spatial: [B, regions, channels], regions in
  // row-major grid order.
  torch::Tensor forward(const torch::Tensor& images);

  // Activations of the layer GradCAM differentiates: the last convolution
  // of the final vgg block or the last residual block, [B, C, h, w].
  torch::Tensor trunk(const torch::Tensor& images);
  // Remainder of forward() given trunk activations.
  torch::Tensor head(const torch::Tensor& trunk_activations);

  // Global average of the final pooled convolutional map, [B, channels].
  torch::Tensor pooled_conv_features(const torch::Tensor& images);
  std::int64_t conv_channels() const { return conv_channels_; }

  // Output width: feature_dim (pooled) or conv_channels (spatial).
  std::int64_t output_dim() const;
  // Spatial grid produced for the configured input size.
  std::pair<int, int> grid_shape() const;
  std::string trunk_layer_name() const;

  const ImageEncoderConfig& config() const { return cfg_; }

 private:
  torch::Tensor final_map(const torch::Tensor& trunk_activations);

  ImageEncoderConfig cfg_;
  std::int64_t conv_channels_ = 0;
  int halvings_ = 0;
  torch::nn::Sequential stem_{nullptr};   // everything before the trunk layer
  torch::nn::Sequential tail_{nullptr};   // trunk layer -> final conv map
  torch::nn::Sequential dense_{nullptr};  // pooled mode only
  int pool_grid_ = 1;                      // adaptive pooling before dense_
};
TORCH_MODULE(ImageEncoder);

// Builds the encoder and, when configured, loads pretrained weights.
ImageEncoder build_image_encoder(const ImageEncoderConfig& cfg);

// Resize to the configured input size and normalise with the ImageNet
// channel statistics; returns [3, S, S].
torch::Tensor preprocess_image(const Image& image, int input_size);
torch::Tensor image_batch(std::span<const Image* const> images, int input_size);

struct QuestionEncoderConfig {
  QuestionArch arch = QuestionArch::lstm;
  int embedding_dim = 200;
  int hidden_dim = 256;
  int layers = 1;
  int max_tokens = 24;
  int heads = 4;            // transformer
  int ff_dim = 0;           // transformer; 0 = 4 * hidden_dim
  double dropout = 0.1;     // transformer
  std::string pretrained_embeddings;   // "token v1 v2 ..." text file
  std::string pretrained_transformer;  // weight archive for the transformer

  void validate() const;
};

struct TokenBatch {
  torch::Tensor ids;      // [B, T] int64, PAD-filled
  torch::Tensor lengths;  // [B] int64, true lengths after truncation
};

// Truncates to max_tokens and pads to max(longest, pad_to). Empty sequences
// are rejected.
TokenBatch make_token_batch(std::span<const std::vector<std::int64_t>> sequences, int max_tokens, int pad_to = 0);

class QuestionEncoderImpl : public torch::nn::Module {
 public:
  QuestionEncoderImpl(const QuestionEncoderConfig& cfg, std::int64_t vocab_size);

  // [B, hidden_dim]. The lstm variant returns the last layer's final hidden
  // state at each sequence's true length; the transformer returns the
  // prepended summary token's final state.
  torch::Tensor forward(const torch::Tensor& ids, const torch::Tensor& lengths);

  std::int64_t output_dim() const { return cfg_.hidden_dim; }
  const QuestionEncoderConfig& config() const { return cfg_; }
  torch::nn::Embedding embedding() const { return embedding_; }
  // Submodule holding everything the pretrained_transformer hook loads.
  torch::nn::Module& transformer_module();

 private:
  torch::Tensor forward_lstm(const torch::Tensor& ids, const torch::Tensor& lengths);
  torch::Tensor forward_transformer(const torch::Tensor& ids, const torch::Tensor& lengths);

  QuestionEncoderConfig cfg_;
  torch::nn::Embedding embedding_{nullptr};
  torch::nn::LSTM lstm_{nullptr};
  // transformer parts
  torch::nn::Linear input_proj_{nullptr};
  torch::Tensor summary_token_;
  torch::nn::Embedding positions_{nullptr};
  torch::nn::LayerNorm embed_norm_{nullptr};
  torch::nn::TransformerEncoder transformer_{nullptr};
};
TORCH_MODULE(QuestionEncoder);

// Builds the encoder, applying pretrained word vectors (matched by token)
// and pretrained transformer weights when configured.
QuestionEncoder build_question_encoder(const QuestionEncoderConfig& cfg, const Vocabulary& vocab);

// Copies vectors for tokens present in both the file and the vocabulary into
// the embedding table. Returns how many rows were set. A vector width that
// differs from the embedding width is a ConfigError.
size_t load_word_vectors(const std::filesystem::path& path, const Vocabulary& vocab, torch::nn::Embedding& embedding);

std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace medvqa
