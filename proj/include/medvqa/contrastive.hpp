#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "medvqa/archive.hpp"
#include "medvqa/augment.hpp"
#include "medvqa/encoders.hpp"

namespace medvqa {

struct ContrastiveConfig {
  double temperature = 0.1;
  int batch_size = 128;
  int epochs = 80;
  int projection_dim = 128;
  double learning_rate = 1e-3;  // Adam, cosine-decayed to zero
  AugmentConfig augment = AugmentConfig::pretraining();

  void validate() const;
};

// Rows 2t and 2t+1 are the two views of image t. Mean over all 2N anchors of
// -log(exp(cos(z_i, z_pos)/tau) / sum_{k != i} exp(cos(z_i, z_k)/tau)).
// Differentiable; throws on odd row counts, N < 2 and zero-norm rows.
torch::Tensor nt_xent_loss(const torch::Tensor& z, double temperature);

// Two affine layers with a ReLU between, encoder_dim -> projection_dim.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(std::int64_t input_dim, std::int64_t projection_dim);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ProjectionHead);

struct PretrainResult {
  TensorArchive encoder_weights;  // convolutional trunk only; head discarded
  std::vector<double> epoch_loss;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

// The projection head sits on the globally pooled final conv features.
PretrainResult pretrain_encoder(std::span<const Image> images, const ImageEncoderConfig& encoder_cfg,
                                const ContrastiveConfig& cfg, std::uint64_t seed, const EpochCallback& on_epoch = {});

// Reads every JPEG/PNG in image_dir (unreadable files are skipped with a
// warning on stderr), pretrains, and writes the weight archive to
// weights_out and {"epochs":[{"epoch","loss"}...]} to loss_log.
PretrainResult pretrain_encoder(const std::filesystem::path& image_dir, const ImageEncoderConfig& encoder_cfg,
                                const ContrastiveConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& weights_out, const std::filesystem::path& loss_log);

struct ProbeConfig {
  int epochs = 300;
  double learning_rate = 0.05;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

// Frozen-encoder features, standardised with training statistics, then a
// single affine softmax classifier trained full-batch. Returns test accuracy.
double linear_probe(ImageEncoder& encoder, std::span<const Image> train_images, std::span<const int> train_labels,
                    std::span<const Image> test_images, std::span<const int> test_labels,
                    const ProbeConfig& cfg = {});

}  // namespace medvqa
