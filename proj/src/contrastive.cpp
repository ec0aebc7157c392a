#include "medvqa/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "medvqa/error.hpp"

namespace nn = torch::nn;

namespace medvqa {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (batch_size < 2) throw ConfigError("contrastive batch_size must be at least 2");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (projection_dim < 1) throw ConfigError("projection_dim must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  augment.validate();
}

torch::Tensor nt_xent_loss(const torch::Tensor& z, double temperature) {
  if (z.dim() != 2 || z.size(0) % 2 != 0 || z.size(0) < 4) {
    throw ShapeError("nt_xent_loss expects [2N, D] with N >= 2");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  auto norms = z.norm(2, 1, true);
  if (norms.min().item<double>() == 0.0) throw ShapeError("nt_xent_loss: zero-norm embedding row");
  auto zn = z / norms;
  const auto n = z.size(0);
  auto sim = torch::mm(zn, zn.t()) / temperature;
  auto eye = torch::eye(n, torch::TensorOptions().dtype(torch::kBool).device(z.device()));
  auto masked = sim.masked_fill(eye, -std::numeric_limits<double>::infinity());
  auto idx = torch::arange(n, torch::TensorOptions().dtype(torch::kInt64).device(z.device()));
  auto partner = torch::bitwise_xor(idx, 1);
  auto positive = sim.gather(1, partner.unsqueeze(1)).squeeze(1);
  return (torch::logsumexp(masked, 1) - positive).mean();
}

ProjectionHeadImpl::ProjectionHeadImpl(std::int64_t input_dim, std::int64_t projection_dim) {
  fc1_ = register_module("fc1", nn::Linear(input_dim, input_dim));
  fc2_ = register_module("fc2", nn::Linear(input_dim, projection_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) { return fc2_(torch::relu(fc1_(x))); }

namespace {

bool is_dense(const std::string& name) { return name.rfind("dense.", 0) == 0; }

}  // namespace

PretrainResult pretrain_encoder(std::span<const Image> images, const ImageEncoderConfig& encoder_cfg,
                                const ContrastiveConfig& cfg, std::uint64_t seed, const EpochCallback& on_epoch) {
  cfg.validate();
  if (static_cast<int>(images.size()) < cfg.batch_size) {
    throw DataError("contrastive pretraining needs at least batch_size=" + std::to_string(cfg.batch_size) +
                    " images, got " + std::to_string(images.size()));
  }
  torch::manual_seed(seed);
  ImageEncoderConfig ecfg = encoder_cfg;
  ecfg.pretrained_weights.clear();
  ImageEncoder encoder(ecfg);
  ProjectionHead head(encoder->conv_channels(), cfg.projection_dim);
  encoder->train();
  head->train();

  std::vector<torch::Tensor> params;
  for (const auto& item : encoder->named_parameters()) {
    if (!is_dense(item.key())) params.push_back(item.value());
  }
  for (auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(cfg.learning_rate));

  std::mt19937_64 rng(seed);
  std::vector<size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const size_t batches_per_epoch = images.size() / static_cast<size_t>(cfg.batch_size);
  const double total_steps = static_cast<double>(batches_per_epoch) * cfg.epochs;
  size_t step = 0;

  PretrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (size_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<torch::Tensor> views;
      views.reserve(2 * static_cast<size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const Image& img = images[order[b * static_cast<size_t>(cfg.batch_size) + static_cast<size_t>(i)]];
        for (int v = 0; v < 2; ++v) views.push_back(preprocess_image(augment(img, cfg.augment, rng), ecfg.input_size));
      }
      const double lr = 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

      auto z = head->forward(encoder->pooled_conv_features(torch::stack(views)));
      auto loss = nt_xent_loss(z, cfg.temperature);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw DivergenceError("contrastive loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      loss_sum += value;
      ++step;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches_per_epoch));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }

  encoder->eval();
  for (auto& [name, t] : module_state(*encoder)) {
    if (!is_dense(name)) result.encoder_weights.tensors.emplace_back(name, t.detach().clone());
  }
  result.encoder_weights.metadata = {{"kind", "image_encoder"},
                                     {"arch", to_string(ecfg.arch)},
                                     {"trunk_only", true},
                                     {"width", ecfg.width},
                                     {"depth", ecfg.depth},
                                     {"batch_norm", ecfg.batch_norm},
                                     {"seed", seed},
                                     {"epochs", cfg.epochs},
                                     {"temperature", cfg.temperature}};
  return result;
}

PretrainResult pretrain_encoder(const std::filesystem::path& image_dir, const ImageEncoderConfig& encoder_cfg,
                                const ContrastiveConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& weights_out, const std::filesystem::path& loss_log) {
  if (!std::filesystem::is_directory(image_dir)) throw DataError("not a directory: " + image_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(image_dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> images;
  for (const auto& f : files) {
    try {
      images.push_back(resize_image(load_image(f), encoder_cfg.input_size, encoder_cfg.input_size));
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << '\n';
    }
  }
  if (images.empty()) throw DataError("no readable images in " + image_dir.string());

  auto result = pretrain_encoder(images, encoder_cfg, cfg, seed);
  save_archive(weights_out, result.encoder_weights);
  nlohmann::json log = {{"epochs", nlohmann::json::array()}};
  for (size_t i = 0; i < result.epoch_loss.size(); ++i) {
    log["epochs"].push_back({{"epoch", i + 1}, {"loss", result.epoch_loss[i]}});
  }
  std::ofstream out(loss_log);
  if (!out) throw DataError("cannot write " + loss_log.string());
  out << log.dump(2) << '\n';
  return result;
}

namespace {

torch::Tensor frozen_features(ImageEncoder& encoder, std::span<const Image> images) {
  torch::NoGradGuard no_grad;
  const int size = encoder->config().input_size;
  std::vector<torch::Tensor> out;
  for (size_t start = 0; start < images.size(); start += 64) {
    const size_t n = std::min<size_t>(64, images.size() - start);
    std::vector<torch::Tensor> batch;
    for (size_t i = 0; i < n; ++i) batch.push_back(preprocess_image(images[start + i], size));
    out.push_back(encoder->pooled_conv_features(torch::stack(batch)));
  }
  return torch::cat(out).to(torch::kFloat64);
}

torch::Tensor label_tensor(std::span<const int> labels) {
  std::vector<std::int64_t> v(labels.begin(), labels.end());
  return torch::tensor(v, torch::kInt64);
}

}  // namespace

double linear_probe(ImageEncoder& encoder, std::span<const Image> train_images, std::span<const int> train_labels,
                    std::span<const Image> test_images, std::span<const int> test_labels, const ProbeConfig& cfg) {
  if (train_images.size() != train_labels.size() || test_images.size() != test_labels.size()) {
    throw ShapeError("linear_probe: image and label counts differ");
  }
  if (train_images.empty() || test_images.empty()) throw DataError("linear_probe needs train and test samples");
  int n_classes = 0;
  for (int l : train_labels) n_classes = std::max(n_classes, l + 1);
  for (int l : test_labels) n_classes = std::max(n_classes, l + 1);
  if (n_classes <= 1) return 1.0;

  const bool was_training = encoder->is_training();
  encoder->eval();
  auto train_x = frozen_features(encoder, train_images);
  auto test_x = frozen_features(encoder, test_images);
  if (was_training) encoder->train();

  auto mean = train_x.mean(0, true);
  auto stdev = train_x.std(0, false, true).clamp_min(1e-6);
  train_x = (train_x - mean) / stdev;
  test_x = (test_x - mean) / stdev;
  auto train_y = label_tensor(train_labels);
  auto test_y = label_tensor(test_labels);

  torch::manual_seed(cfg.seed);
  nn::Linear classifier(train_x.size(1), n_classes);
  classifier->to(torch::kFloat64);
  torch::optim::Adam optimizer(classifier->parameters(),
                               torch::optim::AdamOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    optimizer.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(classifier(train_x), train_y);
    loss.backward();
    optimizer.step();
  }
  torch::NoGradGuard no_grad;
  auto predicted = classifier(test_x).argmax(1);
  return predicted.eq(test_y).to(torch::kFloat64).mean().item<double>();
}

}  // namespace medvqa
