#include "medvqa/encoders.hpp"

#include <fstream>
#include <sstream>

#include "medvqa/archive.hpp"
#include "medvqa/error.hpp"
#include "text_util.hpp"

namespace nn = torch::nn;

namespace medvqa {

std::string_view to_string(ImageArch a) {
  switch (a) {
    case ImageArch::vgg_small: return "vgg_small";
    case ImageArch::vgg16: return "vgg16";
    case ImageArch::resnet_small: return "resnet_small";
    case ImageArch::resnet50: return "resnet50";
    case ImageArch::resnet152: return "resnet152";
  }
  return "unknown";
}

std::string_view to_string(OutputMode m) { return m == OutputMode::pooled ? "pooled" : "spatial"; }

std::string_view to_string(QuestionArch a) { return a == QuestionArch::lstm ? "lstm" : "transformer"; }

ImageArch parse_image_arch(std::string_view s) {
  for (auto a : {ImageArch::vgg_small, ImageArch::vgg16, ImageArch::resnet_small, ImageArch::resnet50,
                 ImageArch::resnet152}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown image encoder architecture '" + std::string(s) + "'");
}

OutputMode parse_output_mode(std::string_view s) {
  if (s == "pooled") return OutputMode::pooled;
  if (s == "spatial") return OutputMode::spatial;
  throw ConfigError("unknown image output mode '" + std::string(s) + "'");
}

QuestionArch parse_question_arch(std::string_view s) {
  if (s == "lstm") return QuestionArch::lstm;
  if (s == "transformer") return QuestionArch::transformer;
  throw ConfigError("unknown question encoder architecture '" + std::string(s) + "'");
}

namespace {

bool is_vgg(ImageArch a) { return a == ImageArch::vgg_small || a == ImageArch::vgg16; }

int effective_depth(const ImageEncoderConfig& cfg) {
  switch (cfg.arch) {
    case ImageArch::vgg_small: return cfg.depth > 0 ? cfg.depth : 5;
    case ImageArch::resnet_small: return cfg.depth > 0 ? cfg.depth : 4;
    case ImageArch::vgg16: return 5;
    default: return 4;
  }
}

int ceil_half(int s) { return (s + 1) / 2; }

// Spatial size of the final conv map for a square input.
int final_grid(const ImageEncoderConfig& cfg) {
  int s = cfg.input_size;
  const int depth = effective_depth(cfg);
  if (is_vgg(cfg.arch)) {
    for (int i = 0; i < depth; ++i) s /= 2;
    return s;
  }
  s = ceil_half(s);  // strided stem conv
  s = cfg.arch == ImageArch::resnet_small ? s / 2 : ceil_half(s);  // stem pool
  for (int i = 1; i < depth; ++i) s = ceil_half(s);
  return s;
}

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1, bool bias = false) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(bias));
}

nn::Conv2d conv1x1(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false));
}

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module("conv1", conv3x3(in, out, stride));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", conv3x3(out, out));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      downsample = register_module("downsample", nn::Sequential(conv1x1(in, out, stride), nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = bn2(conv2(y));
    return torch::relu(y + (downsample ? downsample->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public nn::Module {
 public:
  static constexpr int64_t expansion = 4;

  BottleneckImpl(int64_t in, int64_t width, int64_t stride) {
    const int64_t out = width * expansion;
    conv1 = register_module("conv1", conv1x1(in, width));
    bn1 = register_module("bn1", nn::BatchNorm2d(width));
    conv2 = register_module("conv2", conv3x3(width, width, stride));
    bn2 = register_module("bn2", nn::BatchNorm2d(width));
    conv3 = register_module("conv3", conv1x1(width, out));
    bn3 = register_module("bn3", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      downsample = register_module("downsample", nn::Sequential(conv1x1(in, out, stride), nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    return torch::relu(y + (downsample ? downsample->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

void add_vgg_conv(nn::Sequential& seq, int64_t in, int64_t out, bool batch_norm) {
  seq->push_back(conv3x3(in, out, 1, !batch_norm));
  if (batch_norm) seq->push_back(nn::BatchNorm2d(out));
  seq->push_back(nn::ReLU());
}

}  // namespace

void ImageEncoderConfig::validate() const {
  if (feature_dim <= 0) throw ConfigError("image feature_dim must be positive");
  if (width <= 0 || depth < 0) throw ConfigError("image encoder width/depth must be positive");
  if (input_size <= 0) throw ConfigError("image input_size must be positive");
  if (final_grid(*this) < 1) {
    throw ConfigError("input_size " + std::to_string(input_size) + " is too small for " + std::string(to_string(arch)));
  }
}

ImageEncoderImpl::ImageEncoderImpl(const ImageEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int depth = effective_depth(cfg_);
  nn::Sequential stem, tail;

  if (is_vgg(cfg_.arch)) {
    std::vector<int64_t> widths;
    int convs_per_block = 2;
    if (cfg_.arch == ImageArch::vgg16) {
      widths = {64, 128, 256, 512, 512};
    } else {
      for (int b = 0; b < depth; ++b) widths.push_back(std::min<int64_t>(int64_t{cfg_.width} << b, 512));
    }
    int64_t in = 3;
    for (size_t b = 0; b < widths.size(); ++b) {
      if (cfg_.arch == ImageArch::vgg16) convs_per_block = b < 2 ? 2 : 3;
      for (int c = 0; c < convs_per_block; ++c) {
        add_vgg_conv(stem, in, widths[b], cfg_.batch_norm);
        in = widths[b];
      }
      if (b + 1 < widths.size()) stem->push_back(nn::MaxPool2d(2));
    }
    tail->push_back(nn::MaxPool2d(2));
    conv_channels_ = in;
    if (cfg_.output_mode == OutputMode::pooled) {
      nn::Sequential dense;
      if (cfg_.arch == ImageArch::vgg16) {
        pool_grid_ = 7;
        dense->push_back(nn::Linear(in * 49, 4096));
        dense->push_back(nn::ReLU());
        dense->push_back(nn::Dropout(0.5));
        dense->push_back(nn::Linear(4096, 4096));
        dense->push_back(nn::ReLU());
        dense->push_back(nn::Dropout(0.5));
        dense->push_back(nn::Linear(4096, cfg_.feature_dim));
      } else {
        pool_grid_ = 2;
        dense->push_back(nn::Linear(in * 4, 512));
        dense->push_back(nn::ReLU());
        dense->push_back(nn::Linear(512, cfg_.feature_dim));
      }
      dense_ = register_module("dense", dense);
    }
  } else {
    int64_t in = 0;
    if (cfg_.arch == ImageArch::resnet_small) {
      const int64_t base = int64_t{cfg_.width} * 2;
      stem->push_back(conv3x3(3, base, 2));
      stem->push_back(nn::BatchNorm2d(base));
      stem->push_back(nn::ReLU());
      stem->push_back(nn::MaxPool2d(2));
      in = base;
      for (int s = 0; s < depth; ++s) {
        const int64_t out = std::min<int64_t>(base << s, 1024);
        const int64_t stride = s == 0 ? 1 : 2;
        stem->push_back(BasicBlock(in, out, stride));
        stem->push_back(BasicBlock(out, out, 1));
        in = out;
      }
    } else {
      const std::vector<int> blocks =
          cfg_.arch == ImageArch::resnet50 ? std::vector<int>{3, 4, 6, 3} : std::vector<int>{3, 8, 36, 3};
      stem->push_back(nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
      stem->push_back(nn::BatchNorm2d(64));
      stem->push_back(nn::ReLU());
      stem->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
      in = 64;
      for (size_t s = 0; s < blocks.size(); ++s) {
        const int64_t width = int64_t{64} << s;
        for (int b = 0; b < blocks[s]; ++b) {
          stem->push_back(Bottleneck(in, width, (b == 0 && s > 0) ? 2 : 1));
          in = width * BottleneckImpl::expansion;
        }
      }
    }
    conv_channels_ = in;
    if (cfg_.output_mode == OutputMode::pooled) {
      pool_grid_ = 1;
      nn::Sequential dense;
      dense->push_back(nn::Linear(in, cfg_.feature_dim));
      dense_ = register_module("dense", dense);
    }
  }
  stem_ = register_module("features", stem);
  tail_ = register_module("tail", tail);
}

torch::Tensor ImageEncoderImpl::trunk(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.input_size ||
      images.size(3) != cfg_.input_size) {
    std::ostringstream msg;
    msg << "image encoder expects [B,3," << cfg_.input_size << "," << cfg_.input_size << "], got " << images.sizes();
    throw ShapeError(msg.str());
  }
  return stem_->forward(images);
}

torch::Tensor ImageEncoderImpl::final_map(const torch::Tensor& trunk_activations) {
  return tail_->is_empty() ? trunk_activations : tail_->forward(trunk_activations);
}

torch::Tensor ImageEncoderImpl::head(const torch::Tensor& trunk_activations) {
  auto map = final_map(trunk_activations);
  if (cfg_.output_mode == OutputMode::spatial) {
    return map.flatten(2).transpose(1, 2).contiguous();
  }
  auto pooled = torch::adaptive_avg_pool2d(map, {pool_grid_, pool_grid_}).flatten(1);
  return dense_->forward(pooled);
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images) { return head(trunk(images)); }

torch::Tensor ImageEncoderImpl::pooled_conv_features(const torch::Tensor& images) {
  return final_map(trunk(images)).mean({2, 3});
}

std::int64_t ImageEncoderImpl::output_dim() const {
  return cfg_.output_mode == OutputMode::pooled ? cfg_.feature_dim : conv_channels_;
}

std::pair<int, int> ImageEncoderImpl::grid_shape() const {
  int g = final_grid(cfg_);
  return {g, g};
}

std::string ImageEncoderImpl::trunk_layer_name() const {
  if (is_vgg(cfg_.arch)) return "features.block" + std::to_string(effective_depth(cfg_)) + ".last_conv";
  return "features.stage" + std::to_string(effective_depth(cfg_)) + ".last_block";
}

ImageEncoder build_image_encoder(const ImageEncoderConfig& cfg) {
  ImageEncoder encoder(cfg);
  if (!cfg.pretrained_weights.empty()) {
    auto archive = load_archive(cfg.pretrained_weights);
    if (archive.metadata.contains("arch") && archive.metadata["arch"].get<std::string>() != to_string(cfg.arch)) {
      throw LoadError("weights in " + cfg.pretrained_weights + " were saved for " +
                      archive.metadata["arch"].get<std::string>() + ", not " + std::string(to_string(cfg.arch)));
    }
    // Archives from contrastive pretraining carry the convolutional trunk
    // only; dense layers then keep their fresh initialisation.
    auto trunk_only = archive.metadata.value("trunk_only", false);
    if (trunk_only) {
      TensorArchive filtered;
      auto state = module_state(*encoder);
      for (const auto& [name, t] : state) {
        if (name.rfind("dense.", 0) == 0) {
          filtered.tensors.emplace_back(name, t.detach().clone());
        } else if (auto* src = archive.find(name)) {
          filtered.tensors.emplace_back(name, *src);
        }
      }
      apply_archive(*encoder, filtered);
    } else {
      apply_archive(*encoder, archive);
    }
  }
  return encoder;
}

torch::Tensor preprocess_image(const Image& image, int input_size) {
  const Image& src = image;
  Image resized;
  const Image* use = &src;
  if (src.height != input_size || src.width != input_size) {
    resized = resize_image(src, input_size, input_size);
    use = &resized;
  }
  static const float mean[3] = {0.485f, 0.456f, 0.406f};
  static const float stdev[3] = {0.229f, 0.224f, 0.225f};
  auto t = torch::empty({3, input_size, input_size});
  auto acc = t.accessor<float, 3>();
  for (int y = 0; y < input_size; ++y) {
    for (int x = 0; x < input_size; ++x) {
      for (int c = 0; c < 3; ++c) acc[c][y][x] = (use->at(y, x, c) - mean[c]) / stdev[c];
    }
  }
  return t;
}

torch::Tensor image_batch(std::span<const Image* const> images, int input_size) {
  std::vector<torch::Tensor> items;
  items.reserve(images.size());
  for (const Image* img : images) items.push_back(preprocess_image(*img, input_size));
  return torch::stack(items);
}

void QuestionEncoderConfig::validate() const {
  if (embedding_dim <= 0 || hidden_dim <= 0 || layers <= 0 || max_tokens <= 0) {
    throw ConfigError("question encoder dimensions must be positive");
  }
  if (arch == QuestionArch::transformer) {
    if (heads <= 0 || hidden_dim % heads != 0) throw ConfigError("transformer hidden_dim must be divisible by heads");
    if (ff_dim < 0) throw ConfigError("transformer ff_dim must be non-negative");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
}

TokenBatch make_token_batch(std::span<const std::vector<std::int64_t>> sequences, int max_tokens, int pad_to) {
  if (sequences.empty()) throw ShapeError("empty question batch");
  std::int64_t longest = 0;
  for (const auto& s : sequences) {
    if (s.empty()) throw ShapeError("question has no tokens");
    longest = std::max<std::int64_t>(longest, std::min<std::int64_t>(static_cast<std::int64_t>(s.size()), max_tokens));
  }
  const std::int64_t T = std::max<std::int64_t>(longest, pad_to);
  TokenBatch batch;
  batch.ids = torch::full({static_cast<std::int64_t>(sequences.size()), T}, Vocabulary::pad_id, torch::kInt64);
  batch.lengths = torch::empty({static_cast<std::int64_t>(sequences.size())}, torch::kInt64);
  auto ids = batch.ids.accessor<std::int64_t, 2>();
  auto lengths = batch.lengths.accessor<std::int64_t, 1>();
  for (size_t b = 0; b < sequences.size(); ++b) {
    const auto n = std::min<std::int64_t>(static_cast<std::int64_t>(sequences[b].size()), max_tokens);
    for (std::int64_t t = 0; t < n; ++t) ids[static_cast<std::int64_t>(b)][t] = sequences[b][static_cast<size_t>(t)];
    lengths[static_cast<std::int64_t>(b)] = n;
  }
  return batch;
}

QuestionEncoderImpl::QuestionEncoderImpl(const QuestionEncoderConfig& cfg, std::int64_t vocab_size) : cfg_(cfg) {
  cfg_.validate();
  if (vocab_size < 2) throw ConfigError("vocabulary must contain at least PAD and UNK");
  embedding_ = register_module(
      "embedding", nn::Embedding(nn::EmbeddingOptions(vocab_size, cfg_.embedding_dim).padding_idx(Vocabulary::pad_id)));
  if (cfg_.arch == QuestionArch::lstm) {
    lstm_ = register_module(
        "lstm", nn::LSTM(nn::LSTMOptions(cfg_.embedding_dim, cfg_.hidden_dim).num_layers(cfg_.layers).batch_first(true)));
    return;
  }
  if (cfg_.embedding_dim != cfg_.hidden_dim) {
    input_proj_ = register_module("input_proj", nn::Linear(cfg_.embedding_dim, cfg_.hidden_dim));
  }
  summary_token_ = register_parameter("summary_token", torch::randn({1, 1, cfg_.hidden_dim}) * 0.02);
  positions_ = register_module("positions", nn::Embedding(cfg_.max_tokens + 1, cfg_.hidden_dim));
  embed_norm_ = register_module("embed_norm", nn::LayerNorm(nn::LayerNormOptions({cfg_.hidden_dim})));
  auto layer = nn::TransformerEncoderLayer(nn::TransformerEncoderLayerOptions(cfg_.hidden_dim, cfg_.heads)
                                               .dim_feedforward(cfg_.ff_dim > 0 ? cfg_.ff_dim : 4 * cfg_.hidden_dim)
                                               .dropout(cfg_.dropout)
                                               .activation(torch::kGELU));
  transformer_ = register_module("encoder", nn::TransformerEncoder(nn::TransformerEncoderOptions(layer, cfg_.layers)));
}

torch::nn::Module& QuestionEncoderImpl::transformer_module() { return *this; }

torch::Tensor QuestionEncoderImpl::forward(const torch::Tensor& ids, const torch::Tensor& lengths) {
  if (ids.dim() != 2 || lengths.dim() != 1 || ids.size(0) != lengths.size(0)) {
    throw ShapeError("question encoder expects ids [B,T] and lengths [B]");
  }
  auto cpu_lengths = lengths.to(torch::kCPU, torch::kInt64);
  if (cpu_lengths.numel() == 0 || cpu_lengths.min().item<std::int64_t>() < 1) {
    throw ShapeError("question has no tokens");
  }
  const std::int64_t longest = cpu_lengths.max().item<std::int64_t>();
  if (longest > ids.size(1)) throw ShapeError("question length exceeds the padded width");
  if (longest > cfg_.max_tokens) throw ShapeError("question longer than max_tokens; truncate first");
  auto trimmed = ids.narrow(1, 0, longest);
  return cfg_.arch == QuestionArch::lstm ? forward_lstm(trimmed, cpu_lengths) : forward_transformer(trimmed, cpu_lengths);
}

torch::Tensor QuestionEncoderImpl::forward_lstm(const torch::Tensor& ids, const torch::Tensor& lengths) {
  auto embedded = embedding_(ids);
  auto packed = nn::utils::rnn::pack_padded_sequence(embedded, lengths, /*batch_first=*/true, /*enforce_sorted=*/false);
  auto result = lstm_->forward_with_packed_input(packed);
  const auto& h_n = std::get<0>(std::get<1>(result));
  return h_n[cfg_.layers - 1];
}

torch::Tensor QuestionEncoderImpl::forward_transformer(const torch::Tensor& ids, const torch::Tensor& lengths) {
  const auto B = ids.size(0), T = ids.size(1);
  auto x = embedding_(ids);
  if (input_proj_) x = input_proj_(x);
  x = torch::cat({summary_token_.expand({B, 1, cfg_.hidden_dim}), x}, 1);
  auto pos = torch::arange(T + 1, torch::TensorOptions().dtype(torch::kInt64));
  x = embed_norm_(x + positions_(pos).unsqueeze(0));
  auto padding_mask = pos.unsqueeze(0) > lengths.unsqueeze(1);  // [B, T+1], true = ignore
  auto out = transformer_->forward(x.transpose(0, 1), torch::Tensor(), padding_mask);
  return out[0];
}

QuestionEncoder build_question_encoder(const QuestionEncoderConfig& cfg, const Vocabulary& vocab) {
  QuestionEncoder encoder(cfg, static_cast<std::int64_t>(vocab.size()));
  if (!cfg.pretrained_embeddings.empty()) {
    auto embedding = encoder->embedding();
    load_word_vectors(cfg.pretrained_embeddings, vocab, embedding);
  }
  if (!cfg.pretrained_transformer.empty()) {
    if (cfg.arch != QuestionArch::transformer) {
      throw ConfigError("pretrained_transformer requires the transformer question encoder");
    }
    apply_archive(encoder->transformer_module(), load_archive(cfg.pretrained_transformer));
  }
  return encoder;
}

size_t load_word_vectors(const std::filesystem::path& path, const Vocabulary& vocab, torch::nn::Embedding& embedding) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open word vector file " + path.string());
  const std::int64_t dim = embedding->weight.size(1);
  torch::NoGradGuard no_grad;
  auto weight = embedding->weight;
  size_t matched = 0;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    std::vector<float> values;
    float v;
    while (fields >> v) values.push_back(v);
    if (line_no == 1 && values.size() == 1) continue;  // word2vec "count dim" header
    if (static_cast<std::int64_t>(values.size()) != dim) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": vector has dimension " +
                        std::to_string(values.size()) + " but embedding_dim is " + std::to_string(dim));
    }
    std::string key = text::to_lower(token);
    if (!vocab.contains(key)) continue;
    const auto row = vocab.id(key);
    if (row == Vocabulary::pad_id || row == Vocabulary::unk_id) continue;
    weight[row].copy_(torch::tensor(values));
    ++matched;
  }
  return matched;
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace medvqa
