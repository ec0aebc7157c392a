#include "medvqa/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>
#include <zlib.h>

#include "medvqa/error.hpp"

namespace medvqa {

nlohmann::json Heatmap::to_json() const {
  return {{"height", height},           {"width", width},          {"values", values},
          {"target_class", target_class}, {"layer_name", layer_name}, {"degenerate", degenerate}};
}

CamResult gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients, int out_height,
                                   int out_width) {
  if (activations.dim() != 3 || !activations.sizes().equals(gradients.sizes())) {
    throw ShapeError("gradcam expects activations and gradients of equal shape [C,h,w]");
  }
  if (out_height < 1 || out_width < 1) throw ShapeError("gradcam output size must be positive");
  auto A = activations.detach().to(torch::kFloat64);
  auto G = gradients.detach().to(torch::kFloat64);
  CamResult r;
  r.channel_weights = G.mean({1, 2});
  r.raw = torch::relu((r.channel_weights.view({-1, 1, 1}) * A).sum(0));
  auto up = torch::nn::functional::interpolate(
                r.raw.unsqueeze(0).unsqueeze(0),
                torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{out_height, out_width})
                    .mode(torch::kBilinear)
                    .align_corners(false))
                .squeeze()
                .clamp_min(0.0)
                .contiguous();
  Heatmap& h = r.heatmap;
  h.height = out_height;
  h.width = out_width;
  h.values.assign(up.data_ptr<double>(), up.data_ptr<double>() + up.numel());
  const double mx = *std::max_element(h.values.begin(), h.values.end());
  if (!(mx > 0.0)) {
    std::fill(h.values.begin(), h.values.end(), 0.0);
    h.degenerate = true;
  } else {
    for (double& v : h.values) v /= mx;
  }
  return r;
}

namespace {

torch::Dtype dtype_of(const torch::nn::Module& m) { return m.parameters().front().scalar_type(); }

torch::Tensor single_question(VqaSystem& system, const std::string& question, torch::Tensor& lengths) {
  const std::string qs[] = {question};
  auto batch = question_batch(system, qs);
  lengths = batch.lengths;
  return batch.ids;
}

class EvalScope {
 public:
  explicit EvalScope(torch::nn::Module& m) : m_(m), was_training_(m.is_training()) { m_.eval(); }
  ~EvalScope() {
    if (was_training_) m_.train();
  }
  EvalScope(const EvalScope&) = delete;
  EvalScope& operator=(const EvalScope&) = delete;

 private:
  torch::nn::Module& m_;
  bool was_training_;
};

double class_probability(VqaSystem& system, const Image& image, const torch::Tensor& ids, const torch::Tensor& lengths,
                         std::int64_t target) {
  torch::NoGradGuard no_grad;
  auto x = preprocess_image(image, system.config.image_encoder.input_size).unsqueeze(0).to(dtype_of(*system.model));
  auto logits = system.model->forward(x, ids, lengths).to(torch::kFloat64);
  return torch::softmax(logits, 1)[0][target].item<double>();
}

}  // namespace

CamResult gradcam(VqaSystem& system, const Image& image, const std::string& question,
                  std::optional<std::int64_t> target_class) {
  auto& model = system.model;
  EvalScope eval(*model);
  torch::Tensor lengths;
  auto ids = single_question(system, question, lengths);
  auto x = preprocess_image(image, system.config.image_encoder.input_size).unsqueeze(0).to(dtype_of(*model));

  torch::Tensor activations, q;
  {
    torch::NoGradGuard no_grad;
    activations = model->image_encoder()->trunk(x);
    q = model->encode_question(ids, lengths);
  }
  activations = activations.detach().requires_grad_(true);
  auto logits = model->forward_from_trunk(activations, q.detach()).logits;
  const auto n = logits.size(1);

  std::int64_t target = 0;
  if (target_class) {
    target = *target_class;
    if (target < 0 || target >= n) {
      throw RangeError("target_class " + std::to_string(target) + " outside [0," + std::to_string(n - 1) + "]");
    }
  } else {
    auto row = logits.detach().to(torch::kFloat64).contiguous();
    target = rank_logits(std::span<const double>(row.data_ptr<double>(), static_cast<size_t>(n)), system.answers, 1)
                 .predicted_class;
  }
  auto grads = torch::autograd::grad({logits[0][target]}, {activations}, {}, false, false);
  auto result = gradcam_from_activations(activations[0], grads[0][0], image.height, image.width);
  result.heatmap.target_class = target;
  result.heatmap.layer_name = model->image_encoder()->trunk_layer_name();
  return result;
}

DeletionResult deletion_check(VqaSystem& system, const Image& image, const std::string& question,
                              const Heatmap& heatmap, double fraction, std::mt19937_64& rng,
                              const std::vector<float>& fill_rgb) {
  if (heatmap.height != image.height || heatmap.width != image.width) {
    throw ShapeError("deletion_check: heatmap and image sizes differ");
  }
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("deletion fraction must lie in [0,1]");
  if (fill_rgb.size() != 3) throw ShapeError("fill value needs three channels");
  if (heatmap.target_class < 0) throw RangeError("heatmap has no target class");
  EvalScope eval(*system.model);
  torch::Tensor lengths;
  auto ids = single_question(system, question, lengths);

  const size_t n = static_cast<size_t>(image.height) * static_cast<size_t>(image.width);
  const auto k = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));

  std::vector<size_t> by_saliency(n);
  std::iota(by_saliency.begin(), by_saliency.end(), 0);
  std::stable_sort(by_saliency.begin(), by_saliency.end(),
                   [&](size_t a, size_t b) { return heatmap.values[a] > heatmap.values[b]; });
  std::vector<size_t> random_order(n);
  std::iota(random_order.begin(), random_order.end(), 0);
  std::shuffle(random_order.begin(), random_order.end(), rng);

  auto masked = [&](const std::vector<size_t>& order) {
    Image out = image;
    for (size_t i = 0; i < k; ++i) {
      const int y = static_cast<int>(order[i] / static_cast<size_t>(image.width));
      const int x = static_cast<int>(order[i] % static_cast<size_t>(image.width));
      for (int c = 0; c < Image::channels; ++c) out.at(y, x, c) = fill_rgb[static_cast<size_t>(c)];
    }
    return out;
  };

  DeletionResult r;
  r.base_probability = class_probability(system, image, ids, lengths, heatmap.target_class);
  r.drop_top = r.base_probability - class_probability(system, masked(by_saliency), ids, lengths, heatmap.target_class);
  r.drop_random =
      r.base_probability - class_probability(system, masked(random_order), ids, lengths, heatmap.target_class);
  return r;
}

Image overlay_image(const Heatmap& heatmap, const Image& image, double alpha) {
  if (heatmap.height != image.height || heatmap.width != image.width) {
    throw ShapeError("overlay: heatmap is " + std::to_string(heatmap.height) + "x" + std::to_string(heatmap.width) +
                     " but image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0,1]");
  cv::Mat levels(heatmap.height, heatmap.width, CV_8U);
  for (int y = 0; y < heatmap.height; ++y) {
    for (int x = 0; x < heatmap.width; ++x) {
      levels.at<std::uint8_t>(y, x) =
          static_cast<std::uint8_t>(std::lround(std::clamp(heatmap.at(y, x), 0.0, 1.0) * 255.0));
    }
  }
  cv::Mat colored;
  cv::applyColorMap(levels, colored, cv::COLORMAP_VIRIDIS);  // BGR
  Image out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double gray = 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
      const auto bgr = colored.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const double color = bgr[2 - c] / 255.0;
        out.at(y, x, c) = static_cast<float>((1.0 - alpha) * gray + alpha * color);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> add_png_text(const std::vector<std::uint8_t>& png, const std::string& key,
                                       const std::string& value) {
  constexpr size_t kSignature = 8;
  if (png.size() < kSignature + 25 || std::string(png.begin() + 12, png.begin() + 16) != "IHDR") {
    throw ShapeError("not a PNG stream");
  }
  const size_t ihdr_len = (size_t{png[8]} << 24) | (size_t{png[9]} << 16) | (size_t{png[10]} << 8) | png[11];
  const size_t insert_at = kSignature + 12 + ihdr_len;

  std::vector<std::uint8_t> chunk;
  const std::string body = key + std::string(1, '\0') + value;
  const auto len = static_cast<std::uint32_t>(body.size());
  for (int shift = 24; shift >= 0; shift -= 8) chunk.push_back(static_cast<std::uint8_t>(len >> shift));
  const size_t type_start = chunk.size();
  for (char c : std::string("tEXt") + body) chunk.push_back(static_cast<std::uint8_t>(c));
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, chunk.data() + type_start, static_cast<uInt>(chunk.size() - type_start)));
  for (int shift = 24; shift >= 0; shift -= 8) chunk.push_back(static_cast<std::uint8_t>(crc >> shift));

  std::vector<std::uint8_t> out(png.begin(), png.begin() + static_cast<std::ptrdiff_t>(insert_at));
  out.insert(out.end(), chunk.begin(), chunk.end());
  out.insert(out.end(), png.begin() + static_cast<std::ptrdiff_t>(insert_at), png.end());
  return out;
}

std::vector<std::uint8_t> render_overlay(const Heatmap& heatmap, const Image& image, double alpha) {
  return add_png_text(encode_png(overlay_image(heatmap, image, alpha)), "Colormap", kColormapName);
}

Heatmap upsample_attention(const AttentionDistribution& attention, int height, int width) {
  if (attention.grid_h < 1 || attention.grid_w < 1 ||
      attention.weights.size() != static_cast<size_t>(attention.grid_h) * static_cast<size_t>(attention.grid_w)) {
    throw ShapeError("attention grid does not match its weights");
  }
  Heatmap h;
  h.height = height;
  h.width = width;
  h.layer_name = "attention";
  h.values.resize(static_cast<size_t>(height) * static_cast<size_t>(width));
  const double mx = *std::max_element(attention.weights.begin(), attention.weights.end());
  h.degenerate = !(mx > 0.0);
  for (int y = 0; y < height; ++y) {
    const int gy = static_cast<int>(static_cast<std::int64_t>(y) * attention.grid_h / height);
    for (int x = 0; x < width; ++x) {
      const int gx = static_cast<int>(static_cast<std::int64_t>(x) * attention.grid_w / width);
      const double w = attention.weights[static_cast<size_t>(gy * attention.grid_w + gx)];
      h.values[static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)] =
          h.degenerate ? 0.0 : w / mx;
    }
  }
  return h;
}

std::vector<std::vector<std::uint8_t>> render_attention(const std::vector<AttentionDistribution>& attentions,
                                                        const Image& image, double alpha) {
  if (attentions.empty()) throw ConfigError("no attention maps to render (model does not use san fusion)");
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& a : attentions) out.push_back(render_overlay(upsample_attention(a, image.height, image.width), image, alpha));
  return out;
}

std::vector<AttentionDistribution> attention_maps(VqaSystem& system, const Image& image, const std::string& question) {
  if (system.config.fusion != FusionKind::san) throw ConfigError("attention maps need a san fusion model");
  EvalScope eval(*system.model);
  torch::NoGradGuard no_grad;
  torch::Tensor lengths;
  auto ids = single_question(system, question, lengths);
  auto x = preprocess_image(image, system.config.image_encoder.input_size).unsqueeze(0).to(dtype_of(*system.model));
  auto out = system.model->forward_detailed(x, ids, lengths);
  auto [gh, gw] = system.model->image_encoder()->grid_shape();
  std::vector<AttentionDistribution> maps;
  for (const auto& p : out.attention) {
    auto row = p[0].to(torch::kFloat64).contiguous();
    AttentionDistribution a;
    a.grid_h = gh;
    a.grid_w = gw;
    a.weights.assign(row.data_ptr<double>(), row.data_ptr<double>() + row.numel());
    maps.push_back(std::move(a));
  }
  return maps;
}

}  // namespace medvqa
