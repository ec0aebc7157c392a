#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvqa/fusion.hpp"
#include "medvqa/image.hpp"
#include "medvqa/model.hpp"

namespace medvqa {

// Saliency in [0,1], row-major. Degenerate maps are all zero.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  std::int64_t target_class = -1;
  std::string layer_name;
  bool degenerate = false;

  double at(int y, int x) const { return values[static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x)]; }
  nlohmann::json to_json() const;
};

struct CamResult {
  Heatmap heatmap;
  torch::Tensor channel_weights;  // [C], spatial mean of the gradients
  torch::Tensor raw;              // [h, w], ReLU(sum_k a_k A_k) before upsampling
};

// activations and gradients are [C, h, w] for one image.
CamResult gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients, int out_height,
                                   int out_width);

// Differentiates the target logit with respect to the image trunk
// activations, holding the encoded question fixed. The target defaults to
// the predicted class; out-of-range targets raise RangeError. Model weights
// and buffers are left untouched.
CamResult gradcam(VqaSystem& system, const Image& image, const std::string& question,
                  std::optional<std::int64_t> target_class = std::nullopt);

struct DeletionResult {
  double base_probability = 0.0;
  double drop_top = 0.0;
  double drop_random = 0.0;
};

// Replaces the `fraction` most salient pixels (or as many random pixels)
// with fill_rgb and reports the drop in the heatmap's target-class
// probability.
DeletionResult deletion_check(VqaSystem& system, const Image& image, const std::string& question,
                              const Heatmap& heatmap, double fraction, std::mt19937_64& rng,
                              const std::vector<float>& fill_rgb = {0.5f, 0.5f, 0.5f});

inline constexpr const char* kColormapName = "viridis";

// Blend of the colour-mapped heatmap over a grayscale copy of the image.
Image overlay_image(const Heatmap& heatmap, const Image& image, double alpha);
// PNG of overlay_image with a tEXt "Colormap" chunk naming the colour map.
std::vector<std::uint8_t> render_overlay(const Heatmap& heatmap, const Image& image, double alpha);

// Nearest-neighbour expansion of grid weights to the image size, normalised
// by the maximum weight.
Heatmap upsample_attention(const AttentionDistribution& attention, int height, int width);
std::vector<std::vector<std::uint8_t>> render_attention(const std::vector<AttentionDistribution>& attentions,
                                                        const Image& image, double alpha = 0.5);

// Per-layer attention of a SAN model; ConfigError for other fusions.
std::vector<AttentionDistribution> attention_maps(VqaSystem& system, const Image& image, const std::string& question);

// Inserts a tEXt chunk right after IHDR.
std::vector<std::uint8_t> add_png_text(const std::vector<std::uint8_t>& png, const std::string& key,
                                       const std::string& value);

}  // namespace medvqa
