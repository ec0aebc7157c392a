#pragma once

#include <random>

#include "medvqa/image.hpp"

namespace medvqa {

// Each transform fires independently with its probability. Translation is in
// pixels and rotation in degrees, both drawn uniformly from
// [-translate_rotate_magnitude, +translate_rotate_magnitude].
struct AugmentConfig {
  double brightness_contrast_delta = 0.05;
  double brightness_contrast_prob = 0.4;
  double translate_rotate_magnitude = 5.0;
  double translate_rotate_prob = 0.5;
  double gaussian_blur_prob = 0.5;
  int blur_kernel = 5;
  double blur_sigma = 1.0;
  double gaussian_noise_prob = 0.4;
  double noise_sigma = 0.02;
  // Random resized crop, used by contrastive pretraining.
  double crop_prob = 0.0;
  double crop_scale_min = 1.0;
  double hflip_prob = 0.0;

  // Throws ConfigError on probabilities outside [0,1] or negative magnitudes.
  void validate() const;

  // Every probability zero.
  static AugmentConfig none();
  // Stronger crops and intensity changes, no flips.
  static AugmentConfig pretraining();
};

Image augment(const Image& image, const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace medvqa
