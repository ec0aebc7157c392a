#include "medvqa/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "image_cv.hpp"
#include "medvqa/error.hpp"

namespace medvqa {

void AugmentConfig::validate() const {
  for (double p : {brightness_contrast_prob, translate_rotate_prob, gaussian_blur_prob, gaussian_noise_prob, crop_prob,
                   hflip_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0,1]");
  }
  if (brightness_contrast_delta < 0 || translate_rotate_magnitude < 0 || noise_sigma < 0 || blur_sigma < 0) {
    throw ConfigError("augmentation magnitudes must be non-negative");
  }
  if (blur_kernel < 1 || blur_kernel % 2 == 0) throw ConfigError("blur kernel must be a positive odd size");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= 1.0)) throw ConfigError("crop_scale_min must lie in (0,1]");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.brightness_contrast_prob = 0.0;
  c.translate_rotate_prob = 0.0;
  c.gaussian_blur_prob = 0.0;
  c.gaussian_noise_prob = 0.0;
  c.crop_prob = 0.0;
  c.hflip_prob = 0.0;
  return c;
}

AugmentConfig AugmentConfig::pretraining() {
  AugmentConfig c;
  c.crop_prob = 1.0;
  c.crop_scale_min = 0.6;
  c.brightness_contrast_delta = 0.2;
  c.brightness_contrast_prob = 0.8;
  c.translate_rotate_prob = 0.0;
  c.gaussian_blur_prob = 0.5;
  c.gaussian_noise_prob = 0.4;
  c.hflip_prob = 0.0;
  return c;
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

bool fires(std::mt19937_64& rng, double p) {
  // Always consume one draw so that the stream layout does not depend on p.
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return u < p;
}

void random_resized_crop(Image& img, double scale_min, std::mt19937_64& rng) {
  const double area = static_cast<double>(img.height) * img.width;
  double scale = uniform(rng, scale_min, 1.0);
  double log_ratio = uniform(rng, std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  double ratio = std::exp(log_ratio);
  int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * scale * ratio))), 1, img.width);
  int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * scale / ratio))), 1, img.height);
  int x0 = static_cast<int>(std::floor(uniform(rng, 0.0, img.width - w + 1.0 - 1e-9)));
  int y0 = static_cast<int>(std::floor(uniform(rng, 0.0, img.height - h + 1.0 - 1e-9)));
  cv::Mat src = detail::to_mat(img);
  cv::Mat out;
  cv::resize(src(cv::Rect(x0, y0, w, h)), out, cv::Size(img.width, img.height), 0, 0, cv::INTER_LINEAR);
  img = detail::from_mat(out);
}

void horizontal_flip(Image& img) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width / 2; ++x) {
      for (int c = 0; c < Image::channels; ++c) std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
    }
  }
}

void brightness_contrast(Image& img, double delta, std::mt19937_64& rng) {
  const double brightness = uniform(rng, 1.0 - delta, 1.0 + delta);
  const double contrast = uniform(rng, 1.0 - delta, 1.0 + delta);
  double mean = 0.0;
  for (float& v : img.pixels) {
    v = static_cast<float>(v * brightness);
    mean += v;
  }
  mean /= static_cast<double>(img.pixels.size());
  for (float& v : img.pixels) v = static_cast<float>((v - mean) * contrast + mean);
}

void translate_rotate(Image& img, double magnitude, std::mt19937_64& rng) {
  const double tx = uniform(rng, -magnitude, magnitude);
  const double ty = uniform(rng, -magnitude, magnitude);
  const double angle = uniform(rng, -magnitude, magnitude);
  cv::Point2f center(static_cast<float>(img.width - 1) / 2.0f, static_cast<float>(img.height - 1) / 2.0f);
  cv::Mat m = cv::getRotationMatrix2D(center, angle, 1.0);
  m.at<double>(0, 2) += tx;
  m.at<double>(1, 2) += ty;
  cv::Mat out;
  cv::warpAffine(detail::to_mat(img), out, m, cv::Size(img.width, img.height), cv::INTER_LINEAR,
                 cv::BORDER_REPLICATE);
  img = detail::from_mat(out);
}

void gaussian_blur(Image& img, int kernel, double sigma) {
  cv::Mat out;
  cv::GaussianBlur(detail::to_mat(img), out, cv::Size(kernel, kernel), sigma, sigma, cv::BORDER_REFLECT_101);
  img = detail::from_mat(out);
}

void gaussian_noise(Image& img, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, sigma);
  for (float& v : img.pixels) v = static_cast<float>(v + noise(rng));
}

}  // namespace

Image augment(const Image& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Image out = image;
  if (fires(rng, cfg.crop_prob)) random_resized_crop(out, cfg.crop_scale_min, rng);
  if (fires(rng, cfg.hflip_prob)) horizontal_flip(out);
  if (fires(rng, cfg.brightness_contrast_prob)) brightness_contrast(out, cfg.brightness_contrast_delta, rng);
  if (fires(rng, cfg.translate_rotate_prob)) translate_rotate(out, cfg.translate_rotate_magnitude, rng);
  if (fires(rng, cfg.gaussian_blur_prob)) gaussian_blur(out, cfg.blur_kernel, cfg.blur_sigma);
  if (fires(rng, cfg.gaussian_noise_prob)) gaussian_noise(out, cfg.noise_sigma, rng);
  for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace medvqa
