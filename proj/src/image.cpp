#include "medvqa/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "medvqa/error.hpp"
#include "image_cv.hpp"

namespace medvqa {

Image::Image(int h, int w, float fill) : height(h), width(w), pixels(static_cast<size_t>(h) * w * channels, fill) {}

void Image::validate() const {
  if (height <= 0 || width <= 0) {
    throw ShapeError("image dimensions must be positive, got " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (pixels.size() != pixel_count() * channels) {
    throw ShapeError("image buffer size does not match its dimensions");
  }
  for (float v : pixels) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw ShapeError("image pixel values must lie in [0,1]");
    }
  }
}

namespace detail {

cv::Mat to_mat(const Image& image) {
  cv::Mat m(image.height, image.width, CV_32FC3);
  std::memcpy(m.ptr<float>(), image.pixels.data(), image.pixels.size() * sizeof(float));
  return m;
}

Image from_mat(const cv::Mat& mat) {
  cv::Mat m = mat;
  if (m.type() != CV_32FC3) {
    m.convertTo(m, CV_32FC3);
  }
  if (!m.isContinuous()) {
    m = m.clone();
  }
  Image image(m.rows, m.cols);
  std::memcpy(image.pixels.data(), m.ptr<float>(), image.pixels.size() * sizeof(float));
  return image;
}

// Decoded 8/16-bit BGR(A)/gray matrix to an RGB Image.
Image from_decoded(const cv::Mat& decoded) {
  if (decoded.empty()) {
    throw DataError("could not decode image");
  }
  cv::Mat rgb;
  switch (decoded.channels()) {
    case 1: cv::cvtColor(decoded, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(decoded, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw DataError("unsupported channel count " + std::to_string(decoded.channels()));
  }
  double scale = decoded.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, scale);
  return from_mat(f);
}

}  // namespace detail

Image load_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) {
    throw DataError("could not read image " + path.string());
  }
  return detail::from_decoded(m);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) {
    throw DataError("empty image payload");
  }
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
  return detail::from_decoded(cv::imdecode(buf, cv::IMREAD_UNCHANGED));
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  cv::Mat rgb = detail::to_mat(image);
  cv::Mat bgr8;
  cv::cvtColor(rgb, rgb, cv::COLOR_RGB2BGR);
  rgb.convertTo(bgr8, CV_8UC3, 255.0);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", bgr8, out)) {
    throw Error("PNG encoding failed");
  }
  return out;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  auto bytes = encode_png(image);
  cv::Mat raw = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
  if (!cv::imwrite(path.string(), raw)) {
    throw Error("could not write " + path.string());
  }
}

Image resize_image(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) {
    throw ShapeError("resize target must be positive");
  }
  if (image.height == height && image.width == width) {
    return image;
  }
  cv::Mat out;
  bool shrinking = height < image.height && width < image.width;
  cv::resize(detail::to_mat(image), out, cv::Size(width, height), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  Image result = detail::from_mat(out);
  for (float& v : result.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return result;
}

std::vector<float> mean_pixel(std::span<const Image* const> images) {
  std::vector<double> acc(Image::channels, 0.0);
  size_t n = 0;
  for (const Image* img : images) {
    for (size_t i = 0; i < img->pixel_count(); ++i) {
      for (int c = 0; c < Image::channels; ++c) acc[c] += img->pixels[i * Image::channels + c];
    }
    n += img->pixel_count();
  }
  std::vector<float> mean(Image::channels, 0.5f);
  if (n > 0) {
    for (int c = 0; c < Image::channels; ++c) mean[c] = static_cast<float>(acc[c] / static_cast<double>(n));
  }
  return mean;
}

}  // namespace medvqa
