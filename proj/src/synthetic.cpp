#include "medvqa/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <opencv2/imgproc.hpp>

#include "medvqa/error.hpp"

namespace medvqa {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int pick(std::mt19937_64& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

Image gray_to_image(const cv::Mat& gray) {
  Image img(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    for (int x = 0; x < gray.cols; ++x) {
      float v = std::clamp(gray.at<float>(y, x), 0.0f, 1.0f);
      for (int c = 0; c < Image::channels; ++c) img.at(y, x, c) = v;
    }
  }
  return img;
}

cv::Point to_point(double x, double y) { return {static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y))}; }

const char* article(std::string_view word) {
  return (word == "mri" || word == "xray") ? "an" : "a";
}

struct Template {
  Category category;
  QuestionKind kind;
};

const std::vector<std::string>& open_questions(Category c) {
  static const std::vector<std::string> modality = {"what modality is shown?",
                                                    "what imaging modality was used to take this image?",
                                                    "how was this image taken?"};
  static const std::vector<std::string> plane = {"which plane is this image taken?", "in what plane is this image?",
                                                 "what plane is this?", "in which plane was this image taken?"};
  static const std::vector<std::string> organ = {"what organ system is shown in this image?",
                                                 "which organ system is imaged?",
                                                 "what part of the body is being imaged?",
                                                 "what organ system is evaluated primarily?"};
  static const std::vector<std::string> abnormality = {"what is abnormal in this image?",
                                                       "what is the primary abnormality in this image?",
                                                       "what is the most alarming finding in this image?"};
  switch (c) {
    case Category::modality: return modality;
    case Category::plane: return plane;
    case Category::organ: return organ;
    case Category::abnormality: return abnormality;
  }
  return modality;
}

const std::vector<std::string> kYesNoQuestions = {"is this image abnormal?", "is there an abnormality in this image?"};

}  // namespace

Image render_synthetic_image(const SyntheticAttributes& a, int size, std::uint64_t seed) {
  if (size < 16) throw ConfigError("synthetic image size must be at least 16");
  auto rng = make_rng(seed, 0x5eed);
  const double S = size;
  const double k = S / 64.0;
  static constexpr double base_level[3] = {0.15, 0.35, 0.08};
  cv::Mat canvas(size, size, CV_32F, cv::Scalar(base_level[a.modality]));

  // organ: shape near the centre
  const double cx = S / 2 + uniform(rng, -S / 12, S / 12);
  const double cy = S / 2 + uniform(rng, -S / 12, S / 12);
  const double r = S * 0.22 * uniform(rng, 0.9, 1.1);
  const cv::Scalar shape_level(0.7);
  switch (a.organ) {
    case 0: cv::circle(canvas, to_point(cx, cy), static_cast<int>(std::lround(r)), shape_level, cv::FILLED); break;
    case 1: {
      double h = 0.85 * r;
      cv::rectangle(canvas, to_point(cx - h, cy - h), to_point(cx + h, cy + h), shape_level, cv::FILLED);
      break;
    }
    default: {
      std::vector<cv::Point> tri = {to_point(cx, cy - r), to_point(cx - r, cy + 0.8 * r), to_point(cx + r, cy + 0.8 * r)};
      cv::fillConvexPoly(canvas, tri, shape_level);
      break;
    }
  }

  // plane: a bar across the image
  {
    static constexpr double angles[3] = {0.0, 90.0, 45.0};
    const double theta = angles[a.plane] * std::numbers::pi / 180.0;
    const double bx = S / 2 + uniform(rng, -S / 16, S / 16);
    const double by = S / 2 + uniform(rng, -S / 16, S / 16);
    const double dx = std::cos(theta) * S, dy = std::sin(theta) * S;
    const int thickness = std::max(1, static_cast<int>(std::lround(2 * k)));
    cv::line(canvas, to_point(bx - dx, by - dy), to_point(bx + dx, by + dy), cv::Scalar(0.85), thickness);
  }

  // abnormality: marker in the left or right half
  if (a.abnormality != 0) {
    const double mx = a.abnormality == 1 ? uniform(rng, 0.12 * S, 0.38 * S) : uniform(rng, 0.62 * S, 0.88 * S);
    const double my = uniform(rng, 0.15 * S, 0.85 * S);
    const int radius = std::max(2, static_cast<int>(std::lround(5 * k)));
    cv::circle(canvas, to_point(mx, my), radius, cv::Scalar(1.0), cv::FILLED);
  }

  // modality: global texture on top of everything
  switch (a.modality) {
    case 0: {
      std::normal_distribution<float> speckle(0.0f, 0.07f);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) canvas.at<float>(y, x) += speckle(rng);
      break;
    }
    case 1: {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          double u = (x - S / 2) / (S / 2), v = (y - S / 2) / (S / 2);
          canvas.at<float>(y, x) -= static_cast<float>(0.2 * (u * u + v * v));
        }
      }
      break;
    }
    default: {
      const double period = 6.0 * k;
      for (int y = 0; y < size; ++y) {
        float band = static_cast<float>(0.08 * std::sin(2.0 * std::numbers::pi * y / period));
        for (int x = 0; x < size; ++x) canvas.at<float>(y, x) += band;
      }
      break;
    }
  }
  return gray_to_image(canvas);
}

std::string synthetic_answer(const SyntheticAttributes& a, Category category, QuestionKind kind) {
  if (kind == QuestionKind::yes_no) return a.abnormality != 0 ? "yes" : "no";
  switch (category) {
    case Category::modality: return std::string(kSyntheticModalities[a.modality]);
    case Category::plane: return std::string(kSyntheticPlanes[a.plane]);
    case Category::organ: return std::string(kSyntheticOrgans[a.organ]);
    case Category::abnormality: return std::string(kSyntheticAbnormalities[a.abnormality]);
  }
  return {};
}

SyntheticDataset make_synthetic_dataset(int n, std::uint64_t seed, const SyntheticOptions& options) {
  if (n < 1) throw ConfigError("synthetic dataset size must be at least 1");
  if (options.questions_per_image < 1 || options.questions_per_image > 4) {
    throw ConfigError("questions_per_image must lie in [1,4]");
  }
  SyntheticDataset ds;
  for (std::uint64_t image_no = 0; static_cast<int>(ds.samples.size()) < n; ++image_no) {
    auto rng = make_rng(seed, image_no + 1);
    SyntheticAttributes a{pick(rng, 3), pick(rng, 3), pick(rng, 3), pick(rng, 3)};
    auto image = std::make_shared<const Image>(render_synthetic_image(a, options.image_size, rng()));
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%05llu", static_cast<unsigned long long>(image_no));

    std::array<Category, 4> order = kCategories;
    std::shuffle(order.begin(), order.end(), rng);
    for (int q = 0; q < options.questions_per_image && static_cast<int>(ds.samples.size()) < n; ++q) {
      const Category c = order[static_cast<size_t>(q)];
      QuestionKind kind = QuestionKind::open;
      if (c == Category::abnormality && pick(rng, 3) == 0) kind = QuestionKind::yes_no;
      if (c == Category::modality && pick(rng, 4) == 0) kind = QuestionKind::options;

      std::string question;
      if (kind == QuestionKind::yes_no) {
        question = kYesNoQuestions[static_cast<size_t>(pick(rng, static_cast<int>(kYesNoQuestions.size())))];
      } else if (kind == QuestionKind::options) {
        int other = (a.modality + 1 + pick(rng, 2)) % 3;
        std::string_view first = kSyntheticModalities[a.modality], second = kSyntheticModalities[other];
        if (pick(rng, 2) == 1) std::swap(first, second);
        question = std::string("is this ") + article(first) + " " + std::string(first) + " or " + article(second) + " " +
                   std::string(second) + "?";
      } else {
        const auto& pool = open_questions(c);
        question = pool[static_cast<size_t>(pick(rng, static_cast<int>(pool.size())))];
      }
      VqaSample s;
      s.image_id = id;
      s.image = image;
      s.question = std::move(question);
      s.answer = synthetic_answer(a, c, kind);
      s.category = c;
      ds.samples.push_back(std::move(s));
      ds.attributes.push_back(a);
      ds.kinds.push_back(kind);
    }
  }
  return ds;
}

ClusterImages make_cluster_images(int n, std::uint64_t seed, const ClusterOptions& options) {
  if (n < 1) throw ConfigError("cluster image count must be at least 1");
  if (options.clusters < 1 || options.clusters > 4) throw ConfigError("clusters must lie in [1,4]");
  ClusterImages out;
  const double S = options.image_size;
  for (int i = 0; i < n; ++i) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(i) + 1);
    const int label = pick(rng, options.clusters);
    const double background = uniform(rng, 0.05, 0.45);
    // wide contrast and size ranges: cluster identity is the shape only
    const double level = background + uniform(rng, 0.12, 0.5);
    cv::Mat canvas(options.image_size, options.image_size, CV_32F, cv::Scalar(background));
    const double r = S * uniform(rng, 0.15, 0.3);
    const double cx = uniform(rng, r, S - r), cy = uniform(rng, r, S - r);
    switch (label) {
      case 0: cv::circle(canvas, to_point(cx, cy), static_cast<int>(std::lround(r)), cv::Scalar(level), cv::FILLED); break;
      case 1: {
        double h = 0.85 * r;
        cv::rectangle(canvas, to_point(cx - h, cy - h), to_point(cx + h, cy + h), cv::Scalar(level), cv::FILLED);
        break;
      }
      case 2: {
        std::vector<cv::Point> tri = {to_point(cx, cy - r), to_point(cx - r, cy + 0.8 * r), to_point(cx + r, cy + 0.8 * r)};
        cv::fillConvexPoly(canvas, tri, cv::Scalar(level));
        break;
      }
      default: {
        const int t = std::max(1, static_cast<int>(std::lround(r / 3)));
        cv::line(canvas, to_point(cx - r, cy), to_point(cx + r, cy), cv::Scalar(level), t);
        cv::line(canvas, to_point(cx, cy - r), to_point(cx, cy + r), cv::Scalar(level), t);
        break;
      }
    }
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (int y = 0; y < canvas.rows; ++y)
      for (int x = 0; x < canvas.cols; ++x) canvas.at<float>(y, x) += noise(rng);
    out.images.push_back(gray_to_image(canvas));
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace medvqa
