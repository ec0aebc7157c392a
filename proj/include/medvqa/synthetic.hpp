#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "medvqa/dataset.hpp"

namespace medvqa {

// Latent factors of a generated image. Each factor drives exactly one
// question category:
//   organ       <- rendered shape class (disc, square, triangle)
//   plane       <- orientation of a bright bar (horizontal, vertical, diagonal)
//   modality    <- global background texture (speckle, smooth, banded)
//   abnormality <- small marker: absent, left half, right half
struct SyntheticAttributes {
  int organ = 0;
  int plane = 0;
  int modality = 0;
  int abnormality = 0;
};

enum class QuestionKind { open, yes_no, options };

struct SyntheticOptions {
  int image_size = 64;
  int questions_per_image = 2;  // distinct categories per image, 1..4
};

struct SyntheticDataset {
  std::vector<VqaSample> samples;
  std::vector<SyntheticAttributes> attributes;  // parallel to samples
  std::vector<QuestionKind> kinds;              // parallel to samples
};

inline constexpr std::array<std::string_view, 3> kSyntheticOrgans = {"brain", "chest", "spine"};
inline constexpr std::array<std::string_view, 3> kSyntheticPlanes = {"axial", "sagittal", "coronal"};
inline constexpr std::array<std::string_view, 3> kSyntheticModalities = {"ct", "mri", "xray"};
inline constexpr std::array<std::string_view, 3> kSyntheticAbnormalities = {"normal", "mass", "cyst"};

// n samples drawn deterministically from seed.
SyntheticDataset make_synthetic_dataset(int n, std::uint64_t seed, const SyntheticOptions& options = {});

Image render_synthetic_image(const SyntheticAttributes& attributes, int size, std::uint64_t seed);

// The answer implied by the latent attributes for a generated question.
std::string synthetic_answer(const SyntheticAttributes& attributes, Category category, QuestionKind kind);

// Unlabelled-looking images from a small number of visual clusters, used to
// exercise contrastive pretraining. Labels are the cluster ids.
struct ClusterImages {
  std::vector<Image> images;
  std::vector<int> labels;
};

struct ClusterOptions {
  int image_size = 32;
  int clusters = 2;
};

ClusterImages make_cluster_images(int n, std::uint64_t seed, const ClusterOptions& options = {});

}  // namespace medvqa
