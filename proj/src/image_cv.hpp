#pragma once

#include <opencv2/core.hpp>

#include "medvqa/image.hpp"

namespace medvqa::detail {

// CV_32FC3 matrix in RGB order sharing no memory with the image.
cv::Mat to_mat(const Image& image);
Image from_mat(const cv::Mat& mat);
Image from_decoded(const cv::Mat& decoded);

}  // namespace medvqa::detail
