#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace medvqa {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// Flat name -> tensor archive.
//
// Layout: 8-byte magic "MVQAWTS1", little-endian uint64 manifest length, a
// UTF-8 JSON manifest {"format":1, "metadata":{...}, "tensors":[{"name",
// "dtype", "shape", "offset", "nbytes"}...]}, then the raw little-endian
// tensor data. Offsets are relative to the start of the data section.
struct TensorArchive {
  NamedTensors tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const torch::Tensor* find(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

// Parameters followed by buffers, in registration order.
NamedTensors module_state(const torch::nn::Module& module);

// Deep copy, detached from any graph.
NamedTensors clone_state(const NamedTensors& state);

// Copies archive tensors into the module's parameters and buffers. Every
// module tensor must be present with the same shape; the first offender is
// named in the LoadError. Returns the number of archive tensors not used.
size_t apply_archive(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix = "");

}  // namespace medvqa
