#include "medvqa/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "medvqa/error.hpp"

namespace medvqa {

namespace {

constexpr char kMagic[8] = {'M', 'V', 'Q', 'A', 'W', 'T', 'S', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw LoadError(std::string("unsupported tensor dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "f64") return torch::kFloat64;
  if (tag == "i64") return torch::kInt64;
  if (tag == "i32") return torch::kInt32;
  if (tag == "u8") return torch::kUInt8;
  if (tag == "bool") return torch::kBool;
  throw LoadError("unknown dtype tag '" + tag + "'");
}

std::string shape_string(c10::IntArrayRef shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

}  // namespace

const torch::Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["metadata"] = archive.metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  std::uint64_t offset = 0;
  std::set<std::string> names;
  for (const auto& [name, tensor] : archive.tensors) {
    if (!names.insert(name).second) throw LoadError("duplicate tensor name '" + name + "' in archive");
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    std::uint64_t nbytes = t.numel() * t.element_size();
    manifest["tensors"].push_back(
        {{"name", name}, {"dtype", dtype_tag(t.scalar_type())}, {"shape", t.sizes().vec()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(std::move(t));
  }
  std::string header = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write archive " + path.string());
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : blobs) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw LoadError("failed while writing archive " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open archive " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw LoadError(path.string() + " is not a weight archive");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 32)) throw LoadError("corrupt archive header in " + path.string());
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt archive manifest in " + path.string() + ": " + e.what());
  }
  const std::streamoff data_start = in.tellg();

  TensorArchive archive;
  archive.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    std::uint64_t nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size())) {
      throw LoadError("size mismatch for tensor '" + entry.at("name").get<std::string>() + "' in " + path.string());
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw LoadError("truncated archive " + path.string());
    archive.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return archive;
}

NamedTensors module_state(const torch::nn::Module& module) {
  NamedTensors state;
  for (const auto& p : module.named_parameters(true)) state.emplace_back(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) state.emplace_back(b.key(), b.value());
  return state;
}

NamedTensors clone_state(const NamedTensors& state) {
  NamedTensors out;
  out.reserve(state.size());
  for (const auto& [name, t] : state) out.emplace_back(name, t.detach().clone());
  return out;
}

size_t apply_archive(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  std::set<std::string> used;
  for (auto& [name, target] : module_state(module)) {
    const std::string key = prefix + name;
    const torch::Tensor* src = archive.find(key);
    if (!src) throw LoadError("weight archive is missing tensor '" + key + "'");
    if (src->sizes() != target.sizes()) {
      throw LoadError("tensor '" + key + "' has shape " + shape_string(src->sizes()) + " but the model expects " +
                      shape_string(target.sizes()));
    }
    target.copy_(src->to(target.scalar_type()));
    used.insert(key);
  }
  size_t unused = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind(prefix, 0) == 0 && !used.count(name)) ++unused;
  }
  return unused;
}

}  // namespace medvqa
