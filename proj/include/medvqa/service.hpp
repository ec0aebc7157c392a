#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medvqa/error.hpp"
#include "medvqa/image.hpp"
#include "medvqa/model.hpp"

namespace medvqa {

struct LoadedModel {
  std::string id;
  VqaSystem system;
  std::mutex gradient_mutex;  // serialises GradCAM calls on this model
};

// Write-once map of model id -> checkpoint.
class ModelRegistry {
 public:
  // Throws ConfigError on a duplicate id.
  void add(std::string id, VqaSystem system);
  // A checkpoint directory registers under its own name; otherwise every
  // subdirectory holding a checkpoint.json is registered under its name.
  static ModelRegistry load_dir(const std::filesystem::path& dir);

  LoadedModel* find(const std::string& id) const;
  std::vector<std::string> ids() const;
  size_t size() const { return models_.size(); }

 private:
  std::map<std::string, std::unique_ptr<LoadedModel>> models_;
};

struct AnswerRequest {
  Image image;
  std::string question;
  std::string model_id;
  int top_k = 5;
  bool explain = false;
};

struct AnswerResponse {
  std::string answer;
  std::int64_t predicted_class = 0;
  std::vector<std::pair<std::string, double>> top_k;
  std::string category_guess;
  std::optional<std::string> heatmap_png_base64;
  std::string model_id;
  double latency_ms = 0.0;

  nlohmann::json to_json() const;
};

// Raises ModelNotFound for unknown ids and DataError for empty questions.
AnswerResponse answer_question(const ModelRegistry& registry, const AnswerRequest& request);

class ModelNotFound : public Error {
 public:
  using Error::Error;
};

std::pair<std::string, int> parse_bind_address(const std::string& bind);

// HTTP front end:
//   GET  /v1/health, GET /v1/models,
//   POST /v1/answer  (multipart: image, question, model_id, top_k, explain)
//   POST /v1/explain (same plus target_class, format=png|json)
class HttpService {
 public:
  static constexpr size_t kMaxImageBytes = 10u * 1024u * 1024u;

  explicit HttpService(const ModelRegistry& registry);
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  // Port 0 picks a free port; returns the bound port.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void serve();
  void stop();
  bool is_running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace medvqa
