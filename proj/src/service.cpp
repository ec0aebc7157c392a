#include "medvqa/service.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>

#include <httplib.h>

#include "medvqa/error.hpp"
#include "medvqa/explain.hpp"
#include "text_util.hpp"

using nlohmann::json;

namespace medvqa {

void ModelRegistry::add(std::string id, VqaSystem system) {
  if (id.empty()) throw ConfigError("model id must not be empty");
  if (models_.count(id)) throw ConfigError("duplicate model id '" + id + "'");
  auto entry = std::make_unique<LoadedModel>();
  entry->id = id;
  entry->system = std::move(system);
  entry->system.model->eval();
  models_.emplace(std::move(id), std::move(entry));
}

ModelRegistry ModelRegistry::load_dir(const std::filesystem::path& dir) {
  ModelRegistry registry;
  if (std::filesystem::exists(dir / "checkpoint.json")) {
    registry.add(std::filesystem::absolute(dir).lexically_normal().filename().string(), load_checkpoint(dir));
    return registry;
  }
  if (!std::filesystem::is_directory(dir)) throw LoadError("model directory " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> subdirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "checkpoint.json")) subdirs.push_back(entry.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& sub : subdirs) registry.add(sub.filename().string(), load_checkpoint(sub));
  if (registry.size() == 0) throw LoadError("no checkpoints found under " + dir.string());
  return registry;
}

LoadedModel* ModelRegistry::find(const std::string& id) const {
  auto it = models_.find(id);
  return it == models_.end() ? nullptr : it->second.get();
}

std::vector<std::string> ModelRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, m] : models_) out.push_back(id);
  return out;
}

json AnswerResponse::to_json() const {
  json top = json::array();
  for (const auto& [a, p] : top_k) top.push_back({{"answer", a}, {"probability", p}});
  json j = {{"answer", answer},
            {"predicted_class", predicted_class},
            {"top_k", top},
            {"category_guess", category_guess},
            {"model_id", model_id},
            {"latency_ms", latency_ms}};
  j["heatmap_png_base64"] = heatmap_png_base64 ? json(*heatmap_png_base64) : json(nullptr);
  return j;
}

AnswerResponse answer_question(const ModelRegistry& registry, const AnswerRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  LoadedModel* model = registry.find(request.model_id);
  if (!model) throw ModelNotFound("unknown model_id '" + request.model_id + "'");
  if (text::trim(request.question).empty()) throw DataError("question is empty");
  auto& sys = model->system;
  const int n = static_cast<int>(sys.answers.size());
  const int k = std::clamp(request.top_k, 1, n);
  auto pred = predict(sys, request.image, request.question, k);

  AnswerResponse r;
  r.answer = pred.top_k.front().answer;
  r.predicted_class = pred.predicted_class;
  for (const auto& ra : pred.top_k) r.top_k.emplace_back(ra.answer, ra.probability);
  auto cat = sys.answer_categories.find(r.answer);
  r.category_guess = cat == sys.answer_categories.end() ? "unknown" : std::string(category_name(cat->second));
  r.model_id = model->id;
  if (request.explain) {
    std::lock_guard lock(model->gradient_mutex);
    auto cam = gradcam(sys, request.image, request.question, pred.predicted_class);
    auto png = render_overlay(cam.heatmap, request.image, 0.5);
    r.heatmap_png_base64 = httplib::detail::base64_encode(std::string(png.begin(), png.end()));
  }
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::pair<std::string, int> parse_bind_address(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("bind address must look like host:port, got '" + bind + "'");
  int port = 0;
  try {
    size_t used = 0;
    port = std::stoi(bind.substr(colon + 1), &used);
    if (used != bind.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError("invalid port in bind address '" + bind + "'");
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range in '" + bind + "'");
  return {bind.substr(0, colon), port};
}

namespace {

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string message, std::string field = {})
      : std::runtime_error(message), status(status), field(std::move(field)) {}
  int status;
  std::string field;
};

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {},
                const std::string& id = {}) {
  json err = {{"code", status}, {"message", message}};
  if (!field.empty()) err["field"] = field;
  if (!id.empty()) err["id"] = id;
  res.status = status;
  res.set_content(json{{"error", err}}.dump(), "application/json");
}

std::string opaque_id() {
  static std::atomic<std::uint64_t> counter{0};
  static const std::uint64_t salt = std::random_device{}();
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>((salt * 0x9e3779b97f4a7c15ULL) ^ ++counter));
  return buf;
}

std::optional<std::string> field_value(const httplib::Request& req, const std::string& name) {
  if (req.has_file(name)) return req.get_file_value(name).content;
  if (req.has_param(name)) return req.get_param_value(name);
  return std::nullopt;
}

bool parse_bool(const std::string& raw, const std::string& field) {
  auto v = text::to_lower(text::trim(raw));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off" || v.empty()) return false;
  throw HttpError(400, "field '" + field + "' must be a boolean", field);
}

long parse_int(const std::string& raw, const std::string& field) {
  try {
    size_t used = 0;
    std::string t(text::trim(raw));
    long v = std::stol(t, &used);
    if (used != t.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw HttpError(400, "field '" + field + "' must be an integer", field);
  }
}

AnswerRequest parse_request(const httplib::Request& req, const ModelRegistry& registry) {
  if (!req.is_multipart_form_data()) throw HttpError(400, "expected multipart/form-data");
  AnswerRequest r;
  if (!req.has_file("image")) throw HttpError(400, "missing field 'image'", "image");
  const auto& file = req.get_file_value("image");
  if (file.content.size() > HttpService::kMaxImageBytes) throw HttpError(400, "image exceeds 10 MB", "image");
  try {
    r.image = decode_image(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(file.content.data()),
                                                         file.content.size()));
  } catch (const Error& e) {
    throw HttpError(400, std::string("unreadable image: ") + e.what(), "image");
  }
  auto question = field_value(req, "question");
  if (!question) throw HttpError(400, "missing field 'question'", "question");
  if (text::trim(*question).empty()) throw HttpError(400, "question is empty", "question");
  r.question = *question;
  if (auto id = field_value(req, "model_id"); id && !text::trim(*id).empty()) {
    r.model_id = text::trim(*id);
  } else if (registry.size() == 1) {
    r.model_id = registry.ids().front();
  } else {
    throw HttpError(400, "missing field 'model_id'", "model_id");
  }
  if (auto k = field_value(req, "top_k")) {
    long v = parse_int(*k, "top_k");
    if (v < 1) throw HttpError(400, "top_k must be at least 1", "top_k");
    r.top_k = static_cast<int>(std::min<long>(v, 1 << 20));
  }
  if (auto e = field_value(req, "explain")) r.explain = parse_bool(*e, "explain");
  return r;
}

}  // namespace

struct HttpService::Impl {
  const ModelRegistry& registry;
  httplib::Server server;
  std::atomic<bool> running{false};

  explicit Impl(const ModelRegistry& reg) : registry(reg) {}

  template <typename Handler>
  void guarded(const httplib::Request& req, httplib::Response& res, Handler&& handler) {
    try {
      handler(req, res);
    } catch (const HttpError& e) {
      send_error(res, e.status, e.what(), e.field);
    } catch (const ModelNotFound& e) {
      send_error(res, 404, e.what(), "model_id");
    } catch (const RangeError& e) {
      send_error(res, 422, e.what(), "target_class");
    } catch (const DataError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      const auto id = opaque_id();
      std::cerr << "internal error " << id << ": " << e.what() << '\n';
      send_error(res, 500, "internal error", {}, id);
    }
  }

  void install() {
    server.set_payload_max_length(kMaxImageBytes + 1024 * 1024);
    // browser UI may be served from another origin
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(json{{"status", "ok"}}.dump(), "application/json");
    });
    server.Get("/v1/models", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [this](const httplib::Request&, httplib::Response& r) {
        json models = json::array();
        for (const auto& id : registry.ids()) {
          const auto& sys = registry.find(id)->system;
          models.push_back({{"model_id", id},
                            {"variant", variant_name(sys.config)},
                            {"config", sys.config.to_json()},
                            {"n_classes", sys.answers.size()}});
        }
        r.set_content(json{{"models", models}}.dump(), "application/json");
      });
    });
    server.Post("/v1/answer", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [this](const httplib::Request& rq, httplib::Response& r) {
        auto request = parse_request(rq, registry);
        r.set_content(answer_question(registry, request).to_json().dump(), "application/json");
      });
    });
    server.Post("/v1/explain", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [this](const httplib::Request& rq, httplib::Response& r) {
        auto request = parse_request(rq, registry);
        LoadedModel* model = registry.find(request.model_id);
        if (!model) throw ModelNotFound("unknown model_id '" + request.model_id + "'");
        std::optional<std::int64_t> target;
        if (auto t = field_value(rq, "target_class")) target = parse_int(*t, "target_class");
        std::string format = "png";
        if (auto f = field_value(rq, "format")) format = text::to_lower(text::trim(*f));
        if (format != "png" && format != "json") throw HttpError(400, "format must be png or json", "format");
        CamResult cam;
        {
          std::lock_guard lock(model->gradient_mutex);
          cam = gradcam(model->system, request.image, request.question, target);
        }
        if (format == "json") {
          r.set_content(cam.heatmap.to_json().dump(), "application/json");
        } else {
          auto png = render_overlay(cam.heatmap, request.image, 0.5);
          r.set_content(std::string(png.begin(), png.end()), "image/png");
        }
      });
    });
  }
};

HttpService::HttpService(const ModelRegistry& registry) : impl_(std::make_unique<Impl>(registry)) { impl_->install(); }

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& host, int port) {
  int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpService::serve() {
  impl_->running = true;
  impl_->server.listen_after_bind();
  impl_->running = false;
}

void HttpService::stop() {
  if (impl_) impl_->server.stop();
}

bool HttpService::is_running() const { return impl_->server.is_running(); }

}  // namespace medvqa
