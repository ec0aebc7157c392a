#include <gtest/gtest.h>

#include <future>
#include <thread>

#include "medvqa/error.hpp"
#include "medvqa/service.hpp"
#include "test_util.hpp"

// after Eigen: resolv.h defines _res
#include "httplib.h"

using namespace medvqa;
using nlohmann::json;

namespace {

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    registry.add("tiny", testutil::tiny_system());
    registry.add("tiny_san", testutil::tiny_system(FusionKind::san));
    service = std::make_unique<HttpService>(registry);
    port = service->bind("127.0.0.1", 0);
    thread = std::thread([this] { service->serve(); });
    for (int i = 0; i < 200 && !service->is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    data = testutil::tiny_data(4, 77);
    png = encode_png(*data.samples[0].image);
  }
  void TearDown() override {
    service->stop();
    thread.join();
  }

  httplib::Result post(const std::string& path, const httplib::MultipartFormDataItems& items) {
    httplib::Client cli("127.0.0.1", port);
    return cli.Post(path, items);
  }

  httplib::MultipartFormDataItems form(const std::string& question, const std::string& model = "tiny") {
    httplib::MultipartFormDataItems items = {{"image", std::string(png.begin(), png.end()), "x.png", "image/png"}};
    if (!question.empty()) items.push_back({"question", question, "", ""});
    if (!model.empty()) items.push_back({"model_id", model, "", ""});
    return items;
  }

  ModelRegistry registry;
  std::unique_ptr<HttpService> service;
  std::thread thread;
  int port = 0;
  SyntheticDataset data;
  std::vector<std::uint8_t> png;
};

}  // namespace

TEST_F(ServiceTest, HealthModelsAndCors) {
  httplib::Client cli("127.0.0.1", port);
  auto h = cli.Get("/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(json::parse(h->body)["status"], "ok");
  EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
  auto m = cli.Get("/v1/models");
  ASSERT_TRUE(m);
  auto models = json::parse(m->body)["models"];
  ASSERT_EQ(models.size(), 2u);
  EXPECT_EQ(models[0]["model_id"], "tiny");
  auto pre = cli.Options("/v1/answer");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
}

TEST_F(ServiceTest, AnswerMatchesDirectPrediction) {
  auto items = form(data.samples[0].question);
  items.push_back({"top_k", "3", "", ""});
  auto res = post("/v1/answer", items);
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  auto j = json::parse(res->body);
  auto direct = predict(registry.find("tiny")->system, decode_image(png), data.samples[0].question, 3);
  EXPECT_EQ(j["answer"], direct.top_k[0].answer);
  EXPECT_EQ(j["top_k"].size(), 3u);
  EXPECT_EQ(j["model_id"], "tiny");
  EXPECT_TRUE(j.contains("latency_ms"));
  EXPECT_TRUE(j.contains("category_guess"));
}

TEST_F(ServiceTest, ErrorsCarryStatusAndField) {
  auto missing = post("/v1/answer", form(""));
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 400);
  EXPECT_EQ(json::parse(missing->body)["error"]["field"], "question");

  auto blank = post("/v1/answer", form("   "));
  EXPECT_EQ(blank->status, 400);

  auto unknown = post("/v1/answer", form("what plane?", "nope"));
  EXPECT_EQ(unknown->status, 404);
  EXPECT_EQ(json::parse(unknown->body)["error"]["field"], "model_id");

  auto no_model = post("/v1/answer", form("what plane?", ""));
  EXPECT_EQ(no_model->status, 400);

  httplib::MultipartFormDataItems junk = {{"image", "not an image", "x.png", "image/png"},
                                          {"question", "what plane?", "", ""}, {"model_id", "tiny", "", ""}};
  auto bad_image = post("/v1/answer", junk);
  EXPECT_EQ(bad_image->status, 400);
  EXPECT_EQ(json::parse(bad_image->body)["error"]["field"], "image");

  auto items = form("what plane?");
  items.push_back({"target_class", "100000", "", ""});
  auto range = post("/v1/explain", items);
  EXPECT_EQ(range->status, 422);
}

TEST_F(ServiceTest, ExplainReturnsPngOfImageSize) {
  auto res = post("/v1/explain", form(data.samples[0].question, "tiny_san"));
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
  auto img = decode_image(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(res->body.data()),
                                                        res->body.size()));
  EXPECT_EQ(img.height, data.samples[0].image->height);
  EXPECT_NE(res->body.find("viridis"), std::string::npos);

  auto items = form(data.samples[0].question);
  items.push_back({"format", "json", "", ""});
  auto j = post("/v1/explain", items);
  ASSERT_EQ(j->status, 200);
  EXPECT_TRUE(json::parse(j->body).contains("values"));

  auto with = form(data.samples[0].question);
  with.push_back({"explain", "true", "", ""});
  auto ans = post("/v1/answer", with);
  ASSERT_EQ(ans->status, 200);
  EXPECT_TRUE(json::parse(ans->body).contains("heatmap_png_base64"));
}

TEST_F(ServiceTest, ConcurrentRequestsMatchSequential) {
  std::vector<std::string> sequential;
  for (const auto& s : data.samples) {
    auto r = post("/v1/answer", form(s.question));
    sequential.push_back(json::parse(r->body)["answer"]);
  }
  std::vector<std::future<std::string>> futures;
  for (int rep = 0; rep < 3; ++rep)
    for (const auto& s : data.samples)
      futures.push_back(std::async(std::launch::async, [&, q = s.question] {
        auto r = post("/v1/answer", form(q));
        return r && r->status == 200 ? json::parse(r->body)["answer"].get<std::string>() : std::string("error");
      }));
  for (size_t i = 0; i < futures.size(); ++i) EXPECT_EQ(futures[i].get(), sequential[i % sequential.size()]);
}

TEST(ServiceUnits, BindAddressAndRegistry) {
  EXPECT_EQ(parse_bind_address("0.0.0.0:9000"), (std::pair<std::string, int>{"0.0.0.0", 9000}));
  EXPECT_THROW(parse_bind_address("localhost"), ConfigError);
  EXPECT_THROW(parse_bind_address("localhost:99999"), ConfigError);
  EXPECT_THROW(parse_bind_address("localhost:80x"), ConfigError);

  ModelRegistry reg;
  reg.add("a", testutil::tiny_system());
  EXPECT_THROW(reg.add("a", testutil::tiny_system()), ConfigError);
  AnswerRequest req;
  req.image = Image(32, 32, 0.5f);
  req.question = "what plane is this?";
  req.model_id = "missing";
  EXPECT_THROW(answer_question(reg, req), ModelNotFound);
  req.model_id = "a";
  req.question = "";
  EXPECT_THROW(answer_question(reg, req), DataError);

  auto dir = testutil::temp_dir("registry");
  save_checkpoint(reg.find("a")->system, dir / "m1");
  save_checkpoint(reg.find("a")->system, dir / "m2");
  auto loaded = ModelRegistry::load_dir(dir);
  EXPECT_EQ(loaded.ids(), (std::vector<std::string>{"m1", "m2"}));
  EXPECT_EQ(ModelRegistry::load_dir(dir / "m1").ids(), (std::vector<std::string>{"m1"}));
}
