#include <gtest/gtest.h>

#include "medvqa/archive.hpp"
#include "medvqa/error.hpp"
#include "medvqa/model.hpp"
#include "test_util.hpp"

using namespace medvqa;

TEST(ModelConfig, ValidationErrors) {
  auto cfg = testutil::tiny_config();
  cfg.n_classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = testutil::tiny_config();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = testutil::tiny_config(FusionKind::san);
  cfg.image_encoder.output_mode = OutputMode::pooled;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = testutil::tiny_config();
  cfg.image_encoder.output_mode = OutputMode::spatial;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_fusion("bilinear"), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  auto cfg = testutil::tiny_config(FusionKind::san);
  cfg.n_classes = 7;
  auto back = ModelConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  auto j = cfg.to_json();
  j["image_encoder"]["colour"] = 3;
  EXPECT_THROW(ModelConfig::from_json(j), ConfigError);
  auto merged = cfg;
  merged.merge_json({{"dropout", 0.25}, {"question_encoder", {{"hidden_dim", 99}}}});
  EXPECT_EQ(merged.dropout, 0.25);
  EXPECT_EQ(merged.question_encoder.hidden_dim, 99);
  EXPECT_EQ(merged.question_encoder.embedding_dim, cfg.question_encoder.embedding_dim);
  EXPECT_EQ(variant_name(testutil::tiny_config(FusionKind::san)), "VGG-small + LSTM + SAN");
}

TEST(Model, SeedDeterminesInitialWeights) {
  auto a = testutil::tiny_system(FusionKind::concat, 4);
  auto b = testutil::tiny_system(FusionKind::concat, 4);
  auto c = testutil::tiny_system(FusionKind::concat, 5);
  auto sa = module_state(*a.model), sb = module_state(*b.model), sc = module_state(*c.model);
  bool differs = false;
  for (size_t i = 0; i < sa.size(); ++i) {
    EXPECT_TRUE(torch::equal(sa[i].second, sb[i].second)) << sa[i].first;
    differs |= !torch::equal(sa[i].second, sc[i].second);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ForwardShapesAndBatchConsistency) {
  for (auto fusion : {FusionKind::concat, FusionKind::san}) {
    auto sys = testutil::tiny_system(fusion);
    auto data = testutil::tiny_data(6, 2);
    std::vector<const Image*> imgs;
    std::vector<std::string> qs;
    for (const auto& s : data.samples) {
      imgs.push_back(s.image.get());
      qs.push_back(s.question);
    }
    auto batched = predict_batch(sys, imgs, qs, 3, 4);
    ASSERT_EQ(batched.size(), 6u);
    for (size_t i = 0; i < 6; ++i) {
      auto single = predict(sys, *imgs[i], qs[i], 3);
      EXPECT_EQ(single.predicted_class, batched[i].predicted_class);
      EXPECT_NEAR(single.top_k[0].probability, batched[i].top_k[0].probability, 1e-5);
      EXPECT_EQ(batched[i].top_k.size(), 3u);
    }
    auto tokens = question_batch(sys, qs);
    auto out = sys.model->forward_detailed(image_batch(imgs, 32), tokens.ids, tokens.lengths);
    EXPECT_EQ(out.logits.size(0), 6);
    EXPECT_EQ(out.logits.size(1), static_cast<std::int64_t>(sys.answers.size()));
    EXPECT_EQ(out.attention.size(), fusion == FusionKind::san ? 2u : 0u);
  }
}

TEST(RankLogits, SoftmaxOrderingTiesAndShift) {
  auto answers = AnswerClassMap::from_lists({"a", "b", "c"}, {3, 2, 1});
  std::vector<double> tie = {1.0, 1.0, 0.0};
  auto r = rank_logits(tie, answers, 3);
  EXPECT_EQ(r.predicted_class, 0);
  EXPECT_EQ(r.top_k[1].class_id, 1);
  double total = 0;
  for (const auto& x : r.top_k) total += x.probability;
  EXPECT_NEAR(total, 1.0, 1e-15);
  EXPECT_EQ(r.top_k[0].answer, "a");

  std::vector<double> logits = {0.1, 2.0, -1.0}, shifted = {100.1, 102.0, 99.0};
  auto p = rank_logits(logits, answers, 2), q = rank_logits(shifted, answers, 2);
  EXPECT_EQ(p.predicted_class, 1);
  EXPECT_EQ(q.predicted_class, 1);
  EXPECT_NEAR(p.top_k[0].probability, q.top_k[0].probability, 1e-12);
  EXPECT_THROW(rank_logits(logits, answers, 0), ConfigError);
  EXPECT_THROW(rank_logits(logits, answers, 4), ConfigError);
}

TEST(Model, EmptyQuestionAndMismatchedBatches) {
  auto sys = testutil::tiny_system();
  Image img(32, 32, 0.5f);
  EXPECT_THROW(predict(sys, img, "   ?! ", 1), DataError);
  std::vector<const Image*> imgs = {&img};
  std::vector<std::string> qs = {"a", "b"};
  EXPECT_THROW(predict_batch(sys, imgs, qs), ShapeError);
}

TEST(Model, AnswerMapMustMatchClasses) {
  auto cfg = testutil::tiny_config();
  cfg.n_classes = 3;
  std::vector<std::string> tokens = {"what", "is"};
  auto vocab = Vocabulary::from_tokens(tokens);
  EXPECT_THROW(build_model(cfg, vocab, AnswerClassMap::from_lists({"a", "b"}, {1, 1})), ConfigError);
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  auto sys = testutil::tiny_system(FusionKind::san, 6);
  sys.metadata["note"] = "x";
  auto dir = testutil::temp_dir("checkpoint");
  save_checkpoint(sys, dir);
  auto back = load_checkpoint(dir);
  EXPECT_EQ(back.config.to_json(), sys.config.to_json());
  EXPECT_EQ(back.answers.answers(), sys.answers.answers());
  EXPECT_EQ(back.vocab.size(), sys.vocab.size());
  EXPECT_EQ(back.metadata["note"], "x");
  EXPECT_EQ(back.answer_categories, sys.answer_categories);
  auto data = testutil::tiny_data(4, 3);
  for (const auto& s : data.samples) {
    auto a = predict(sys, *s.image, s.question, 2), b = predict(back, *s.image, s.question, 2);
    EXPECT_EQ(a.predicted_class, b.predicted_class);
    EXPECT_EQ(a.top_k[0].probability, b.top_k[0].probability);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing"), LoadError);
}
