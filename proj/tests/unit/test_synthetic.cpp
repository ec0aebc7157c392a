#include <gtest/gtest.h>

#include <set>

#include "medvqa/error.hpp"
#include "medvqa/synthetic.hpp"

using namespace medvqa;

TEST(Synthetic, DeterministicPerSeed) {
  auto a = make_synthetic_dataset(30, 4);
  auto b = make_synthetic_dataset(30, 4);
  auto c = make_synthetic_dataset(30, 5);
  ASSERT_EQ(a.samples.size(), 30u);
  bool differs = false;
  for (size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(a.samples[i].question, b.samples[i].question);
    EXPECT_EQ(a.samples[i].answer, b.samples[i].answer);
    EXPECT_EQ(*a.samples[i].image, *b.samples[i].image);
    differs |= !(*a.samples[i].image == *c.samples[i].image);
  }
  EXPECT_TRUE(differs);
}

TEST(Synthetic, AnswersFollowTheLatentAttributes) {
  auto ds = make_synthetic_dataset(200, 9, SyntheticOptions{48, 3});
  ASSERT_EQ(ds.attributes.size(), ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto& a = ds.attributes[i];
    EXPECT_EQ(s.answer, synthetic_answer(a, s.category, ds.kinds[i]));
    switch (ds.kinds[i]) {
      case QuestionKind::yes_no:
        EXPECT_EQ(s.category, Category::abnormality);
        EXPECT_EQ(s.answer, a.abnormality ? "yes" : "no");
        break;
      case QuestionKind::options:
        EXPECT_EQ(s.category, Category::modality);
        EXPECT_NE(s.question.find(s.answer), std::string::npos);
        EXPECT_NE(s.question.find(" or "), std::string::npos);
        break;
      case QuestionKind::open:
        break;
    }
    EXPECT_EQ(s.image->height, 48);
  }
}

TEST(Synthetic, QuestionsPerImageUseDistinctCategories) {
  auto ds = make_synthetic_dataset(40, 2, SyntheticOptions{32, 4});
  for (size_t i = 0; i < 40; i += 4) {
    std::set<Category> cats;
    for (size_t j = i; j < i + 4; ++j) {
      EXPECT_EQ(ds.samples[j].image_id, ds.samples[i].image_id);
      EXPECT_EQ(ds.samples[j].image.get(), ds.samples[i].image.get());
      cats.insert(ds.samples[j].category);
    }
    EXPECT_EQ(cats.size(), 4u);
  }
}

TEST(Synthetic, AnswerSetIsClosed) {
  std::set<std::string> allowed = {"yes", "no"};
  for (auto list : {kSyntheticOrgans, kSyntheticPlanes, kSyntheticModalities, kSyntheticAbnormalities})
    for (auto a : list) allowed.insert(std::string(a));
  for (const auto& s : make_synthetic_dataset(300, 3).samples) EXPECT_TRUE(allowed.count(s.answer)) << s.answer;
}

TEST(Synthetic, AbnormalityMarkerChangesOnlyItsRegion) {
  SyntheticAttributes normal{1, 0, 1, 0}, left = normal, right = normal;
  left.abnormality = 1;
  right.abnormality = 2;
  auto n = render_synthetic_image(normal, 64, 7);
  auto l = render_synthetic_image(left, 64, 7);
  auto r = render_synthetic_image(right, 64, 7);
  double left_diff = 0, right_diff = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      double d = std::abs(l.at(y, x, 0) - n.at(y, x, 0));
      (x < 32 ? left_diff : right_diff) += d;
    }
  EXPECT_GT(left_diff, 0.0);
  EXPECT_EQ(right_diff, 0.0);
  EXPECT_NE(r, n);
}

TEST(Synthetic, ClusterImages) {
  auto c = make_cluster_images(20, 1, ClusterOptions{24, 3});
  ASSERT_EQ(c.images.size(), 20u);
  std::set<int> labels(c.labels.begin(), c.labels.end());
  EXPECT_EQ(labels, (std::set<int>{0, 1, 2}));
  for (const auto& img : c.images) {
    EXPECT_EQ(img.height, 24);
    EXPECT_NO_THROW(img.validate());
  }
}

TEST(Synthetic, Errors) {
  EXPECT_THROW(make_synthetic_dataset(0, 1), ConfigError);
  EXPECT_THROW(make_synthetic_dataset(5, 1, SyntheticOptions{64, 5}), ConfigError);
  EXPECT_THROW(render_synthetic_image({}, 8, 1), ConfigError);
  EXPECT_THROW(make_cluster_images(4, 1, ClusterOptions{32, 9}), ConfigError);
}
