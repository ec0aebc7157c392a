// One pass/fail line per acceptance criterion. Exit status is non-zero when
// any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "medvqa/archive.hpp"
#include "medvqa/contrastive.hpp"
#include "medvqa/dataset.hpp"
#include "medvqa/error.hpp"
#include "medvqa/explain.hpp"
#include "medvqa/fusion.hpp"
#include "medvqa/model.hpp"
#include "medvqa/service.hpp"
#include "medvqa/synthetic.hpp"
#include "medvqa/training.hpp"

// after Eigen: resolv.h defines _res
#include <httplib.h>

namespace fs = std::filesystem;
using namespace medvqa;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("medvqa_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- overfit

struct ToyRun {
  VqaSystem system;
  SyntheticDataset train_set;
  SyntheticDataset heldout;
  TrainResult log;
  double seconds = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.image_encoder.arch = ImageArch::vgg_small;
  cfg.image_encoder.output_mode = OutputMode::pooled;
  cfg.image_encoder.input_size = 64;
  cfg.image_encoder.feature_dim = 128;
  cfg.image_encoder.width = 8;
  cfg.image_encoder.depth = 4;
  cfg.question_encoder.arch = QuestionArch::lstm;
  cfg.question_encoder.embedding_dim = 64;
  cfg.question_encoder.hidden_dim = 128;
  cfg.fusion = FusionKind::concat;
  cfg.head_hidden_dim = 256;
  cfg.dropout = 0.2;
  return cfg;
}

TrainConfig toy_train_config() {
  TrainConfig tc;
  tc.epochs = 200;
  tc.learning_rate = 5e-4;
  tc.batch_size = 16;
  tc.seed = 7;
  tc.stop_at_train_accuracy = 1.0;
  return tc;
}

ToyRun& toy_run() {
  static std::optional<ToyRun> run;
  if (run) return *run;
  run.emplace();
  SyntheticOptions opts;
  opts.image_size = 64;
  opts.questions_per_image = 1;
  run->train_set = make_synthetic_dataset(200, 11, opts);
  run->heldout = make_synthetic_dataset(200, 12, opts);
  const auto t0 = std::chrono::steady_clock::now();
  run->system = build_system_for(toy_model_config(), run->train_set.samples, 7);
  run->log = train(run->system, run->train_set.samples, toy_train_config());
  run->seconds = seconds_since(t0);
  run->train_accuracy = evaluate(run->system, run->train_set.samples).overall_accuracy;
  run->heldout_accuracy = evaluate(run->system, run->heldout.samples).overall_accuracy;
  return *run;
}

Outcome synthetic_overfit() {
  auto& run = toy_run();
  const int epochs = static_cast<int>(run.log.epochs.size());
  Outcome o;
  o.pass = run.train_accuracy >= 0.95 && epochs <= 200 && run.seconds < 600.0 && run.heldout_accuracy >= 0.80;
  o.detail = "train_acc=" + fmt("%.3f", run.train_accuracy) + " heldout_acc=" + fmt("%.3f", run.heldout_accuracy) +
             " epochs=" + std::to_string(epochs) + " time=" + fmt("%.0fs", run.seconds) +
             " (need >=0.95, >=0.80, <=200, <600s)";
  return o;
}

// ---------------------------------------------------------------- gradients

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

Outcome san_gradient_check() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  const double h = 1e-5;
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<int> dim(1, 8), layers_d(1, 3);
    const int m = dim(rng), d = dim(rng), k = dim(rng), layers = layers_d(rng);
    auto params = san_ref::random_params(layers, m, d, k, rng);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd V = Eigen::MatrixXd::NullaryExpr(m, d, [&] { return n(rng); });
    Eigen::VectorXd q = Eigen::VectorXd::NullaryExpr(d, [&] { return n(rng); });
    Eigen::VectorXd g = Eigen::VectorXd::NullaryExpr(d, [&] { return n(rng); });
    auto loss = [&] { return g.dot(san_ref::forward(V, q, params).u); };
    auto grads = san_ref::san_gradients(V, q, params, g);

    auto check = [&](double* values, const double* analytic, Eigen::Index size) {
      std::vector<double> a(analytic, analytic + size), num(static_cast<size_t>(size));
      for (Eigen::Index i = 0; i < size; ++i) {
        const double keep = values[i];
        values[i] = keep + h;
        const double up = loss();
        values[i] = keep - h;
        const double down = loss();
        values[i] = keep;
        num[static_cast<size_t>(i)] = (up - down) / (2 * h);
      }
      worst = std::max(worst, rel_error(a, num));
    };
    check(V.data(), grads.V.data(), V.size());
    check(q.data(), grads.q.data(), q.size());
    for (size_t l = 0; l < params.size(); ++l) {
      auto& P = params[l];
      auto& G = grads.params[l];
      check(P.W_I.data(), G.W_I.data(), P.W_I.size());
      check(P.W_Q.data(), G.W_Q.data(), P.W_Q.size());
      check(P.b_A.data(), G.b_A.data(), P.b_A.size());
      check(P.w_P.data(), G.w_P.data(), P.w_P.size());
      check(P.b_P.data(), G.b_P.data(), P.b_P.size());
    }
  }
  return {worst < 1e-4, "max rel err " + fmt("%.2e", worst) + " over 25 instances m,d<=8 (need <1e-4)"};
}

struct TinyCase {
  VqaModel model{nullptr};
  torch::Tensor images, ids, lengths, labels;
};

TinyCase tiny_case(FusionKind fusion, std::uint64_t seed) {
  torch::manual_seed(seed);
  ModelConfig cfg;
  cfg.image_encoder.arch = ImageArch::vgg_small;
  cfg.image_encoder.width = 4;
  cfg.image_encoder.depth = 2;
  cfg.image_encoder.input_size = 8;
  cfg.image_encoder.feature_dim = 8;
  cfg.image_encoder.output_mode = fusion == FusionKind::san ? OutputMode::spatial : OutputMode::pooled;
  cfg.question_encoder.embedding_dim = 8;
  cfg.question_encoder.hidden_dim = 8;
  cfg.fusion = fusion;
  cfg.san.layers = 2;
  cfg.san.attention_hidden_dim = 8;
  cfg.san.feature_dim = 8;
  cfg.head_hidden_dim = 8;
  cfg.n_classes = 3;
  TinyCase c;
  c.model = VqaModel(cfg, 10);
  c.model->to(torch::kFloat64);
  c.model->eval();
  // Non-trivial running statistics so eval-mode batch norm is not identity.
  for (auto& b : c.model->buffers()) {
    if (b.scalar_type() == torch::kFloat64) b.uniform_(0.5, 1.5);
  }
  c.images = torch::randn({3, 3, 8, 8}, torch::kFloat64);
  c.ids = torch::tensor({2, 3, 4, 5, 6, 7, 8, 9, 2}, torch::kInt64).view({3, 3});
  c.lengths = torch::tensor({3, 2, 1}, torch::kInt64);
  c.labels = torch::tensor({0, 2, 1}, torch::kInt64);
  return c;
}

double tiny_gradient_error(FusionKind fusion) {
  auto c = tiny_case(fusion, fusion == FusionKind::san ? 202 : 201);
  auto loss_of = [&] {
    return torch::nn::functional::cross_entropy(c.model->forward(c.images, c.ids, c.lengths), c.labels);
  };
  c.model->zero_grad();
  loss_of().backward();
  const double h = 1e-6;
  double worst = 0.0;
  for (auto& item : c.model->named_parameters()) {
    auto p = item.value();
    if (!p.grad().defined()) continue;
    auto flat = p.data().view(-1);
    auto grad = p.grad().view(-1);
    const auto n = flat.numel();
    std::vector<double> a, num;
    torch::NoGradGuard no_grad;
    for (std::int64_t i = 0; i < n; ++i) {
      double* v = flat.data_ptr<double>() + i;
      const double keep = *v;
      *v = keep + h;
      const double up = loss_of().item<double>();
      *v = keep - h;
      const double down = loss_of().item<double>();
      *v = keep;
      num.push_back((up - down) / (2 * h));
      a.push_back(grad[i].item<double>());
    }
    worst = std::max(worst, rel_error(a, num));
  }
  return worst;
}

Outcome end_to_end_gradient_check() {
  const double concat = tiny_gradient_error(FusionKind::concat);
  const double san = tiny_gradient_error(FusionKind::san);
  const double worst = std::max(concat, san);
  return {worst < 1e-3, "max rel err concat " + fmt("%.2e", concat) + ", san " + fmt("%.2e", san) +
                            " on 8x8 images, d=8, every parameter entry (need <1e-3)"};
}

// ---------------------------------------------------------------- simplex

Outcome attention_simplex() {
  std::mt19937_64 rng(303);
  torch::manual_seed(303);
  double worst_sum = 0.0, worst_perm = 0.0;
  bool nonneg = true;
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> dim(1, 12), layers_d(1, 4), batch_d(1, 3);
    SanConfig cfg;
    cfg.layers = layers_d(rng);
    cfg.feature_dim = dim(rng);
    cfg.attention_hidden_dim = dim(rng);
    cfg.regions = dim(rng);
    SanFusion san(cfg);
    san->to(torch::kFloat64);
    {
      torch::NoGradGuard no_grad;
      for (auto& p : san->parameters()) p.normal_(0.0, 1.0);
    }
    const int B = batch_d(rng);
    auto V = torch::randn({B, cfg.regions, cfg.feature_dim}, torch::kFloat64) * 2.0;
    auto q = torch::randn({B, cfg.feature_dim}, torch::kFloat64) * 2.0;
    torch::NoGradGuard no_grad;
    auto out = san->forward(V, q);
    for (const auto& p : out.attention) {
      nonneg = nonneg && p.min().item<double>() >= 0.0;
      worst_sum = std::max(worst_sum, (p.sum(1) - 1.0).abs().max().item<double>());
    }
    auto perm = torch::randperm(cfg.regions, torch::kInt64);
    for (int k = 0; k < cfg.layers; ++k) {
      auto& bias = san->layer(k)->region_bias;
      bias.copy_(bias.index_select(0, perm));
    }
    auto permuted = san->forward(V.index_select(1, perm), q);
    worst_perm = std::max(worst_perm, (permuted.u - out.u).abs().max().item<double>());
    for (int k = 0; k < cfg.layers; ++k) {
      auto expected = out.attention[static_cast<size_t>(k)].index_select(1, perm);
      worst_perm = std::max(worst_perm, (permuted.attention[static_cast<size_t>(k)] - expected).abs().max().item<double>());
    }
  }
  Outcome o;
  o.pass = nonneg && worst_sum <= 1e-5 && worst_perm <= 1e-9;
  o.detail = std::string(nonneg ? "all weights >= 0" : "NEGATIVE weight seen") + ", max |sum-1| " +
             fmt("%.1e", worst_sum) + ", max permutation deviation " + fmt("%.1e", worst_perm) +
             " over 1000 evaluations (need 1e-5, 1e-9)";
  return o;
}

// ---------------------------------------------------------------- NT-Xent

double brute_force_nt_xent(const std::vector<std::vector<double>>& z, double tau) {
  const size_t n = z.size();
  auto cosine = [&](size_t i, size_t j) {
    double dot = 0, ni = 0, nj = 0;
    for (size_t d = 0; d < z[i].size(); ++d) {
      dot += z[i][d] * z[j][d];
      ni += z[i][d] * z[i][d];
      nj += z[j][d] * z[j][d];
    }
    return dot / std::sqrt(ni * nj);
  };
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const size_t pos = i % 2 == 0 ? i + 1 : i - 1;
    double denom = 0.0;
    for (size_t k = 0; k < n; ++k) {
      if (k != i) denom += std::exp(cosine(i, k) / tau);
    }
    total += -std::log(std::exp(cosine(i, pos) / tau) / denom);
  }
  return total / static_cast<double>(n);
}

Outcome nt_xent_oracle() {
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> nd(2, 8), dd(2, 16);
    std::uniform_real_distribution<double> taud(0.05, 2.0);
    std::normal_distribution<double> g(0.0, 1.0);
    const int N = nd(rng), D = dd(rng);
    const double tau = taud(rng);
    std::vector<std::vector<double>> z(static_cast<size_t>(2 * N), std::vector<double>(static_cast<size_t>(D)));
    auto t = torch::empty({2 * N, D}, torch::kFloat64);
    for (int i = 0; i < 2 * N; ++i)
      for (int d = 0; d < D; ++d) t[i][d] = z[static_cast<size_t>(i)][static_cast<size_t>(d)] = g(rng);
    worst = std::max(worst, std::abs(nt_xent_loss(t, tau).item<double>() - brute_force_nt_xent(z, tau)));
  }
  auto hand = torch::tensor({1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0}, torch::kFloat64).view({4, 2});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  const double hand_err = std::abs(nt_xent_loss(hand, 1.0).item<double>() - expected);
  return {worst <= 1e-6 && hand_err <= 1e-6, "max |loss - brute force| " + fmt("%.1e", worst) +
                                                   " over 100 batches; hand case error " + fmt("%.1e", hand_err) +
                                                   " vs " + fmt("%.4f", expected) + " (need 1e-6)"};
}

// ---------------------------------------------------------------- contrastive

Outcome contrastive_benefit() {
  const auto t0 = std::chrono::steady_clock::now();
  ClusterOptions copts;
  auto pretrain_set = make_cluster_images(512, 21, copts);
  auto probe_train = make_cluster_images(200, 22, copts);
  auto probe_test = make_cluster_images(400, 23, copts);

  ImageEncoderConfig ecfg;
  ecfg.arch = ImageArch::vgg_small;
  ecfg.input_size = copts.image_size;
  ecfg.feature_dim = 64;
  ecfg.depth = 4;
  ContrastiveConfig ccfg;
  ccfg.epochs = 150;
  ccfg.batch_size = 128;
  auto result = pretrain_encoder(pretrain_set.images, ecfg, ccfg, 31);

  auto save = scratch_dir("contrastive") / "encoder.bin";
  save_archive(save, result.encoder_weights);
  ImageEncoderConfig loaded = ecfg;
  loaded.pretrained_weights = save.string();
  auto pretrained = build_image_encoder(loaded);
  const double after = linear_probe(pretrained, probe_train.images, probe_train.labels, probe_test.images,
                                    probe_test.labels);
  torch::manual_seed(31);
  ImageEncoder control(ecfg);
  const double before = linear_probe(control, probe_train.images, probe_train.labels, probe_test.images,
                                     probe_test.labels);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = after >= 0.90 && before <= 0.60 && secs < 900.0;
  o.detail = "probe after pretraining " + fmt("%.3f", after) + ", random-init control " + fmt("%.3f", before) +
             ", loss " + fmt("%.3f", result.epoch_loss.front()) + " -> " + fmt("%.3f", result.epoch_loss.back()) +
             ", time " + fmt("%.0fs", secs) + " (need >=0.90, <=0.60, <900s)";
  return o;
}

// ---------------------------------------------------------------- GradCAM

Outcome gradcam_invariants() {
  std::mt19937_64 rng(505);
  torch::manual_seed(505);
  int failures = 0;
  std::string first_failure;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> cd(1, 8), sd(1, 7), od(4, 40);
    const int C = cd(rng), h = sd(rng), w = sd(rng), H = od(rng), W = od(rng);
    auto A = torch::relu(torch::randn({C, h, w}, torch::kFloat64));
    auto G = torch::randn({C, h, w}, torch::kFloat64);
    auto r = gradcam_from_activations(A, G, H, W);
    const auto& v = r.heatmap.values;
    const double mn = *std::min_element(v.begin(), v.end());
    const double mx = *std::max_element(v.begin(), v.end());
    bool ok = mn >= 0.0 && mx <= 1.0;
    ok = ok && (r.heatmap.degenerate ? mx == 0.0 : mx == 1.0);
    auto weighted = (r.channel_weights.view({-1, 1, 1}) * A).sum(0);
    ok = ok && r.raw.masked_select(weighted < 0).abs().sum().item<double>() == 0.0;
    std::uniform_real_distribution<double> cdist(0.1, 10.0);
    const double c = cdist(rng);
    auto scaled = gradcam_from_activations(A, G * c, H, W);
    ok = ok && (scaled.raw - r.raw * c).abs().max().item<double>() <= 1e-12 * std::max(1.0, r.raw.abs().max().item<double>() * c);
    for (size_t i = 0; ok && i < v.size(); ++i) ok = std::abs(scaled.heatmap.values[i] - v[i]) <= 1e-12;
    if (!ok) {
      ++failures;
      if (first_failure.empty()) first_failure = " first failure at case " + std::to_string(trial);
    }
  }
  // Read-only contract on a real model.
  auto& run = toy_run();
  auto before = clone_state(module_state(*run.system.model));
  const auto& s = run.heldout.samples.front();
  gradcam(run.system, *s.image, s.question);
  auto after = module_state(*run.system.model);
  bool unchanged = before.size() == after.size();
  for (size_t i = 0; unchanged && i < before.size(); ++i) unchanged = torch::equal(before[i].second, after[i].second);
  return {failures == 0 && unchanged, std::to_string(100 - failures) + "/100 random cases satisfy range, ReLU and " +
                                          "scale invariants" + first_failure + "; weights " +
                                          (unchanged ? "bit-identical" : "CHANGED") + " after gradcam"};
}

Outcome gradcam_deletion() {
  auto& run = toy_run();
  std::vector<const Image*> train_images;
  for (const auto& s : run.train_set.samples) train_images.push_back(s.image.get());
  const auto mean = mean_pixel(train_images);
  std::mt19937_64 rng(606);
  int wins = 0, total = 0;
  for (size_t i = 0; i < 50 && i < run.heldout.samples.size(); ++i) {
    const auto& s = run.heldout.samples[i];
    auto cam = gradcam(run.system, *s.image, s.question);
    auto d = deletion_check(run.system, *s.image, s.question, cam.heatmap, 0.2, rng, mean);
    ++total;
    if (d.drop_top > d.drop_random) ++wins;
  }
  const double rate = static_cast<double>(wins) / total;
  return {rate >= 0.70, "drop_top > drop_random on " + std::to_string(wins) + "/" + std::to_string(total) + " (" +
                            fmt("%.0f%%", 100 * rate) + ", need >=70%)"};
}

// ---------------------------------------------------------------- determinism

std::string answer_over_http(const fs::path& checkpoint, const Image& image, const std::string& question) {
  auto registry = ModelRegistry::load_dir(checkpoint);
  HttpService service(registry);
  const int port = service.bind("127.0.0.1", 0);
  std::thread server([&] { service.serve(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 100 && !service.is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  auto png = encode_png(image);
  httplib::MultipartFormDataItems items = {
      {"image", std::string(png.begin(), png.end()), "image.png", "image/png"},
      {"question", question, "", ""},
      {"top_k", "3", "", ""},
  };
  auto res = client.Post("/v1/answer", items);
  service.stop();
  server.join();
  if (!res || res->status != 200) return "request failed";
  auto j = nlohmann::json::parse(res->body);
  j.erase("latency_ms");
  return j.dump();
}

Outcome determinism() {
  SyntheticOptions opts;
  opts.image_size = 32;
  auto data = make_synthetic_dataset(120, 77, opts);
  auto folds_a = split_cv(data.samples, 5, 0.8, 99);
  auto folds_b = split_cv(data.samples, 5, 0.8, 99);
  bool folds_equal = folds_a.size() == folds_b.size();
  for (size_t i = 0; folds_equal && i < folds_a.size(); ++i) {
    folds_equal = folds_a[i].train == folds_b[i].train && folds_a[i].test == folds_b[i].test;
  }

  ModelConfig cfg = toy_model_config();
  cfg.image_encoder.input_size = 32;
  TrainConfig tc;
  tc.epochs = 4;
  tc.learning_rate = 1e-3;
  tc.batch_size = 16;
  tc.seed = 5;
  auto run_once = [&] {
    auto sys = build_system_for(cfg, data.samples, 5);
    auto log = train(sys, data.samples, tc);
    std::vector<double> curve;
    for (const auto& e : log.epochs) curve.push_back(e.loss);
    return std::make_pair(curve, std::move(sys));
  };
  auto [curve_a, sys_a] = run_once();
  auto [curve_b, sys_b] = run_once();
  const bool curves_equal = curve_a == curve_b;

  auto dir = scratch_dir("determinism") / "toy";
  save_checkpoint(sys_a, dir);
  const auto& s = data.samples.front();
  auto first = answer_over_http(dir, *s.image, s.question);
  auto second = answer_over_http(dir, *s.image, s.question);
  const bool answers_equal = first == second && first != "request failed";
  return {folds_equal && curves_equal && answers_equal,
          std::string("split_cv folds ") + (folds_equal ? "identical" : "DIFFER") + ", loss curves " +
              (curves_equal ? "bit-identical" : "DIFFER") + ", service answers " +
              (answers_equal ? "bit-identical" : "DIFFER") + " across two runs"};
}

// ---------------------------------------------------------------- metrics

VqaSample fixture(const std::string& answer, Category c, const std::string& id = "img") {
  VqaSample s;
  s.image_id = id;
  s.question = "what is shown?";
  s.answer = answer;
  s.category = c;
  return s;
}

Outcome metric_arithmetic() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  {
    std::vector<VqaSample> s = {fixture("ct", Category::modality), fixture("mri", Category::modality),
                                fixture("axial", Category::plane), fixture("coronal", Category::plane)};
    std::vector<std::string> p = {"ct", "xray", "axial", "coronal"};
    auto r = evaluate_predictions(s, p);
    expect(r.overall_accuracy == 0.75, "4 samples, 3 correct -> 0.75");
    expect(r.per_category_accuracy.at(Category::plane) == 1.0 && r.per_category_accuracy.at(Category::modality) == 0.5,
           "plane 2/2, modality 1/2");
  }
  {
    std::vector<VqaSample> s = {fixture("pulmonary embolism", Category::abnormality)};
    std::vector<std::string> p = {"Pulmonary Embolism"};
    expect(evaluate_predictions(s, p).overall_accuracy == 1.0, "case-insensitive exact match");
  }
  {
    // 10 samples over 10 images; the runner marks a fixed subset correct so
    // every fold's accuracy is known in advance.
    std::vector<VqaSample> s;
    const char* answers[] = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
    for (int i = 0; i < 10; ++i) {
      s.push_back(fixture(answers[i], i % 2 ? Category::plane : Category::organ, "img" + std::to_string(i)));
    }
    std::vector<double> expected;
    FoldRunner runner = [&](int, std::span<const VqaSample>, std::span<const VqaSample> test, std::uint64_t) {
      std::vector<std::string> p;
      size_t correct = 0;
      for (const auto& t : test) {
        const bool hit = t.answer < std::string("f");
        correct += hit ? 1 : 0;
        p.push_back(hit ? t.answer : std::string("wrong"));
      }
      expected.push_back(static_cast<double>(correct) / static_cast<double>(test.size()));
      return evaluate_predictions(test, p);
    };
    auto cv = cross_validate(s, 5, 0.8, 3, runner);
    double mean = std::accumulate(expected.begin(), expected.end(), 0.0) / 5.0;
    double var = 0.0;
    for (double e : expected) var += (e - mean) * (e - mean);
    expect(std::abs(cv.mean - mean) < 1e-15 && std::abs(cv.stdev - std::sqrt(var / 5.0)) < 1e-15,
           "cross_validate mean and population std");
    bool ids = cv.folds.size() == 5;
    for (int f = 0; ids && f < 5; ++f) ids = cv.folds[static_cast<size_t>(f)].fold_id == f;
    expect(ids, "fold ids 0..4");
  }
  {
    std::vector<VqaSample> s;
    for (int i = 0; i < 10; ++i) s.push_back(fixture(i % 2 ? "yes" : "no", Category::abnormality, "i" + std::to_string(i)));
    FoldRunner half = [](int, std::span<const VqaSample>, std::span<const VqaSample> test, std::uint64_t) {
      std::vector<std::string> p;
      for (size_t i = 0; i < test.size(); ++i) p.push_back(i % 2 ? test[i].answer : "wrong");
      return evaluate_predictions(test, p);
    };
    auto cv = cross_validate(s, 5, 0.8, 1, half);
    expect(cv.summary() == "0.50±0.00", "constant 0.5 folds -> 0.50±0.00 (got " + cv.summary() + ")");
  }
  expect(format_mean_std(0.56, 0.01) == "0.56±0.01", "format 0.56±0.01");
  expect(format_mean_std(0.6, 0.0) == "0.60±0.00", "format 0.60±0.00");
  std::string detail = failures.empty() ? "all hand-computed fixtures reproduced exactly; summary style 0.56±0.01"
                                        : "failed: " + failures.front();
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------- harness

Outcome full_data_harness(const fs::path& readme) {
  std::ifstream in(readme);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string doc = buf.str();
  std::vector<std::string> needles = {"0.56", "0.60", "0.06", "0.08", "±0.03", "GPU", "crossval"};
  std::string missing;
  for (const auto& n : needles) {
    if (doc.find(n) == std::string::npos) missing += " " + n;
  }

  // Same pipeline the CLI runs, on a tiny on-disk dataset in the release layout.
  SyntheticOptions opts;
  opts.image_size = 32;
  auto data = make_synthetic_dataset(80, 88, opts);
  auto root = scratch_dir("harness");
  write_vqamed(root, data.samples);
  auto loaded = load_vqamed(root);
  ModelConfig cfg = toy_model_config();
  cfg.image_encoder.input_size = 32;
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  auto cv = cross_validate(cfg, loaded, tc);
  auto j = cv.to_json();
  bool shape_ok = cv.folds.size() == 5 && j.contains("summary") && j["per_category"].size() == 4;
  auto table = model_comparison_table({comparison_row_from_json(j, "toy")});
  shape_ok = shape_ok && table.text.find(cv.summary()) != std::string::npos;
  const bool ok = missing.empty() && shape_ok;
  return {ok, std::string("README targets ") + (missing.empty() ? "documented" : "missing:" + missing) +
                  "; 5-fold report with per-category rows " + (shape_ok ? "emitted" : "MALFORMED") + " (" +
                  cv.summary() + " on toy data)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<std::string> only;
  std::string readme = MEDVQA_README_PATH;
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--readme", readme, "README to check for documented targets");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"synthetic_overfit", synthetic_overfit},
      {"san_gradient_oracle", san_gradient_check},
      {"end_to_end_gradient_oracle", end_to_end_gradient_check},
      {"attention_simplex", attention_simplex},
      {"nt_xent_oracle", nt_xent_oracle},
      {"contrastive_benefit", contrastive_benefit},
      {"gradcam_invariants", gradcam_invariants},
      {"gradcam_deletion", gradcam_deletion},
      {"determinism", determinism},
      {"metric_arithmetic", metric_arithmetic},
      {"full_data_harness", [&] { return full_data_harness(readme); }},
  };

  int failed = 0, ran = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
