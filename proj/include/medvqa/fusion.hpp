#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace medvqa {

// Attention weights over the m regions of an h x w grid, row-major.
struct AttentionDistribution {
  std::vector<double> weights;
  int grid_h = 0;
  int grid_w = 0;

  // Non-negative and summing to 1 within tol.
  bool on_simplex(double tol = 1e-5) const;
  nlohmann::json to_json() const;
  static AttentionDistribution from_json(const nlohmann::json& j);
};

std::vector<double> concat_fuse(std::span<const double> image, std::span<const double> question);
// Batched form: [B, a] and [B, b] -> [B, a + b].
torch::Tensor concat_fuse(const torch::Tensor& image, const torch::Tensor& question);

struct SanConfig {
  int layers = 3;  // 0 passes the question vector through unchanged
  int attention_hidden_dim = 512;
  int feature_dim = 1024;
  // Number of image regions; needed for the per-region logit bias.
  int regions = 0;
  bool region_bias = true;

  void validate() const;
};

struct SanOutput {
  torch::Tensor u;                       // [B, d]
  std::vector<torch::Tensor> attention;  // one [B, m] tensor per layer
};

class SanLayerImpl : public torch::nn::Module {
 public:
  SanLayerImpl(int feature_dim, int hidden_dim, int regions, bool region_bias);

  // Returns (refined query, attention).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& regions, const torch::Tensor& query);

  torch::nn::Linear image_proj{nullptr};  // W_I, no bias
  torch::nn::Linear query_proj{nullptr};  // W_Q with b_A
  torch::nn::Linear logit{nullptr};       // w_P, no bias
  torch::Tensor region_bias;              // b_P, [m]; undefined when disabled
};
TORCH_MODULE(SanLayer);

class SanFusionImpl : public torch::nn::Module {
 public:
  explicit SanFusionImpl(const SanConfig& cfg);

  // regions [B, m, d], question [B, d].
  SanOutput forward(const torch::Tensor& regions, const torch::Tensor& question);

  const SanConfig& config() const { return cfg_; }
  SanLayer layer(int k) const { return layers_[static_cast<size_t>(k)]; }

 private:
  SanConfig cfg_;
  std::vector<SanLayer> layers_;
};
TORCH_MODULE(SanFusion);

// Double-precision stacked attention with hand-derived gradients, used to
// verify the torch module and as a readable statement of the computation.
namespace san_ref {

struct Layer {
  Eigen::MatrixXd W_I;  // k x d
  Eigen::MatrixXd W_Q;  // k x d
  Eigen::VectorXd b_A;  // k
  Eigen::VectorXd w_P;  // k
  Eigen::VectorXd b_P;  // m (zeros when the bias is disabled)
};

using Params = std::vector<Layer>;

struct Forward {
  Eigen::VectorXd u;
  std::vector<Eigen::VectorXd> p;  // per layer
  std::vector<Eigen::MatrixXd> H;  // per layer, m x k
  std::vector<Eigen::VectorXd> u_in;
};

struct Gradients {
  Params params;       // same layout as the parameters
  Eigen::MatrixXd V;   // m x d
  Eigen::VectorXd q;   // d
};

Forward forward(const Eigen::MatrixXd& V, const Eigen::VectorXd& q, const Params& params);

// Gradients of <g_u, u> with respect to every parameter and input.
Gradients san_gradients(const Eigen::MatrixXd& V, const Eigen::VectorXd& q, const Params& params,
                        const Eigen::VectorXd& g_u);

Params random_params(int layers, int regions, int feature_dim, int hidden_dim, std::mt19937_64& rng,
                     double scale = 0.5);

Params from_module(SanFusion& san);
void to_module(const Params& params, SanFusion& san);

Eigen::MatrixXd to_eigen(const torch::Tensor& t);
torch::Tensor to_tensor(const Eigen::MatrixXd& m);

}  // namespace san_ref

}  // namespace medvqa
