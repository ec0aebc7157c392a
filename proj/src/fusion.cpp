#include "medvqa/fusion.hpp"

#include <cmath>
#include <sstream>

#include "medvqa/error.hpp"

namespace nn = torch::nn;

namespace medvqa {

bool AttentionDistribution::on_simplex(double tol) const {
  if (weights.empty()) return false;
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) return false;
    sum += w;
  }
  return std::abs(sum - 1.0) <= tol;
}

nlohmann::json AttentionDistribution::to_json() const {
  return {{"grid", {grid_h, grid_w}}, {"weights", weights}};
}

AttentionDistribution AttentionDistribution::from_json(const nlohmann::json& j) {
  AttentionDistribution a;
  try {
    a.grid_h = j.at("grid").at(0).get<int>();
    a.grid_w = j.at("grid").at(1).get<int>();
    a.weights = j.at("weights").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("attention map: ") + e.what());
  }
  if (static_cast<size_t>(a.grid_h) * static_cast<size_t>(a.grid_w) != a.weights.size()) {
    throw ParseError("attention map: grid does not match weight count");
  }
  return a;
}

std::vector<double> concat_fuse(std::span<const double> image, std::span<const double> question) {
  std::vector<double> out(image.begin(), image.end());
  out.insert(out.end(), question.begin(), question.end());
  return out;
}

torch::Tensor concat_fuse(const torch::Tensor& image, const torch::Tensor& question) {
  if (image.dim() != 2 || question.dim() != 2 || image.size(0) != question.size(0)) {
    std::ostringstream msg;
    msg << "concat_fuse expects [B,a] and [B,b], got " << image.sizes() << " and " << question.sizes();
    throw ShapeError(msg.str());
  }
  return torch::cat({image, question}, 1);
}

void SanConfig::validate() const {
  if (layers < 0) throw ConfigError("san layers must be non-negative");
  if (attention_hidden_dim <= 0 || feature_dim <= 0) throw ConfigError("san dimensions must be positive");
  if (region_bias && layers > 0 && regions <= 0) throw ConfigError("san region bias needs the region count");
}

SanLayerImpl::SanLayerImpl(int feature_dim, int hidden_dim, int regions, bool use_region_bias) {
  image_proj = register_module("image_proj", nn::Linear(nn::LinearOptions(feature_dim, hidden_dim).bias(false)));
  query_proj = register_module("query_proj", nn::Linear(feature_dim, hidden_dim));
  logit = register_module("logit", nn::Linear(nn::LinearOptions(hidden_dim, 1).bias(false)));
  if (use_region_bias) region_bias = register_parameter("region_bias", torch::zeros({regions}));
}

std::pair<torch::Tensor, torch::Tensor> SanLayerImpl::forward(const torch::Tensor& regions,
                                                              const torch::Tensor& query) {
  auto h = torch::tanh(image_proj(regions) + query_proj(query).unsqueeze(1));
  auto scores = logit(h).squeeze(-1);
  if (region_bias.defined()) scores = scores + region_bias;
  auto p = torch::softmax(scores, 1);
  auto attended = torch::bmm(p.unsqueeze(1), regions).squeeze(1);
  return {attended + query, p};
}

SanFusionImpl::SanFusionImpl(const SanConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  for (int k = 0; k < cfg_.layers; ++k) {
    layers_.push_back(register_module(
        "layer" + std::to_string(k),
        SanLayer(cfg_.feature_dim, cfg_.attention_hidden_dim, cfg_.regions, cfg_.region_bias)));
  }
}

SanOutput SanFusionImpl::forward(const torch::Tensor& regions, const torch::Tensor& question) {
  if (regions.dim() != 3 || question.dim() != 2 || regions.size(0) != question.size(0) ||
      regions.size(2) != cfg_.feature_dim || question.size(1) != cfg_.feature_dim) {
    std::ostringstream msg;
    msg << "san_fuse expects regions [B,m," << cfg_.feature_dim << "] and question [B," << cfg_.feature_dim
        << "], got " << regions.sizes() << " and " << question.sizes();
    throw ShapeError(msg.str());
  }
  if (cfg_.region_bias && cfg_.layers > 0 && regions.size(1) != cfg_.regions) {
    throw ShapeError("san_fuse configured for " + std::to_string(cfg_.regions) + " regions, got " +
                     std::to_string(regions.size(1)));
  }
  SanOutput out;
  out.u = question;
  for (auto& layer : layers_) {
    auto [u, p] = layer->forward(regions, out.u);
    out.u = u;
    out.attention.push_back(p);
  }
  return out;
}

namespace san_ref {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Forward forward(const MatrixXd& V, const VectorXd& q, const Params& params) {
  if (V.cols() != q.size()) throw ShapeError("san reference: region width differs from question width");
  Forward f;
  VectorXd u = q;
  for (const Layer& L : params) {
    f.u_in.push_back(u);
    MatrixXd Z = V * L.W_I.transpose();
    VectorXd c = L.W_Q * u + L.b_A;
    Z.rowwise() += c.transpose();
    MatrixXd H = Z.array().tanh().matrix();
    VectorXd s = H * L.w_P + L.b_P;
    VectorXd e = (s.array() - s.maxCoeff()).exp().matrix();
    VectorXd p = e / e.sum();
    u = V.transpose() * p + u;
    f.H.push_back(std::move(H));
    f.p.push_back(std::move(p));
  }
  f.u = u;
  return f;
}

Gradients san_gradients(const MatrixXd& V, const VectorXd& q, const Params& params, const VectorXd& g_u_final) {
  Forward f = forward(V, q, params);
  Gradients g;
  g.V = MatrixXd::Zero(V.rows(), V.cols());
  g.params.resize(params.size());
  VectorXd g_u = g_u_final;
  for (size_t k = params.size(); k-- > 0;) {
    const Layer& L = params[k];
    const VectorXd& p = f.p[k];
    const MatrixXd& H = f.H[k];
    const VectorXd& u_in = f.u_in[k];
    Layer& G = g.params[k];

    VectorXd g_p = V * g_u;
    g.V += p * g_u.transpose();
    VectorXd g_s = p.array() * (g_p.array() - p.dot(g_p));
    G.b_P = g_s;
    G.w_P = H.transpose() * g_s;
    MatrixXd g_Z = (g_s * L.w_P.transpose()).array() * (1.0 - H.array().square());
    G.W_I = g_Z.transpose() * V;
    g.V += g_Z * L.W_I;
    VectorXd g_c = g_Z.colwise().sum().transpose();
    G.b_A = g_c;
    G.W_Q = g_c * u_in.transpose();
    g_u = g_u + L.W_Q.transpose() * g_c;
  }
  g.q = g_u;
  return g;
}

Params random_params(int layers, int regions, int feature_dim, int hidden_dim, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  auto fill = [&](Eigen::Index r, Eigen::Index c) { return MatrixXd::NullaryExpr(r, c, [&] { return n(rng); }); };
  Params params;
  for (int k = 0; k < layers; ++k) {
    Layer L;
    L.W_I = fill(hidden_dim, feature_dim);
    L.W_Q = fill(hidden_dim, feature_dim);
    L.b_A = fill(hidden_dim, 1);
    L.w_P = fill(hidden_dim, 1);
    L.b_P = fill(regions, 1);
    params.push_back(std::move(L));
  }
  return params;
}

MatrixXd to_eigen(const torch::Tensor& t) {
  auto d = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (d.dim() == 1) d = d.unsqueeze(1);
  if (d.dim() != 2) throw ShapeError("to_eigen expects a 1-D or 2-D tensor");
  MatrixXd m(d.size(0), d.size(1));
  auto a = d.accessor<double, 2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = a[i][j];
  return m;
}

torch::Tensor to_tensor(const MatrixXd& m) {
  auto t = torch::empty({m.rows(), m.cols()}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a[i][j] = m(i, j);
  return t;
}

Params from_module(SanFusion& san) {
  Params params;
  const auto& cfg = san->config();
  for (int k = 0; k < cfg.layers; ++k) {
    auto layer = san->layer(k);
    Layer L;
    L.W_I = to_eigen(layer->image_proj->weight);
    L.W_Q = to_eigen(layer->query_proj->weight);
    L.b_A = to_eigen(layer->query_proj->bias).col(0);
    L.w_P = to_eigen(layer->logit->weight).row(0).transpose();
    L.b_P = layer->region_bias.defined() ? VectorXd(to_eigen(layer->region_bias).col(0))
                                         : VectorXd::Zero(std::max(cfg.regions, 1));
    params.push_back(std::move(L));
  }
  return params;
}

void to_module(const Params& params, SanFusion& san) {
  if (static_cast<int>(params.size()) != san->config().layers) throw ShapeError("san reference: layer count differs");
  torch::NoGradGuard no_grad;
  for (size_t k = 0; k < params.size(); ++k) {
    auto layer = san->layer(static_cast<int>(k));
    const auto& L = params[k];
    auto opts = layer->image_proj->weight.options();
    layer->image_proj->weight.copy_(to_tensor(L.W_I).to(opts));
    layer->query_proj->weight.copy_(to_tensor(L.W_Q).to(opts));
    layer->query_proj->bias.copy_(to_tensor(L.b_A).squeeze(1).to(opts));
    layer->logit->weight.copy_(to_tensor(L.w_P.transpose()).to(opts));
    if (layer->region_bias.defined()) layer->region_bias.copy_(to_tensor(L.b_P).squeeze(1).to(opts));
  }
}

}  // namespace san_ref

}  // namespace medvqa
