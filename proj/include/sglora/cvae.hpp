// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Conditional VAE over flattened adapter vectors: encoder q(z|X,c), prior
// mapper p(z|c), decoder, ELBO training, and prior-driven sampling. The
// network and loss graph are templated on the scalar type so training runs
// in float while gradient checks run the identical graph in double.

#ifndef SGLORA_CVAE_HPP_
#define SGLORA_CVAE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sglora/numkit.hpp"
#include "sglora/repository.hpp"
#include "sglora/router.hpp"

namespace sglora {

inline constexpr float kLogvarMin = -12.0f;
inline constexpr float kLogvarMax = 12.0f;
inline constexpr double kNormStdFloor = 1e-8;

struct CvaeConfig {
  std::size_t latent_dim = 64;   // L
  std::size_t cond_dim = 128;    // C, output of the condition projector
  std::size_t hidden = 256;      // H; encoder/prior use [H,H], decoder [H,H,H]
  double lambda_kl = 1e-3;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  bool cosine_lr_decay = true;
  // Stddev of Gaussian jitter added to normalized conditions during
  // training; smooths the decoder across condition space. 0 disables.
  double cond_noise = 0.0;
  // Decoupled per-step shrinkage of all network weights (AdamW style).
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  // Routing used to build training conditions.
  std::size_t router_k = kDefaultTopK;
  double router_tau = kDefaultTau;
};

void validate_config(const CvaeConfig& config);
std::string cvae_config_to_json(const CvaeConfig& config);
CvaeConfig cvae_config_from_json(const std::string& text,
                                 const std::string& origin);

struct GaussianDiag {
  std::vector<float> mean;
  std::vector<float> logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

// --------------------------------------------------------------------------
// Network container. Layer stacks, in forward order:
//   cond:    [2D -> C] ReLU
//   encoder: [(D+C) -> H] ReLU, [H -> H] ReLU, [H -> 2L] linear
//   prior:   [C -> H] ReLU, [H -> H] ReLU, [H -> 2L] linear
//   decoder: [(L+C) -> H] ReLU, [H -> H] ReLU, [H -> H] ReLU, [H -> D] linear

template <typename T>
struct CvaeNet {
  std::vector<numkit::DenseLayer<T>> cond;
  std::vector<numkit::DenseLayer<T>> encoder;
  std::vector<numkit::DenseLayer<T>> prior;
  std::vector<numkit::DenseLayer<T>> decoder;
};

namespace detail {

template <typename T>
numkit::DenseLayer<T> init_dense(std::size_t out, std::size_t in, Rng& rng,
                                 numkit::Activation act) {
  // He-style scaling for ReLU layers, 1/sqrt(in) for linear heads.
  const double stddev = act == numkit::Activation::kRelu
                            ? std::sqrt(2.0 / static_cast<double>(in))
                            : std::sqrt(1.0 / static_cast<double>(in));
  numkit::DenseLayer<T> layer;
  layer.weights = numkit::random_normal<T>(out, in, rng, stddev);
  layer.bias = numkit::Mat<T>(out, 1);
  layer.activation = act;
  return layer;
}

}  // namespace detail

template <typename T>
CvaeNet<T> init_cvae_net(const CvaeConfig& cfg, std::size_t flat_dim,
                         Rng& rng) {
  using numkit::Activation;
  const std::size_t d = flat_dim;
  const std::size_t l = cfg.latent_dim;
  const std::size_t c = cfg.cond_dim;
  const std::size_t h = cfg.hidden;
  CvaeNet<T> net;
  net.cond.push_back(detail::init_dense<T>(c, 2 * d, rng, Activation::kRelu));
  net.encoder.push_back(detail::init_dense<T>(h, d + c, rng, Activation::kRelu));
  net.encoder.push_back(detail::init_dense<T>(h, h, rng, Activation::kRelu));
  net.encoder.push_back(detail::init_dense<T>(2 * l, h, rng, Activation::kIdentity));
  net.prior.push_back(detail::init_dense<T>(h, c, rng, Activation::kRelu));
  net.prior.push_back(detail::init_dense<T>(h, h, rng, Activation::kRelu));
  net.prior.push_back(detail::init_dense<T>(2 * l, h, rng, Activation::kIdentity));
  net.decoder.push_back(detail::init_dense<T>(h, l + c, rng, Activation::kRelu));
  net.decoder.push_back(detail::init_dense<T>(h, h, rng, Activation::kRelu));
  net.decoder.push_back(detail::init_dense<T>(h, h, rng, Activation::kRelu));
  net.decoder.push_back(detail::init_dense<T>(d, h, rng, Activation::kIdentity));
  // Zero output head: generation starts at the routed prior mean and only
  // corrections the data justifies move it away.
  auto& head = net.decoder.back().weights.vec();
  std::fill(head.begin(), head.end(), T(0));
  return net;
}

// Flat parameter list in a fixed order (weights then bias per layer, stacks
// in cond/encoder/prior/decoder order); shared by Adam, serialization, and
// gradient checks.
template <typename T>
std::vector<numkit::Mat<T>*> net_parameters(CvaeNet<T>& net) {
  std::vector<numkit::Mat<T>*> out;
  for (auto* stack : {&net.cond, &net.encoder, &net.prior, &net.decoder}) {
    for (auto& layer : *stack) {
      out.push_back(&layer.weights);
      out.push_back(&layer.bias);
    }
  }
  return out;
}

template <typename T>
std::vector<const numkit::Mat<T>*> net_parameters(const CvaeNet<T>& net) {
  std::vector<const numkit::Mat<T>*> out;
  for (const auto* stack : {&net.cond, &net.encoder, &net.prior, &net.decoder}) {
    for (const auto& layer : *stack) {
      out.push_back(&layer.weights);
      out.push_back(&layer.bias);
    }
  }
  return out;
}

std::vector<std::string> net_tensor_names();

// --------------------------------------------------------------------------
// Taped ELBO over a batch (samples as columns). Returns the loss node plus
// leaf ids aligned with net_parameters order.

template <typename T>
struct ElboGraph {
  typename numkit::Tape<T>::NodeId total;
  T recon_value;
  T kl_value;
  std::vector<typename numkit::Tape<T>::NodeId> param_leaves;
};

template <typename T>
ElboGraph<T> build_elbo_graph(numkit::Tape<T>& tape, const CvaeNet<T>& net,
                              const numkit::Mat<T>& x_norm,
                              const numkit::Mat<T>& condition,
                              const numkit::Mat<T>& noise, T lambda) {
  using numkit::Activation;
  using numkit::TapedDense;
  using Node = typename numkit::Tape<T>::NodeId;

  ElboGraph<T> g;
  auto taped_stack = [&](const std::vector<numkit::DenseLayer<T>>& stack) {
    std::vector<TapedDense<T>> out;
    for (const auto& layer : stack) {
      TapedDense<T> tl;
      tl.weights = tape.leaf(layer.weights);
      tl.bias = tape.leaf(layer.bias);
      tl.activation = layer.activation;
      g.param_leaves.push_back(tl.weights);
      g.param_leaves.push_back(tl.bias);
      out.push_back(tl);
    }
    return out;
  };
  auto cond_l = taped_stack(net.cond);
  auto enc_l = taped_stack(net.encoder);
  auto prior_l = taped_stack(net.prior);
  auto dec_l = taped_stack(net.decoder);

  const Node x = tape.leaf(x_norm);
  const Node c = tape.leaf(condition);
  const Node eps = tape.leaf(noise);
  const std::size_t latent = noise.rows();
  const auto batch = static_cast<T>(x_norm.cols());

  const Node c_proj = numkit::mlp_forward(tape, cond_l, c);

  const Node enc_out = numkit::mlp_forward(tape, enc_l, tape.concat_rows(x, c_proj));
  const Node q_mean = tape.slice_rows(enc_out, 0, latent);
  const Node q_logvar = tape.clamp(tape.slice_rows(enc_out, latent, 2 * latent),
                                   static_cast<T>(kLogvarMin),
                                   static_cast<T>(kLogvarMax));

  const Node prior_out = numkit::mlp_forward(tape, prior_l, c_proj);
  const Node p_mean = tape.slice_rows(prior_out, 0, latent);
  const Node p_logvar = tape.clamp(tape.slice_rows(prior_out, latent, 2 * latent),
                                   static_cast<T>(kLogvarMin),
                                   static_cast<T>(kLogvarMax));

  // z = q_mean + exp(q_logvar / 2) * eps
  const Node z = tape.add(q_mean, tape.mul(tape.exp(tape.scale(q_logvar, T(0.5))), eps));
  const Node xhat = numkit::mlp_forward(tape, dec_l, tape.concat_rows(z, c_proj));

  // Coordinate-mean squared error, averaged over the batch.
  const Node recon = tape.mean(tape.square(tape.sub(xhat, x)));

  // Diagonal-Gaussian KL(q || p), summed over latent dims, batch-averaged:
  //   0.5 * (exp(lq - lp) + (mq - mp)^2 * exp(-lp) - 1 + lp - lq)
  const Node ratio = tape.exp(tape.sub(q_logvar, p_logvar));
  const Node sq_term = tape.mul(tape.square(tape.sub(q_mean, p_mean)),
                                tape.exp(tape.scale(p_logvar, T(-1))));
  const Node inner = tape.add_scalar(
      tape.add(tape.add(ratio, sq_term), tape.sub(p_logvar, q_logvar)), T(-1));
  const Node kl = tape.scale(tape.sum(inner), T(0.5) / batch);

  g.total = tape.add(recon, tape.scale(kl, lambda));
  g.recon_value = tape.value(recon)(0, 0);
  g.kl_value = tape.value(kl)(0, 0);
  return g;
}

// --------------------------------------------------------------------------
// Trained model and single-vector operations.

// The network autoencodes per-coordinate z-scored deviations of each sample
// from its routed prior mean; norm_mean/norm_std are the stats of those
// deviations and generation adds the prior mean back after denormalizing.
struct CvaeModel {
  CvaeConfig config;
  Layout layout;
  std::uint64_t repo_hash = 0;
  std::vector<float> norm_mean;  // length D
  std::vector<float> norm_std;   // length D, >= kNormStdFloor
  std::vector<float> cond_mean;  // length 2D
  std::vector<float> cond_std;   // length 2D, >= kNormStdFloor
  CvaeNet<float> net;
};

std::vector<float> normalize_x(const CvaeModel& model, std::span<const float> x);
std::vector<float> denormalize_x(const CvaeModel& model, std::span<const float> x_norm);
// Z-scores a raw condition vector with the model's condition stats; the two
// halves of the raw condition live on very different scales, so the network
// only ever sees the normalized form.
std::vector<float> normalize_condition(const CvaeModel& model,
                                       std::span<const float> condition);

std::vector<float> project_condition(const CvaeModel& model, std::span<const float> condition);
GaussianDiag encode(const CvaeModel& model, std::span<const float> x_norm,
                    std::span<const float> c_proj);
GaussianDiag prior_map(const CvaeModel& model, std::span<const float> c_proj);
std::vector<float> reparameterize(const GaussianDiag& g, std::span<const float> noise);
std::vector<float> decode(const CvaeModel& model, std::span<const float> z,
                          std::span<const float> c_proj);

struct ElboTerms {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// Single-sample value-mode ELBO, matching the taped graph at batch size 1.
ElboTerms elbo_loss(std::span<const float> x_norm, std::span<const float> xhat_norm,
                    const GaussianDiag& q, const GaussianDiag& p, double lambda);

// --------------------------------------------------------------------------
// Training.

struct TrainSample {
  std::string task_id;
  std::vector<float> x;  // flattened adapter vector, length D
};

struct EpochStats {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

struct TrainResult {
  CvaeModel model;
  // One entry per epoch: a deterministic end-of-epoch pass over the whole
  // dataset with clean conditions and the posterior mean latent.
  std::vector<EpochStats> trace;
};

// One sample per stored checkpoint of every train task, plus every expert
// task when include_experts is set.
std::vector<TrainSample> training_samples(const Repository& repo,
                                          bool include_experts = true);

// Mini-batch Adam on the ELBO. Conditions are routed per task against the
// repository; a task that is itself an expert is excluded from its own
// routing. Each sample's regression target is its deviation from the first
// half of its raw condition (the routed prior mean). Deterministic given
// config.seed. When `resume_from` is given its weights and normalization
// stats seed the run; its layout must match the repository and its
// architecture dims must match `config`.
TrainResult train_cvae(std::span<const TrainSample> dataset,
                       const Repository& repo, const CvaeConfig& config,
                       const CvaeModel* resume_from = nullptr);

enum class GenerateMode { kMean, kStochastic };

// mode=kMean decodes the prior-mapper mean (n must be 1); kStochastic decodes
// n independent reparameterized draws with noise seeded from `seed`. Decoded
// deviations are denormalized and recombined with the prior mean.
std::vector<AdapterSet> generate(const CvaeModel& model,
                                 const SemanticPrior& prior, std::size_t n,
                                 GenerateMode mode, std::uint64_t seed);

// Model file: magic "SGLM", u32 version, u64 header length, JSON header
// (config, layout, layout hash, repository hash), then the adapter-blob
// tensor container with all weights and normalization stats. Loading
// re-derives the layout hash and rejects mismatches.
void save_model(const CvaeModel& model, const std::filesystem::path& path);
CvaeModel load_model(const std::filesystem::path& path);

}  // namespace sglora

#endif  // SGLORA_CVAE_HPP_
