// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Routing over the expert repository: cosine retrieval, temperature-softmax
// fusion weights, the moment-matched parameter prior that conditions the
// generator, and the merging baselines used for comparison.

#ifndef SGLORA_ROUTER_HPP_
#define SGLORA_ROUTER_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sglora/repository.hpp"

namespace sglora {

// Floor applied to the prior variance; keeps the log-variance half of the
// condition vector finite even for collapsed experts.
inline constexpr double kVarianceFloor = 1e-8;
inline constexpr double kDefaultTau = 0.05;
inline constexpr std::size_t kDefaultTopK = 4;

struct SemanticPrior {
  std::vector<float> query;           // unit query embedding
  std::vector<std::size_t> selected;  // repo.experts indices, descending sim
  std::vector<std::string> selected_ids;
  std::vector<double> similarities;   // aligned with `selected`
  std::vector<double> weights;        // fusion weights, sum to 1
  double tau = kDefaultTau;
  std::size_t k_requested = 0;
  bool clamped = false;  // k exceeded the candidate count
  std::vector<float> mean;       // length D
  std::vector<float> var;        // length D, >= kVarianceFloor
  std::vector<float> condition;  // concat(mean, log(var + floor)), length 2D
};

// Cosine similarity of the query against every expert embedding. Inputs are
// unit vectors, so this is a plain dot product.
std::vector<double> similarities(std::span<const float> query,
                                 const Repository& repo);

struct TopkResult {
  std::vector<std::size_t> indices;  // descending similarity
  bool clamped = false;
};

// k highest similarities, ties broken by ascending index; k larger than the
// candidate count returns everything with `clamped` set.
TopkResult select_topk(std::span<const double> sims, std::size_t k);

// Softmax over sims / tau with max-subtraction.
std::vector<double> fusion_weights(std::span<const double> sims_topk,
                                   double tau);

using ExpertRefs = std::vector<const ExpertEntry*>;

std::vector<float> prior_mean(std::span<const double> weights,
                              const ExpertRefs& experts);

// Second-moment matching of the weighted expert mixture:
// var = sum_i w_i (var_i + mean_i^2) - mean^2, floored at kVarianceFloor.
std::vector<float> prior_variance(std::span<const float> mean,
                                  std::span<const double> weights,
                                  const ExpertRefs& experts);

struct RouteOptions {
  std::size_t k = kDefaultTopK;
  double tau = kDefaultTau;
  // When the query task is itself an expert (generator training), its own
  // entry is excluded from routing.
  std::string exclude_task;
};

SemanticPrior build_prior(std::span<const float> query, const Repository& repo,
                          const RouteOptions& opts);

// Uniform average of every expert mean.
std::vector<float> baseline_model_soup(const Repository& repo);
// Uniform average of the top-k expert means.
std::vector<float> baseline_topk_merge(std::span<const float> query,
                                       const Repository& repo, std::size_t k);
// Fusion-weighted average of the top-k expert means; delegates to
// fusion_weights + prior_mean.
std::vector<float> baseline_topk_weighted(std::span<const float> query,
                                          const Repository& repo,
                                          std::size_t k, double tau);

}  // namespace sglora

#endif  // SGLORA_ROUTER_HPP_
