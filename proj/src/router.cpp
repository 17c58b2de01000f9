// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/router.hpp"

#include <algorithm>
#include <cmath>

#include "sglora/errors.hpp"
#include "sglora/semantics.hpp"

namespace sglora {
namespace {

void check_query_dim(std::span<const float> query, const Repository& repo) {
  if (repo.experts.empty()) {
    raise(ErrorCode::kValidation, "router: repository has no experts");
  }
  if (query.size() != repo.embedding_dim) {
    raise(ErrorCode::kShape,
          "router: query dimension " + std::to_string(query.size()) +
              " does not match repository embedding_dim " +
              std::to_string(repo.embedding_dim));
  }
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return s;
}

// Shared accumulation for soup and top-k merge: double sums in ascending
// expert index, one division at the end. Using the identical loop makes
// k = expert-count merges bit-equal to the soup.
std::vector<float> uniform_mean(const Repository& repo,
                                std::span<const std::size_t> ascending) {
  const std::size_t dim = repo.layout.flat_dim();
  std::vector<double> acc(dim, 0.0);
  for (std::size_t idx : ascending) {
    const auto& mu = repo.experts[idx].mean;
    for (std::size_t i = 0; i < dim; ++i) {
      acc[i] += static_cast<double>(mu[i]);
    }
  }
  std::vector<float> out(dim);
  const auto count = static_cast<double>(ascending.size());
  for (std::size_t i = 0; i < dim; ++i) {
    out[i] = static_cast<float>(acc[i] / count);
  }
  return out;
}

}  // namespace

std::vector<double> similarities(std::span<const float> query,
                                 const Repository& repo) {
  check_query_dim(query, repo);
  std::vector<double> sims;
  sims.reserve(repo.experts.size());
  for (const auto& e : repo.experts) {
    sims.push_back(dot(query, e.embedding));
  }
  return sims;
}

TopkResult select_topk(std::span<const double> sims, std::size_t k) {
  if (sims.empty()) {
    raise(ErrorCode::kValidation, "select_topk: no candidates");
  }
  if (k == 0) {
    raise(ErrorCode::kParameter, "select_topk: k must be >= 1");
  }
  TopkResult result;
  result.indices.resize(sims.size());
  for (std::size_t i = 0; i < sims.size(); ++i) result.indices[i] = i;
  // Descending similarity; equal similarities keep ascending index order.
  std::stable_sort(result.indices.begin(), result.indices.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  if (k >= sims.size()) {
    result.clamped = k > sims.size();
  } else {
    result.indices.resize(k);
  }
  return result;
}

std::vector<double> fusion_weights(std::span<const double> sims_topk,
                                   double tau) {
  if (!(tau > 0.0)) {
    raise(ErrorCode::kParameter, "fusion_weights: tau must be > 0");
  }
  if (sims_topk.empty()) {
    raise(ErrorCode::kValidation, "fusion_weights: no similarities");
  }
  const double top = *std::max_element(sims_topk.begin(), sims_topk.end());
  std::vector<double> w(sims_topk.size());
  double total = 0.0;
  for (std::size_t i = 0; i < sims_topk.size(); ++i) {
    w[i] = std::exp((sims_topk[i] - top) / tau);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<float> prior_mean(std::span<const double> weights,
                              const ExpertRefs& experts) {
  if (weights.size() != experts.size() || experts.empty()) {
    raise(ErrorCode::kShape, "prior_mean: " + std::to_string(weights.size()) +
                                 " weights for " +
                                 std::to_string(experts.size()) + " experts");
  }
  const std::size_t dim = experts.front()->mean.size();
  std::vector<double> acc(dim, 0.0);
  for (std::size_t j = 0; j < experts.size(); ++j) {
    const auto& mu = experts[j]->mean;
    if (mu.size() != dim) {
      raise(ErrorCode::kShape, "prior_mean: expert \"" + experts[j]->task_id +
                                   "\" has mismatched dimension");
    }
    for (std::size_t i = 0; i < dim; ++i) {
      acc[i] += weights[j] * static_cast<double>(mu[i]);
    }
  }
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

std::vector<float> prior_variance(std::span<const float> mean,
                                  std::span<const double> weights,
                                  const ExpertRefs& experts) {
  if (weights.size() != experts.size() || experts.empty()) {
    raise(ErrorCode::kShape,
          "prior_variance: " + std::to_string(weights.size()) +
              " weights for " + std::to_string(experts.size()) + " experts");
  }
  const std::size_t dim = mean.size();
  std::vector<double> second(dim, 0.0);
  for (std::size_t j = 0; j < experts.size(); ++j) {
    const auto& mu = experts[j]->mean;
    const auto& var = experts[j]->var;
    if (mu.size() != dim || var.size() != dim) {
      raise(ErrorCode::kShape, "prior_variance: expert \"" +
                                   experts[j]->task_id +
                                   "\" has mismatched dimension");
    }
    for (std::size_t i = 0; i < dim; ++i) {
      const double m = static_cast<double>(mu[i]);
      second[i] += weights[j] * (static_cast<double>(var[i]) + m * m);
    }
  }
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double m = static_cast<double>(mean[i]);
    out[i] = static_cast<float>(std::max(second[i] - m * m, kVarianceFloor));
  }
  return out;
}

SemanticPrior build_prior(std::span<const float> query, const Repository& repo,
                          const RouteOptions& opts) {
  check_query_dim(query, repo);

  SemanticPrior prior;
  prior.query.assign(query.begin(), query.end());
  l2_normalize_or_raise(prior.query, "build_prior query");
  prior.tau = opts.tau;
  prior.k_requested = opts.k;

  // Candidate experts, minus the query's own entry during training.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < repo.experts.size(); ++i) {
    if (!opts.exclude_task.empty() &&
        repo.experts[i].task_id == opts.exclude_task) {
      continue;
    }
    candidates.push_back(i);
  }
  if (candidates.empty()) {
    raise(ErrorCode::kValidation,
          "build_prior: no routable experts (exclusion \"" +
              opts.exclude_task + "\" left an empty candidate set)");
  }

  std::vector<double> cand_sims;
  cand_sims.reserve(candidates.size());
  for (std::size_t idx : candidates) {
    cand_sims.push_back(dot(prior.query, repo.experts[idx].embedding));
  }

  TopkResult topk = select_topk(cand_sims, opts.k);
  prior.clamped = topk.clamped;
  ExpertRefs selected;
  for (std::size_t pos : topk.indices) {
    prior.selected.push_back(candidates[pos]);
    prior.selected_ids.push_back(repo.experts[candidates[pos]].task_id);
    prior.similarities.push_back(cand_sims[pos]);
    selected.push_back(&repo.experts[candidates[pos]]);
  }

  prior.weights = fusion_weights(prior.similarities, opts.tau);
  prior.mean = prior_mean(prior.weights, selected);
  prior.var = prior_variance(prior.mean, prior.weights, selected);

  prior.condition.reserve(2 * prior.mean.size());
  prior.condition.insert(prior.condition.end(), prior.mean.begin(),
                         prior.mean.end());
  for (float v : prior.var) {
    prior.condition.push_back(static_cast<float>(
        std::log(static_cast<double>(v) + kVarianceFloor)));
  }
  return prior;
}

std::vector<float> baseline_model_soup(const Repository& repo) {
  if (repo.experts.empty()) {
    raise(ErrorCode::kValidation, "baseline_model_soup: repository has no experts");
  }
  std::vector<std::size_t> all(repo.experts.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return uniform_mean(repo, all);
}

std::vector<float> baseline_topk_merge(std::span<const float> query,
                                       const Repository& repo, std::size_t k) {
  TopkResult topk = select_topk(similarities(query, repo), k);
  std::sort(topk.indices.begin(), topk.indices.end());
  return uniform_mean(repo, topk.indices);
}

std::vector<float> baseline_topk_weighted(std::span<const float> query,
                                          const Repository& repo,
                                          std::size_t k, double tau) {
  std::vector<double> sims = similarities(query, repo);
  TopkResult topk = select_topk(sims, k);
  std::vector<double> sims_topk;
  ExpertRefs selected;
  for (std::size_t idx : topk.indices) {
    sims_topk.push_back(sims[idx]);
    selected.push_back(&repo.experts[idx]);
  }
  return prior_mean(fusion_weights(sims_topk, tau), selected);
}

}  // namespace sglora
