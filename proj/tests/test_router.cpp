// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sglora/errors.hpp"
#include "sglora/repository.hpp"
#include "sglora/router.hpp"
#include "sglora/rng.hpp"
#include "sglora/semantics.hpp"

using sglora::Error;
using sglora::ErrorCode;
using sglora::ExpertEntry;
using sglora::ExpertRefs;
using sglora::Layout;
using sglora::LayoutModule;
using sglora::Repository;
using sglora::Rng;
using sglora::RouteOptions;
using sglora::SemanticPrior;
using sglora::TopkResult;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an sglora::Error");
  return ErrorCode::kContract;
}

// A repository whose expert embeddings point along coordinate axes, with
// hand-chosen statistics. D = 2 (one 1x1 module with rank 2... no: 1x1 rank 1
// gives D = 2 per module definition r*(m+n) = 1*(1+1) = 2).
Repository axis_repo(const std::vector<std::vector<float>>& means,
                     const std::vector<std::vector<float>>& vars) {
  const std::size_t n = means.size();
  Repository repo;
  repo.layout = Layout({LayoutModule{"p", 1, 1, 1, 1.0f}});
  repo.embedding_dim = n;
  for (std::size_t i = 0; i < n; ++i) {
    ExpertEntry e;
    e.task_id = "e" + std::to_string(i);
    e.embedding.assign(n, 0.0f);
    e.embedding[i] = 1.0f;
    e.mean = means[i];
    e.var = vars[i];
    repo.experts.push_back(std::move(e));
  }
  return repo;
}

std::vector<float> unit(std::vector<float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  s = std::sqrt(s);
  for (auto& x : v) x = static_cast<float>(x / s);
  return v;
}

}  // namespace

TEST_CASE("similarities: axis-aligned and scalar oracles") {
  const Repository repo = axis_repo({{0, 0}, {0, 0}, {0, 0}},
                                    {{0, 0}, {0, 0}, {0, 0}});
  const std::vector<float> q = {1.0f, 0.0f, 0.0f};
  const auto sims = sglora::similarities(q, repo);
  REQUIRE(sims.size() == 3);
  CHECK(sims[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sims[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(sims[2] == doctest::Approx(0.0).epsilon(1e-9));

  const std::vector<float> diag = unit({1.0f, 1.0f, 0.0f});
  const auto sims2 = sglora::similarities(diag, repo);
  CHECK(sims2[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
  CHECK(sims2[1] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));

  const std::vector<float> wrong_dim = {1.0f, 0.0f};
  CHECK(code_of([&] { sglora::similarities(wrong_dim, repo); }) ==
        ErrorCode::kShape);
}

TEST_CASE("select_topk: ordering, tie-break, and clamping") {
  const std::vector<double> sims = {0.9, 0.1, 0.8, 0.7};
  const TopkResult top2 = sglora::select_topk(sims, 2);
  CHECK(top2.indices == std::vector<std::size_t>{0, 2});
  CHECK_FALSE(top2.clamped);

  // Equal similarities resolve to the lower index first.
  const std::vector<double> tied = {0.5, 0.5, 0.1};
  const TopkResult t = sglora::select_topk(tied, 2);
  CHECK(t.indices == std::vector<std::size_t>{0, 1});

  const TopkResult all = sglora::select_topk(sims, 10);
  CHECK(all.indices.size() == 4);
  CHECK(all.clamped);
  CHECK(all.indices == std::vector<std::size_t>{0, 2, 3, 1});

  CHECK(code_of([&] { sglora::select_topk(sims, 0); }) ==
        ErrorCode::kParameter);
  CHECK(code_of([&] { sglora::select_topk({}, 1); }) ==
        ErrorCode::kValidation);
}

TEST_CASE("fusion_weights: pinned softmax, normalization, limits") {
  const std::vector<double> sims = {0.9, 0.8};
  const auto w = sglora::fusion_weights(sims, 0.1);
  REQUIRE(w.size() == 2);
  // softmax([9, 8]) = [e / (e + 1), 1 / (e + 1)]
  CHECK(w[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(w[1] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(w[0] + w[1] == doctest::Approx(1.0).epsilon(1e-9));

  // Weights are a proper distribution for random inputs.
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(5);
    for (auto& v : s) v = rng.normal();
    const auto ws = sglora::fusion_weights(s, 0.05);
    double sum = 0.0;
    for (double v : ws) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }

  // Very large temperature flattens toward uniform.
  const auto flat = sglora::fusion_weights(std::vector<double>{0.9, 0.1, 0.5},
                                           1e6);
  for (double v : flat) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-3));

  // Very small temperature concentrates on the argmax.
  const auto sharp = sglora::fusion_weights(std::vector<double>{0.9, 0.1},
                                            1e-4);
  CHECK(sharp[0] == doctest::Approx(1.0).epsilon(1e-9));

  CHECK(code_of([&] {
          sglora::fusion_weights(std::vector<double>{0.5}, 0.0);
        }) == ErrorCode::kParameter);
  CHECK(code_of([&] {
          sglora::fusion_weights(std::vector<double>{0.5}, -1.0);
        }) == ErrorCode::kParameter);
}

TEST_CASE("prior_mean: convexity and a scalar oracle") {
  ExpertEntry a, b;
  a.mean = {1.0f, 2.0f};
  b.mean = {3.0f, 6.0f};
  a.var = b.var = {0.0f, 0.0f};
  const ExpertRefs refs = {&a, &b};

  const auto only_a = sglora::prior_mean(std::vector<double>{1.0, 0.0}, refs);
  CHECK(only_a == std::vector<float>{1.0f, 2.0f});

  const auto mid = sglora::prior_mean(std::vector<double>{0.5, 0.5}, refs);
  CHECK(mid[0] == doctest::Approx(2.0f));
  CHECK(mid[1] == doctest::Approx(4.0f));

  const auto w = sglora::prior_mean(std::vector<double>{0.25, 0.75}, refs);
  CHECK(w[0] == doctest::Approx(0.25 * 1.0 + 0.75 * 3.0).epsilon(1e-6));
  CHECK(w[1] == doctest::Approx(0.25 * 2.0 + 0.75 * 6.0).epsilon(1e-6));
}

TEST_CASE("prior_variance: floor, moment matching, Monte Carlo agreement") {
  ExpertEntry a, b;
  a.mean = {0.0f};
  b.mean = {2.0f};
  a.var = {0.0f};
  b.var = {0.0f};
  const ExpertRefs refs = {&a, &b};

  // A single zero-variance expert hits the floor.
  const auto solo_mean =
      sglora::prior_mean(std::vector<double>{1.0}, ExpertRefs{&a});
  const auto solo = sglora::prior_variance(
      solo_mean, std::vector<double>{1.0}, ExpertRefs{&a});
  CHECK(solo[0] == doctest::Approx(sglora::kVarianceFloor));

  // Two identical experts collapse to the common statistics.
  ExpertEntry c = a;
  c.var = {0.5f};
  ExpertEntry c2 = c;
  const ExpertRefs twins = {&c, &c2};
  const std::vector<double> half = {0.5, 0.5};
  const auto twin_mean = sglora::prior_mean(half, twins);
  const auto twin_var = sglora::prior_variance(twin_mean, half, twins);
  CHECK(twin_mean[0] == doctest::Approx(0.0f));
  CHECK(twin_var[0] == doctest::Approx(0.5f).epsilon(1e-6));

  // Point masses at 0 and 2 with equal weight: mean 1, variance 1.
  const auto m = sglora::prior_mean(half, refs);
  const auto v = sglora::prior_variance(m, half, refs);
  CHECK(m[0] == doctest::Approx(1.0f));
  CHECK(v[0] == doctest::Approx(1.0f).epsilon(1e-6));

  // N(0,1) and N(2,1) mixed evenly: variance 1 + 1 = 2. Cross-check the
  // moment-matched value against a large Monte Carlo draw of the mixture.
  a.var = {1.0f};
  b.var = {1.0f};
  const auto mm = sglora::prior_mean(half, refs);
  const auto mv = sglora::prior_variance(mm, half, refs);
  CHECK(mm[0] == doctest::Approx(1.0f));
  CHECK(mv[0] == doctest::Approx(2.0f).epsilon(1e-6));

  Rng rng(4242);
  const int n = 1000000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double component = (rng.uniform() < 0.5) ? 0.0 : 2.0;
    const double x = component + rng.normal();
    sum += x;
    sumsq += x * x;
  }
  const double mc_mean = sum / n;
  const double mc_var = sumsq / n - mc_mean * mc_mean;
  CHECK(mc_mean == doctest::Approx(mm[0]).epsilon(0.02));
  CHECK(mc_var == doctest::Approx(mv[0]).epsilon(0.02));

  CHECK(code_of([&] {
          sglora::prior_variance(m, std::vector<double>{0.5}, refs);
        }) == ErrorCode::kShape);
}

TEST_CASE("build_prior: structure, ordering, exclusion, invariances") {
  // Four experts on the coordinate axes of a 4-dim embedding space.
  const Repository repo = axis_repo(
      {{1.0f, 0.0f}, {2.0f, 1.0f}, {3.0f, -1.0f}, {4.0f, 2.0f}},
      {{0.1f, 0.1f}, {0.2f, 0.2f}, {0.3f, 0.3f}, {0.4f, 0.4f}});
  const std::size_t d = repo.layout.flat_dim();
  REQUIRE(d == 2);

  const std::vector<float> q = unit({0.9f, 0.1f, 0.5f, 0.3f});
  RouteOptions opts;
  opts.k = 3;
  opts.tau = 0.05;
  const SemanticPrior prior = sglora::build_prior(q, repo, opts);

  CHECK(prior.selected.size() == 3);
  CHECK(prior.selected_ids.size() == 3);
  CHECK(prior.mean.size() == d);
  CHECK(prior.var.size() == d);
  CHECK(prior.condition.size() == 2 * d);
  CHECK_FALSE(prior.clamped);

  // Similarities are in descending order and weights sum to one.
  for (std::size_t i = 1; i < prior.similarities.size(); ++i) {
    CHECK(prior.similarities[i - 1] >= prior.similarities[i]);
  }
  CHECK(std::accumulate(prior.weights.begin(), prior.weights.end(), 0.0) ==
        doctest::Approx(1.0).epsilon(1e-9));

  // The condition vector is [mean, log(var + floor)].
  for (std::size_t i = 0; i < d; ++i) {
    CHECK(prior.condition[i] == prior.mean[i]);
    CHECK(prior.condition[d + i] ==
          doctest::Approx(std::log(static_cast<double>(prior.var[i]) +
                                   sglora::kVarianceFloor))
              .epsilon(1e-5));
  }

  // The prior mean lies inside the selected means' bounding box.
  for (std::size_t i = 0; i < d; ++i) {
    float lo = 1e30f, hi = -1e30f;
    for (std::size_t s : prior.selected) {
      lo = std::min(lo, repo.experts[s].mean[i]);
      hi = std::max(hi, repo.experts[s].mean[i]);
    }
    CHECK(prior.mean[i] >= lo - 1e-6f);
    CHECK(prior.mean[i] <= hi + 1e-6f);
  }

  // Excluding the top expert removes it from the selection.
  const std::size_t top = prior.selected[0];
  RouteOptions excl = opts;
  excl.exclude_task = repo.experts[top].task_id;
  const SemanticPrior without = sglora::build_prior(q, repo, excl);
  CHECK(std::find(without.selected.begin(), without.selected.end(), top) ==
        without.selected.end());
  CHECK(without.selected.size() == 3);

  // k past the candidate count clamps.
  RouteOptions big = opts;
  big.k = 10;
  const SemanticPrior clamped = sglora::build_prior(q, repo, big);
  CHECK(clamped.clamped);
  CHECK(clamped.selected.size() == 4);

  // Selection is invariant to positive scaling of the query (ranking only
  // depends on direction). The router normalizes, so stats match too.
  std::vector<float> scaled = q;
  for (auto& x : scaled) x *= 7.5f;
  const SemanticPrior sp = sglora::build_prior(scaled, repo, opts);
  CHECK(sp.selected == prior.selected);
  for (std::size_t i = 0; i < d; ++i) {
    CHECK(sp.mean[i] == doctest::Approx(prior.mean[i]).epsilon(1e-5));
  }

  Repository empty;
  empty.layout = repo.layout;
  empty.embedding_dim = repo.embedding_dim;
  CHECK(code_of([&] { sglora::build_prior(q, empty, opts); }) ==
        ErrorCode::kValidation);
}

TEST_CASE("baselines: soup, top-k merge, weighted merge") {
  const Repository repo = axis_repo(
      {{1.0f, 0.0f}, {3.0f, 2.0f}, {5.0f, 4.0f}},
      {{0.1f, 0.1f}, {0.1f, 0.1f}, {0.1f, 0.1f}});

  // Soup is the uniform average of all expert means.
  const auto soup = sglora::baseline_model_soup(repo);
  CHECK(soup[0] == doctest::Approx(3.0f));
  CHECK(soup[1] == doctest::Approx(2.0f));

  // k = 1 returns the nearest expert's mean exactly.
  const std::vector<float> q = unit({0.1f, 1.0f, 0.2f});
  const auto nearest = sglora::baseline_topk_merge(q, repo, 1);
  CHECK(nearest == repo.experts[1].mean);

  // k = N merge equals the soup.
  const auto all = sglora::baseline_topk_merge(q, repo, 3);
  CHECK(all[0] == doctest::Approx(soup[0]).epsilon(1e-6));
  CHECK(all[1] == doctest::Approx(soup[1]).epsilon(1e-6));

  // Weighted merge at huge tau approaches the unweighted merge.
  const auto weighted_flat = sglora::baseline_topk_weighted(q, repo, 2, 1e6);
  const auto merge2 = sglora::baseline_topk_merge(q, repo, 2);
  for (std::size_t i = 0; i < merge2.size(); ++i) {
    CHECK(weighted_flat[i] == doctest::Approx(merge2[i]).epsilon(1e-3));
  }

  // Weighted merge agrees with composing the routing primitives.
  const auto sims = sglora::similarities(q, repo);
  const auto top = sglora::select_topk(sims, 2);
  std::vector<double> sel;
  ExpertRefs refs;
  for (std::size_t idx : top.indices) {
    sel.push_back(sims[idx]);
    refs.push_back(&repo.experts[idx]);
  }
  const auto w = sglora::fusion_weights(sel, 0.05);
  const auto composed = sglora::prior_mean(w, refs);
  const auto weighted = sglora::baseline_topk_weighted(q, repo, 2, 0.05);
  CHECK(weighted == composed);
}
