// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-contained synthetic benchmark: a family of linear tasks on a circle
// whose true low-rank updates vary smoothly with the task angle, oracle
// adapter training, downstream evaluation (loss and Recall@K), and a report
// comparing zero-shot, merging baselines, generated adapters, and the oracle.

#ifndef SGLORA_SYNTHBENCH_HPP_
#define SGLORA_SYNTHBENCH_HPP_

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sglora/cvae.hpp"
#include "sglora/repository.hpp"

namespace sglora {

struct BenchConfig {
  std::size_t n_tasks = 16;
  std::size_t n_experts = 8;
  std::size_t embedding_dim = 32;
  std::size_t samples_per_task = 32;  // data columns per placement
  double label_noise = 0.0;           // stddev of observation noise on Y
  std::size_t oracle_epochs = 200;
  std::size_t checkpoints = 20;  // M, stored from the final epochs
  double checkpoint_jitter = 0.02;
  double oracle_lr = 1e-2;
  std::size_t k = 4;
  double tau = kDefaultTau;
  std::size_t stochastic_n = 8;  // best-of-n for the stochastic variant
  double train_fraction = 0.625;
  std::size_t layout_blocks = 2;
  std::size_t layout_dim = 16;
  std::size_t layout_rank = 2;
  float layout_alpha = 1.0f;
  CvaeConfig cvae;

  BenchConfig();
};

Layout bench_layout(const BenchConfig& config);
void validate_bench_config(const BenchConfig& config);
std::string bench_config_to_json(const BenchConfig& config);
BenchConfig bench_config_from_json(const std::string& text,
                                   const std::string& origin);

struct SyntheticTask {
  std::string task_id;
  std::string description;
  double theta = 0.0;
  std::vector<float> embedding;            // unit vector
  std::vector<numkit::Matrix> delta_true;  // per placement, rank <= r
  std::vector<numkit::Matrix> x;           // per placement, n x S
  std::vector<numkit::Matrix> y;           // per placement, m x S
};

struct SyntheticFamily {
  Layout layout;
  std::size_t embedding_dim = 0;
  std::uint64_t seed = 0;          // provenance seed the family was built from
  std::vector<numkit::Matrix> w0;  // per placement, shared across tasks
  std::vector<SyntheticTask> tasks;
  // Per-placement bound used by the generation-time smoothness assertion:
  // ||delta(theta1) - delta(theta2)||_F <= bound * |theta1 - theta2|.
  std::vector<double> lipschitz_bound;
};

// Equally spaced angles; embeddings are a fixed seeded rotation of
// (cos theta, sin theta, 0, ...), so embedding cosine equals cos of the
// angle gap. True updates are rank-r factor products whose entries are
// low-order Fourier features of theta with decaying coefficients.
SyntheticFamily make_family(const BenchConfig& config, std::uint64_t seed);

// Adam on || (W0 + alpha B A) X - Y ||^2 over the factored parameters; the
// final `checkpoints` epochs are flattened and jittered into a TaskRecord.
// Factors start from a family-shared initialization (same base model, same
// init) so different tasks' parameters are comparable coordinate-wise.
TaskRecord train_oracle(const SyntheticFamily& family, std::size_t task_index,
                        const BenchConfig& config, std::uint64_t seed);

struct EvalMetrics {
  double loss = 0.0;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  bool k_clamped = false;  // gallery smaller than a requested K
};

// Stacks (W0 + delta) X over placements and scores each row against the
// matching rows of Y by cosine; loss is the mean squared gap.
EvalMetrics eval_task(const SyntheticFamily& family, std::size_t task_index,
                      const AdapterSet& adapter);

inline constexpr std::array<const char*, 7> kBenchMethods = {
    "zero_shot",    "model_soup",   "topk_merge",        "topk_weighted",
    "sg_lora_mean", "sg_lora_stochastic", "oracle"};

struct BenchRow {
  std::string method;
  std::string task_id;
  double loss = 0.0;
  double param_l2 = 0.0;  // distance to the oracle mean vector
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
};

struct MethodAggregate {
  std::string method;
  double loss = 0.0;
  double param_l2 = 0.0;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
};

struct BenchReport {
  std::uint64_t seed = 0;
  BenchConfig config;
  std::vector<EpochStats> train_trace;
  std::vector<BenchRow> rows;        // method-major, tasks in eval order
  std::vector<MethodAggregate> aggregates;
};

// Full pipeline: family, oracles, repository, generator training, and the
// per-method evaluation over the eval split. Bit-reproducible per seed.
BenchReport run_benchmark(const BenchConfig& config, std::uint64_t seed);

// Inference-time k ablation: one pipeline, re-routed and re-evaluated per k.
std::vector<std::pair<std::size_t, BenchReport>> run_k_sweep(
    const BenchConfig& config, std::uint64_t seed,
    std::span<const std::size_t> ks);

// Coverage, aggregate consistency, and Recall monotonicity.
void validate_report(const BenchReport& report);
std::string bench_report_to_json(const BenchReport& report);
std::string bench_report_to_csv(const BenchReport& report);
// Structural validation of a serialized report.
void validate_report_json(const std::string& text, const std::string& origin);

// Mean aggregate loss per method across seeds.
std::map<std::string, double> mean_aggregate_loss(
    std::span<const BenchReport> reports);

}  // namespace sglora

#endif  // SGLORA_SYNTHBENCH_HPP_
