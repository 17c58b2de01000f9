// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// The expert repository: per-task parameter statistics (mean and variance
// over training checkpoints), a train/eval partition of the remaining tasks,
// and a manifest format that round-trips losslessly.

#ifndef SGLORA_REPOSITORY_HPP_
#define SGLORA_REPOSITORY_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sglora/adapters.hpp"

namespace sglora {

// One task's raw material: its embedding and the checkpoints collected while
// fine-tuning it (flattened adapter vectors, one per epoch).
struct TaskRecord {
  std::string task_id;
  std::string description;
  std::vector<float> embedding;                 // unit vector, dim E
  std::vector<std::vector<float>> checkpoints;  // M vectors of length D
};

// Compressed form kept in the repository: per-coordinate mean and population
// variance of the task's checkpoints.
struct ExpertEntry {
  std::string task_id;
  std::string description;
  std::vector<float> embedding;
  std::vector<float> mean;
  std::vector<float> var;
};

struct Repository {
  Layout layout;
  std::size_t embedding_dim = 0;
  std::vector<ExpertEntry> experts;
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;
  // Full records for tasks whose checkpoints are kept alongside the manifest
  // (experts and train tasks need them for generator training; eval records
  // are optional ground truth).
  std::vector<TaskRecord> records;

  const ExpertEntry* find_expert(std::string_view task_id) const;
  const TaskRecord* find_record(std::string_view task_id) const;
};

// Mean is the arithmetic average over checkpoints; variance divides by M
// (population form: downstream code treats it as a distribution parameter,
// not an estimator). M=1 gives zero variance.
ExpertEntry build_expert(const TaskRecord& record);

// Builds experts for `expert_ids` (in the given order) and splits the
// remaining tasks into train/eval with a seeded shuffle. `train_fraction`
// rounds to the nearest count. Degenerate splits append to `warnings`.
Repository build_repository(const std::vector<TaskRecord>& records,
                            const std::vector<std::string>& expert_ids,
                            const Layout& layout, double train_fraction,
                            std::uint64_t seed,
                            std::vector<std::string>* warnings = nullptr);

// Directory layout: manifest.json at the root, expert artifacts under
// experts/, task records under tasks/<id>/ (embedding.jsonl +
// checkpoints.bin). Loading validates the manifest schema, blob existence,
// and every repository invariant.
void save_repository(const Repository& repo,
                     const std::filesystem::path& dir);
Repository load_repository(const std::filesystem::path& dir);

// Union of two repositories sharing a layout and embedding dimension;
// task ids must be disjoint across every section.
Repository merge_repositories(const Repository& a, const Repository& b);

// Stable digest over the manifest-level content (layout, embedding dim,
// expert statistics, partition ids). Checkpoints do not participate.
std::uint64_t repository_hash(const Repository& repo);

}  // namespace sglora

#endif  // SGLORA_REPOSITORY_HPP_
