// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task embeddings. Real-encoder outputs are ingested from JSON Lines files;
// tests and offline runs use a deterministic stub embedder. Downstream code
// sees unit vectors only, so the source modality never matters past this
// module.

#ifndef SGLORA_SEMANTICS_HPP_
#define SGLORA_SEMANTICS_HPP_

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sglora {

struct TaskEmbedding {
  enum class Source { kIngested, kStub };

  std::string task_id;
  std::string description;
  std::vector<float> vec;  // unit L2 norm
  Source source = Source::kIngested;
};

// JSON Lines, one {"task_id", "description"?, "embedding"} object per line.
// Vectors are L2-normalized on load; all lines must share one dimension.
std::vector<TaskEmbedding> load_embeddings(const std::filesystem::path& path);

// Deterministic substitute for a frozen text encoder: a fixed PRNG seeded
// from a stable 64-bit hash of the text draws `dim` standard normals, which
// are then L2-normalized. Identical text gives identical vectors.
TaskEmbedding stub_embed(std::string_view text, std::size_t dim);

// Substitutes "<class name>" (and, in the list overload, "<class list>",
// joined by ", ").
std::string apply_template(std::string_view class_name, std::string_view templ);
std::string apply_template(std::string_view class_name,
                           std::span<const std::string> class_list,
                           std::string_view templ);

// Coordinate-wise mean, then renormalized; the task-agnostic description of
// a caption pool.
TaskEmbedding mean_embedding(std::span<const TaskEmbedding> embeddings);

double l2_norm(std::span<const float> v);
void l2_normalize_or_raise(std::vector<float>& v, const std::string& what);

}  // namespace sglora

#endif  // SGLORA_SEMANTICS_HPP_
