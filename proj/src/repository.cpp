// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/repository.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "sglora/errors.hpp"
#include "sglora/rng.hpp"
#include "sglora/semantics.hpp"

namespace sglora {
namespace {

constexpr std::uint32_t kManifestVersion = 1;

std::uint64_t hash_bytes(const void* data, std::size_t size) {
  return fnv1a64(std::string_view(static_cast<const char*>(data), size));
}

std::uint64_t mix(std::uint64_t h, std::uint64_t piece) {
  return splitmix64(h ^ piece);
}

nlohmann::ordered_json embedding_line(const std::string& task_id,
                                      const std::string& description,
                                      std::span<const float> embedding) {
  nlohmann::ordered_json j;
  j["task_id"] = task_id;
  if (!description.empty()) j["description"] = description;
  j["embedding"] = embedding;
  return j;
}

void write_text_file(const std::filesystem::path& path,
                     const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) raise(ErrorCode::kIo, "short write to " + path.string());
}

// Loads a single-entry embedding file and checks the id it claims.
TaskEmbedding load_single_embedding(const std::filesystem::path& path,
                                    const std::string& expected_id) {
  auto lines = load_embeddings(path);
  if (lines.size() != 1) {
    raise(ErrorCode::kValidation,
          path.string() + ": expected exactly one embedding line, found " +
              std::to_string(lines.size()));
  }
  if (lines.front().task_id != expected_id) {
    raise(ErrorCode::kValidation, path.string() + ": task_id \"" +
                                      lines.front().task_id +
                                      "\" does not match manifest entry \"" +
                                      expected_id + "\"");
  }
  return std::move(lines.front());
}

const NamedTensor& single_vector_tensor(const std::vector<NamedTensor>& ts,
                                        const std::string& name,
                                        std::size_t dim,
                                        const std::string& origin) {
  if (ts.size() != 1 || ts.front().name != name) {
    raise(ErrorCode::kValidation,
          origin + ": expected a single tensor named \"" + name + "\"");
  }
  const NamedTensor& t = ts.front();
  if (t.dims.size() != 1 || t.dims[0] != dim) {
    raise(ErrorCode::kShape, origin + ": tensor \"" + name +
                                 "\" must have dims [" + std::to_string(dim) +
                                 "]");
  }
  return t;
}

void check_unique_ids(const Repository& repo) {
  std::unordered_set<std::string> seen;
  auto insert = [&](const std::string& id, const char* section) {
    if (!seen.insert(id).second) {
      raise(ErrorCode::kDuplicate, std::string("repository: task id \"") + id +
                                       "\" appears more than once (" +
                                       section + ")");
    }
  };
  for (const auto& e : repo.experts) insert(e.task_id, "experts");
  for (const auto& id : repo.train_ids) insert(id, "train");
  for (const auto& id : repo.eval_ids) insert(id, "eval");
}

}  // namespace

const ExpertEntry* Repository::find_expert(std::string_view task_id) const {
  for (const auto& e : experts) {
    if (e.task_id == task_id) return &e;
  }
  return nullptr;
}

const TaskRecord* Repository::find_record(std::string_view task_id) const {
  for (const auto& r : records) {
    if (r.task_id == task_id) return &r;
  }
  return nullptr;
}

ExpertEntry build_expert(const TaskRecord& record) {
  if (record.checkpoints.empty()) {
    raise(ErrorCode::kValidation,
          "build_expert(" + record.task_id + "): no checkpoints");
  }
  const std::size_t dim = record.checkpoints.front().size();
  for (std::size_t j = 0; j < record.checkpoints.size(); ++j) {
    if (record.checkpoints[j].size() != dim) {
      raise(ErrorCode::kLayout, "build_expert(" + record.task_id +
                                    "): checkpoint " + std::to_string(j) +
                                    " has length " +
                                    std::to_string(record.checkpoints[j].size()) +
                                    ", expected " + std::to_string(dim));
    }
  }

  const double m = static_cast<double>(record.checkpoints.size());
  std::vector<double> mean(dim, 0.0);
  for (const auto& ckpt : record.checkpoints) {
    for (std::size_t i = 0; i < dim; ++i) {
      mean[i] += static_cast<double>(ckpt[i]);
    }
  }
  for (double& v : mean) v /= m;

  std::vector<double> var(dim, 0.0);
  for (const auto& ckpt : record.checkpoints) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = static_cast<double>(ckpt[i]) - mean[i];
      var[i] += d * d;
    }
  }

  ExpertEntry entry;
  entry.task_id = record.task_id;
  entry.description = record.description;
  entry.embedding = record.embedding;
  entry.mean.resize(dim);
  entry.var.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    entry.mean[i] = static_cast<float>(mean[i]);
    entry.var[i] = static_cast<float>(var[i] / m);
    if (!std::isfinite(entry.mean[i]) || !std::isfinite(entry.var[i])) {
      raise(ErrorCode::kNonFinite, "build_expert(" + record.task_id +
                                       "): non-finite statistic at coordinate " +
                                       std::to_string(i));
    }
  }
  return entry;
}

Repository build_repository(const std::vector<TaskRecord>& records,
                            const std::vector<std::string>& expert_ids,
                            const Layout& layout, double train_fraction,
                            std::uint64_t seed,
                            std::vector<std::string>* warnings) {
  if (records.empty()) {
    raise(ErrorCode::kValidation, "build_repository: no task records");
  }
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    raise(ErrorCode::kParameter,
          "build_repository: train_fraction must lie in [0, 1]");
  }

  std::unordered_map<std::string, const TaskRecord*> by_id;
  const std::size_t dim_e = records.front().embedding.size();
  std::string bad_ids;
  for (const auto& r : records) {
    if (!by_id.emplace(r.task_id, &r).second) {
      raise(ErrorCode::kDuplicate,
            "build_repository: duplicate task id \"" + r.task_id + "\"");
    }
    bool ok = r.embedding.size() == dim_e && !r.checkpoints.empty();
    for (const auto& ckpt : r.checkpoints) {
      ok = ok && ckpt.size() == layout.flat_dim();
    }
    if (!ok) {
      if (!bad_ids.empty()) bad_ids += ", ";
      bad_ids += r.task_id;
    }
  }
  if (!bad_ids.empty()) {
    raise(ErrorCode::kValidation,
          "build_repository: records with mismatched embedding or checkpoint "
          "shapes: " +
              bad_ids);
  }

  Repository repo;
  repo.layout = layout;
  repo.embedding_dim = dim_e;

  std::unordered_set<std::string> expert_set;
  for (const auto& id : expert_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      raise(ErrorCode::kValidation,
            "build_repository: expert id \"" + id + "\" has no task record");
    }
    if (!expert_set.insert(id).second) {
      raise(ErrorCode::kDuplicate,
            "build_repository: duplicate expert id \"" + id + "\"");
    }
    repo.experts.push_back(build_expert(*it->second));
  }

  std::vector<std::string> remaining;
  for (const auto& r : records) {
    if (!expert_set.count(r.task_id)) remaining.push_back(r.task_id);
  }
  Rng rng = Rng::substream(seed, "repository.split");
  rng.shuffle(remaining);
  const auto n_train = static_cast<std::size_t>(std::llround(
      static_cast<double>(remaining.size()) * train_fraction));
  repo.train_ids.assign(remaining.begin(), remaining.begin() + n_train);
  repo.eval_ids.assign(remaining.begin() + n_train, remaining.end());

  if (remaining.empty() && warnings != nullptr) {
    warnings->push_back(
        "build_repository: every task is an expert; train and eval "
        "partitions are empty");
  }

  repo.records = records;
  return repo;
}

void save_repository(const Repository& repo,
                     const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "experts");

  nlohmann::ordered_json manifest;
  manifest["version"] = kManifestVersion;
  manifest["layout"] = nlohmann::ordered_json::parse(layout_to_json(repo.layout));
  manifest["embedding_dim"] = repo.embedding_dim;

  nlohmann::ordered_json experts = nlohmann::ordered_json::array();
  for (const auto& e : repo.experts) {
    const std::string stem = "experts/" + e.task_id;
    nlohmann::ordered_json je;
    je["task_id"] = e.task_id;
    je["embedding_file"] = stem + ".embedding.jsonl";
    je["mean_blob"] = stem + ".mean.bin";
    je["var_blob"] = stem + ".var.bin";
    experts.push_back(std::move(je));

    write_text_file(dir / (stem + ".embedding.jsonl"),
                    embedding_line(e.task_id, e.description, e.embedding)
                            .dump() +
                        "\n");
    const std::uint64_t d = e.mean.size();
    NamedTensor mean{"mean", {d}, e.mean};
    save_tensors(std::span<const NamedTensor>(&mean, 1),
                 dir / (stem + ".mean.bin"));
    NamedTensor var{"var", {d}, e.var};
    save_tensors(std::span<const NamedTensor>(&var, 1),
                 dir / (stem + ".var.bin"));
  }
  manifest["experts"] = std::move(experts);
  manifest["train"] = repo.train_ids;
  manifest["eval"] = repo.eval_ids;

  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  for (const auto& r : repo.records) {
    const fs::path task_dir = dir / "tasks" / r.task_id;
    fs::create_directories(task_dir);
    write_text_file(task_dir / "embedding.jsonl",
                    embedding_line(r.task_id, r.description, r.embedding)
                            .dump() +
                        "\n");
    const std::uint64_t m = r.checkpoints.size();
    const std::uint64_t d = r.checkpoints.empty() ? 0 : r.checkpoints.front().size();
    NamedTensor ckpts;
    ckpts.name = "checkpoints";
    ckpts.dims = {m, d};
    ckpts.values.reserve(m * d);
    for (const auto& c : r.checkpoints) {
      ckpts.values.insert(ckpts.values.end(), c.begin(), c.end());
    }
    save_tensors(std::span<const NamedTensor>(&ckpts, 1),
                 task_dir / "checkpoints.bin");
  }
}

Repository load_repository(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) {
    raise(ErrorCode::kIo, "cannot open manifest " + manifest_path.string());
  }
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    raise(ErrorCode::kParse, manifest_path.string() + ": invalid JSON");
  }

  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!manifest.contains(key)) {
      raise(ErrorCode::kValidation, manifest_path.string() +
                                        ": missing field \"" + key + "\"");
    }
    return manifest[key];
  };

  const auto& jversion = require("version");
  if (!jversion.is_number_unsigned() ||
      jversion.get<std::uint32_t>() != kManifestVersion) {
    raise(ErrorCode::kVersion,
          manifest_path.string() + ": unsupported manifest version " +
              jversion.dump() + " (reader supports " +
              std::to_string(kManifestVersion) + ")");
  }

  Repository repo;
  repo.layout = layout_from_json(require("layout").dump(), manifest_path.string());

  const auto& jdim = require("embedding_dim");
  if (!jdim.is_number_unsigned() || jdim.get<std::size_t>() == 0) {
    raise(ErrorCode::kValidation,
          manifest_path.string() + ": embedding_dim must be a positive integer");
  }
  repo.embedding_dim = jdim.get<std::size_t>();

  const auto& jexperts = require("experts");
  if (!jexperts.is_array()) {
    raise(ErrorCode::kValidation,
          manifest_path.string() + ": experts must be an array");
  }
  const std::size_t flat_dim = repo.layout.flat_dim();
  for (std::size_t i = 0; i < jexperts.size(); ++i) {
    const auto& je = jexperts[i];
    const std::string where =
        manifest_path.string() + ": experts[" + std::to_string(i) + "]";
    for (const char* key : {"task_id", "embedding_file", "mean_blob", "var_blob"}) {
      if (!je.contains(key) || !je[key].is_string()) {
        raise(ErrorCode::kValidation,
              where + ": missing string field \"" + key + "\"");
      }
    }
    ExpertEntry e;
    e.task_id = je["task_id"].get<std::string>();
    for (const char* key : {"embedding_file", "mean_blob", "var_blob"}) {
      const fs::path p = dir / je[key].get<std::string>();
      if (!fs::exists(p)) {
        raise(ErrorCode::kIo, where + ": referenced blob does not exist: " +
                                  je[key].get<std::string>());
      }
    }

    TaskEmbedding emb = load_single_embedding(
        dir / je["embedding_file"].get<std::string>(), e.task_id);
    if (emb.vec.size() != repo.embedding_dim) {
      raise(ErrorCode::kShape, where + ": embedding dimension " +
                                   std::to_string(emb.vec.size()) +
                                   " does not match manifest embedding_dim " +
                                   std::to_string(repo.embedding_dim));
    }
    e.description = std::move(emb.description);
    e.embedding = std::move(emb.vec);

    const fs::path mean_path = dir / je["mean_blob"].get<std::string>();
    e.mean = single_vector_tensor(load_tensors(mean_path), "mean", flat_dim,
                                  mean_path.string())
                 .values;
    const fs::path var_path = dir / je["var_blob"].get<std::string>();
    e.var = single_vector_tensor(load_tensors(var_path), "var", flat_dim,
                                 var_path.string())
                .values;
    for (float v : e.var) {
      if (v < 0.0f) {
        raise(ErrorCode::kValidation,
              var_path.string() + ": negative variance entry");
      }
    }
    repo.experts.push_back(std::move(e));
  }

  auto read_ids = [&](const char* key) {
    const auto& arr = require(key);
    if (!arr.is_array()) {
      raise(ErrorCode::kValidation, manifest_path.string() + ": " + key +
                                        " must be an array of task ids");
    }
    std::vector<std::string> ids;
    for (const auto& v : arr) {
      if (!v.is_string()) {
        raise(ErrorCode::kValidation, manifest_path.string() + ": " + key +
                                          " entries must be strings");
      }
      ids.push_back(v.get<std::string>());
    }
    return ids;
  };
  repo.train_ids = read_ids("train");
  repo.eval_ids = read_ids("eval");
  check_unique_ids(repo);

  // Task records are optional companions; load the ones present on disk.
  auto try_load_record = [&](const std::string& id) {
    const fs::path task_dir = dir / "tasks" / id;
    if (!fs::exists(task_dir / "checkpoints.bin")) return;
    TaskRecord r;
    TaskEmbedding emb =
        load_single_embedding(task_dir / "embedding.jsonl", id);
    if (emb.vec.size() != repo.embedding_dim) {
      raise(ErrorCode::kShape,
            task_dir.string() + ": embedding dimension mismatch");
    }
    r.task_id = id;
    r.description = std::move(emb.description);
    r.embedding = std::move(emb.vec);
    auto tensors = load_tensors(task_dir / "checkpoints.bin");
    if (tensors.size() != 1 || tensors.front().name != "checkpoints" ||
        tensors.front().dims.size() != 2) {
      raise(ErrorCode::kValidation,
            task_dir.string() +
                ": checkpoints.bin must hold one rank-2 tensor \"checkpoints\"");
    }
    const auto& t = tensors.front();
    if (t.dims[1] != flat_dim || t.dims[0] == 0) {
      raise(ErrorCode::kShape,
            task_dir.string() + ": checkpoints must have dims [M, " +
                std::to_string(flat_dim) + "] with M >= 1");
    }
    for (std::uint64_t j = 0; j < t.dims[0]; ++j) {
      r.checkpoints.emplace_back(t.values.begin() + j * flat_dim,
                                 t.values.begin() + (j + 1) * flat_dim);
    }
    repo.records.push_back(std::move(r));
  };
  for (const auto& e : repo.experts) try_load_record(e.task_id);
  for (const auto& id : repo.train_ids) try_load_record(id);
  for (const auto& id : repo.eval_ids) try_load_record(id);

  return repo;
}

Repository merge_repositories(const Repository& a, const Repository& b) {
  if (!(a.layout == b.layout)) {
    raise(ErrorCode::kLayout,
          "merge_repositories: repositories use different layouts");
  }
  if (a.embedding_dim != b.embedding_dim) {
    raise(ErrorCode::kShape,
          "merge_repositories: embedding dims differ (" +
              std::to_string(a.embedding_dim) + " vs " +
              std::to_string(b.embedding_dim) + ")");
  }
  Repository out = a;
  out.experts.insert(out.experts.end(), b.experts.begin(), b.experts.end());
  out.train_ids.insert(out.train_ids.end(), b.train_ids.begin(),
                       b.train_ids.end());
  out.eval_ids.insert(out.eval_ids.end(), b.eval_ids.begin(),
                      b.eval_ids.end());
  for (const auto& r : b.records) {
    if (out.find_record(r.task_id) != nullptr) {
      raise(ErrorCode::kDuplicate,
            "merge_repositories: task record \"" + r.task_id +
                "\" present in both repositories");
    }
    out.records.push_back(r);
  }
  check_unique_ids(out);
  return out;
}

std::uint64_t repository_hash(const Repository& repo) {
  std::uint64_t h = fnv1a64("sglora.repository.v1");
  h = mix(h, repo.layout.hash());
  h = mix(h, repo.embedding_dim);
  h = mix(h, repo.experts.size());
  for (const auto& e : repo.experts) {
    h = mix(h, fnv1a64(e.task_id));
    h = mix(h, hash_bytes(e.embedding.data(), e.embedding.size() * sizeof(float)));
    h = mix(h, hash_bytes(e.mean.data(), e.mean.size() * sizeof(float)));
    h = mix(h, hash_bytes(e.var.data(), e.var.size() * sizeof(float)));
  }
  for (const auto& id : repo.train_ids) h = mix(h, fnv1a64(id));
  for (const auto& id : repo.eval_ids) h = mix(h, fnv1a64(id));
  return h;
}

}  // namespace sglora
