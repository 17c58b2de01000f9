// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/semantics.hpp"

#include <cmath>
#include <fstream>
#include <unordered_set>

#include "json.hpp"
#include "sglora/errors.hpp"
#include "sglora/rng.hpp"

namespace sglora {

double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

void l2_normalize_or_raise(std::vector<float>& v, const std::string& what) {
  const double norm = l2_norm(v);
  if (!std::isfinite(norm)) {
    raise(ErrorCode::kNonFinite, what + ": embedding has non-finite entries");
  }
  if (norm < 1e-12) {
    raise(ErrorCode::kValidation, what + ": embedding has (near-)zero norm");
  }
  // Already-unit vectors are left untouched so that serialized embeddings
  // reload bit-exactly.
  if (std::abs(norm - 1.0) <= 1e-6) return;
  for (float& x : v) x = static_cast<float>(static_cast<double>(x) / norm);
}

std::vector<TaskEmbedding> load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    raise(ErrorCode::kIo, "cannot open embedding file " + path.string());
  }

  std::vector<TaskEmbedding> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Tolerate blank lines and trailing newline.
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      raise(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) +
                                   ": not a JSON object");
    }
    if (!j.contains("task_id") || !j["task_id"].is_string()) {
      raise(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) +
                                   ": missing string field \"task_id\"");
    }
    if (!j.contains("embedding") || !j["embedding"].is_array()) {
      raise(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) +
                                   ": missing array field \"embedding\"");
    }

    TaskEmbedding e;
    e.task_id = j["task_id"].get<std::string>();
    if (j.contains("description")) {
      if (!j["description"].is_string()) {
        raise(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) +
                                     ": \"description\" must be a string");
      }
      e.description = j["description"].get<std::string>();
    }
    for (const auto& x : j["embedding"]) {
      if (!x.is_number()) {
        raise(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) +
                                     ": embedding entries must be numbers");
      }
      e.vec.push_back(x.get<float>());
    }
    if (e.vec.empty()) {
      raise(ErrorCode::kValidation, path.string() + ":" +
                                        std::to_string(lineno) +
                                        ": empty embedding");
    }
    if (!out.empty() && e.vec.size() != out.front().vec.size()) {
      raise(ErrorCode::kShape,
            path.string() + ":" + std::to_string(lineno) +
                ": embedding dimension " + std::to_string(e.vec.size()) +
                " does not match first line's " +
                std::to_string(out.front().vec.size()));
    }
    if (!seen.insert(e.task_id).second) {
      raise(ErrorCode::kDuplicate, path.string() + ":" +
                                       std::to_string(lineno) +
                                       ": duplicate task_id \"" + e.task_id +
                                       "\"");
    }
    l2_normalize_or_raise(e.vec,
                          path.string() + ":" + std::to_string(lineno));
    e.source = TaskEmbedding::Source::kIngested;
    out.push_back(std::move(e));
  }
  return out;
}

TaskEmbedding stub_embed(std::string_view text, std::size_t dim) {
  if (dim == 0) raise(ErrorCode::kParameter, "stub_embed: dim must be > 0");
  if (text.empty()) {
    raise(ErrorCode::kParameter, "stub_embed: text must be non-empty");
  }
  TaskEmbedding e;
  e.task_id = std::string(text);
  e.description = std::string(text);
  e.source = TaskEmbedding::Source::kStub;
  Rng rng(fnv1a64(text));
  e.vec.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    e.vec[i] = static_cast<float>(rng.normal());
  }
  l2_normalize_or_raise(e.vec, "stub_embed(\"" + e.task_id + "\")");
  return e;
}

namespace {

std::string replace_all(std::string text, std::string_view needle,
                        std::string_view repl) {
  std::size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    text.replace(pos, needle.size(), repl);
    pos += repl.size();
  }
  return text;
}

}  // namespace

std::string apply_template(std::string_view class_name,
                           std::string_view templ) {
  if (templ.find("<class name>") == std::string_view::npos) {
    raise(ErrorCode::kValidation,
          "apply_template: template has no <class name> placeholder");
  }
  return replace_all(std::string(templ), "<class name>", class_name);
}

std::string apply_template(std::string_view class_name,
                           std::span<const std::string> class_list,
                           std::string_view templ) {
  if (templ.find("<class name>") == std::string_view::npos) {
    raise(ErrorCode::kValidation,
          "apply_template: template has no <class name> placeholder");
  }
  std::string joined;
  for (std::size_t i = 0; i < class_list.size(); ++i) {
    if (i > 0) joined += ", ";
    joined += class_list[i];
  }
  std::string out = replace_all(std::string(templ), "<class name>", class_name);
  return replace_all(std::move(out), "<class list>", joined);
}

TaskEmbedding mean_embedding(std::span<const TaskEmbedding> embeddings) {
  if (embeddings.empty()) {
    raise(ErrorCode::kValidation, "mean_embedding: empty input");
  }
  const std::size_t dim = embeddings.front().vec.size();
  std::vector<double> acc(dim, 0.0);
  for (const auto& e : embeddings) {
    if (e.vec.size() != dim) {
      raise(ErrorCode::kShape, "mean_embedding: mixed dimensions " +
                                   std::to_string(dim) + " vs " +
                                   std::to_string(e.vec.size()));
    }
    for (std::size_t i = 0; i < dim; ++i) {
      acc[i] += static_cast<double>(e.vec[i]);
    }
  }
  TaskEmbedding out;
  out.task_id = "mean";
  out.source = embeddings.front().source;
  out.vec.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    out.vec[i] = static_cast<float>(acc[i] / static_cast<double>(embeddings.size()));
  }
  l2_normalize_or_raise(out.vec, "mean_embedding");
  return out;
}

}  // namespace sglora
