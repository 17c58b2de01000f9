// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter structures: per-placement (A, B, alpha) factors, the fixed
// flatten order between structured adapters and parameter vectors, and the
// binary blob format used for every tensor container in the toolkit.

#ifndef SGLORA_ADAPTERS_HPP_
#define SGLORA_ADAPTERS_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sglora/numkit.hpp"

namespace sglora {

using numkit::Matrix;

// One low-rank module: the update for a single placement is alpha * B * A
// with A (r x n) and B (m x r).
struct LoraModule {
  std::string placement_id;
  Matrix a;  // r x n
  Matrix b;  // m x r
  float alpha = 1.0f;
  std::size_t rank = 0;
};

struct LayoutModule {
  std::string placement_id;
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t r = 0;
  float alpha = 1.0f;
};

// Ordered placement descriptors; fixes the flatten order and the total
// parameter-vector length D = sum r * (m + n).
class Layout {
 public:
  Layout() = default;
  explicit Layout(std::vector<LayoutModule> modules);

  const std::vector<LayoutModule>& modules() const { return modules_; }
  std::size_t flat_dim() const { return flat_dim_; }
  std::uint64_t hash() const;
  bool operator==(const Layout& other) const;

  // Desk-scale default: `blocks` transformer blocks, each with Wq/Wk/Wv
  // square placements of side `dim`, rank `r`.
  static Layout default_desk(std::size_t blocks = 2, std::size_t dim = 16,
                             std::size_t rank = 2, float alpha = 1.0f);

 private:
  std::vector<LayoutModule> modules_;
  std::size_t flat_dim_ = 0;
};

struct AdapterSet {
  std::vector<LoraModule> modules;

  Layout layout() const;
};

// h = W0 x + alpha * B * (A * x); the dense update is never materialized.
Matrix apply_lora(const Matrix& w0, const LoraModule& module, const Matrix& x);

// Per-module concatenation of A (row-major) then B (row-major), modules in
// layout order.
std::vector<float> flatten(const AdapterSet& set);
AdapterSet unflatten(std::span<const float> vec, const Layout& layout);

// Adapter blob container (little-endian): magic "SGLR", u32 version=1,
// u32 tensor_count; per tensor u16 name_len, name, u8 dtype (0 = f32),
// u8 ndims, u64 dims[ndims], row-major f32 payload. alpha / rank / placement
// order live in the repository manifest, not here.
void save_adapter(const AdapterSet& set, const std::filesystem::path& path);
AdapterSet load_adapter(const std::filesystem::path& path);
AdapterSet load_adapter(const std::filesystem::path& path, const Layout& layout);

// JSON form {"modules": [{"placement", "m", "n", "r", "alpha"}]}, shared by
// the repository manifest and the model-file header.
std::string layout_to_json(const Layout& layout);
Layout layout_from_json(std::string_view text, const std::string& origin);

// Raw named-tensor access to the same container, used by the model file and
// the repository blobs.
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

void save_tensors(std::span<const NamedTensor> tensors,
                  const std::filesystem::path& path);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

void append_tensors(std::span<const NamedTensor> tensors, std::string& out);
std::vector<NamedTensor> parse_tensors(std::string_view bytes,
                                       const std::string& origin);

}  // namespace sglora

#endif  // SGLORA_ADAPTERS_HPP_
