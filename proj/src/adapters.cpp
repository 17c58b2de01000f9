// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#include "sglora/adapters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sglora/errors.hpp"
#include "sglora/rng.hpp"

namespace sglora {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'L', 'R'};
constexpr std::uint32_t kBlobVersion = 1;

void append_bytes(std::string& out, const void* src, std::size_t n) {
  out.append(static_cast<const char*>(src), n);
}

template <typename UInt>
void append_le(std::string& out, UInt value) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, const std::string& origin)
      : bytes_(bytes), origin_(origin) {}

  template <typename UInt>
  UInt read_le(const std::string& what) {
    require(sizeof(UInt), what);
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      value |= static_cast<UInt>(static_cast<unsigned char>(bytes_[pos_ + i]))
               << (8 * i);
    }
    pos_ += sizeof(UInt);
    return value;
  }

  std::string read_string(std::size_t n, const std::string& what) {
    require(n, what);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  void read_raw(void* dst, std::size_t n, const std::string& what) {
    require(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool exhausted() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void require(std::size_t n, const std::string& what) {
    if (pos_ + n > bytes_.size()) {
      raise(ErrorCode::kTruncated,
            origin_ + ": truncated while reading " + what);
    }
  }

  std::string_view bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace

Layout::Layout(std::vector<LayoutModule> modules) : modules_(std::move(modules)) {
  for (const auto& mod : modules_) {
    if (mod.r < 1 || mod.r > std::min(mod.m, mod.n)) {
      raise(ErrorCode::kLayout, "module " + mod.placement_id +
                                    ": rank must satisfy 1 <= r <= min(m, n)");
    }
    for (const auto& other : modules_) {
      if (&other != &mod && other.placement_id == mod.placement_id) {
        raise(ErrorCode::kLayout,
              "duplicate placement id " + mod.placement_id);
      }
    }
    flat_dim_ += mod.r * (mod.m + mod.n);
  }
}

std::uint64_t Layout::hash() const {
  std::string canon;
  for (const auto& mod : modules_) {
    canon += mod.placement_id;
    canon.push_back('\0');
    canon += std::to_string(mod.m) + "," + std::to_string(mod.n) + "," +
             std::to_string(mod.r) + ",";
    append_le(canon, std::bit_cast<std::uint32_t>(mod.alpha));
    canon.push_back(';');
  }
  return fnv1a64(canon);
}

bool Layout::operator==(const Layout& other) const {
  if (modules_.size() != other.modules_.size()) return false;
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    const auto& a = modules_[i];
    const auto& b = other.modules_[i];
    if (a.placement_id != b.placement_id || a.m != b.m || a.n != b.n ||
        a.r != b.r || a.alpha != b.alpha) {
      return false;
    }
  }
  return true;
}

Layout Layout::default_desk(std::size_t blocks, std::size_t dim,
                            std::size_t rank, float alpha) {
  static const char* kProjections[] = {"Wq", "Wk", "Wv"};
  std::vector<LayoutModule> modules;
  for (std::size_t b = 0; b < blocks; ++b) {
    for (const char* proj : kProjections) {
      modules.push_back({"block" + std::to_string(b) + "." + proj, dim, dim,
                         rank, alpha});
    }
  }
  return Layout(std::move(modules));
}

Layout AdapterSet::layout() const {
  std::vector<LayoutModule> mods;
  mods.reserve(modules.size());
  for (const auto& m : modules) {
    mods.push_back({m.placement_id, m.b.rows(), m.a.cols(), m.rank, m.alpha});
  }
  return Layout(std::move(mods));
}

Matrix apply_lora(const Matrix& w0, const LoraModule& module, const Matrix& x) {
  if (w0.cols() != x.rows()) {
    raise(ErrorCode::kShape, "apply_lora: W0 is " + std::to_string(w0.rows()) +
                                 "x" + std::to_string(w0.cols()) + ", x has " +
                                 std::to_string(x.rows()) + " rows");
  }
  if (module.a.cols() != w0.cols() || module.b.rows() != w0.rows() ||
      module.a.rows() != module.rank || module.b.cols() != module.rank) {
    raise(ErrorCode::kShape,
          "apply_lora: module " + module.placement_id + " does not match W0");
  }
  Matrix h = numkit::matmul(w0, x);
  Matrix low = numkit::matmul(module.b, numkit::matmul(module.a, x));
  for (std::size_t i = 0; i < h.size(); ++i) {
    h.vec()[i] += module.alpha * low.vec()[i];
  }
  return h;
}

std::vector<float> flatten(const AdapterSet& set) {
  if (set.modules.empty()) {
    raise(ErrorCode::kLayout, "flatten: empty adapter set");
  }
  std::vector<float> out;
  for (const auto& mod : set.modules) {
    out.insert(out.end(), mod.a.vec().begin(), mod.a.vec().end());
    out.insert(out.end(), mod.b.vec().begin(), mod.b.vec().end());
  }
  return out;
}

AdapterSet unflatten(std::span<const float> vec, const Layout& layout) {
  if (vec.size() != layout.flat_dim()) {
    raise(ErrorCode::kLayout, "unflatten: vector length " +
                                  std::to_string(vec.size()) +
                                  " does not match layout D=" +
                                  std::to_string(layout.flat_dim()));
  }
  AdapterSet set;
  std::size_t offset = 0;
  for (const auto& mod : layout.modules()) {
    LoraModule lm;
    lm.placement_id = mod.placement_id;
    lm.alpha = mod.alpha;
    lm.rank = mod.r;
    lm.a = Matrix(mod.r, mod.n);
    std::copy(vec.begin() + offset, vec.begin() + offset + lm.a.size(),
              lm.a.data());
    offset += lm.a.size();
    lm.b = Matrix(mod.m, mod.r);
    std::copy(vec.begin() + offset, vec.begin() + offset + lm.b.size(),
              lm.b.data());
    offset += lm.b.size();
    set.modules.push_back(std::move(lm));
  }
  return set;
}

void append_tensors(std::span<const NamedTensor> tensors, std::string& out) {
  append_bytes(out, kMagic, 4);
  append_le(out, kBlobVersion);
  append_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::uint64_t count = 1;
    for (std::uint64_t d : t.dims) count *= d;
    if (count != t.values.size()) {
      raise(ErrorCode::kShape, "tensor " + t.name + ": dims do not match data");
    }
    for (float v : t.values) {
      if (!std::isfinite(v)) {
        raise(ErrorCode::kNonFinite,
              "tensor " + t.name + " contains non-finite values");
      }
    }
    append_le(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    out.push_back(0);  // dtype 0 = f32
    out.push_back(static_cast<char>(t.dims.size()));
    for (std::uint64_t d : t.dims) append_le(out, d);
    append_bytes(out, t.values.data(), t.values.size() * sizeof(float));
  }
}

std::vector<NamedTensor> parse_tensors(std::string_view bytes,
                                       const std::string& origin) {
  ByteReader reader(bytes, origin);
  char magic[4];
  reader.read_raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    raise(ErrorCode::kBadMagic, origin + ": expected magic SGLR");
  }
  const auto version = reader.read_le<std::uint32_t>("version");
  if (version != kBlobVersion) {
    raise(ErrorCode::kVersion, origin + ": blob version " +
                                   std::to_string(version) +
                                   " not supported (reader at 1)");
  }
  const auto tensor_count = reader.read_le<std::uint32_t>("tensor count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(tensor_count);
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    NamedTensor t;
    const auto name_len = reader.read_le<std::uint16_t>("tensor name length");
    t.name = reader.read_string(name_len, "tensor name");
    const auto dtype =
        reader.read_le<std::uint8_t>("dtype of tensor " + t.name);
    if (dtype != 0) {
      raise(ErrorCode::kParse,
            origin + ": tensor " + t.name + " has unsupported dtype " +
                std::to_string(dtype));
    }
    const auto ndims = reader.read_le<std::uint8_t>("ndims of tensor " + t.name);
    std::uint64_t count = 1;
    for (std::uint8_t d = 0; d < ndims; ++d) {
      t.dims.push_back(reader.read_le<std::uint64_t>("dims of tensor " + t.name));
      count *= t.dims.back();
    }
    t.values.resize(count);
    reader.read_raw(t.values.data(), count * sizeof(float),
                    "payload of tensor " + t.name);
    for (float v : t.values) {
      if (!std::isfinite(v)) {
        raise(ErrorCode::kNonFinite,
              origin + ": tensor " + t.name + " contains non-finite values");
      }
    }
    tensors.push_back(std::move(t));
  }
  if (!reader.exhausted()) {
    raise(ErrorCode::kParse, origin + ": trailing bytes after last tensor");
  }
  return tensors;
}

void save_tensors(std::span<const NamedTensor> tensors,
                  const std::filesystem::path& path) {
  std::string bytes;
  append_tensors(tensors, bytes);
  write_file(path, bytes);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  return parse_tensors(read_file(path), path.filename().string());
}

void save_adapter(const AdapterSet& set, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(set.modules.size() * 2);
  for (const auto& mod : set.modules) {
    tensors.push_back({mod.placement_id + ".A",
                       {mod.a.rows(), mod.a.cols()},
                       mod.a.vec()});
    tensors.push_back({mod.placement_id + ".B",
                       {mod.b.rows(), mod.b.cols()},
                       mod.b.vec()});
  }
  save_tensors(tensors, path);
}

namespace {

AdapterSet adapter_from_tensors(std::vector<NamedTensor> tensors,
                                const std::string& origin) {
  if (tensors.size() % 2 != 0) {
    raise(ErrorCode::kParse, origin + ": expected A/B tensor pairs");
  }
  AdapterSet set;
  for (std::size_t i = 0; i < tensors.size(); i += 2) {
    NamedTensor& ta = tensors[i];
    NamedTensor& tb = tensors[i + 1];
    auto strip = [&](const NamedTensor& t, const std::string& suffix) {
      if (t.name.size() <= suffix.size() ||
          t.name.compare(t.name.size() - suffix.size(), suffix.size(),
                         suffix) != 0) {
        raise(ErrorCode::kParse,
              origin + ": tensor " + t.name + " missing " + suffix + " suffix");
      }
      return t.name.substr(0, t.name.size() - suffix.size());
    };
    const std::string placement = strip(ta, ".A");
    if (strip(tb, ".B") != placement) {
      raise(ErrorCode::kParse, origin + ": unpaired tensors " + ta.name +
                                   " and " + tb.name);
    }
    if (ta.dims.size() != 2 || tb.dims.size() != 2 ||
        ta.dims[0] != tb.dims[1]) {
      raise(ErrorCode::kParse, origin + ": tensors for " + placement +
                                   " are not rank-consistent factors");
    }
    LoraModule mod;
    mod.placement_id = placement;
    mod.rank = ta.dims[0];
    mod.a = Matrix(ta.dims[0], ta.dims[1]);
    mod.a.vec() = std::move(ta.values);
    mod.b = Matrix(tb.dims[0], tb.dims[1]);
    mod.b.vec() = std::move(tb.values);
    set.modules.push_back(std::move(mod));
  }
  return set;
}

}  // namespace

AdapterSet load_adapter(const std::filesystem::path& path) {
  return adapter_from_tensors(load_tensors(path), path.filename().string());
}

AdapterSet load_adapter(const std::filesystem::path& path,
                        const Layout& layout) {
  AdapterSet set = load_adapter(path);
  if (set.modules.size() != layout.modules().size()) {
    raise(ErrorCode::kLayout, path.filename().string() +
                                  ": module count does not match layout");
  }
  for (std::size_t i = 0; i < set.modules.size(); ++i) {
    auto& mod = set.modules[i];
    const auto& lm = layout.modules()[i];
    if (mod.placement_id != lm.placement_id || mod.a.rows() != lm.r ||
        mod.a.cols() != lm.n || mod.b.rows() != lm.m || mod.b.cols() != lm.r) {
      raise(ErrorCode::kLayout, path.filename().string() + ": module " +
                                    mod.placement_id +
                                    " does not match layout entry " +
                                    lm.placement_id);
    }
    mod.alpha = lm.alpha;
  }
  return set;
}

std::string layout_to_json(const Layout& layout) {
  nlohmann::ordered_json modules = nlohmann::ordered_json::array();
  for (const auto& m : layout.modules()) {
    nlohmann::ordered_json jm;
    jm["placement"] = m.placement_id;
    jm["m"] = m.m;
    jm["n"] = m.n;
    jm["r"] = m.r;
    jm["alpha"] = m.alpha;
    modules.push_back(std::move(jm));
  }
  return nlohmann::ordered_json{{"modules", std::move(modules)}}.dump();
}

Layout layout_from_json(std::string_view text, const std::string& origin) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    raise(ErrorCode::kParse, origin + ": layout is not a JSON object");
  }
  if (!j.contains("modules") || !j["modules"].is_array() ||
      j["modules"].empty()) {
    raise(ErrorCode::kValidation,
          origin + ": layout.modules must be a non-empty array");
  }
  std::vector<LayoutModule> modules;
  for (std::size_t i = 0; i < j["modules"].size(); ++i) {
    const auto& jm = j["modules"][i];
    const std::string where = origin + ": layout.modules[" + std::to_string(i) + "]";
    if (!jm.is_object()) {
      raise(ErrorCode::kValidation, where + ": not an object");
    }
    for (const char* key : {"placement", "m", "n", "r", "alpha"}) {
      if (!jm.contains(key)) {
        raise(ErrorCode::kValidation, where + ": missing field \"" + key + "\"");
      }
    }
    if (!jm["placement"].is_string() || !jm["m"].is_number_unsigned() ||
        !jm["n"].is_number_unsigned() || !jm["r"].is_number_unsigned() ||
        !jm["alpha"].is_number()) {
      raise(ErrorCode::kValidation, where + ": field with wrong type");
    }
    LayoutModule m;
    m.placement_id = jm["placement"].get<std::string>();
    m.m = jm["m"].get<std::size_t>();
    m.n = jm["n"].get<std::size_t>();
    m.r = jm["r"].get<std::size_t>();
    m.alpha = jm["alpha"].get<float>();
    modules.push_back(std::move(m));
  }
  return Layout(std::move(modules));
}

}  // namespace sglora
