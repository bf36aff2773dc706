// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flow4d/diffnet.hpp"

namespace flow4d {

/// Dense array as stored in a checkpoint: dims plus row-major values.
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  static Tensor scalar(double v) { return {{}, {v}}; }
  static Tensor vector(std::vector<double> v);
  static Tensor from_matrix(const diffnet::Matrix& m);
  diffnet::Matrix to_matrix() const;
  diffnet::Vector to_vector() const;
  std::size_t rank() const { return dims.size(); }
};

/// Named tensors in insertion order.
///
/// On disk: "F4DC", u32 version, u64 entry count, then per entry
/// u64 name length, UTF-8 name, u64 rank, rank x u64 dims, values as f64.
/// All integers and floats little-endian.
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void add(std::string name, Tensor t);
  void add_params(const diffnet::ParamStore& params, std::string_view prefix = "");
  /// Copies every entry under `prefix` into `params`, which must already hold
  /// parameters of identical shape.
  void load_params(diffnet::ParamStore& params, std::string_view prefix = "") const;

  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  /// Throws VersionError naming `kind` when the marker entry is missing or
  /// carries another model version.
  void require_kind(std::string_view kind, double version) const;
  void set_kind(std::string_view kind, double version);

  void write(std::ostream& os) const;
  static Checkpoint read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

inline bool operator==(const Tensor& a, const Tensor& b) { return a.dims == b.dims && a.values == b.values; }

}  // namespace flow4d
