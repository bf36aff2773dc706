// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace flow4d {

enum Label : std::uint8_t {
  kBackground = 0,
  kLV = 1,
  kLVM = 2,
  kRV = 3,
  kLA = 4,
  kRA = 5,
  // Only appears in rasterized sparse inputs.
  kUnknown = 6,
};

inline constexpr int kNumClasses = 6;
inline constexpr int kNumInputClasses = 7;

const char* label_name(std::uint8_t label);

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::string str() const;
  static Dims parse(const std::string& text);

  friend bool operator==(const Dims&, const Dims&) = default;
};

/// 3D class map, x-fastest voxel order.
class LabelGrid {
 public:
  LabelGrid() = default;
  explicit LabelGrid(Dims dims, double voxel_size = 1.0, std::uint8_t fill = kBackground);

  const Dims& dims() const { return dims_; }
  double voxel_size() const { return voxel_size_; }
  std::size_t size() const { return labels_.size(); }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_.nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_.ny) * static_cast<std::size_t>(k));
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_.nx && j < dims_.ny && k < dims_.nz;
  }
  std::uint8_t at(int i, int j, int k) const { return labels_[index(i, j, k)]; }
  std::uint8_t& at(int i, int j, int k) { return labels_[index(i, j, k)]; }
  std::uint8_t operator[](std::size_t idx) const { return labels_[idx]; }
  std::uint8_t& operator[](std::size_t idx) { return labels_[idx]; }

  std::span<const std::uint8_t> labels() const { return labels_; }
  std::vector<std::uint8_t>& data() { return labels_; }
  std::size_t count(std::uint8_t label) const;

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;

 private:
  Dims dims_;
  double voxel_size_ = 1.0;
  std::vector<std::uint8_t> labels_;
};

/// One cardiac cycle of M frames sharing dims and voxel size.
struct ShapeSequence {
  std::vector<LabelGrid> frames;

  std::size_t frame_count() const { return frames.size(); }
  void validate() const;
  friend bool operator==(const ShapeSequence&, const ShapeSequence&) = default;
};

// "F4DGRID v1 nx ny nz voxel_size\n" followed by one byte per voxel.
void write_grid(std::ostream& os, const LabelGrid& grid);
LabelGrid read_grid(std::istream& is);
void save_grid(const std::filesystem::path& path, const LabelGrid& grid);
LabelGrid load_grid(const std::filesystem::path& path);

// "F4DSEQ v1 M\n" followed by M grids.
void write_sequence(std::ostream& os, const ShapeSequence& seq);
ShapeSequence read_sequence(std::istream& is);
void save_sequence(const std::filesystem::path& path, const ShapeSequence& seq);
ShapeSequence load_sequence(const std::filesystem::path& path);

}  // namespace flow4d
