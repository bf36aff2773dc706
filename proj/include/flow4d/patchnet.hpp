// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <span>
#include <vector>

#include "flow4d/diffnet.hpp"
#include "flow4d/grid.hpp"

namespace flow4d::patchnet {

using diffnet::Matrix;

/// Partition of a grid into cubic patches of side `side`.
class PatchLayout {
 public:
  PatchLayout() = default;
  PatchLayout(Dims dims, int side);

  const Dims& dims() const { return dims_; }
  int side() const { return side_; }
  int px() const { return px_; }
  int py() const { return py_; }
  int pz() const { return pz_; }
  Eigen::Index patches() const { return static_cast<Eigen::Index>(px_) * py_ * pz_; }
  Eigen::Index patch_voxels() const { return static_cast<Eigen::Index>(side_) * side_ * side_; }

  /// Grid voxel index of voxel `v` (x-fastest inside the patch) of patch `p`
  /// (x-fastest over patches).
  std::size_t voxel_index(Eigen::Index p, Eigen::Index v) const;

 private:
  Dims dims_;
  int side_ = 4;
  int px_ = 0, py_ = 0, pz_ = 0;
};

/// Per-patch class fractions, flattened patch-major: 1 x (patches * channels).
/// Labels >= channels are rejected.
void pooled_features(const LabelGrid& grid, const PatchLayout& layout, int channels, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out_row);
Matrix pooled_features(std::span<const LabelGrid* const> grids, const PatchLayout& layout, int channels);

/// Per-patch class fractions over `sub`^3 sub-blocks: patches x (sub^3 * channels).
Matrix subblock_features(const LabelGrid& grid, const PatchLayout& layout, int channels, int sub);

/// Patch centre in [-1, 1]^3 followed by sin/cos at `frequencies` octaves:
/// patches x (3 + 6 * frequencies).
Matrix position_features(const PatchLayout& layout, int frequencies);
inline Eigen::Index position_feature_dim(int frequencies) { return 3 + 6 * frequencies; }

/// Labels in patch order: patches x patch_voxels, row-major.
std::vector<std::uint8_t> patch_targets(const LabelGrid& grid, const PatchLayout& layout);
void append_patch_targets(const LabelGrid& grid, const PatchLayout& layout, std::vector<std::uint8_t>& out);

/// `count` distinct patch indices in increasing order.
std::vector<Eigen::Index> sample_patches(Eigen::Index patches, Eigen::Index count, std::mt19937_64& rng);
/// Labels of the selected patches, row-major selected x patch_voxels.
void append_patch_targets(const LabelGrid& grid, const PatchLayout& layout, std::span<const Eigen::Index> selected,
                          std::vector<std::uint8_t>& out);

/// Softmax per group of `classes` logits, rows x (patch_voxels * classes).
Matrix grouped_softmax(const Matrix& logits, Eigen::Index classes);

/// Argmax of per-patch scores back onto the grid; ties go to the lowest class id.
LabelGrid assemble_argmax(const Matrix& scores, const PatchLayout& layout, Eigen::Index classes, double voxel_size);

/// Patch-ordered rows (patches x patch_voxels*classes) to grid-ordered voxels x classes.
Matrix to_voxel_major(const Matrix& patch_scores, const PatchLayout& layout, Eigen::Index classes);

struct CodecSpec {
  Dims dims = Dims{32, 32, 40};
  int patch = 4;
  int in_channels = 6;
  int out_channels = 6;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> encoder_hidden{256, 128};
  std::vector<std::size_t> decoder_hidden{128, 128, 128};
  int frequencies = 2;
  int skip_sub = 0;  // > 0: decoder also sees the patch's input pooled over skip_sub^3 sub-blocks
  diffnet::Activation activation = diffnet::Activation::silu;

  void validate() const;
};

/// Grid encoder (pooled one-hot patches -> MLP -> latent) and per-patch
/// implicit decoder (patch position [+ skip features] -> logits of every
/// voxel in the patch, modulated by the latent).
class PatchCodec {
 public:
  PatchCodec() = default;
  PatchCodec(CodecSpec spec, std::string prefix);

  void init(diffnet::ParamStore& store, std::mt19937_64& rng) const;
  /// Encoder modulation parameters stay at their neutral initial values.
  void freeze_encoder_modulation(diffnet::ParamStore& store) const;

  const CodecSpec& spec() const { return spec_; }
  const PatchLayout& layout() const { return layout_; }
  const diffnet::ModulatedMlp& encoder() const { return encoder_; }
  const diffnet::ModulatedMlp& decoder() const { return decoder_; }

  Matrix encoder_input(std::span<const LabelGrid* const> grids) const;
  /// (grids * patches) x decoder input dim. Without skip features the
  /// rows only depend on the patch position, and `grids` may be empty with
  /// `count` giving the batch size.
  Matrix decoder_input(std::span<const LabelGrid* const> grids, Eigen::Index count) const;

  diffnet::Var encode(diffnet::Tape& tape, diffnet::ParamStore& store, diffnet::Var input) const;
  diffnet::Var encode_frozen(diffnet::Tape& tape, const diffnet::ParamStore& store, diffnet::Var input) const;
  diffnet::Var decode(diffnet::Tape& tape, diffnet::ParamStore& store, diffnet::Var latent, diffnet::Var input) const;
  diffnet::Var decode_frozen(diffnet::Tape& tape, const diffnet::ParamStore& store, diffnet::Var latent,
                             diffnet::Var input) const;

 private:
  CodecSpec spec_;
  std::string prefix_;
  PatchLayout layout_;
  diffnet::ModulatedMlp encoder_;
  diffnet::ModulatedMlp decoder_;
  Matrix positions_;
};

}  // namespace flow4d::patchnet
