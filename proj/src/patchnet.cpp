// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/patchnet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flow4d/error.hpp"

namespace flow4d::patchnet {

PatchLayout::PatchLayout(Dims dims, int side) : dims_(dims), side_(side) {
  if (side < 1) throw InvalidArgument("patch side must be >= 1");
  if (dims.nx % side != 0 || dims.ny % side != 0 || dims.nz % side != 0) {
    throw DimensionError("grid " + dims.str() + " is not divisible into " + std::to_string(side) + "^3 patches");
  }
  px_ = dims.nx / side;
  py_ = dims.ny / side;
  pz_ = dims.nz / side;
}

std::size_t PatchLayout::voxel_index(Eigen::Index p, Eigen::Index v) const {
  const auto s = static_cast<Eigen::Index>(side_);
  const Eigen::Index pi = p % px_, pj = (p / px_) % py_, pk = p / (static_cast<Eigen::Index>(px_) * py_);
  const Eigen::Index vi = v % s, vj = (v / s) % s, vk = v / (s * s);
  const Eigen::Index i = pi * s + vi, j = pj * s + vj, k = pk * s + vk;
  return static_cast<std::size_t>(i + dims_.nx * (j + static_cast<Eigen::Index>(dims_.ny) * k));
}

namespace {

void require_layout(const LabelGrid& grid, const PatchLayout& layout) {
  if (grid.dims() != layout.dims()) {
    throw DimensionError("grid dims " + grid.dims().str() + " do not match model dims " + layout.dims().str());
  }
}

}  // namespace

void pooled_features(const LabelGrid& grid, const PatchLayout& layout, int channels,
                     Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out) {
  require_layout(grid, layout);
  out.setZero();
  const double w = 1.0 / static_cast<double>(layout.patch_voxels());
  for (Eigen::Index p = 0; p < layout.patches(); ++p) {
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v) {
      const int label = grid[layout.voxel_index(p, v)];
      if (label >= channels) throw FormatError("label " + std::to_string(label) + " outside the model's classes");
      out(p * channels + label) += w;
    }
  }
}

Matrix pooled_features(std::span<const LabelGrid* const> grids, const PatchLayout& layout, int channels) {
  Matrix out(static_cast<Eigen::Index>(grids.size()), layout.patches() * channels);
  for (std::size_t g = 0; g < grids.size(); ++g) pooled_features(*grids[g], layout, channels, out.row(static_cast<Eigen::Index>(g)));
  return out;
}

Matrix subblock_features(const LabelGrid& grid, const PatchLayout& layout, int channels, int sub) {
  require_layout(grid, layout);
  const int s = layout.side();
  if (sub < 1 || s % sub != 0) throw InvalidArgument("sub-block size must divide the patch side");
  const int per = s / sub;
  const Eigen::Index blocks = static_cast<Eigen::Index>(sub) * sub * sub;
  Matrix out = Matrix::Zero(layout.patches(), blocks * channels);
  const double w = 1.0 / static_cast<double>(per * per * per);
  for (Eigen::Index p = 0; p < layout.patches(); ++p) {
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v) {
      const Eigen::Index vi = v % s, vj = (v / s) % s, vk = v / (s * s);
      const Eigen::Index b = vi / per + sub * (vj / per + sub * (vk / per));
      const int label = grid[layout.voxel_index(p, v)];
      if (label >= channels) throw FormatError("label " + std::to_string(label) + " outside the model's classes");
      out(p, b * channels + label) += w;
    }
  }
  return out;
}

Matrix position_features(const PatchLayout& layout, int frequencies) {
  Matrix out(layout.patches(), position_feature_dim(frequencies));
  const std::array<int, 3> n{layout.px(), layout.py(), layout.pz()};
  for (Eigen::Index p = 0; p < layout.patches(); ++p) {
    const std::array<Eigen::Index, 3> idx{p % n[0], (p / n[0]) % n[1], p / (static_cast<Eigen::Index>(n[0]) * n[1])};
    for (int a = 0; a < 3; ++a) {
      const double c = (2.0 * static_cast<double>(idx[a]) + 1.0) / n[a] - 1.0;
      out(p, a) = c;
      for (int f = 0; f < frequencies; ++f) {
        const double arg = std::numbers::pi * std::ldexp(1.0, f) * c;
        out(p, 3 + 6 * f + 2 * a) = std::sin(arg);
        out(p, 3 + 6 * f + 2 * a + 1) = std::cos(arg);
      }
    }
  }
  return out;
}

void append_patch_targets(const LabelGrid& grid, const PatchLayout& layout, std::vector<std::uint8_t>& out) {
  require_layout(grid, layout);
  for (Eigen::Index p = 0; p < layout.patches(); ++p)
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v) out.push_back(grid[layout.voxel_index(p, v)]);
}

void append_patch_targets(const LabelGrid& grid, const PatchLayout& layout, std::span<const Eigen::Index> selected,
                          std::vector<std::uint8_t>& out) {
  require_layout(grid, layout);
  for (Eigen::Index p : selected)
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v) out.push_back(grid[layout.voxel_index(p, v)]);
}

std::vector<Eigen::Index> sample_patches(Eigen::Index patches, Eigen::Index count, std::mt19937_64& rng) {
  if (count < 1 || count > patches) throw InvalidArgument("patch sample size must lie in [1, patches]");
  // Partial Fisher-Yates over the index range.
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(patches));
  for (Eigen::Index i = 0; i < patches; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto j = i + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(patches - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::uint8_t> patch_targets(const LabelGrid& grid, const PatchLayout& layout) {
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(layout.patches() * layout.patch_voxels()));
  append_patch_targets(grid, layout, out);
  return out;
}

Matrix grouped_softmax(const Matrix& logits, Eigen::Index classes) {
  if (classes < 1 || logits.cols() % classes != 0) throw DimensionError("logit columns not divisible by classes");
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index g = 0; g < logits.cols(); g += classes) {
      const auto seg = logits.row(r).segment(g, classes);
      const double mx = seg.maxCoeff();
      auto dst = out.row(r).segment(g, classes);
      dst = (seg.array() - mx).exp().matrix();
      dst /= dst.sum();
    }
  }
  return out;
}

LabelGrid assemble_argmax(const Matrix& scores, const PatchLayout& layout, Eigen::Index classes, double voxel_size) {
  if (scores.rows() != layout.patches() || scores.cols() != layout.patch_voxels() * classes) {
    throw DimensionError("decoder output has shape " + std::to_string(scores.rows()) + "x" +
                         std::to_string(scores.cols()) + ", layout expects " + std::to_string(layout.patches()) + "x" +
                         std::to_string(layout.patch_voxels() * classes));
  }
  LabelGrid grid(layout.dims(), voxel_size);
  for (Eigen::Index p = 0; p < layout.patches(); ++p) {
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < classes; ++c)
        if (scores(p, v * classes + c) > scores(p, v * classes + best)) best = c;
      grid[layout.voxel_index(p, v)] = static_cast<std::uint8_t>(best);
    }
  }
  return grid;
}

Matrix to_voxel_major(const Matrix& patch_scores, const PatchLayout& layout, Eigen::Index classes) {
  if (patch_scores.rows() != layout.patches() || patch_scores.cols() != layout.patch_voxels() * classes) {
    throw DimensionError("patch scores do not match the layout");
  }
  Matrix out(static_cast<Eigen::Index>(layout.dims().voxels()), classes);
  for (Eigen::Index p = 0; p < layout.patches(); ++p)
    for (Eigen::Index v = 0; v < layout.patch_voxels(); ++v)
      out.row(static_cast<Eigen::Index>(layout.voxel_index(p, v))) = patch_scores.row(p).segment(v * classes, classes);
  return out;
}

// ------------------------------------------------------------------ codec

void CodecSpec::validate() const {
  if (patch < 1 || in_channels < 1 || out_channels < 1 || latent_dim < 1 || frequencies < 0) {
    throw InvalidArgument("codec dimensions must be positive");
  }
  if (encoder_hidden.empty() || decoder_hidden.empty()) throw InvalidArgument("codec hidden layers must be non-empty");
  if (skip_sub < 0 || (skip_sub > 0 && patch % skip_sub != 0)) {
    throw InvalidArgument("skip sub-block size must divide the patch side");
  }
}

PatchCodec::PatchCodec(CodecSpec spec, std::string prefix)
    : spec_(std::move(spec)), prefix_(std::move(prefix)), layout_(spec_.dims, spec_.patch) {
  spec_.validate();
  diffnet::ModulatedMlpSpec enc;
  enc.input_dim = static_cast<std::size_t>(layout_.patches() * spec_.in_channels);
  enc.hidden_dims = spec_.encoder_hidden;
  enc.output_dim = spec_.latent_dim;
  enc.conditioning_dim = 1;
  enc.activation = spec_.activation;
  encoder_ = diffnet::ModulatedMlp(enc, prefix_ + ".enc");

  diffnet::ModulatedMlpSpec dec;
  const int skip = spec_.skip_sub > 0 ? spec_.skip_sub * spec_.skip_sub * spec_.skip_sub * spec_.in_channels : 0;
  dec.input_dim = static_cast<std::size_t>(position_feature_dim(spec_.frequencies) + skip);
  dec.hidden_dims = spec_.decoder_hidden;
  dec.output_dim = static_cast<std::size_t>(layout_.patch_voxels() * spec_.out_channels);
  dec.conditioning_dim = spec_.latent_dim;
  dec.activation = spec_.activation;
  decoder_ = diffnet::ModulatedMlp(dec, prefix_ + ".dec");
  positions_ = position_features(layout_, spec_.frequencies);
}

void PatchCodec::init(diffnet::ParamStore& store, std::mt19937_64& rng) const {
  encoder_.init(store, rng);
  decoder_.init(store, rng);
}

void PatchCodec::freeze_encoder_modulation(diffnet::ParamStore& store) const {
  store.set_trainable(encoder_.prefix() + ".ms", false);
  store.set_trainable(encoder_.prefix() + ".mt", false);
}

Matrix PatchCodec::encoder_input(std::span<const LabelGrid* const> grids) const {
  return pooled_features(grids, layout_, spec_.in_channels);
}

Matrix PatchCodec::decoder_input(std::span<const LabelGrid* const> grids, Eigen::Index count) const {
  const Eigen::Index p = layout_.patches();
  if (spec_.skip_sub > 0) {
    if (static_cast<Eigen::Index>(grids.size()) != count) throw DimensionError("skip features need every grid");
  }
  Matrix out(count * p, static_cast<Eigen::Index>(decoder_.spec().input_dim));
  for (Eigen::Index g = 0; g < count; ++g) {
    out.block(g * p, 0, p, positions_.cols()) = positions_;
    if (spec_.skip_sub > 0) {
      const Matrix skip = subblock_features(*grids[static_cast<std::size_t>(g)], layout_, spec_.in_channels, spec_.skip_sub);
      out.block(g * p, positions_.cols(), p, skip.cols()) = skip;
    }
  }
  return out;
}

namespace {

diffnet::Var neutral_condition(diffnet::Tape& tape, Eigen::Index rows) {
  return tape.constant(Matrix::Zero(rows, 1));
}

}  // namespace

diffnet::Var PatchCodec::encode(diffnet::Tape& tape, diffnet::ParamStore& store, diffnet::Var input) const {
  return encoder_.forward(tape, store, input, neutral_condition(tape, input.rows()));
}

diffnet::Var PatchCodec::encode_frozen(diffnet::Tape& tape, const diffnet::ParamStore& store,
                                       diffnet::Var input) const {
  return encoder_.forward_frozen(tape, store, input, neutral_condition(tape, input.rows()));
}

diffnet::Var PatchCodec::decode(diffnet::Tape& tape, diffnet::ParamStore& store, diffnet::Var latent,
                                diffnet::Var input) const {
  return decoder_.forward(tape, store, input, latent);
}

diffnet::Var PatchCodec::decode_frozen(diffnet::Tape& tape, const diffnet::ParamStore& store, diffnet::Var latent,
                                       diffnet::Var input) const {
  return decoder_.forward_frozen(tape, store, input, latent);
}

}  // namespace flow4d::patchnet
