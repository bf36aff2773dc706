// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "flow4d/checkpoint.hpp"
#include "flow4d/diffnet.hpp"
#include "flow4d/grid.hpp"
#include "flow4d/patchnet.hpp"

namespace flow4d::autoenc {

using diffnet::Matrix;
using diffnet::Vector;

inline constexpr const char* kCheckpointKind = "autoencoder";

struct Decoded {
  Matrix probabilities;  // voxels x classes, grid order
  LabelGrid labels;
};

class AutoencoderModel {
 public:
  AutoencoderModel() = default;
  AutoencoderModel(patchnet::CodecSpec spec, std::uint64_t seed);
  /// Every weight and bias zero.
  static AutoencoderModel zeros(patchnet::CodecSpec spec);

  const patchnet::CodecSpec& spec() const { return codec_.spec(); }
  const patchnet::PatchCodec& codec() const { return codec_; }
  diffnet::ParamStore& params() { return params_; }
  const diffnet::ParamStore& params() const { return params_; }
  std::size_t latent_dim() const { return codec_.spec().latent_dim; }
  const Dims& dims() const { return codec_.spec().dims; }

  Vector encode(const LabelGrid& grid) const;
  /// One latent per row.
  Matrix encode_batch(std::span<const LabelGrid> grids) const;
  Decoded decode(const Vector& z, double voxel_size = 1.0) const;
  LabelGrid decode_labels(const Vector& z, double voxel_size = 1.0) const;

  /// Latent standardization fitted on the training set.
  void fit_standardization(const Matrix& latents);
  Vector standardize(const Vector& z) const;
  Vector destandardize(const Vector& s) const;
  Matrix standardize_rows(const Matrix& z) const;
  const Vector& latent_mean() const { return mean_; }
  const Vector& latent_std() const { return std_; }

  Checkpoint to_checkpoint() const;
  static AutoencoderModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static AutoencoderModel load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

 private:
  patchnet::PatchCodec codec_;
  diffnet::ParamStore params_;
  Vector mean_;
  Vector std_;
};

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-4;  // cosine decay target
  double patch_fraction = 0.25;       // decoder patches scored per grid and step
  double weight_decay = 0.0;
  int max_shift = 0;  // > 0: each grid is translated by a random offset in [-max_shift, max_shift]^3 per step
  std::uint64_t seed = 0;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct TrainResult {
  AutoencoderModel model;
  std::vector<double> epoch_losses;
};

/// Mean per-voxel cross-entropy of the model on `grids`.
double reconstruction_loss(const AutoencoderModel& model, std::span<const LabelGrid> grids);

/// Minibatch training on mean per-voxel cross-entropy; fits the latent
/// standardization on the training set afterwards.
TrainResult train_autoencoder(std::span<const LabelGrid> data, const patchnet::CodecSpec& spec,
                              const TrainConfig& config);

/// Translates labels by (dx, dy, dz) voxels; uncovered voxels become background.
LabelGrid shifted(const LabelGrid& grid, int dx, int dy, int dz);

/// Cosine interpolation from `start` to `end` over `total` steps.
double cosine_schedule(double start, double end, std::uint64_t step, std::uint64_t total);

/// Deterministic Fisher-Yates permutation.
std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng);

// Shared (de)serialization of codec specs: entries under `prefix`.
void write_spec(Checkpoint& ckpt, const std::string& prefix, const patchnet::CodecSpec& spec);
patchnet::CodecSpec read_spec(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace flow4d::autoenc
