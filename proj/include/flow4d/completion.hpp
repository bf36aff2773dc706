// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "flow4d/autoenc.hpp"
#include "flow4d/checkpoint.hpp"
#include "flow4d/fm.hpp"
#include "flow4d/grid.hpp"
#include "flow4d/patchnet.hpp"
#include "flow4d/phantom.hpp"

namespace flow4d::completion {

using diffnet::Matrix;
using diffnet::Vector;

inline constexpr const char* kCheckpointKind = "completion";

/// Autoencoder codec with 7 input channels, latent 64 and 2^3 sub-block skip features.
patchnet::CodecSpec default_spec(Dims dims = phantom::kReferenceDims);

/// Generated training shapes drawn from a latent flow and decoded by an autoencoder.
class SyntheticSource {
 public:
  SyntheticSource(const fm::FlowModel& flow, const autoenc::AutoencoderModel& ae, int steps = 100);
  std::vector<LabelGrid> draw(std::size_t n, std::uint64_t seed);
  std::size_t calls() const { return calls_; }
  std::size_t drawn() const { return drawn_; }

 private:
  const fm::FlowModel* flow_;
  const autoenc::AutoencoderModel* ae_;
  int steps_;
  std::size_t calls_ = 0;
  std::size_t drawn_ = 0;
};

struct MixSpec {
  double real_fraction = 0.25;
  double synthetic_fraction = 0.75;
  bool resample_each_epoch = true;  // false: one synthetic pool drawn before training

  void validate() const;
  std::size_t real_count(std::size_t batch) const;
  std::size_t synthetic_count(std::size_t batch) const { return batch - real_count(batch); }
};

MixSpec parse_mix(const std::string& text);

class CompletionModel {
 public:
  CompletionModel() = default;
  CompletionModel(patchnet::CodecSpec spec, std::uint64_t seed);
  static CompletionModel zeros(patchnet::CodecSpec spec);

  const patchnet::CodecSpec& spec() const { return codec_.spec(); }
  const patchnet::PatchCodec& codec() const { return codec_; }
  diffnet::ParamStore& params() { return params_; }
  const diffnet::ParamStore& params() const { return params_; }
  const Dims& dims() const { return codec_.spec().dims; }

  /// Voxel-major class probabilities for one sparse input.
  Matrix probabilities(const LabelGrid& sparse) const;
  /// Argmax labels; with `preserve_observed` voxels carrying a known label keep it.
  LabelGrid complete(const LabelGrid& sparse, bool preserve_observed = true) const;

  Checkpoint to_checkpoint() const;
  static CompletionModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static CompletionModel load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

 private:
  Matrix logits(std::span<const LabelGrid* const> sparse) const;

  patchnet::PatchCodec codec_;
  diffnet::ParamStore params_;
};

inline LabelGrid complete(const CompletionModel& model, const LabelGrid& sparse, bool preserve_observed = true) {
  return model.complete(sparse, preserve_observed);
}

/// Corrupted multi-view input: slices at shift level `lambda`, rasterized with unknown fill.
LabelGrid corrupt(const LabelGrid& source, const phantom::SliceSimConfig& slices, double lambda, std::uint64_t seed);

struct CompletionTrainConfig {
  int epochs = 30;
  std::size_t batch_size = 8;
  std::size_t steps_per_epoch = 0;  // 0: ceil(real pool / batch)
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-4;
  double patch_fraction = 0.25;
  phantom::SliceSimConfig slices = phantom::default_slice_config();
  std::uint64_t seed = 0;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct CompletionTrainResult {
  CompletionModel model;
  std::vector<double> epoch_losses;
  std::size_t real_seen = 0;
  std::size_t synthetic_seen = 0;
};

/// Each step draws round(real_fraction * batch) real grids and the rest
/// from `synthetic`, corrupts them at lambda ~ U[0, lambda_max] and
/// minimizes per-voxel cross-entropy against the clean grid.
CompletionTrainResult train_completion(std::span<const LabelGrid> real, const MixSpec& mix, SyntheticSource* synthetic,
                                       const patchnet::CodecSpec& spec, const CompletionTrainConfig& config);

ShapeSequence complete_sequence(const CompletionModel& model, std::span<const LabelGrid> sparse_frames, int frames,
                                int threads = 1, bool preserve_observed = true);
ShapeSequence complete_sequence(const CompletionModel& model, std::span<const phantom::SliceStack> stacks, int frames,
                                int threads = 1, bool preserve_observed = true);

}  // namespace flow4d::completion
