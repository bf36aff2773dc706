// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/completion.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "flow4d/error.hpp"
#include "flow4d/parallel.hpp"

namespace flow4d::completion {

namespace {

constexpr double kModelVersion = 1.0;
const std::string kPrefix = "lc";

}  // namespace

patchnet::CodecSpec default_spec(Dims dims) {
  patchnet::CodecSpec s;
  s.dims = dims;
  s.in_channels = kNumInputClasses;
  s.out_channels = kNumClasses;
  s.latent_dim = 64;
  s.skip_sub = 2;
  return s;
}

// --------------------------------------------------------------- sources

SyntheticSource::SyntheticSource(const fm::FlowModel& flow, const autoenc::AutoencoderModel& ae, int steps)
    : flow_(&flow), ae_(&ae), steps_(steps) {
  if (flow.spec().dim != ae.latent_dim()) {
    throw DimensionError("flow dim " + std::to_string(flow.spec().dim) + " differs from autoencoder latent dim " +
                         std::to_string(ae.latent_dim()));
  }
}

std::vector<LabelGrid> SyntheticSource::draw(std::size_t n, std::uint64_t seed) {
  ++calls_;
  drawn_ += n;
  return fm::generate_lrf(*flow_, *ae_, n, steps_, seed);
}

void MixSpec::validate() const {
  if (!(real_fraction >= 0.0) || !(synthetic_fraction >= 0.0) ||
      std::abs(real_fraction + synthetic_fraction - 1.0) > 1e-9) {
    throw InvalidArgument("mix fractions must be nonnegative and sum to 1");
  }
}

std::size_t MixSpec::real_count(std::size_t batch) const {
  return static_cast<std::size_t>(std::llround(real_fraction * static_cast<double>(batch)));
}

MixSpec parse_mix(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw InvalidArgument("mix must look like REAL:SYNTHETIC, got '" + text + "'");
  MixSpec m;
  try {
    m.real_fraction = std::stod(text.substr(0, colon));
    m.synthetic_fraction = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw InvalidArgument("mix must look like REAL:SYNTHETIC, got '" + text + "'");
  }
  m.validate();
  return m;
}

// ----------------------------------------------------------------- model

CompletionModel::CompletionModel(patchnet::CodecSpec spec, std::uint64_t seed) : codec_(std::move(spec), kPrefix) {
  if (codec_.spec().in_channels != kNumInputClasses || codec_.spec().out_channels != kNumClasses) {
    throw InvalidArgument("completion model needs 7 input and 6 output channels");
  }
  std::mt19937_64 rng(seed);
  codec_.init(params_, rng);
  codec_.freeze_encoder_modulation(params_);
}

CompletionModel CompletionModel::zeros(patchnet::CodecSpec spec) {
  CompletionModel m(std::move(spec), 0);
  for (auto& [_, p] : m.params_) p.value.setZero();
  return m;
}

Matrix CompletionModel::logits(std::span<const LabelGrid* const> sparse) const {
  for (const auto* g : sparse) {
    if (g->dims() != dims()) {
      throw DimensionError("input grid dims " + g->dims().str() + " differ from model dims " + dims().str());
    }
  }
  diffnet::Tape tape;
  auto z = codec_.encode_frozen(tape, params_, tape.constant(codec_.encoder_input(sparse)));
  const auto count = static_cast<Eigen::Index>(sparse.size());
  return codec_.decode_frozen(tape, params_, z, tape.constant(codec_.decoder_input(sparse, count))).value();
}

Matrix CompletionModel::probabilities(const LabelGrid& sparse) const {
  const LabelGrid* ptr[1] = {&sparse};
  const Matrix p = patchnet::grouped_softmax(logits(ptr), spec().out_channels);
  return patchnet::to_voxel_major(p, codec_.layout(), spec().out_channels);
}

LabelGrid CompletionModel::complete(const LabelGrid& sparse, bool preserve_observed) const {
  const LabelGrid* ptr[1] = {&sparse};
  LabelGrid out = patchnet::assemble_argmax(logits(ptr), codec_.layout(), spec().out_channels, sparse.voxel_size());
  if (preserve_observed) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (sparse[i] < kNumClasses) out[i] = sparse[i];
    }
  }
  return out;
}

Checkpoint CompletionModel::to_checkpoint() const {
  Checkpoint c;
  c.set_kind(kCheckpointKind, kModelVersion);
  autoenc::write_spec(c, kPrefix, spec());
  c.add_params(params_);
  return c;
}

CompletionModel CompletionModel::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.require_kind(kCheckpointKind, kModelVersion);
  CompletionModel m = zeros(autoenc::read_spec(ckpt, kPrefix));
  ckpt.load_params(m.params_);
  return m;
}

LabelGrid corrupt(const LabelGrid& source, const phantom::SliceSimConfig& slices, double lambda, std::uint64_t seed) {
  phantom::SliceSimConfig cfg = slices;
  cfg.lambda = lambda;
  cfg.seed = seed;
  return phantom::rasterize_slices(phantom::extract_slices(source, cfg), source.dims());
}

// --------------------------------------------------------------- training

CompletionTrainResult train_completion(std::span<const LabelGrid> real, const MixSpec& mix, SyntheticSource* synthetic,
                                       const patchnet::CodecSpec& spec, const CompletionTrainConfig& config) {
  mix.validate();
  if (config.batch_size < 1 || config.epochs < 0) throw InvalidArgument("epochs >= 0 and batch size >= 1 required");
  const std::size_t n_real = mix.real_count(config.batch_size);
  const std::size_t n_syn = mix.synthetic_count(config.batch_size);
  if (n_syn > 0 && synthetic == nullptr) {
    throw InvalidArgument("synthetic fraction > 0 needs a trained LRF and autoencoder");
  }
  if (n_real > 0 && real.empty()) throw InvalidArgument("real fraction > 0 needs real training grids");
  for (const auto& g : real) {
    if (g.dims() != spec.dims) {
      throw DimensionError("training grid dims " + g.dims().str() + " differ from model dims " + spec.dims.str());
    }
  }
  const std::size_t steps = config.steps_per_epoch > 0
                                ? config.steps_per_epoch
                                : std::max<std::size_t>(1, (real.size() + config.batch_size - 1) / config.batch_size);
  CompletionTrainResult result{CompletionModel(spec, config.seed), {}, 0, 0};
  CompletionModel& model = result.model;
  const auto& codec = model.codec();
  std::mt19937_64 rng(fm::stream_seed(config.seed, 0xC0));
  std::uniform_real_distribution<double> lambda_dist(0.0, config.slices.lambda_max);
  diffnet::Adam adam({config.learning_rate});
  const std::uint64_t total = static_cast<std::uint64_t>(config.epochs) * steps;
  const Eigen::Index patches = codec.layout().patches();
  const Eigen::Index per_grid = std::clamp<Eigen::Index>(
      static_cast<Eigen::Index>(std::lround(config.patch_fraction * static_cast<double>(patches))), 1, patches);

  std::vector<std::size_t> real_order;
  std::size_t real_pos = 0;
  auto next_real = [&]() -> const LabelGrid& {
    if (real_pos == real_order.size()) {
      real_order = autoenc::permutation(real.size(), rng);
      real_pos = 0;
    }
    return real[real_order[real_pos++]];
  };
  std::vector<LabelGrid> pool;
  if (n_syn > 0 && !mix.resample_each_epoch) pool = synthetic->draw(steps * n_syn, fm::stream_seed(config.seed, 0xC1));

  std::uint64_t step_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    const std::vector<std::size_t> pool_order = pool.empty() ? std::vector<std::size_t>{} : autoenc::permutation(pool.size(), rng);
    for (std::size_t s = 0; s < steps; ++s, ++step_index) {
      std::vector<LabelGrid> sources;
      for (std::size_t i = 0; i < n_real; ++i) sources.push_back(next_real());
      if (n_syn > 0) {
        if (mix.resample_each_epoch) {
          auto drawn = synthetic->draw(n_syn, fm::stream_seed(config.seed, 0x10000 + step_index));
          for (auto& g : drawn) sources.push_back(std::move(g));
        } else {
          for (std::size_t i = 0; i < n_syn; ++i) sources.push_back(pool[pool_order[s * n_syn + i]]);
        }
      }
      result.real_seen += n_real;
      result.synthetic_seen += n_syn;
      std::vector<LabelGrid> sparse;
      for (const auto& g : sources) {
        const double lambda = lambda_dist(rng);
        sparse.push_back(corrupt(g, config.slices, lambda, rng()));
      }
      std::vector<const LabelGrid*> ptrs;
      for (const auto& g : sparse) ptrs.push_back(&g);
      const auto count = static_cast<Eigen::Index>(sources.size());
      const Matrix full = codec.decoder_input(ptrs, count);
      Matrix dec_in(count * per_grid, full.cols());
      std::vector<std::uint8_t> targets;
      for (Eigen::Index g = 0; g < count; ++g) {
        const auto selected = patchnet::sample_patches(patches, per_grid, rng);
        patchnet::append_patch_targets(sources[static_cast<std::size_t>(g)], codec.layout(), selected, targets);
        for (Eigen::Index r = 0; r < per_grid; ++r) {
          dec_in.row(g * per_grid + r) = full.row(g * patches + selected[static_cast<std::size_t>(r)]);
        }
      }
      diffnet::Tape tape;
      model.params().zero_grad();
      auto z = codec.encode(tape, model.params(), tape.constant(codec.encoder_input(ptrs)));
      auto logits = codec.decode(tape, model.params(), z, tape.constant(std::move(dec_in)));
      auto loss = diffnet::grouped_cross_entropy(logits, targets, spec.out_channels);
      tape.backward(loss);
      adam.set_learning_rate(
          autoenc::cosine_schedule(config.learning_rate, config.final_learning_rate, adam.step_count(), total));
      adam.step(model.params());
      loss_sum += loss.scalar();
    }
    const double mean = loss_sum / static_cast<double>(steps);
    result.epoch_losses.push_back(mean);
    if (config.on_epoch) config.on_epoch(epoch + 1, mean);
  }
  return result;
}

ShapeSequence complete_sequence(const CompletionModel& model, std::span<const LabelGrid> sparse_frames, int frames,
                                int threads, bool preserve_observed) {
  if (static_cast<int>(sparse_frames.size()) != frames) {
    throw DimensionError("got " + std::to_string(sparse_frames.size()) + " frame inputs, expected M = " +
                         std::to_string(frames));
  }
  ShapeSequence seq;
  seq.frames.resize(sparse_frames.size());
  parallel_for(sparse_frames.size(), threads, [&](std::size_t i) { seq.frames[i] = model.complete(sparse_frames[i], preserve_observed); });
  return seq;
}

ShapeSequence complete_sequence(const CompletionModel& model, std::span<const phantom::SliceStack> stacks, int frames,
                                int threads, bool preserve_observed) {
  if (static_cast<int>(stacks.size()) != frames) {
    throw DimensionError("got " + std::to_string(stacks.size()) + " slice stacks, expected M = " +
                         std::to_string(frames));
  }
  std::vector<LabelGrid> sparse;
  for (const auto& s : stacks) sparse.push_back(phantom::rasterize_slices(s, s.dims));
  return complete_sequence(model, sparse, frames, threads, preserve_observed);
}

}  // namespace flow4d::completion
