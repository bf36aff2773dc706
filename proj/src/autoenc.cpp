// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/autoenc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flow4d/error.hpp"

namespace flow4d::autoenc {

namespace {

constexpr double kModelVersion = 1.0;
const std::string kPrefix = "ae";

std::vector<const LabelGrid*> pointers(std::span<const LabelGrid> grids) {
  std::vector<const LabelGrid*> out;
  out.reserve(grids.size());
  for (const auto& g : grids) out.push_back(&g);
  return out;
}

Vector sizes_to_vector(const std::vector<std::size_t>& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = static_cast<double>(v[i]);
  return out;
}

std::vector<std::size_t> vector_to_sizes(const Vector& v) {
  std::vector<std::size_t> out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(static_cast<std::size_t>(v(i)));
  return out;
}

Tensor tensor_of(const Vector& v) { return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

}  // namespace

void write_spec(Checkpoint& ckpt, const std::string& prefix, const patchnet::CodecSpec& s) {
  ckpt.add(prefix + ".spec.dims", Tensor::vector({double(s.dims.nx), double(s.dims.ny), double(s.dims.nz)}));
  ckpt.add(prefix + ".spec.shape",
           Tensor::vector({double(s.patch), double(s.in_channels), double(s.out_channels), double(s.latent_dim),
                           double(s.frequencies), double(s.skip_sub), double(static_cast<int>(s.activation))}));
  ckpt.add(prefix + ".spec.encoder_hidden", tensor_of(sizes_to_vector(s.encoder_hidden)));
  ckpt.add(prefix + ".spec.decoder_hidden", tensor_of(sizes_to_vector(s.decoder_hidden)));
}

patchnet::CodecSpec read_spec(const Checkpoint& ckpt, const std::string& prefix) {
  patchnet::CodecSpec s;
  const Vector d = ckpt.at(prefix + ".spec.dims").to_vector();
  const Vector shape = ckpt.at(prefix + ".spec.shape").to_vector();
  if (d.size() != 3 || shape.size() != 7) throw FormatError("malformed codec spec in checkpoint");
  s.dims = Dims{static_cast<int>(d(0)), static_cast<int>(d(1)), static_cast<int>(d(2))};
  s.patch = static_cast<int>(shape(0));
  s.in_channels = static_cast<int>(shape(1));
  s.out_channels = static_cast<int>(shape(2));
  s.latent_dim = static_cast<std::size_t>(shape(3));
  s.frequencies = static_cast<int>(shape(4));
  s.skip_sub = static_cast<int>(shape(5));
  s.activation = static_cast<diffnet::Activation>(static_cast<int>(shape(6)));
  s.encoder_hidden = vector_to_sizes(ckpt.at(prefix + ".spec.encoder_hidden").to_vector());
  s.decoder_hidden = vector_to_sizes(ckpt.at(prefix + ".spec.decoder_hidden").to_vector());
  return s;
}

AutoencoderModel::AutoencoderModel(patchnet::CodecSpec spec, std::uint64_t seed) : codec_(std::move(spec), kPrefix) {
  std::mt19937_64 rng(seed);
  codec_.init(params_, rng);
  codec_.freeze_encoder_modulation(params_);
  mean_ = Vector::Zero(static_cast<Eigen::Index>(latent_dim()));
  std_ = Vector::Ones(static_cast<Eigen::Index>(latent_dim()));
}

AutoencoderModel AutoencoderModel::zeros(patchnet::CodecSpec spec) {
  AutoencoderModel m(std::move(spec), 0);
  for (auto& [_, p] : m.params_) p.value.setZero();
  return m;
}

Vector AutoencoderModel::encode(const LabelGrid& grid) const {
  return encode_batch(std::span<const LabelGrid>(&grid, 1)).row(0).transpose();
}

Matrix AutoencoderModel::encode_batch(std::span<const LabelGrid> grids) const {
  const auto ptrs = pointers(grids);
  diffnet::Tape tape;
  return codec_.encode_frozen(tape, params_, tape.constant(codec_.encoder_input(ptrs))).value();
}

Decoded AutoencoderModel::decode(const Vector& z, double voxel_size) const {
  if (z.size() != static_cast<Eigen::Index>(latent_dim())) {
    throw DimensionError("latent has length " + std::to_string(z.size()) + ", model expects " +
                         std::to_string(latent_dim()));
  }
  if (!z.allFinite()) throw NonFiniteError("decode: latent contains non-finite values");
  diffnet::Tape tape;
  const Matrix input = codec_.decoder_input({}, 1);
  const Matrix logits =
      codec_.decode_frozen(tape, params_, tape.constant(z.transpose()), tape.constant(input)).value();
  const Eigen::Index classes = spec().out_channels;
  const Matrix probs = patchnet::grouped_softmax(logits, classes);
  Decoded out{patchnet::to_voxel_major(probs, codec_.layout(), classes),
              patchnet::assemble_argmax(probs, codec_.layout(), classes, voxel_size)};
  return out;
}

LabelGrid AutoencoderModel::decode_labels(const Vector& z, double voxel_size) const {
  return decode(z, voxel_size).labels;
}

void AutoencoderModel::fit_standardization(const Matrix& latents) {
  if (latents.rows() < 1 || latents.cols() != static_cast<Eigen::Index>(latent_dim())) {
    throw DimensionError("standardization needs latents with " + std::to_string(latent_dim()) + " columns");
  }
  mean_ = latents.colwise().mean().transpose();
  std_ = Vector::Ones(mean_.size());
  if (latents.rows() > 1) {
    const Matrix centered = latents.rowwise() - mean_.transpose();
    for (Eigen::Index j = 0; j < mean_.size(); ++j) {
      const double sd = std::sqrt(centered.col(j).squaredNorm() / static_cast<double>(latents.rows() - 1));
      std_(j) = sd > 1e-12 ? sd : 1.0;
    }
  }
}

Vector AutoencoderModel::standardize(const Vector& z) const { return (z - mean_).cwiseQuotient(std_); }

Vector AutoencoderModel::destandardize(const Vector& s) const { return s.cwiseProduct(std_) + mean_; }

Matrix AutoencoderModel::standardize_rows(const Matrix& z) const {
  return (z.rowwise() - mean_.transpose()).array().rowwise() / std_.transpose().array();
}

Checkpoint AutoencoderModel::to_checkpoint() const {
  Checkpoint c;
  c.set_kind(kCheckpointKind, kModelVersion);
  write_spec(c, kPrefix, spec());
  c.add(kPrefix + ".latent_mean", tensor_of(mean_));
  c.add(kPrefix + ".latent_std", tensor_of(std_));
  c.add_params(params_);
  return c;
}

AutoencoderModel AutoencoderModel::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.require_kind(kCheckpointKind, kModelVersion);
  AutoencoderModel m = zeros(read_spec(ckpt, kPrefix));
  ckpt.load_params(m.params_);
  m.mean_ = ckpt.at(kPrefix + ".latent_mean").to_vector();
  m.std_ = ckpt.at(kPrefix + ".latent_std").to_vector();
  if (m.mean_.size() != static_cast<Eigen::Index>(m.latent_dim()) || m.std_.size() != m.mean_.size()) {
    throw FormatError("latent standardization does not match the latent dimension");
  }
  return m;
}

double cosine_schedule(double start, double end, std::uint64_t step, std::uint64_t total) {
  if (total <= 1) return start;
  const double u = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * u));
}

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

double reconstruction_loss(const AutoencoderModel& model, std::span<const LabelGrid> grids) {
  if (grids.empty()) throw InvalidArgument("reconstruction loss of an empty set");
  const auto& codec = model.codec();
  double total = 0.0;
  for (const auto& g : grids) {
    const LabelGrid* ptr = &g;
    diffnet::Tape tape;
    auto z = codec.encode_frozen(tape, model.params(), tape.constant(codec.encoder_input({&ptr, 1})));
    auto logits = codec.decode_frozen(tape, model.params(), z, tape.constant(codec.decoder_input({}, 1)));
    const auto targets = patchnet::patch_targets(g, codec.layout());
    total += diffnet::grouped_cross_entropy(logits, targets, model.spec().out_channels).scalar();
  }
  return total / static_cast<double>(grids.size());
}

LabelGrid shifted(const LabelGrid& grid, int dx, int dy, int dz) {
  const Dims& d = grid.dims();
  LabelGrid out(d, grid.voxel_size());
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i)
        if (grid.contains(i - dx, j - dy, k - dz)) out.at(i, j, k) = grid.at(i - dx, j - dy, k - dz);
  return out;
}

TrainResult train_autoencoder(std::span<const LabelGrid> data, const patchnet::CodecSpec& spec,
                              const TrainConfig& config) {
  if (data.empty()) throw InvalidArgument("train_autoencoder: empty dataset");
  for (const auto& g : data) {
    if (g.dims() != spec.dims) {
      throw DimensionError("training grid dims " + g.dims().str() + " differ from model dims " + spec.dims.str());
    }
  }
  if (config.epochs < 0 || config.batch_size < 1) throw InvalidArgument("epochs >= 0 and batch size >= 1 required");
  if (config.max_shift < 0 || config.weight_decay < 0.0) {
    throw InvalidArgument("max shift and weight decay must be non-negative");
  }
  TrainResult result{AutoencoderModel(spec, config.seed), {}};
  AutoencoderModel& model = result.model;
  const auto& codec = model.codec();
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  diffnet::AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  adam_config.weight_decay = config.weight_decay;
  diffnet::Adam adam(adam_config);
  const std::size_t batches = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = static_cast<std::uint64_t>(config.epochs) * batches;
  const Eigen::Index patches = codec.layout().patches();
  const Eigen::Index per_grid =
      std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::lround(config.patch_fraction * static_cast<double>(patches))), 1, patches);
  const Matrix positions = codec.decoder_input({}, 1);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = permutation(data.size(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(data.size(), lo + config.batch_size);
      const auto count = static_cast<Eigen::Index>(hi - lo);
      std::vector<const LabelGrid*> batch;
      std::vector<LabelGrid> moved;
      moved.reserve(hi - lo);
      std::vector<std::uint8_t> targets;
      Matrix dec_in(count * per_grid, positions.cols());
      for (std::size_t i = lo; i < hi; ++i) {
        if (config.max_shift > 0) {
          std::uniform_int_distribution<int> offset(-config.max_shift, config.max_shift);
          const int dx = offset(rng), dy = offset(rng), dz = offset(rng);
          moved.push_back(shifted(data[order[i]], dx, dy, dz));
        }
        batch.push_back(config.max_shift > 0 ? &moved.back() : &data[order[i]]);
        const auto selected = patchnet::sample_patches(patches, per_grid, rng);
        patchnet::append_patch_targets(*batch.back(), codec.layout(), selected, targets);
        const auto g = static_cast<Eigen::Index>(i - lo);
        for (Eigen::Index r = 0; r < per_grid; ++r) dec_in.row(g * per_grid + r) = positions.row(selected[static_cast<std::size_t>(r)]);
      }
      diffnet::Tape tape;
      model.params().zero_grad();
      auto z = codec.encode(tape, model.params(), tape.constant(codec.encoder_input(batch)));
      auto logits = codec.decode(tape, model.params(), z, tape.constant(std::move(dec_in)));
      auto loss = diffnet::grouped_cross_entropy(logits, targets, spec.out_channels);
      tape.backward(loss);
      adam.set_learning_rate(
          cosine_schedule(config.learning_rate, config.final_learning_rate, adam.step_count(), total_steps));
      adam.step(model.params());
      loss_sum += loss.scalar() * static_cast<double>(batch.size());
    }
    const double mean_loss = loss_sum / static_cast<double>(data.size());
    result.epoch_losses.push_back(mean_loss);
    if (config.on_epoch) config.on_epoch(epoch + 1, mean_loss);
  }
  model.fit_standardization(model.encode_batch(data));
  return result;
}

}  // namespace flow4d::autoenc
