// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flow4d/autoenc.hpp"
#include "flow4d/checkpoint.hpp"
#include "flow4d/diffnet.hpp"
#include "flow4d/fm.hpp"
#include "flow4d/grid.hpp"

namespace flow4d::cardiacflow {

using diffnet::Matrix;
using diffnet::Vector;

/// Circular frame distance |mod(m - tau + M/2, M) - M/2| with a non-negative mod.
double pgk_distance(long long m, long long tau, long long frames);

struct PgkEncoding {
  int frames = 0;
  double sigma = 0.0;
  Vector values;  // values(m - 1) for m = 1..M
};

PgkEncoding pgk_encode(long long tau, int frames, double sigma);

enum class FrameEncoding { pgk, scalar };
enum class InitValue { learned, noise };

const char* encoding_name(FrameEncoding e);
FrameEncoding parse_encoding(const std::string& name);
const char* init_name(InitValue v);
InitValue parse_init(const std::string& name);

struct CardiacFlowSpec {
  int frames = 20;
  double sigma = 1.5;
  std::size_t embed_dim = 16;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> fusion_hidden{64, 64};
  std::vector<std::size_t> flow_hidden{256, 256, 256};
  std::size_t time_embed = 16;
  FrameEncoding encoding = FrameEncoding::pgk;
  InitValue init = InitValue::learned;
  fm::TimeSampler sampler = fm::TimeSampler::beta(0.1, 2.0);
  bool train_embeddings = true;
  bool flow_frame_conditioning = false;  // also feed the frame encoding to v_t
  diffnet::Activation activation = diffnet::Activation::silu;

  std::size_t encoding_dim() const { return encoding == FrameEncoding::pgk ? static_cast<std::size_t>(frames) : 1; }
  void validate() const;
};

struct GaussianPrior {
  Vector mean;
  Matrix cov;
};

/// Mean and unbiased covariance of the rows plus gamma * I.
GaussianPrior embedding_prior(const Matrix& embeddings, double gamma = 1e-6);
/// mean + V sqrt(max(L, 0)) n with cov = V L V^T and n ~ N(0, I).
Vector sample_gaussian(const GaussianPrior& prior, std::mt19937_64& rng);

inline constexpr const char* kCheckpointKind = "cardiacflow";

class CardiacFlowModel {
 public:
  CardiacFlowModel() = default;
  CardiacFlowModel(CardiacFlowSpec spec, std::size_t subjects, std::uint64_t seed);
  static CardiacFlowModel zeros(CardiacFlowSpec spec, std::size_t subjects);

  const CardiacFlowSpec& spec() const { return spec_; }
  std::size_t subjects() const { return subjects_; }
  diffnet::ParamStore& params() { return params_; }
  const diffnet::ParamStore& params() const { return params_; }
  const fm::FlowNet& flow() const { return flow_; }
  const diffnet::ModulatedMlp& fusion() const { return fusion_; }

  Vector frame_encoding(long long tau) const;
  Matrix frame_encodings(std::span<const long long> taus) const;
  Matrix embeddings() const;

  /// z_{0,tau} = f(eps, encoding(tau)).
  Vector initial_value(const Vector& eps, long long tau) const;
  Matrix initial_values(const Vector& eps, std::span<const long long> taus) const;
  diffnet::Var initial_values(diffnet::Tape& tape, diffnet::Var eps_rows, std::span<const long long> taus);

  /// Velocity at time t for rows z (frame encodings used only with flow frame conditioning).
  Matrix velocity(const Matrix& z, double t, std::span<const long long> taus) const;
  Matrix integrate(const Matrix& z0, int steps, std::span<const long long> taus) const;

  void refresh_prior();
  const GaussianPrior& prior() const { return prior_; }
  bool has_prior() const { return prior_.mean.size() > 0; }
  Vector sample_embedding(std::mt19937_64& rng) const;

  /// Latents (flow space) for frames taus given one embedding draw.
  Matrix latents_for(const Vector& eps, std::span<const long long> taus, int steps) const;
  /// One sequence: eps drawn once from the prior, frames 1..M.
  Matrix generate_latents(std::uint64_t seed, int steps) const;
  ShapeSequence generate_sequence(const autoenc::AutoencoderModel& ae, std::uint64_t seed, int steps = 1) const;

  Checkpoint to_checkpoint() const;
  static CardiacFlowModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static CardiacFlowModel load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

 private:
  void build();

  CardiacFlowSpec spec_;
  std::size_t subjects_ = 0;
  fm::FlowNet flow_;
  diffnet::ModulatedMlp fusion_;
  diffnet::ParamStore params_;
  GaussianPrior prior_;
};

struct CardiacTrainConfig {
  int epochs = 400;
  std::size_t batch_size = 32;
  std::size_t iterations_per_epoch = 0;  // 0: subjects * frames / batch_size
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-5;
  std::uint64_t seed = 0;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct CardiacTrainResult {
  CardiacFlowModel model;
  std::vector<double> epoch_losses;
};

/// `latents[s]` holds subject s's M frame latents (flow space) as rows.
CardiacTrainResult train_cardiacflow(std::span<const Matrix> latents, const CardiacFlowSpec& spec,
                                     const CardiacTrainConfig& config);

/// Standardized autoencoder latents of every frame of every sequence.
std::vector<Matrix> encode_sequences(const autoenc::AutoencoderModel& ae, std::span<const ShapeSequence> seqs,
                                     int threads = 1);

}  // namespace flow4d::cardiacflow
