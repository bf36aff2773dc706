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

namespace flow4d::fm {

using diffnet::Matrix;
using diffnet::Var;
using diffnet::Vector;

enum class SamplerKind { uniform, beta };

struct TimeSampler {
  SamplerKind kind = SamplerKind::uniform;
  double a = 0.1;
  double b = 2.0;

  static TimeSampler uniform() { return {}; }
  static TimeSampler beta(double a, double b) { return {SamplerKind::beta, a, b}; }
  void validate() const;
};

const char* sampler_name(SamplerKind k);
SamplerKind parse_sampler(const std::string& name);

double sample_beta(double a, double b, std::mt19937_64& rng);
double sample_time(const TimeSampler& sampler, std::mt19937_64& rng);

struct PathSample {
  double t = 0.0;
  Vector z0, z1, zt, target;
};

PathSample make_path_sample(const Vector& z0, const Vector& z1, double t);

/// Sinusoidal features of t: [sin(w_k t), cos(w_k t)] with w_k geometric in [1, 32].
Matrix time_embedding(std::span<const double> t, std::size_t size);

struct FlowSpec {
  std::size_t dim = 2;
  std::vector<std::size_t> hidden{128, 128, 128};
  std::size_t time_embed = 16;
  std::size_t extra_cond = 0;  // additional conditioning features after the time embedding
  diffnet::Activation activation = diffnet::Activation::silu;
  int steps = 100;

  void validate() const;
};

/// Velocity network v(z_t; t [, c]): z_t is the MLP input, the time embedding
/// (and optional extra conditioning) drives the feature-wise modulation.
class FlowNet {
 public:
  FlowNet() = default;
  FlowNet(FlowSpec spec, std::string prefix);

  const FlowSpec& spec() const { return spec_; }
  const diffnet::ModulatedMlp& mlp() const { return mlp_; }
  void init(diffnet::ParamStore& store, std::mt19937_64& rng) const { mlp_.init(store, rng); }

  Matrix conditioning(std::span<const double> t, const Matrix* extra) const;
  Var velocity(diffnet::Tape& tape, diffnet::ParamStore& store, Var zt, std::span<const double> t,
               const Matrix* extra = nullptr) const;
  Matrix velocity(const diffnet::ParamStore& store, const Matrix& zt, double t, const Matrix* extra = nullptr) const;

 private:
  FlowSpec spec_;
  diffnet::ModulatedMlp mlp_;
};

/// Rows are independent states; returns dz/dt at time t.
using VelocityField = std::function<Matrix(const Matrix& z, double t)>;

/// z <- z + (1/T) v(z, i/T) for i = 0..T-1. Throws NonFiniteError naming the step.
Matrix integrate_euler(const VelocityField& field, const Matrix& z0, int steps);
Vector integrate_euler(const VelocityField& field, const Vector& z0, int steps);

/// Mean over rows of ||v(z_t) - target||^2.
Var fm_loss(diffnet::Tape& tape, const FlowNet& net, diffnet::ParamStore& store, Var zt, Var target,
            std::span<const double> t, const Matrix* extra = nullptr);

inline constexpr const char* kCheckpointKind = "lrf";

class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(FlowSpec spec, std::uint64_t seed);
  static FlowModel zeros(FlowSpec spec);

  const FlowSpec& spec() const { return net_.spec(); }
  const FlowNet& net() const { return net_; }
  diffnet::ParamStore& params() { return params_; }
  const diffnet::ParamStore& params() const { return params_; }
  const TimeSampler& sampler() const { return sampler_; }
  void set_sampler(const TimeSampler& s) { sampler_ = s; }

  Matrix velocity(const Matrix& z, double t) const { return net_.velocity(params_, z, t); }
  VelocityField field() const;
  Matrix integrate(const Matrix& z0, int steps) const { return integrate_euler(field(), z0, steps); }

  Checkpoint to_checkpoint() const;
  static FlowModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static FlowModel load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

 private:
  FlowNet net_;
  diffnet::ParamStore params_;
  TimeSampler sampler_;
};

/// Scalar loss over explicit path samples; gradients accumulate into the
/// model's parameters.
double fm_loss(FlowModel& model, std::span<const PathSample> batch);

struct FlowTrainConfig {
  int epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-4;
  std::uint64_t seed = 0;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct FlowTrainResult {
  FlowModel model;
  std::vector<double> epoch_losses;
};

/// Rectified flow from N(0, I) to the rows of `latents`. One epoch visits
/// every latent once.
FlowTrainResult train_lrf(const Matrix& latents, const TimeSampler& sampler, const FlowSpec& spec,
                          const FlowTrainConfig& config);

/// Standard-normal starting points; row i is drawn from its own stream.
Matrix noise_rows(std::size_t n, std::size_t dim, std::uint64_t seed);
/// Generated latents in the flow's (standardized) space.
Matrix sample_lrf(const FlowModel& model, std::size_t n, int steps, std::uint64_t seed);
std::vector<LabelGrid> generate_lrf(const FlowModel& model, const autoenc::AutoencoderModel& ae, std::size_t n,
                                    int steps, std::uint64_t seed, int threads = 1);

/// Derived seed for stream `index` of a base seed.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index);

void write_flow_spec(Checkpoint& ckpt, const std::string& prefix, const FlowSpec& spec);
FlowSpec read_flow_spec(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace flow4d::fm
