// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/cardiacflow.hpp"

#include <cmath>
#include <numbers>

#include "flow4d/error.hpp"
#include "flow4d/jacobi.hpp"
#include "flow4d/parallel.hpp"

namespace flow4d::cardiacflow {

namespace {

constexpr double kModelVersion = 1.0;
const std::string kPrefix = "cf";

Tensor sizes_tensor(const std::vector<std::size_t>& v) {
  std::vector<double> d;
  for (auto x : v) d.push_back(static_cast<double>(x));
  return Tensor::vector(std::move(d));
}

std::vector<std::size_t> tensor_sizes(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.values) out.push_back(static_cast<std::size_t>(v));
  return out;
}

}  // namespace

double pgk_distance(long long m, long long tau, long long frames) {
  if (frames < 2) throw InvalidArgument("PGK distance needs M >= 2, got " + std::to_string(frames));
  // 2 * d keeps odd M exact in integers: d = |mod(2(m - tau) + M, 2M) - M| / 2.
  const long long two_m = 2 * frames;
  long long r = (2 * (m - tau) + frames) % two_m;
  if (r < 0) r += two_m;
  return static_cast<double>(std::llabs(r - frames)) / 2.0;
}

PgkEncoding pgk_encode(long long tau, int frames, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("PGK width sigma must be > 0");
  if (frames < 2) throw InvalidArgument("PGK encoding needs M >= 2");
  PgkEncoding e{frames, sigma, Vector(frames)};
  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sigma);
  for (int m = 1; m <= frames; ++m) {
    const double d = pgk_distance(m, tau, frames);
    e.values(m - 1) = norm * std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return e;
}

const char* encoding_name(FrameEncoding e) { return e == FrameEncoding::pgk ? "pgk" : "scalar"; }

FrameEncoding parse_encoding(const std::string& name) {
  if (name == "pgk") return FrameEncoding::pgk;
  if (name == "scalar") return FrameEncoding::scalar;
  throw InvalidArgument("unknown frame encoding '" + name + "' (expected pgk or scalar)");
}

const char* init_name(InitValue v) { return v == InitValue::learned ? "learned" : "noise"; }

InitValue parse_init(const std::string& name) {
  if (name == "learned") return InitValue::learned;
  if (name == "noise") return InitValue::noise;
  throw InvalidArgument("unknown initial value '" + name + "' (expected learned or noise)");
}

void CardiacFlowSpec::validate() const {
  if (frames < 2) throw InvalidArgument("cardiacflow needs M >= 2 frames");
  if (!(sigma > 0.0)) throw InvalidArgument("PGK width sigma must be > 0");
  if (embed_dim < 1 || latent_dim < 1 || fusion_hidden.empty() || flow_hidden.empty()) {
    throw InvalidArgument("cardiacflow dimensions must be positive");
  }
  sampler.validate();
}

GaussianPrior embedding_prior(const Matrix& e, double gamma) {
  if (e.rows() < 2) throw InvalidArgument("embedding prior needs at least 2 embeddings, got " + std::to_string(e.rows()));
  GaussianPrior p;
  p.mean = e.colwise().mean().transpose();
  const Matrix c = e.rowwise() - p.mean.transpose();
  p.cov = c.transpose() * c / static_cast<double>(e.rows() - 1);
  p.cov = 0.5 * (p.cov + p.cov.transpose());
  p.cov.diagonal().array() += gamma;
  return p;
}

Vector sample_gaussian(const GaussianPrior& prior, std::mt19937_64& rng) {
  const SymmetricEigen e = jacobi_eigen(prior.cov);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector n(prior.mean.size());
  for (Eigen::Index i = 0; i < n.size(); ++i) n(i) = normal(rng);
  return prior.mean + e.vectors * (e.values.cwiseMax(0.0).cwiseSqrt().cwiseProduct(n));
}

// ----------------------------------------------------------------- model

void CardiacFlowModel::build() {
  spec_.validate();
  fm::FlowSpec fs;
  fs.dim = spec_.latent_dim;
  fs.hidden = spec_.flow_hidden;
  fs.time_embed = spec_.time_embed;
  fs.extra_cond = spec_.flow_frame_conditioning ? spec_.encoding_dim() : 0;
  fs.activation = spec_.activation;
  fs.steps = 1;
  flow_ = fm::FlowNet(fs, kPrefix + ".flow");
  diffnet::ModulatedMlpSpec ms;
  ms.input_dim = spec_.embed_dim + spec_.encoding_dim();
  ms.hidden_dims = spec_.fusion_hidden;
  ms.output_dim = spec_.latent_dim;
  ms.conditioning_dim = 1;
  ms.activation = spec_.activation;
  fusion_ = diffnet::ModulatedMlp(ms, kPrefix + ".fusion");
}

CardiacFlowModel::CardiacFlowModel(CardiacFlowSpec spec, std::size_t subjects, std::uint64_t seed)
    : spec_(std::move(spec)), subjects_(subjects) {
  build();
  std::mt19937_64 rng(seed);
  flow_.init(params_, rng);
  fusion_.init(params_, rng);
  params_.set_trainable(fusion_.prefix() + ".ms", false);
  params_.set_trainable(fusion_.prefix() + ".mt", false);
  auto& emb = params_.add(kPrefix + ".embed", std::max<std::size_t>(subjects_, 1), spec_.embed_dim);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (Eigen::Index j = 0; j < emb.value.cols(); ++j)
    for (Eigen::Index i = 0; i < emb.value.rows(); ++i) emb.value(i, j) = normal(rng);
  if (!spec_.train_embeddings || spec_.init == InitValue::noise) emb.trainable = false;
}

CardiacFlowModel CardiacFlowModel::zeros(CardiacFlowSpec spec, std::size_t subjects) {
  CardiacFlowModel m(std::move(spec), subjects, 0);
  for (auto& [_, p] : m.params_) p.value.setZero();
  return m;
}

Vector CardiacFlowModel::frame_encoding(long long tau) const {
  if (tau < 1) throw InvalidArgument("frame index must be >= 1, got " + std::to_string(tau));
  if (spec_.encoding == FrameEncoding::pgk) return pgk_encode(tau, spec_.frames, spec_.sigma).values;
  Vector v(1);
  // Reduce to 1..M first so tau and tau + M share a code.
  const long long r = (tau - 1) % spec_.frames + 1;
  v(0) = static_cast<double>(r) / static_cast<double>(spec_.frames);
  return v;
}

Matrix CardiacFlowModel::frame_encodings(std::span<const long long> taus) const {
  Matrix out(static_cast<Eigen::Index>(taus.size()), static_cast<Eigen::Index>(spec_.encoding_dim()));
  for (std::size_t i = 0; i < taus.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = frame_encoding(taus[i]).transpose();
  return out;
}

Matrix CardiacFlowModel::embeddings() const { return params_.at(kPrefix + ".embed").value; }

Matrix CardiacFlowModel::initial_values(const Vector& eps, std::span<const long long> taus) const {
  if (eps.size() != static_cast<Eigen::Index>(spec_.embed_dim)) {
    throw DimensionError("embedding has length " + std::to_string(eps.size()) + ", model expects " +
                         std::to_string(spec_.embed_dim));
  }
  if (!eps.allFinite()) throw NonFiniteError("embedding contains non-finite values");
  const auto n = static_cast<Eigen::Index>(taus.size());
  Matrix input(n, static_cast<Eigen::Index>(spec_.embed_dim + spec_.encoding_dim()));
  input.leftCols(eps.size()) = eps.transpose().replicate(n, 1);
  input.rightCols(static_cast<Eigen::Index>(spec_.encoding_dim())) = frame_encodings(taus);
  return fusion_.infer(params_, input, Matrix::Zero(n, 1));
}

Vector CardiacFlowModel::initial_value(const Vector& eps, long long tau) const {
  const long long t[1] = {tau};
  return initial_values(eps, t).row(0).transpose();
}

diffnet::Var CardiacFlowModel::initial_values(diffnet::Tape& tape, diffnet::Var eps_rows,
                                              std::span<const long long> taus) {
  auto input = diffnet::concat_cols(eps_rows, tape.constant(frame_encodings(taus)));
  return fusion_.forward(tape, params_, input, tape.constant(Matrix::Zero(input.rows(), 1)));
}

Matrix CardiacFlowModel::velocity(const Matrix& z, double t, std::span<const long long> taus) const {
  if (!spec_.flow_frame_conditioning) return flow_.velocity(params_, z, t);
  const Matrix enc = frame_encodings(taus);
  return flow_.velocity(params_, z, t, &enc);
}

Matrix CardiacFlowModel::integrate(const Matrix& z0, int steps, std::span<const long long> taus) const {
  return fm::integrate_euler([&](const Matrix& z, double t) { return velocity(z, t, taus); }, z0, steps);
}

void CardiacFlowModel::refresh_prior() {
  if (spec_.init == InitValue::noise) {
    prior_.mean = Vector::Zero(static_cast<Eigen::Index>(spec_.embed_dim));
    prior_.cov = Matrix::Identity(prior_.mean.size(), prior_.mean.size());
    return;
  }
  const Matrix e = embeddings();
  if (e.rows() < 2) {
    prior_.mean = e.row(0).transpose();
    prior_.cov = 1e-6 * Matrix::Identity(e.cols(), e.cols());
    return;
  }
  prior_ = embedding_prior(e);
}

Vector CardiacFlowModel::sample_embedding(std::mt19937_64& rng) const {
  if (!has_prior()) throw StateError("cardiacflow model has no embedding prior; train it first");
  return sample_gaussian(prior_, rng);
}

Matrix CardiacFlowModel::latents_for(const Vector& eps, std::span<const long long> taus, int steps) const {
  return integrate(initial_values(eps, taus), steps, taus);
}

Matrix CardiacFlowModel::generate_latents(std::uint64_t seed, int steps) const {
  std::mt19937_64 rng(seed);
  const Vector eps = sample_embedding(rng);
  std::vector<long long> taus;
  for (int tau = 1; tau <= spec_.frames; ++tau) taus.push_back(tau);
  return latents_for(eps, taus, steps);
}

ShapeSequence CardiacFlowModel::generate_sequence(const autoenc::AutoencoderModel& ae, std::uint64_t seed,
                                                  int steps) const {
  if (ae.latent_dim() != spec_.latent_dim) {
    throw DimensionError("autoencoder latent dim " + std::to_string(ae.latent_dim()) + " differs from model " +
                         std::to_string(spec_.latent_dim));
  }
  const Matrix z = generate_latents(seed, steps);
  ShapeSequence seq;
  for (Eigen::Index r = 0; r < z.rows(); ++r) seq.frames.push_back(ae.decode_labels(ae.destandardize(z.row(r).transpose())));
  return seq;
}

Checkpoint CardiacFlowModel::to_checkpoint() const {
  Checkpoint c;
  c.set_kind(kCheckpointKind, kModelVersion);
  const auto& s = spec_;
  c.add(kPrefix + ".spec.shape",
        Tensor::vector({double(s.frames), s.sigma, double(s.embed_dim), double(s.latent_dim), double(s.time_embed),
                        s.encoding == FrameEncoding::pgk ? 0.0 : 1.0, s.init == InitValue::learned ? 0.0 : 1.0,
                        s.sampler.kind == fm::SamplerKind::beta ? 1.0 : 0.0, s.sampler.a, s.sampler.b,
                        s.train_embeddings ? 1.0 : 0.0, s.flow_frame_conditioning ? 1.0 : 0.0,
                        double(static_cast<int>(s.activation)), double(subjects_)}));
  c.add(kPrefix + ".spec.fusion_hidden", sizes_tensor(s.fusion_hidden));
  c.add(kPrefix + ".spec.flow_hidden", sizes_tensor(s.flow_hidden));
  if (has_prior()) {
    c.add(kPrefix + ".prior.mean", Tensor::from_matrix(prior_.mean.transpose()));
    c.add(kPrefix + ".prior.cov", Tensor::from_matrix(prior_.cov));
  }
  c.add_params(params_);
  return c;
}

CardiacFlowModel CardiacFlowModel::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.require_kind(kCheckpointKind, kModelVersion);
  const Vector v = ckpt.at(kPrefix + ".spec.shape").to_vector();
  if (v.size() != 14) throw FormatError("malformed cardiacflow spec in checkpoint");
  CardiacFlowSpec s;
  s.frames = static_cast<int>(v(0));
  s.sigma = v(1);
  s.embed_dim = static_cast<std::size_t>(v(2));
  s.latent_dim = static_cast<std::size_t>(v(3));
  s.time_embed = static_cast<std::size_t>(v(4));
  s.encoding = v(5) == 0.0 ? FrameEncoding::pgk : FrameEncoding::scalar;
  s.init = v(6) == 0.0 ? InitValue::learned : InitValue::noise;
  s.sampler = {v(7) != 0.0 ? fm::SamplerKind::beta : fm::SamplerKind::uniform, v(8), v(9)};
  s.train_embeddings = v(10) != 0.0;
  s.flow_frame_conditioning = v(11) != 0.0;
  s.activation = static_cast<diffnet::Activation>(static_cast<int>(v(12)));
  s.fusion_hidden = tensor_sizes(ckpt.at(kPrefix + ".spec.fusion_hidden"));
  s.flow_hidden = tensor_sizes(ckpt.at(kPrefix + ".spec.flow_hidden"));
  CardiacFlowModel m = zeros(s, static_cast<std::size_t>(v(13)));
  ckpt.load_params(m.params_);
  if (ckpt.contains(kPrefix + ".prior.mean")) {
    m.prior_.mean = ckpt.at(kPrefix + ".prior.mean").to_matrix().row(0).transpose();
    m.prior_.cov = ckpt.at(kPrefix + ".prior.cov").to_matrix();
  }
  return m;
}

// --------------------------------------------------------------- training

CardiacTrainResult train_cardiacflow(std::span<const Matrix> latents, const CardiacFlowSpec& spec,
                                     const CardiacTrainConfig& config) {
  if (latents.empty()) throw InvalidArgument("train_cardiacflow: empty dataset");
  for (std::size_t s = 0; s < latents.size(); ++s) {
    if (latents[s].rows() != spec.frames) {
      throw DimensionError("sequence " + std::to_string(s) + " has " + std::to_string(latents[s].rows()) +
                           " frames, model expects M = " + std::to_string(spec.frames));
    }
    if (latents[s].cols() != static_cast<Eigen::Index>(spec.latent_dim)) {
      throw DimensionError("sequence " + std::to_string(s) + " latents have " + std::to_string(latents[s].cols()) +
                           " columns, model expects " + std::to_string(spec.latent_dim));
    }
  }
  if (config.batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  CardiacTrainResult result{CardiacFlowModel(spec, latents.size(), config.seed), {}};
  CardiacFlowModel& model = result.model;
  const std::size_t iters = config.iterations_per_epoch > 0
                                ? config.iterations_per_epoch
                                : std::max<std::size_t>(1, latents.size() * static_cast<std::size_t>(spec.frames) /
                                                               config.batch_size);
  const std::uint64_t total = static_cast<std::uint64_t>(config.epochs) * iters;
  std::mt19937_64 rng(fm::stream_seed(config.seed, 0xCF));
  std::uniform_int_distribution<std::size_t> pick_subject(0, latents.size() - 1);
  std::uniform_int_distribution<long long> pick_frame(1, spec.frames);
  std::normal_distribution<double> normal(0.0, 1.0);
  diffnet::Adam adam({config.learning_rate});
  const auto b = static_cast<Eigen::Index>(config.batch_size);
  const auto d = static_cast<Eigen::Index>(spec.latent_dim);
  auto& embed = model.params().at(kPrefix + ".embed");

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<Eigen::Index> subjects(static_cast<std::size_t>(b));
      std::vector<long long> taus(static_cast<std::size_t>(b));
      std::vector<double> t(static_cast<std::size_t>(b));
      Matrix z1(b, d);
      for (Eigen::Index r = 0; r < b; ++r) {
        const auto i = static_cast<std::size_t>(r);
        subjects[i] = static_cast<Eigen::Index>(pick_subject(rng));
        taus[i] = pick_frame(rng);
        t[i] = fm::sample_time(spec.sampler, rng);
        z1.row(r) = latents[static_cast<std::size_t>(subjects[i])].row(static_cast<Eigen::Index>(taus[i] - 1));
      }
      diffnet::Tape tape;
      model.params().zero_grad();
      diffnet::Var eps;
      if (spec.init == InitValue::learned) {
        eps = diffnet::gather_rows(tape.param(embed), subjects);
      } else {
        Matrix noise(b, static_cast<Eigen::Index>(spec.embed_dim));
        for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = normal(rng);
        eps = tape.constant(std::move(noise));
      }
      diffnet::Var z0 = model.initial_values(tape, eps, taus);
      Vector one_minus_t(b), tv(b);
      for (Eigen::Index r = 0; r < b; ++r) {
        tv(r) = t[static_cast<std::size_t>(r)];
        one_minus_t(r) = 1.0 - tv(r);
      }
      diffnet::Var z1v = tape.constant(z1);
      diffnet::Var zt = diffnet::add(diffnet::scale_rows(z0, one_minus_t), tape.constant(tv.asDiagonal() * z1));
      diffnet::Var target = diffnet::sub(z1v, z0);
      Matrix enc;
      if (spec.flow_frame_conditioning) enc = model.frame_encodings(taus);
      diffnet::Var loss = fm::fm_loss(tape, model.flow(), model.params(), zt, target, t,
                                      spec.flow_frame_conditioning ? &enc : nullptr);
      tape.backward(loss);
      adam.set_learning_rate(
          autoenc::cosine_schedule(config.learning_rate, config.final_learning_rate, adam.step_count(), total));
      adam.step(model.params());
      loss_sum += loss.scalar();
    }
    const double mean = loss_sum / static_cast<double>(iters);
    result.epoch_losses.push_back(mean);
    if (config.on_epoch) config.on_epoch(epoch + 1, mean);
  }
  model.refresh_prior();
  return result;
}

std::vector<Matrix> encode_sequences(const autoenc::AutoencoderModel& ae, std::span<const ShapeSequence> seqs,
                                     int threads) {
  std::vector<Matrix> out(seqs.size());
  parallel_for(seqs.size(), threads, [&](std::size_t i) {
    out[i] = ae.standardize_rows(ae.encode_batch(seqs[i].frames));
  });
  return out;
}

}  // namespace flow4d::cardiacflow
